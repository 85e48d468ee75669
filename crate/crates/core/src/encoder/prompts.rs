use rand::Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};

const PROMPT_INIT_STD: f64 = 0.02;

/// The trainable parameters: `L` prompt token blocks (`K × d`) and `L − 1`
/// gated-pooling queries (`1 × d`, one per layer `1..L`).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub tokens: Vec<Tensor>,
    pub queries: Vec<Tensor>,
    /// Name of the demographic category each token row stands for.
    pub categories: Vec<String>,
}

/// Graph handles for a registered [`PromptSet`].
#[derive(Clone, Debug)]
pub struct PromptVars {
    pub tokens: Vec<Var>,
    pub queries: Vec<Var>,
}

impl PromptSet {
    /// Tokens from `N(0, 0.02²)`, queries at zero. Missing category names are
    /// filled with `category_<i>`.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, categories: &[&str], rng: &mut R) -> Self {
        let (k, d) = (cfg.prompt_tokens, cfg.dim);
        let tokens = (0..cfg.layers)
            .map(|_| Tensor::randn(k, d, PROMPT_INIT_STD, rng))
            .collect();
        let queries = (1..cfg.layers).map(|_| Tensor::zeros(1, d)).collect();
        let categories = (0..k)
            .map(|i| {
                categories
                    .get(i)
                    .map_or_else(|| format!("category_{i}"), |s| s.to_string())
            })
            .collect();
        Self {
            tokens,
            queries,
            categories,
        }
    }

    pub fn prompt_tokens(&self) -> usize {
        self.tokens.first().map_or(0, Tensor::rows)
    }

    /// Flat parameter list: tokens by layer, then queries by layer.
    pub fn to_params(&self) -> Vec<Tensor> {
        self.tokens.iter().chain(&self.queries).cloned().collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.tokens.iter().chain(&self.queries)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tokens.iter_mut().chain(self.queries.iter_mut())
    }

    /// Replaces every parameter from a list in [`Self::to_params`] order.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let n = self.tokens.len() + self.queries.len();
        if params.len() != n {
            return Err(Error::shape(
                "set_params",
                format!("{} tensors for {n} parameters", params.len()),
            ));
        }
        for (dst, src) in self.params_mut().zip(params) {
            if dst.shape() != src.shape() {
                return Err(Error::shape(
                    "set_params",
                    format!("{:?} replacing {:?}", src.shape(), dst.shape()),
                ));
            }
            *dst = src;
        }
        Ok(())
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(Tensor::is_finite)
    }

    /// Registers every tensor as a trainable leaf.
    pub fn register<'a>(&'a self, g: &mut Graph<'a>) -> PromptVars {
        PromptVars {
            tokens: self.tokens.iter().map(|t| g.param_ref(t)).collect(),
            queries: self.queries.iter().map(|t| g.param_ref(t)).collect(),
        }
    }

    /// Registers every tensor as a frozen leaf (inference).
    /// Like [`register`](Self::register) but copies the tensors, so the graph
    /// does not borrow `self`.
    pub fn register_owned(&self, g: &mut Graph<'_>) -> PromptVars {
        PromptVars {
            tokens: self.tokens.iter().map(|t| g.param(t.clone())).collect(),
            queries: self.queries.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    pub fn constants<'a>(&'a self, g: &mut Graph<'a>) -> PromptVars {
        PromptVars {
            tokens: self.tokens.iter().map(|t| g.constant_ref(t)).collect(),
            queries: self.queries.iter().map(|t| g.constant_ref(t)).collect(),
        }
    }
}

impl PromptVars {
    pub fn prompt_tokens(&self, g: &Graph<'_>) -> usize {
        self.tokens.first().map_or(0, |&t| g.value(t).rows())
    }

    /// Gradients in [`PromptSet::to_params`] order; parameters the loss does
    /// not depend on get zeros.
    pub fn gradients(&self, grads: &Gradients, like: &PromptSet) -> Vec<Tensor> {
        self.tokens
            .iter()
            .chain(&self.queries)
            .zip(like.params())
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.tokens.iter().chain(&self.queries).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes_and_names() {
        let cfg = EncoderConfig::default();
        let p = PromptSet::init(&cfg, &["male"], &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.tokens.len(), 4);
        assert_eq!(p.queries.len(), 3);
        assert!(p.tokens.iter().all(|t| t.shape() == [2, 32]));
        assert!(p.queries.iter().all(|t| t.sum() == 0.0));
        assert_eq!(p.categories, vec!["male", "category_1"]);
        assert_eq!(p.numel(), 4 * 64 + 3 * 32);
    }

    #[test]
    fn set_params_round_trip() {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = PromptSet::init(&cfg, &[], &mut rng);
        let mut b = PromptSet::init(&cfg, &[], &mut rng);
        assert_ne!(a, b);
        b.set_params(a.to_params()).unwrap();
        assert_eq!(a, b);
        assert!(b.set_params(vec![]).is_err());
    }

    #[test]
    fn only_prompts_are_leaves() {
        let cfg = EncoderConfig::default();
        let p = PromptSet::init(&cfg, &[], &mut ChaCha8Rng::seed_from_u64(2));
        let mut g = Graph::new();
        let vars = p.register(&mut g);
        assert!(vars.all().all(|v| g.is_param(v)));
        let frozen = p.constants(&mut g);
        assert!(frozen.all().all(|v| !g.requires_grad(v)));
    }
}
