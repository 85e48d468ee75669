use crate::cdfp::CdfpOptions;
use crate::data::LabeledSample;
use crate::dsop::{self, DemographicSubspace, JointVars, TaskLossVariant};
use crate::encoder::{FrozenBackbone, PromptSet, PromptVars};
use crate::error::{Error, Result};
use crate::metrics::{confusion_by_group, GroupConfusion};
use crate::numerics::{Graph, Tensor, Var};

/// Samples with their encoder input tokens precomputed.
#[derive(Clone, Debug, Default)]
pub struct EncodedSet {
    pub tokens: Vec<Tensor>,
    pub y: Vec<u8>,
    pub g: Vec<u8>,
}

impl EncodedSet {
    pub fn new<'s>(
        backbone: &FrozenBackbone,
        samples: impl IntoIterator<Item = &'s LabeledSample>,
    ) -> Result<Self> {
        let mut out = Self::default();
        for s in samples {
            out.tokens.push(backbone.input_tokens(&s.input)?);
            out.y.push(s.y);
            out.g.push(s.g);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            tokens: idx.iter().map(|&i| self.tokens[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            g: idx.iter().map(|&i| self.g[i]).collect(),
        }
    }
}

/// Everything about the forward path that is fixed for a run.
#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: FrozenBackbone,
    /// `C × d` unit class-prompt embeddings; row `y` describes label `y`.
    pub classes: Tensor,
    /// Present when the demographic projection is enabled.
    pub subspace: Option<DemographicSubspace>,
    pub cdfp: CdfpOptions,
    pub temperature: f64,
}

/// Inference chunk size; bounds graph memory without affecting results.
const EVAL_CHUNK: usize = 64;

impl Model {
    /// Raw and (possibly) debiased unit embeddings of a batch.
    pub fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        vars: &PromptVars,
        tokens: &[&'a Tensor],
    ) -> Result<(Var, Var)> {
        let out = self.backbone.encode(g, tokens, vars, self.cdfp)?;
        let used = match &self.subspace {
            Some(sub) => {
                let basis = g.constant_ref(&sub.basis);
                dsop::debias_graph(g, out.z, basis)?
            }
            None => out.z,
        };
        Ok((out.z, used))
    }

    /// `C`-way class logits (scaled by `1/τ`) for a batch.
    pub fn logits<'a>(&'a self, g: &mut Graph<'a>, used: Var) -> Result<Var> {
        let c = g.constant_ref(&self.classes);
        let l = g.matmul_t(used, false, c, true)?;
        g.scale(l, 1.0 / self.temperature)
    }

    /// Predicted labels: the class prompt most similar to the embedding.
    pub fn predict(&self, prompts: &PromptSet, tokens: &[&Tensor]) -> Result<Vec<u8>> {
        let mut preds = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let vars = prompts.constants(&mut g);
            let (_, used) = self.forward(&mut g, &vars, chunk)?;
            let c = g.constant_ref(&self.classes);
            let sims = g.matmul_t(used, false, c, true)?;
            let sims = g.value(sims);
            for r in 0..sims.rows() {
                let row = sims.row_slice(r);
                let best = (0..row.len())
                    .fold(0, |b, k| if row[k] > row[b] { k } else { b });
                preds.push(best as u8);
            }
        }
        Ok(preds)
    }

    pub fn confusion(&self, prompts: &PromptSet, set: &EncodedSet) -> Result<GroupConfusion> {
        let refs: Vec<&Tensor> = set.tokens.iter().collect();
        let preds = self.predict(prompts, &refs)?;
        confusion_by_group(&preds, &set.y, &set.g)
    }

    /// Local objective on one batch.
    pub fn local_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        vars: &PromptVars,
        tokens: &[&'a Tensor],
        labels: &[u8],
        loss: &LocalLoss,
    ) -> Result<JointVars> {
        let z = self.backbone.encode(g, tokens, vars, self.cdfp)?.z;
        let targets = self.targets(labels)?;
        let t = g.constant(targets);
        let sub = self.subspace.as_ref().map(|s| {
            let b = g.constant_ref(&s.basis);
            let src = g.constant_ref(&s.source);
            (b, src)
        });
        dsop::joint_graph(
            g,
            z,
            t,
            sub,
            loss.mu,
            loss.lambda1,
            self.temperature,
            loss.variant,
        )
    }

    /// `B × d` class-prompt embedding for each label.
    pub fn targets(&self, labels: &[u8]) -> Result<Tensor> {
        let rows = labels
            .iter()
            .map(|&y| {
                if (y as usize) < self.classes.rows() {
                    Ok(self.classes.row_slice(y as usize).to_vec())
                } else {
                    Err(Error::invalid(format!("label {y} has no class prompt")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Hyperparameters of the client objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalLoss {
    pub mu: f64,
    pub lambda1: f64,
    pub variant: TaskLossVariant,
}
