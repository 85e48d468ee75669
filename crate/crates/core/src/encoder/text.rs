use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{l2_normalize_rows, matmul, Tensor};

/// Deterministic stand-in for a text tower: whitespace tokens are mapped to
/// seeded pseudo-random vectors, mean pooled, projected by a frozen matrix
/// and normalised.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    dim: usize,
    seed: u64,
    projection: Tensor,
}

impl TextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e57_7e57_7e57_7e57);
        let projection = Tensor::randn(dim, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        Self {
            dim,
            seed,
            projection,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(token.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Unit embedding (`1 × d`) of one string.
    pub fn encode(&self, text: &str) -> Result<Tensor> {
        let lower = text.to_lowercase();
        let tokens: Vec<&str> = lower.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty string"));
        }
        let mut mean = vec![0.0; self.dim];
        for t in &tokens {
            for (m, v) in mean.iter_mut().zip(self.token_vector(t)) {
                *m += v;
            }
        }
        let n = tokens.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let t = matmul(&Tensor::row(mean), &self.projection)?;
        l2_normalize_rows(&t)
    }

    /// Stacks the embeddings of several strings into an `n × d` matrix.
    pub fn encode_all<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor> {
        let rows = texts
            .iter()
            .map(|s| self.encode(s.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Tensor::vstack(&rows.iter().collect::<Vec<_>>())
    }
}

/// Class and demographic prompt strings for one task/attribute pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplates {
    /// Class prompts, positive class first.
    pub classes: Vec<String>,
    /// One prompt per category of the sensitive attribute.
    pub demographics: Vec<String>,
    /// Category names, aligned with `demographics`.
    pub categories: Vec<String>,
}

impl PromptTemplates {
    /// Class prompts reordered so that row `y` describes label `y`
    /// (label 1 is the positive class).
    pub fn classes_by_label(&self) -> Vec<String> {
        let mut v = self.classes.clone();
        v.reverse();
        v
    }
}

pub fn build_prompt_templates(task: &str, attribute: &str) -> Result<PromptTemplates> {
    let classes = match task {
        "smiling" => vec![
            "a photo of a person who is smiling",
            "a photo of a person who is not smiling",
        ],
        "age" => vec!["a photo of a young person", "a photo of a older person"],
        _ => return Err(Error::invalid(format!("unknown task `{task}`"))),
    };
    let (demographics, categories) = match attribute {
        "gender" => (
            vec!["a photo of a man", "a photo of a woman"],
            vec!["man", "woman"],
        ),
        "age" => (
            vec!["a photo of a young person", "a photo of a older person"],
            vec!["young", "older"],
        ),
        _ => return Err(Error::invalid(format!("unknown attribute `{attribute}`"))),
    };
    let own = |v: Vec<&str>| v.into_iter().map(String::from).collect();
    Ok(PromptTemplates {
        classes: own(classes),
        demographics: own(demographics),
        categories: own(categories),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::kernels::dot;

    #[test]
    fn deterministic_unit_vectors() {
        let enc = TextEncoder::new(32, 0);
        let a = enc.encode("A photo of a man").unwrap();
        let b = TextEncoder::new(32, 0).encode("a photo  of a MAN").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() <= 1e-12);
        assert!(enc.encode("   ").is_err());
    }

    #[test]
    fn gender_templates_are_distinct() {
        let enc = TextEncoder::new(32, 0);
        let m = enc.encode("a photo of a man").unwrap();
        let w = enc.encode("a photo of a woman").unwrap();
        assert!(dot(m.data(), w.data()) < 1.0 - 1e-6);
    }

    #[test]
    fn templates() {
        let t = build_prompt_templates("smiling", "gender").unwrap();
        assert_eq!(
            t.classes,
            [
                "a photo of a person who is smiling",
                "a photo of a person who is not smiling"
            ]
        );
        assert_eq!(t.demographics, ["a photo of a man", "a photo of a woman"]);
        assert_eq!(t.classes_by_label()[1], "a photo of a person who is smiling");
        let a = build_prompt_templates("age", "gender").unwrap();
        assert_eq!(a.classes, ["a photo of a young person", "a photo of a older person"]);
        assert!(build_prompt_templates("hair", "gender").is_err());
        assert!(build_prompt_templates("smiling", "height").is_err());
    }
}
