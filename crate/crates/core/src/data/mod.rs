//! Synthetic biased data, non-IID partitioning, balanced sampling and
//! embedding-file ingestion.

mod io;
mod partition;
mod synthetic;

pub use io::{format_embeddings, load_embeddings, parse_embeddings, write_embeddings, EmbeddingFile};
pub use partition::{balanced_test_sample, dirichlet_partition, split_holdout, Partition};
pub use synthetic::{generate_synthetic, SyntheticSpec};

pub use crate::encoder::{Image, SampleInput};

/// One example: input, binary label `y`, binary sensitive group `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub input: SampleInput,
    pub y: u8,
    pub g: u8,
}

impl LabeledSample {
    /// Flat values of the input (pixels or features).
    pub fn values(&self) -> &[f64] {
        match &self.input {
            SampleInput::Image(img) => &img.pixels,
            SampleInput::Features(v) => v,
        }
    }

    /// `(y, g)` cell index in `0..4`.
    pub fn cell(&self) -> usize {
        2 * self.y as usize + self.g as usize
    }
}

pub type Dataset = Vec<LabeledSample>;
