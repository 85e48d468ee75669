//! Dense 64-bit tensors, a reverse-mode tape, AdamW and a small top-k SVD.

mod adamw;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod svd;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{gelu, l2_normalize_rows, layernorm, matmul, matmul_t, softmax};
pub use svd::{svd_topk, TopK};
pub use tensor::Tensor;

/// Derives a child seed from a parent seed and a list of labels.
///
/// Used wherever a component needs its own independent random stream
/// (per round, per client, per sweep cell).
pub fn derive_seed(parent: u64, labels: &[&[u8]]) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    for l in labels {
        h.update((l.len() as u64).to_le_bytes());
        h.update(l);
    }
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}
