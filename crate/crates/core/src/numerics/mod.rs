//! Dense `f64` tensors, tape-based reverse-mode autodiff, AdamW and checkpoints.

pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use graph::{attention, sigmoid, softplus, Graph, Var};
pub use optim::{AdamWConfig, OptimizerState};
pub use tensor::{stable_softmax, Tensor};

use crate::error::Result;

/// Attention on plain tensors: `softmax(Q Kᵀ / √head_dim) V`, where `mask`
/// is row-major over the `[queries, keys]` score matrix.
pub fn attention_tensors(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &[bool],
    head_dim: usize,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.leaf(q), g.leaf(k), g.leaf(v));
    let out = attention(&mut g, q, k, v, mask, head_dim)?;
    Ok(g.value(out).clone())
}
