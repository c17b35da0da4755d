//! Minimal dense-tensor core with tape-based reverse-mode differentiation.
//!
//! Everything the PACE model needs and nothing else: causal dilated
//! convolution, chomp, ReLU, inverted dropout, linear layers, layer
//! normalization, weight normalization, chunked multi-head attention, MSE,
//! and Adam. Storage is `f32`; reductions that feed statistics or losses
//! accumulate in `f64`.
//!
//! ```
//! use pace_nn::{Graph, GraphMode, Tensor};
//!
//! let mut g = Graph::new(GraphMode::eval());
//! let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f32));
//! let s = g.sum(x);
//! g.backward(s).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
//! ```

mod adam;
mod error;
mod gemm;
pub mod gradcheck;
mod graph;
mod ops;
pub mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use error::{NnError, Result};
pub use graph::{Graph, GraphMode, GraphStats, Var};
pub use ops::{attention_score_entries, conv1d_output_len, AttentionWeights};
pub use tensor::Tensor;

/// Logistic function, numerically stable for large |x|.
pub fn sigmoid(x: f32) -> f32 {
    ops::sigmoid(x)
}
