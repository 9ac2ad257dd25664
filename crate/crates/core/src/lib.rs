//! Linear-complexity attention built on conserved information flow, plus the
//! small stack needed to exercise it end to end: a dense tensor type, a
//! reverse-mode tape, a sequence model, synthetic tasks, a trainer, and a
//! scaling benchmark harness.
//!
//! Layout:
//! - [`tensor`]: rank <= 4 row-major tensors with deterministic kernels
//! - [`attention`]: canonical softmax attention, a linear-attention baseline,
//!   and the flow-based mechanisms (non-causal and causal)
//! - [`autodiff`]: tape-based reverse mode over the kernel primitives, with a
//!   finite-difference checker
//! - [`model`]: residual pre/post-norm blocks, embeddings, heads, checkpoints
//! - [`tasks`]: copy, listops-mini and char-LM batch generators
//! - [`train`]: Adam with warmup + inverse-sqrt decay, metrics logging
//! - [`bench`]: median-of-reps timing and log-log scaling fits

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{FlowError, Result};
pub use tensor::{Dtype, Tensor};
