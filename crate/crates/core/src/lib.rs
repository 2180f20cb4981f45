//! End-to-end multi-person keypoint detection on synthetic scenes.
//!
//! The crate is a vertical slice of a dense single-stage pose estimator:
//! a reverse-mode autodiff core ([`tensor`]), keypoint/box geometry
//! ([`geometry`]), a procedural scene generator ([`synth`]), dense target
//! assignment ([`targets`]), the network itself with an aligned-sampling
//! keypoint head ([`model`]), a deterministic SGD trainer ([`engine`]), and
//! decoding plus OKS average-precision evaluation ([`evalkit`]).
//!
//! Numeric code is generic over [`scalar::Scalar`]; training runs in `f32`
//! (the checkpoint precision) and gradient verification in `f64`. The
//! concrete aliases below cover both.

pub mod scalar;
pub mod tensor;

pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, TensorError, TensorId};

/// Training-precision graph (matches the checkpoint format).
pub type GraphF32 = Graph<f32>;
/// Verification-precision graph, used by gradient checks.
pub type GraphF64 = Graph<f64>;
