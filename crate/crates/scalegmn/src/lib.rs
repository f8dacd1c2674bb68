//! Weight-space metanetworks: scale-equivariant graph metanetworks that
//! fine-tune small neural networks in a single forward pass, plus the
//! gauge-symmetry tooling (exact transformations, brute-force admissibility
//! checks) needed to verify they respect weight-space symmetries.

pub mod nets;
pub mod gauge;
pub mod rng;
pub mod wgraph;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
