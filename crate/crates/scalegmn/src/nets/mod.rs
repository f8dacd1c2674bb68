//! Target networks: the small MLPs/CNNs whose weights the metanetwork
//! consumes and rewrites. Includes the explicit doubly-block Toeplitz view of
//! convolutions used by the gauge analysis, and desk-scale image data.

mod arch;
mod data;
mod forward;
mod toeplitz;

pub use arch::{Activation, ArchSpec, InputShape, LayerKind, LayerLayout, LayerSpec, ParamVector};
pub use data::{load_dataset, toy_dataset, write_dataset, ImageBatch, ToyData, NUM_CLASSES};
pub use forward::{accuracy, bind_params, forward, forward_logits, init_params, InitKind, ThetaVars};
pub use toeplitz::{conv_layer_matrix, gap_matrix, shares_rows, toeplitz_matrix, ConvMatrix};

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("parameter layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid convolution geometry: {0}")]
    BadConv(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad dataset file: {0}")]
    BadFormat(String),
}

pub type Result<T> = std::result::Result<T, NetError>;
