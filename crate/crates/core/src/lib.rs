//! ConvLSTM precipitation nowcasting: tensors and hand-written layers with
//! explicit backward passes, the nine-layer autoencoder, Adadelta training,
//! radar data handling, evaluation and rendering.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod optim;
pub mod render;
pub mod tensor;
mod viridis_lut;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvSpec, Padding};
pub use error::{Error, FetchError, FormatError, Result};
pub use model::{build_model, ArchitectureConfig, BlockConfig, InferenceMode, ModelParams};
pub use tensor::{elementwise_map, elementwise_zip, reduce, Binary, Pointwise, ReduceKind, Scalar, Tensor};
