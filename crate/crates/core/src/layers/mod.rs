//! The three layer kinds of the autoencoder: ConvLSTM, batch normalization
//! and the sigmoid output head.

pub mod batchnorm;
pub mod convlstm;
pub mod head;

pub use batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormParams, Mode};
pub use convlstm::{
    convlstm_cell_backward, convlstm_cell_forward, convlstm_layer_backward, convlstm_layer_forward, CellCache,
    CellGrads, ConvLstmGrads, ConvLstmParams, ConvLstmState, LayerCache, LayerGrads,
};
pub use head::{output_head_backward, output_head_forward, HeadCache, HeadGrads, HeadParams};

pub const DEFAULT_LEAKY_RELU_ALPHA: f64 = 0.3;

/// Half-width of the Glorot uniform distribution.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
