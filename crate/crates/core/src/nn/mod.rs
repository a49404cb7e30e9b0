//! Minimal dense-tensor engine: forward/backward kernels, batched layers, Adam.

mod adam;
mod layers;
pub mod ops;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm1d, Conv1d, Dense, Dropout, Layer, LayerGrad, MaxPool1d};
pub use ops::{
    batchnorm_backward, batchnorm_forward, conv1d_backward, conv1d_forward, dense_backward,
    dense_forward, dropout_backward, dropout_forward, maxpool1d_backward, maxpool1d_forward,
    mse_loss, relu_backward, relu_forward, softmax, softmax_crossentropy, BatchNormCache, Mode,
    RunningStats,
};
pub use tensor::{Scalar, Tensor};
