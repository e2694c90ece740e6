//! Dual-pathway dilated fully convolutional network: configuration,
//! parameters, forward/backward passes and checkpoints.

pub mod checkpoint;
mod config;
mod layers;
mod model;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{
    compute_receptive_field, Activation, LayerSpec, NetworkConfig, Pathway, HEAD_HIDDEN, HEAD_OUTPUT, N_CLASSES,
};
pub use layers::LayerGrads;
pub use model::{softmax_rows, ForwardCache, Gradients, Mode};
pub use params::{build_network, BatchNorm, ConvLayer, NetworkParams};
pub use tensor::FeatureMap;

/// The two layers adapted during patient-specific fine-tuning.
pub const HEAD_LAYERS: [&str; 2] = [HEAD_HIDDEN, HEAD_OUTPUT];
