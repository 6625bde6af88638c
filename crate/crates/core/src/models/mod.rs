//! Model specs, builders, the tape-backed model runtime, Adam and training.

mod adam;
mod builders;
mod model;
mod spec;
mod train;

pub use adam::{adam_update, Adam, AdamConfig};
pub use builders::{
    backbone_layers, build_custom_cnn, build_custom_cnn_with, build_pretrained, build_pretrained_with, Backbone,
    CustomCnnConfig,
};
pub use model::{argmax_rows, FeatureSource, Features, ForwardPass, Model, Param, Prediction, WEIGHTS_KIND};
pub use spec::{Activation, BatchNormSpec, ConvSpec, DenseSpec, Init, LayerSpec, ModelSpec, ParamInfo, Shape};
pub use train::{
    fit, stack_images, train, train_model, EarlyStopping, EpochStats, StopDecision, TrainConfig, TrainHistory,
};

/// RNG stream ids, so init, splits, shuffling and dropout never share draws.
pub mod streams {
    pub const INIT: u64 = 10;
    pub const VAL_SPLIT: u64 = 11;
    pub const SHUFFLE: u64 = 12;
    pub const DROPOUT: u64 = 13;
}
