//! Minimal CPU tensor engine and the exposure-merging networks built on it.

mod checkpoint;
mod float;
mod layers;
mod network;
mod spec;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, OptimizerState,
};
pub use float::Float;
pub use layers::{
    Activation, ActivationKind, BatchNorm2d, Conv2d, ConvTranspose2d, Layer, Mode, Param,
    ParamVisitor, ResidualBlock, BN_EPS, BN_MOMENTUM, LEAKY_SLOPE,
};
pub use network::{Model, Network, Sequential};
pub use spec::{
    build_resnet, build_unet, LayerKind, LayerSpec, NetOptions, NetworkSpec, StageSpec, Stride,
    Variant, INPUT_CHANNELS, OUTPUT_CHANNELS,
};
pub use tensor::Tensor;
