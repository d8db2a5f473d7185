//! Sparse residual U-Net with hand-written forward and backward passes.

pub mod conv;
pub mod layers;
pub mod params;
pub mod unet;

pub use conv::{
    kernel_offsets, sparse_conv_backward, sparse_conv_forward, transpose_conv_backward, transpose_conv_forward,
    ConvKernel, ConvTape, Rulebook,
};
pub use layers::{
    batch_norm_backward, batch_norm_forward, relu_backward, relu_forward, BlockTape, BnStats, BnTape, Faults,
    LevelRules, Mode, ResidualBlock, StandaloneBlock, StatUpdate,
};
pub use params::{GradientSet, ParamEntry, ParamId, ParamKind, ParameterSet, CHECKPOINT_MAGIC};
pub use unet::{apply_stat_updates, init_params, read_checkpoint, unet_forward, ForwardTape, UNet, UNetConfig};
