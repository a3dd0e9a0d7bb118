//! Convolution block grid, scSE recalibration and base-learner assembly.

pub mod block;
pub mod params;
pub mod scse;
pub mod unet;

pub use block::{conv_block_forward, level_channels, BlockId, BlockRole, ConvBlockSpec};
pub use params::ParamStore;
pub use scse::{scse_forward, ScseCombine, ScseGate};
pub use unet::{learner_blocks, supervised_blocks, eta_name, ArchConfig, Learner, LearnerOutput, Mode, NestedUNet, Upsampling};
