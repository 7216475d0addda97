//! Toy diffusion backbone: noise schedule, forward noising, a small
//! text-conditioned UNet with pluggable image-prompt cross-attention, DDIM
//! sampling and the noise-prediction loss. Pixel space by default, behind a
//! codec abstraction.

mod codec;
mod sample;
mod schedule;
mod train;
mod unet;

pub use codec::{IdentityCodec, LatentCodec, ScaleShiftCodec};
pub use sample::{ddim_sample, diffusion_draws, loss_diffusion, DdimConfig, DiffusionDraw};
pub use schedule::{predict_x0, q_sample, q_sample_with_abar, NoiseSchedule};
pub use train::{train_base_denoiser, BaseTrainConfig, DENOISER_PROMPT};
pub use unet::{AttnLayerMap, DenoisingUNet, UnetConditioning, UnetConfig};
