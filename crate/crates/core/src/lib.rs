//! Dual-intent diffusion inpainting.
//!
//! A pixel-space denoiser is trained with two learned condition vectors, one
//! for *creation* (paint a plausible object into the hole) and one for
//! *removal* (continue the background through it). At inference a ternary
//! intent field selects, per pixel, which condition acts as the positive
//! prompt, so regions with opposite intents are filled in a single pass.

pub mod checkpoint;
pub mod error;
pub mod mask;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod wire;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{CheckpointError, Error, Result};
pub use mask::{downsample_ternary, BinaryMask, TernaryIntentMask};
pub use schedule::{
    build_schedule, cfg_scalar, cfg_spatial, ddim_step, ddpm_step, forward_noise, GuidanceConfig, NoiseSchedule,
    Sampler, ScheduleConfig,
};
pub use scene::{generate_scene, SceneConfig, SceneSample};
pub use tensor::Tensor;
