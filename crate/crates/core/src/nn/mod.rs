//! The denoising network: scalar abstraction, layer primitives and the UNet.

pub mod model;
pub mod ops;
pub mod scalar;

pub use model::{
    assemble_input, init_params, init_params_as, ConditionEmbedding, Denoiser, DenoiserConfig, DenoiserParams, Grads,
    ParamTensor, Tape, to_image_space, to_model_space,
};
pub use scalar::Scalar;
