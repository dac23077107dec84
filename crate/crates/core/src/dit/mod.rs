//! The spatio-temporal diffusion transformer.

pub mod attention;
pub mod block;
pub mod denoiser;
pub mod embed;

pub use attention::{
    attention_fusion, broadcast_temporal, multi_head_attention, prompt_cross_attention,
    spatial_self_attention, temporal_self_attention, AttentionParams,
};
pub use block::{BlockConfig, BlockContext, StDitBlock};
pub use denoiser::{Denoiser, DenoiserConfig, StepConditioning};
pub use embed::{PromptEmbedding, TimestepEmbedder};
