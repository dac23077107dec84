use std::sync::Arc;

use candle_core::Tensor;

use crate::garment::GarmentFeatureSet;

/// Garment conditioning handed to the model stack: either the encoded garment
/// image or its precomputed extractor features.
#[derive(Debug, Clone)]
pub enum GarmentSource {
    Latent(Tensor),
    Features(Arc<GarmentFeatureSet>),
}

/// Everything a noise predictor may look at besides `z_t` and `t`.
#[derive(Debug, Clone, Default)]
pub struct ClipCondition {
    /// `f × h × w × 9` control latent, `[z_a | z_p | m_c]`.
    pub control: Option<Tensor>,
    pub garment: Option<GarmentSource>,
    /// Absolute frame index of each clip position in the source video.
    pub frame_indices: Vec<usize>,
}

impl ClipCondition {
    pub fn indices_only(frame_indices: Vec<usize>) -> Self {
        Self { control: None, garment: None, frame_indices }
    }
}
