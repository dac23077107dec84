//! The garment extractor: a temporal-attention-free DiT over the garment
//! latent whose per-block inputs feed attention fusion in the consumers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Module, Tensor};
use candle_nn::Linear;
use sha2::{Digest, Sha256};

use crate::codec::LATENT_CHANNELS;
use crate::dit::block::{BlockContext, StDitBlock};
use crate::dit::embed::{sincos_2d, PROMPT_DIM};
use crate::dit::DenoiserConfig;
use crate::error::{shape_err, Error, Result};
use crate::params::{Init, ParamBuilder};
use crate::tokens::to_patches;

/// One `1 × s × d` feature per consumer block, tapped at the raw input of
/// the corresponding extractor block.
#[derive(Debug, Clone)]
pub struct GarmentFeatureSet {
    pub features: Vec<Tensor>,
    pub source_hash: String,
}

/// Hex SHA-256 of a tensor's little-endian f32 contents and shape.
pub fn tensor_hash(t: &Tensor) -> Result<String> {
    let mut h = Sha256::new();
    for d in t.dims() {
        h.update((*d as u64).to_le_bytes());
    }
    let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    for x in v {
        h.update(x.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

impl GarmentFeatureSet {
    fn cache_path(dir: &Path, source_hash: &str) -> PathBuf {
        dir.join(format!("garment_{source_hash}.safetensors"))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let map: HashMap<String, Tensor> =
            self.features.iter().enumerate().map(|(i, t)| (format!("feature.{i}"), t.clone())).collect();
        let path = Self::cache_path(dir, &self.source_hash);
        candle_core::safetensors::save(&map, &path)?;
        Ok(path)
    }

    pub fn load(dir: &Path, source_hash: &str, device: &candle_core::Device) -> Result<Option<Self>> {
        let path = Self::cache_path(dir, source_hash);
        if !path.exists() {
            return Ok(None);
        }
        let mut map = candle_core::safetensors::load(&path, device)?;
        let mut features = Vec::new();
        while let Some(t) = map.remove(&format!("feature.{}", features.len())) {
            features.push(t);
        }
        Ok(Some(Self { features, source_hash: source_hash.to_owned() }))
    }
}

#[derive(Debug, Clone)]
pub struct GarmentExtractor {
    pub cfg: DenoiserConfig,
    pub x_embed: Linear,
    pub prompt_proj: Linear,
    pub blocks: Vec<StDitBlock>,
}

impl GarmentExtractor {
    pub fn new(pb: &ParamBuilder, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| StDitBlock::new(&pb.pp(format!("blocks.{i}")), cfg.block(false, false, false)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            x_embed: pb.linear(cfg.patch_dim(LATENT_CHANNELS), cfg.hidden, "x_embed", Init::Uniform)?,
            prompt_proj: pb.linear(PROMPT_DIM, cfg.hidden, "prompt_proj", Init::Uniform)?,
            blocks,
        })
    }

    /// `garment_latent: 1 × h × w × 4`, `prompt: L_p × d_text`.
    pub fn extract(&self, garment_latent: &Tensor, prompt: &Tensor) -> Result<GarmentFeatureSet> {
        let (f, h, w, c) = garment_latent.dims4()?;
        if f != 1 {
            return shape_err(format!("garment extractor takes a single frame, got {f}"));
        }
        if c != LATENT_CHANNELS {
            return Err(Error::Shape(format!("garment latent has {c} channels")));
        }
        let p = self.cfg.patch_size;
        let pos = sincos_2d(h / p, w / p, self.cfg.hidden, garment_latent.dtype(), garment_latent.device())?;
        let mut x = self.x_embed.forward(&to_patches(garment_latent, p)?)?.broadcast_add(&pos)?;
        let prompt = self.prompt_proj.forward(prompt)?;
        let ctx = BlockContext { t_emb: None, prompt: &prompt, temporal_pe: None };
        let mut features = Vec::with_capacity(self.blocks.len());
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            features.push(x.clone());
            // the final block's output is never tapped
            if i < last {
                x = block.forward(&x, &ctx, None)?;
            }
        }
        Ok(GarmentFeatureSet { features, source_hash: tensor_hash(garment_latent)? })
    }
}
