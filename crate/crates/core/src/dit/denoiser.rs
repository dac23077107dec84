use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use super::attention::layer_norm;
use super::block::{BlockConfig, BlockContext, StDitBlock};
use super::embed::{sincos_1d, sincos_2d, TimestepEmbedder, PROMPT_DIM};
use crate::codec::LATENT_CHANNELS;
use crate::error::{shape_err, Error, Result};
use crate::garment::GarmentFeatureSet;
use crate::params::{Init, ParamBuilder};
use crate::tokens::{from_patches, to_patches};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Block count `N`; must be even so the control branch mirrors half.
    pub depth: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_frames: usize,
    pub steps: usize,
}

impl DenoiserConfig {
    pub fn paper_scale() -> Self {
        Self { depth: 28, patch_size: 2, hidden: 1152, heads: 16, mlp_ratio: 4, max_frames: 36, steps: 1000 }
    }

    pub fn desk_scale() -> Self {
        Self { depth: 8, patch_size: 2, hidden: 128, heads: 4, mlp_ratio: 4, max_frames: 8, steps: 50 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth % 2 != 0 {
            return Err(Error::Config(format!("block count {} must be even and positive", self.depth)));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        if self.patch_size == 0 || self.mlp_ratio == 0 || self.steps == 0 {
            return Err(Error::Config("patch size, mlp ratio and steps must be positive".into()));
        }
        Ok(())
    }

    pub fn block(&self, has_temporal: bool, has_garment_fusion: bool, has_modulation: bool) -> BlockConfig {
        BlockConfig {
            d: self.hidden,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            has_temporal,
            has_garment_fusion,
            has_modulation,
        }
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch_size * self.patch_size * channels
    }
}

/// Token stream entering the first block, plus what is needed to undo the
/// patchification.
pub struct Embedded {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

/// Conditioning computed once per forward pass and shared with the control
/// branch.
pub struct StepConditioning {
    pub t_emb: Tensor,
    pub prompt: Tensor,
    pub temporal_pe: Tensor,
}

impl StepConditioning {
    pub fn context(&self) -> BlockContext<'_> {
        BlockContext { t_emb: Some(&self.t_emb), prompt: &self.prompt, temporal_pe: Some(&self.temporal_pe) }
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub x_embed: Linear,
    pub t_embed: TimestepEmbedder,
    pub prompt_proj: Linear,
    pub blocks: Vec<StDitBlock>,
    pub final_modulation: Linear,
    pub final_proj: Linear,
}

impl Denoiser {
    pub fn new(pb: &ParamBuilder, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let blocks = (0..cfg.depth)
            .map(|i| StDitBlock::new(&pb.pp(format!("blocks.{i}")), cfg.block(true, true, true)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            x_embed: pb.linear(cfg.patch_dim(LATENT_CHANNELS), d, "x_embed", Init::Uniform)?,
            t_embed: TimestepEmbedder::new(&pb.pp("t_embed"), d)?,
            prompt_proj: pb.linear(PROMPT_DIM, d, "prompt_proj", Init::Uniform)?,
            blocks,
            final_modulation: pb.pp("final").linear(d, 2 * d, "modulation", Init::Zeros)?,
            final_proj: pb.pp("final").linear(d, cfg.patch_dim(LATENT_CHANNELS), "proj", Init::Normal(0.02))?,
        })
    }

    pub fn embed(&self, z_t: &Tensor) -> Result<Embedded> {
        let (_, h, w, c) = z_t.dims4()?;
        if c != LATENT_CHANNELS {
            return shape_err(format!("noisy latent must have {LATENT_CHANNELS} channels, got {c}"));
        }
        let p = self.cfg.patch_size;
        let patches = to_patches(z_t, p)?;
        let grid = (h / p, w / p);
        let pos = sincos_2d(grid.0, grid.1, self.cfg.hidden, z_t.dtype(), z_t.device())?;
        let tokens = self.x_embed.forward(&patches)?.broadcast_add(&pos)?;
        Ok(Embedded { tokens, grid })
    }

    pub fn conditioning(&self, t: usize, prompt: &Tensor, frames: usize, dtype: DType, device: &Device) -> Result<StepConditioning> {
        Ok(StepConditioning {
            t_emb: self.t_embed.forward(t, dtype, device)?,
            prompt: self.prompt_proj.forward(prompt)?,
            temporal_pe: sincos_1d(frames, self.cfg.hidden, dtype, device)?,
        })
    }

    /// Runs the block stack. `residuals[i]` is added to the output of block
    /// `i`; the returned flags record which blocks received one.
    pub fn run_blocks(
        &self,
        tokens: &Tensor,
        cond: &StepConditioning,
        garment: &GarmentFeatureSet,
        residuals: Option<&[Tensor]>,
    ) -> Result<(Tensor, Vec<bool>)> {
        if garment.features.len() < self.blocks.len() {
            return Err(Error::Config(format!(
                "{} garment features for {} blocks",
                garment.features.len(),
                self.blocks.len()
            )));
        }
        if let Some(r) = residuals {
            if r.len() != self.cfg.depth / 2 {
                return Err(Error::Config(format!(
                    "expected {} control residuals, got {}",
                    self.cfg.depth / 2,
                    r.len()
                )));
            }
        }
        let ctx = cond.context();
        let mut x = tokens.clone();
        let mut injected = vec![false; self.blocks.len()];
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x, &ctx, Some(&garment.features[i]))?;
            if let Some(r) = residuals.and_then(|r| r.get(i)) {
                x = (x + r)?;
                injected[i] = true;
            }
        }
        Ok((x, injected))
    }

    /// Final modulated projection back to latent space.
    pub fn unembed(&self, x: &Tensor, cond: &StepConditioning, grid: (usize, usize)) -> Result<Tensor> {
        let mods = self.final_modulation.forward(&cond.t_emb.silu()?)?.chunk(2, D::Minus1)?;
        let h = layer_norm(x)?.broadcast_mul(&(&mods[1] + 1.0)?)?.broadcast_add(&mods[0])?;
        let patches = self.final_proj.forward(&h)?;
        from_patches(&patches, self.cfg.patch_size, grid, LATENT_CHANNELS)
    }

    /// ε-prediction for `z_t: f × h × w × 4`.
    pub fn forward(
        &self,
        z_t: &Tensor,
        t: usize,
        prompt: &Tensor,
        garment: &GarmentFeatureSet,
        residuals: Option<&[Tensor]>,
    ) -> Result<Tensor> {
        let frames = z_t.dims()[0];
        let emb = self.embed(z_t)?;
        let cond = self.conditioning(t, prompt, frames, z_t.dtype(), z_t.device())?;
        let (x, _) = self.run_blocks(&emb.tokens, &cond, garment, residuals)?;
        self.unembed(&x, &cond, emb.grid)
    }
}
