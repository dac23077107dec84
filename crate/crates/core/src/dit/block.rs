use candle_core::{Module, Tensor, D};
use candle_nn::Linear;
use serde::{Deserialize, Serialize};

use super::attention::{
    attention_fusion, broadcast_temporal, layer_norm, prompt_cross_attention, spatial_self_attention,
    temporal_self_attention, AttentionParams,
};
use crate::error::{Error, Result};
use crate::params::{Init, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub d: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub has_temporal: bool,
    pub has_garment_fusion: bool,
    /// Timestep scale/shift modulation; off for the garment extractor, which
    /// runs on the clean garment image.
    pub has_modulation: bool,
}

/// Inputs shared by every block of one forward pass.
pub struct BlockContext<'a> {
    /// `1 × d` timestep embedding.
    pub t_emb: Option<&'a Tensor>,
    /// Projected prompt tokens `L_p × d`.
    pub prompt: &'a Tensor,
    /// `frames × d` temporal positional table.
    pub temporal_pe: Option<&'a Tensor>,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Module for FeedForward {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

const SUBLAYERS: usize = 4;

/// Spatio-temporal DiT block: `[SSA | fusion] → TSA → PCA → FF`, each
/// sublayer pre-normalised and residual.
#[derive(Debug, Clone)]
pub struct StDitBlock {
    pub cfg: BlockConfig,
    pub ssa: AttentionParams,
    pub sca: Option<AttentionParams>,
    pub tsa: Option<AttentionParams>,
    pub pca: AttentionParams,
    pub ff: FeedForward,
    pub modulation: Option<Linear>,
}

impl StDitBlock {
    pub fn new(pb: &ParamBuilder, cfg: BlockConfig) -> Result<Self> {
        if cfg.mlp_ratio < 1 {
            return Err(Error::Config("mlp_ratio must be at least 1".into()));
        }
        let d = cfg.d;
        let ssa = AttentionParams::new(&pb.pp("ssa"), d, d, cfg.heads)?;
        let sca = if cfg.has_garment_fusion {
            Some(AttentionParams::new(&pb.pp("sca"), d, d, cfg.heads)?)
        } else {
            None
        };
        let tsa = if cfg.has_temporal {
            Some(AttentionParams::new(&pb.pp("tsa"), d, d, cfg.heads)?)
        } else {
            None
        };
        let pca = AttentionParams::new(&pb.pp("pca"), d, d, cfg.heads)?;
        let ffp = pb.pp("ff");
        let ff = FeedForward {
            fc1: ffp.linear(d, d * cfg.mlp_ratio, "fc1", Init::Uniform)?,
            fc2: ffp.linear(d * cfg.mlp_ratio, d, "fc2", Init::Uniform)?,
        };
        let modulation = if cfg.has_modulation {
            Some(pb.linear(d, 2 * SUBLAYERS * d, "modulation", Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { cfg, ssa, sca, tsa, pca, ff, modulation })
    }

    /// Per-sublayer `(shift, scale)` pairs, each `1 × d`.
    fn modulation_terms(&self, t_emb: Option<&Tensor>) -> Result<Option<Vec<(Tensor, Tensor)>>> {
        let (Some(m), Some(t)) = (&self.modulation, t_emb) else {
            return Ok(None);
        };
        let all = m.forward(&t.silu()?)?;
        let chunks = all.chunk(2 * SUBLAYERS, D::Minus1)?;
        Ok(Some(chunks.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect()))
    }

    fn norm_mod(x: &Tensor, terms: &Option<Vec<(Tensor, Tensor)>>, i: usize) -> Result<Tensor> {
        let h = layer_norm(x)?;
        Ok(match terms {
            Some(t) => {
                let (shift, scale) = &t[i];
                h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?
            }
            None => h,
        })
    }

    /// `x: f × s × d`; `garment: 1 × s_g × d` raw (un-normalised) garment
    /// feature for this block.
    pub fn forward(&self, x: &Tensor, ctx: &BlockContext, garment: Option<&Tensor>) -> Result<Tensor> {
        let (f, _, _) = x.dims3()?;
        let terms = self.modulation_terms(ctx.t_emb)?;

        let h = Self::norm_mod(x, &terms, 0)?;
        let a = match (&self.sca, garment) {
            (Some(sca), Some(g)) => {
                let r_c = broadcast_temporal(&layer_norm(g)?, f)?;
                attention_fusion(&h, &r_c, &self.ssa, sca)?
            }
            (Some(_), None) => {
                return Err(Error::Config("garment fusion enabled but no garment feature given".into()))
            }
            (None, _) => spatial_self_attention(&h, &self.ssa)?,
        };
        let mut x = (x + a)?;

        if let Some(tsa) = &self.tsa {
            let mut h = Self::norm_mod(&x, &terms, 1)?;
            if let Some(pe) = ctx.temporal_pe {
                h = h.broadcast_add(&pe.narrow(0, 0, f)?.unsqueeze(1)?)?;
            }
            x = (x + temporal_self_attention(&h, tsa)?)?;
        }

        let h = Self::norm_mod(&x, &terms, 2)?;
        x = (&x + prompt_cross_attention(&h, ctx.prompt, &self.pca)?)?;

        let h = Self::norm_mod(&x, &terms, 3)?;
        Ok((&x + self.ff.forward(&h)?)?)
    }
}
