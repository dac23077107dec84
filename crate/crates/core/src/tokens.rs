//! Conversion between latents and transformer token sequences.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{gram_schmidt, VideoLatent};
use crate::error::{shape_err, Error, Result};

/// Patchified latent `f × s × d` with `s = (h/p)·(w/p)`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub data: Tensor,
    pub patch_size: usize,
    /// Patch grid `(h/p, w/p)`; required to undo the patchification.
    pub grid: Option<(usize, usize)>,
    /// Latent channels per pixel before patchification.
    pub channels: usize,
}

impl TokenSequence {
    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn len(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.dims()[2]
    }
}

/// `f×h×w×C` → `f×s×(p·p·C)`, patches in row-major grid order and each patch
/// flattened as (dy, dx, channel).
pub fn to_patches(latent: &Tensor, p: usize) -> Result<Tensor> {
    let (f, h, w, c) = latent.dims4()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return shape_err(format!("latent {h}×{w} not divisible by patch size {p}"));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(latent
        .reshape((f, gh, p, gw, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((f, gh * gw, p * p * c))?)
}

/// Inverse of [`to_patches`].
pub fn from_patches(patches: &Tensor, p: usize, grid: (usize, usize), c: usize) -> Result<Tensor> {
    let (f, s, ppc) = patches.dims3()?;
    let (gh, gw) = grid;
    if s != gh * gw || ppc != p * p * c {
        return shape_err(format!(
            "patches {:?} incompatible with grid {gh}×{gw}, p={p}, c={c}",
            patches.dims()
        ));
    }
    Ok(patches
        .reshape((f, gh, gw, p, p, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((f, gh * p, gw * p, c))?)
}

/// A fixed linear patch embedding with orthonormal columns, so its transpose
/// is an exact left inverse.
#[derive(Debug, Clone)]
pub struct PatchEmbedding {
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    /// `(p·p·C) × d`.
    weight: Arc<Tensor>,
}

impl PatchEmbedding {
    pub fn seeded(patch_size: usize, channels: usize, dim: usize, seed: u64) -> Result<Self> {
        let in_dim = patch_size * patch_size * channels;
        if in_dim == 0 || dim < in_dim {
            return shape_err(format!(
                "embedding {in_dim} → {dim} is not injective; need d ≥ p·p·C"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..in_dim)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        gram_schmidt(&mut rows);
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let weight = Tensor::from_vec(flat, (in_dim, dim), &Device::Cpu)?;
        Ok(Self { patch_size, channels, dim, weight: Arc::new(weight) })
    }

    pub fn patchify(&self, latent: &VideoLatent) -> Result<TokenSequence> {
        let (_, h, w, c) = latent.data.dims4()?;
        if c != self.channels {
            return shape_err(format!("latent has {c} channels, embedding expects {}", self.channels));
        }
        let p = self.patch_size;
        let patches = to_patches(&latent.data.to_dtype(DType::F64)?, p)?;
        let tokens = patches.broadcast_matmul(&self.weight)?;
        Ok(TokenSequence {
            data: tokens.to_dtype(latent.data.dtype())?,
            patch_size: p,
            grid: Some((h / p, w / p)),
            channels: c,
        })
    }

    pub fn unpatchify(&self, tokens: &TokenSequence) -> Result<VideoLatent> {
        let grid = tokens
            .grid
            .ok_or_else(|| Error::Shape("token sequence carries no patch grid".into()))?;
        if tokens.dim() != self.dim {
            return shape_err(format!("token dim {} != embedding dim {}", tokens.dim(), self.dim));
        }
        let patches = tokens.data.to_dtype(DType::F64)?.broadcast_matmul(&self.weight.t()?)?;
        let latent = from_patches(&patches, self.patch_size, grid, self.channels)?;
        VideoLatent::new(latent.to_dtype(tokens.data.dtype())?)
    }
}

/// Patchifies with a seeded embedding of width `d`.
pub fn patchify(latent: &VideoLatent, p: usize, d: usize) -> Result<(TokenSequence, PatchEmbedding)> {
    let emb = PatchEmbedding::seeded(p, latent.data.dims()[3], d, 0)?;
    Ok((emb.patchify(latent)?, emb))
}
