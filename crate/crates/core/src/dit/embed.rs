//! Timestep, positional and prompt embeddings.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::params::{Init, ParamBuilder};

pub const DEFAULT_PROMPT: &str = "a dancing person";
pub const PROMPT_TOKENS: usize = 8;
pub const PROMPT_DIM: usize = 64;

/// Sinusoidal features of a scalar position, `dim` entries: the first half
/// cosines, the second half sines, frequencies geometric from 1 to 1/10000.
pub fn sinusoid(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        out[i] = (pos * freq).cos();
        out[half + i] = (pos * freq).sin();
    }
    out
}

/// Fixed 2D sinusoidal table `(gh·gw) × d`: half the channels encode the row,
/// half the column.
pub fn sincos_2d(gh: usize, gw: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = d / 2;
    let mut table = Vec::with_capacity(gh * gw * d);
    for r in 0..gh {
        for c in 0..gw {
            table.extend(sinusoid(r as f64, half));
            table.extend(sinusoid(c as f64, d - half));
        }
    }
    Ok(Tensor::from_vec(table, (gh * gw, d), device)?.to_dtype(dtype)?)
}

/// Fixed 1D sinusoidal table `frames × d`.
pub fn sincos_1d(frames: usize, d: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let table: Vec<f64> = (0..frames).flat_map(|f| sinusoid(f as f64, d)).collect();
    Ok(Tensor::from_vec(table, (frames, d), device)?.to_dtype(dtype)?)
}

/// Sinusoidal base embedding followed by a two-layer MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    fc1: Linear,
    fc2: Linear,
    freq_dim: usize,
}

impl TimestepEmbedder {
    pub fn new(pb: &ParamBuilder, d: usize) -> Result<Self> {
        let freq_dim = d.max(16);
        Ok(Self {
            fc1: pb.linear(freq_dim, d, "fc1", Init::Normal(0.02))?,
            fc2: pb.linear(d, d, "fc2", Init::Normal(0.02))?,
            freq_dim,
        })
    }

    /// `1 × d` embedding of step `t`.
    pub fn forward(&self, t: usize, dtype: DType, device: &Device) -> Result<Tensor> {
        let base = Tensor::from_vec(sinusoid(t as f64, self.freq_dim), (1, self.freq_dim), device)?
            .to_dtype(dtype)?;
        Ok(self.fc2.forward(&self.fc1.forward(&base)?.silu()?)?)
    }
}

/// Deterministic stand-in for a text encoder: a seeded `L_p × d_text` table
/// keyed by the prompt string.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub source: String,
}

impl PromptEmbedding {
    pub fn stub(prompt: &str, dtype: DType, device: &Device) -> Result<Self> {
        let digest = Sha256::digest(prompt.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..PROMPT_TOKENS * PROMPT_DIM).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self {
            tokens: Tensor::from_vec(v, (PROMPT_TOKENS, PROMPT_DIM), device)?.to_dtype(dtype)?,
            source: prompt.to_owned(),
        })
    }

    pub fn default_prompt(dtype: DType, device: &Device) -> Result<Self> {
        Self::stub(DEFAULT_PROMPT, dtype, device)
    }
}
