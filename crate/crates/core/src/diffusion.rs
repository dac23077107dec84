//! Noise schedule, forward corruption, the ε-prediction loss and reverse
//! sampling. Timesteps are 1-based: `t ∈ [1, T]`, stored at index `t − 1`.

use candle_core::{DType, Device, Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::condition::ClipCondition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear { beta_start: f64, beta_end: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Linear { beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    /// Posterior standard deviation; zero at `t = 1`.
    pub sigma: Vec<f64>,
}

pub fn make_schedule(steps: usize, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::Config("diffusion needs at least one step".into()));
    }
    let ScheduleKind::Linear { beta_start, beta_end } = kind;
    if !(0.0 < beta_start && beta_start < 1.0 && 0.0 < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!("betas must lie in (0,1): {beta_start}, {beta_end}")));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    let sigma = (0..steps)
        .map(|i| {
            if i == 0 {
                0.0
            } else {
                ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            }
        })
        .collect();
    Ok(DiffusionSchedule { steps, beta, alpha, alpha_bar, sigma })
}

impl DiffusionSchedule {
    fn index(&self, t: usize) -> Result<usize> {
        if t < 1 || t > self.steps {
            return Err(Error::Config(format!("timestep {t} outside [1, {}]", self.steps)));
        }
        Ok(t - 1)
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.index(t)?])
    }

    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(t)?])
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        Ok(self.sigma[self.index(t)?])
    }
}

/// One forward kernel step `z_t = √(1−β_t)·z_{t−1} + √β_t·ε`.
pub fn q_step(z_prev: &Tensor, t: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    let b = sched.beta_at(t)?;
    Ok(((z_prev * (1.0 - b).sqrt())? + (noise * b.sqrt())?)?)
}

/// Closed-form marginal `z_t = √ᾱ_t·z_0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(z0: &Tensor, t: usize, noise: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar_at(t)?;
    Ok(((z0 * ab.sqrt())? + (noise * (1.0 - ab).sqrt())?)?)
}

/// One reverse step. `noise` is ignored at `t = 1` and may be `None` for the
/// deterministic sampler.
pub fn p_step(
    z_t: &Tensor,
    t: usize,
    eps_pred: &Tensor,
    sched: &DiffusionSchedule,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let i = sched.index(t)?;
    let (b, ab) = (sched.beta[i], sched.alpha_bar[i]);
    let mean = ((z_t - (eps_pred * (b / (1.0 - ab).sqrt()))?)? / (1.0 - b).sqrt())?;
    match noise {
        Some(n) if t > 1 => Ok((mean + (n * sched.sigma[i])?)?),
        _ => Ok(mean),
    }
}

/// Draws a standard normal tensor from the caller's rng stream.
pub fn randn(shape: impl Into<Shape>, dtype: DType, rng: &mut ChaCha8Rng, device: &Device) -> Result<Tensor> {
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Anything that predicts the injected noise of a corrupted clip latent.
pub trait NoisePredictor {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &ClipCondition) -> Result<Tensor>;
}

/// Loss for an explicit timestep and noise draw.
pub fn loss_at<M: NoisePredictor + ?Sized>(
    model: &M,
    z0: &Tensor,
    cond: &ClipCondition,
    t: usize,
    noise: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let z_t = q_sample(z0, t, noise, sched)?;
    let eps = model.predict_noise(&z_t, t, cond)?;
    Ok((eps - noise)?.sqr()?.mean_all()?)
}

/// Mean squared error between a fresh `ε` and the model's prediction at a
/// uniformly drawn `t ∈ [1, T]`.
pub fn training_loss<M: NoisePredictor + ?Sized>(
    model: &M,
    z0: &Tensor,
    cond: &ClipCondition,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let t = rng.gen_range(1..=sched.steps);
    let noise = randn(z0.dims(), z0.dtype(), rng, z0.device())?;
    loss_at(model, z0, cond, t, &noise, sched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Ancestral,
    #[default]
    Deterministic,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ancestral" => Ok(SampleMode::Ancestral),
            "deterministic" => Ok(SampleMode::Deterministic),
            other => Err(Error::Config(format!("unknown sampling mode {other}"))),
        }
    }
}

/// Full `T`-step reverse loop from standard normal noise.
pub fn sample_loop<M: NoisePredictor + ?Sized>(
    model: &M,
    shape: &[usize],
    cond: &ClipCondition,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
    mode: SampleMode,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut z = randn(shape, dtype, rng, device)?;
    for t in (1..=sched.steps).rev() {
        // No gradient flows through sampling.
        let eps = model.predict_noise(&z, t, cond)?.detach();
        z = match mode {
            SampleMode::Ancestral if t > 1 => {
                let n = randn(shape, dtype, rng, device)?;
                p_step(&z, t, &eps, sched, Some(&n))?
            }
            _ => p_step(&z, t, &eps, sched, None)?,
        };
    }
    Ok(z)
}

/// Test model that knows the clean latents and returns the exact noise that
/// explains `z_t`. Frames are looked up by `cond.frame_indices`.
pub struct EpsilonOracle {
    /// `F × h × w × 4` ground-truth latents for every frame index.
    pub clean: Tensor,
    pub schedule: DiffusionSchedule,
}

impl NoisePredictor for EpsilonOracle {
    fn predict_noise(&self, z_t: &Tensor, t: usize, cond: &ClipCondition) -> Result<Tensor> {
        let idx: Vec<u32> = cond.frame_indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::new(idx.as_slice(), z_t.device())?;
        let z0 = self.clean.index_select(&idx, 0)?.to_dtype(z_t.dtype())?;
        let ab = self.schedule.alpha_bar_at(t)?;
        Ok(((z_t - (z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }
}
