//! Experiment configuration, serialised as TOML with one section per
//! subsystem.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecSpec;
use crate::data::SwapPattern;
use crate::diffusion::{make_schedule, DiffusionSchedule, SampleMode, ScheduleKind};
use crate::dit::DenoiserConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub sample_mode: SampleMode,
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub scenes: usize,
    pub height: usize,
    pub width: usize,
    pub total_frames: usize,
    /// Frames per training clip in video mode.
    pub clip_frames: usize,
    pub stride_range: (usize, usize),
    /// Upper bound on swapped frames per clip; the draw is also capped at
    /// `⌊f/3⌋`.
    pub k_max: usize,
    #[serde(default)]
    pub swap_pattern: SwapPattern,
    #[serde(default = "yes")]
    pub augment_garment: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "clip_norm")]
    pub grad_clip: f64,
}

fn clip_norm() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Clip,
    Ar,
    Iar,
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(InferenceMode::Clip),
            "ar" => Ok(InferenceMode::Ar),
            "iar" => Ok(InferenceMode::Iar),
            other => Err(Error::Config(format!("unknown inference mode {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub mode: InferenceMode,
    pub frames: usize,
    pub window: usize,
    pub overlap: usize,
    pub subvideos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub codec: CodecSpec,
    pub data: DataConfig,
    pub stage1: StageParams,
    pub stage2: StageParams,
    pub stage3: StageParams,
    pub inference: InferenceConfig,
}

impl ExperimentConfig {
    /// Desk-scale defaults. The schedule ends at β = 0.2 so that 50 steps
    /// still drive ᾱ_T close to zero.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            model: DenoiserConfig::desk_scale(),
            diffusion: DiffusionConfig {
                steps: 50,
                schedule: ScheduleKind::Linear { beta_start: 1e-4, beta_end: 0.2 },
                sample_mode: SampleMode::Deterministic,
            },
            codec: CodecSpec::default(),
            data: DataConfig {
                scenes: 4,
                height: 64,
                width: 64,
                total_frames: 48,
                clip_frames: 8,
                stride_range: (1, 2),
                k_max: 2,
                swap_pattern: SwapPattern::Scattered,
                augment_garment: true,
            },
            stage1: StageParams { steps: 1000, learning_rate: 3e-4, batch_size: 4, weight_decay: 0.0, grad_clip: 1.0 },
            stage2: StageParams { steps: 1000, learning_rate: 3e-4, batch_size: 4, weight_decay: 0.0, grad_clip: 1.0 },
            stage3: StageParams { steps: 2000, learning_rate: 3e-4, batch_size: 4, weight_decay: 0.0, grad_clip: 1.0 },
            inference: InferenceConfig { mode: InferenceMode::Iar, frames: 36, window: 12, overlap: 3, subvideos: 4 },
        }
    }

    pub fn paper() -> Self {
        let mut cfg = Self::desk();
        cfg.model = DenoiserConfig::paper_scale();
        cfg.diffusion.steps = 1000;
        cfg.diffusion.schedule = ScheduleKind::default();
        cfg.data.height = 256;
        cfg.data.width = 192;
        cfg.data.clip_frames = 36;
        for s in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.stage3] {
            s.learning_rate = 1e-5;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.schedule()?;
        if self.model.steps != self.diffusion.steps {
            return Err(Error::Config(format!(
                "model.steps {} disagrees with diffusion.steps {}",
                self.model.steps, self.diffusion.steps
            )));
        }
        let latent_div = 8 * self.model.patch_size;
        if self.data.height % latent_div != 0 || self.data.width % latent_div != 0 {
            return Err(Error::Config(format!(
                "frame size {}×{} must be divisible by {latent_div}",
                self.data.height, self.data.width
            )));
        }
        let (lo, hi) = self.data.stride_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad stride range {lo}..={hi}")));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Hex SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn stage(&self, stage: u8) -> Result<&StageParams> {
        match stage {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            s => Err(Error::Config(format!("stage must be 1, 2 or 3, got {s}"))),
        }
    }
}
