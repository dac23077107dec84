//! Three-stage training: per-stage freeze maps, batch construction with the
//! random agnostic swap, an AdamW loop with global-norm clipping, and
//! checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use candle_core::backprop::GradStore;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Codec;
use crate::condition::{ClipCondition, GarmentSource};
use crate::config::{DataConfig, ExperimentConfig, StageParams};
use crate::controlnet::{downsample_mask, ControlInput};
use crate::data::{
    augment_garment, choose_swap_indices, draw_stride_start, ConditioningTuple, RenderedScene, SwapPattern,
};
use crate::diffusion::{randn, q_sample, DiffusionSchedule, NoisePredictor};
use crate::dit::DenoiserConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::params::glob_match;
use crate::stack::ModelStack;

pub const DIVERGENCE_LIMIT: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    SingleFrame,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    /// Parameters matching any of these patterns are trained...
    pub trainable: Vec<String>,
    /// ...unless they also match one of these.
    pub frozen: Vec<String>,
    pub data_mode: DataMode,
    /// Stage 1 reconstructs the person from the garment alone: the control
    /// input is fully masked.
    pub full_mask: bool,
    pub k_max: usize,
    pub stride_range: (usize, usize),
    pub clip_frames: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

/// Layers frozen in every stage.
pub const ALWAYS_FROZEN: [&str; 2] = ["*.pca.*", "*.ff.*"];
pub const DENOISER_SSA: &str = "denoiser.blocks.*.ssa.*";

fn stage_config(stage: u8, p: &StageParams, data: &DataConfig) -> StageConfig {
    let mut frozen: Vec<String> = ALWAYS_FROZEN.iter().map(|s| s.to_string()).collect();
    let (trainable, data_mode, full_mask) = match stage {
        1 => (vec!["garment_extractor.*".to_string()], DataMode::SingleFrame, true),
        2 => {
            frozen.push(DENOISER_SSA.into());
            (vec!["*".to_string()], DataMode::SingleFrame, false)
        }
        _ => {
            frozen.push(DENOISER_SSA.into());
            (vec!["*".to_string()], DataMode::Video, false)
        }
    };
    let video = data_mode == DataMode::Video;
    StageConfig {
        stage,
        trainable,
        frozen,
        data_mode,
        full_mask,
        k_max: if video { data.k_max } else { 0 },
        stride_range: if video { data.stride_range } else { (1, 1) },
        clip_frames: if video { data.clip_frames } else { 1 },
        steps: p.steps,
        learning_rate: p.learning_rate,
        batch_size: p.batch_size,
        weight_decay: p.weight_decay,
        grad_clip: p.grad_clip,
    }
}

pub fn build_stage_configs(cfg: &ExperimentConfig) -> [StageConfig; 3] {
    [
        stage_config(1, &cfg.stage1, &cfg.data),
        stage_config(2, &cfg.stage2, &cfg.data),
        stage_config(3, &cfg.stage3, &cfg.data),
    ]
}

/// Parameters split by a stage's selectors, sorted by name.
pub struct FreezeView {
    pub trainable: Vec<(String, Var)>,
    pub frozen: Vec<(String, Var)>,
}

pub fn freeze_apply(stack: &ModelStack, trainable: &[String], frozen: &[String]) -> Result<FreezeView> {
    let data = stack.varmap.data().lock().unwrap();
    for pattern in trainable.iter().chain(frozen) {
        if !data.keys().any(|n| glob_match(pattern, n)) {
            return Err(Error::Config(format!("selector {pattern} matches no parameter")));
        }
    }
    let mut view = FreezeView { trainable: Vec::new(), frozen: Vec::new() };
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    for name in names {
        let var = data[name].clone();
        let on = trainable.iter().any(|p| glob_match(p, name)) && !frozen.iter().any(|p| glob_match(p, name));
        if on {
            view.trainable.push((name.clone(), var));
        } else {
            view.frozen.push((name.clone(), var));
        }
    }
    Ok(view)
}

/// AdamW with decoupled weight decay. Moment estimates are keyed by
/// parameter name so they can be checkpointed.
#[derive(Debug, Default)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub first: HashMap<String, Tensor>,
    pub second: HashMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, ..Default::default() }
    }

    /// Applies one update to `params` from `grads`. Parameters without a
    /// gradient are left alone.
    pub fn apply(&mut self, params: &[(String, Var)], grads: &HashMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params {
            let Some(g) = grads.get(name) else { continue };
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - self.lr * self.weight_decay))?;
            var.set(&(decayed - (update * self.lr)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Collects the gradients of `params` and rescales them to a global L2 norm
/// of at most `max_norm`. Returns the gradients and the pre-clip norm.
pub fn clipped_grads(
    grads: &GradStore,
    params: &[(String, Var)],
    max_norm: f64,
) -> Result<(HashMap<String, Tensor>, f64)> {
    let mut out = HashMap::new();
    let mut sq = 0.0;
    for (name, var) in params {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            out.insert(name.clone(), g.clone());
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in out.values_mut() {
            *g = (&*g * s)?;
        }
    }
    Ok((out, norm))
}

/// A scene pre-encoded to latent space.
#[derive(Debug, Clone)]
pub struct LatentScene {
    /// `F × h × w × 4` ground-truth latents.
    pub frames: Tensor,
    pub agnostic: Tensor,
    pub pose: Tensor,
    /// `F × h × w × 1` inpainting mask, nearest-neighbour resized.
    pub mask: Tensor,
    /// Codec image of a neutral frame, `1 × h × w × 4`.
    pub neutral: Tensor,
    /// `1 × H × W × 3` garment image in pixel space.
    pub garment_image: Tensor,
}

impl LatentScene {
    pub fn encode(scene: &RenderedScene, codec: &Codec) -> Result<Self> {
        let all: Vec<usize> = (0..scene.total_frames()).collect();
        Self::from_tuple(&scene.frames, &scene.tuple(&all)?, codec)
    }

    /// Encodes pixel frames `F × H × W × 3` and their conditioning tuple.
    pub fn from_tuple(frames: &Tensor, tuple: &ConditioningTuple, codec: &Codec) -> Result<Self> {
        let (_, h, w, _) = frames.dims4()?;
        Ok(Self {
            frames: codec.encode_tensor(frames)?,
            agnostic: codec.encode_tensor(&tuple.agnostic)?,
            pose: codec.encode_tensor(&tuple.pose)?,
            mask: downsample_mask(&tuple.mask)?,
            neutral: codec.encode_tensor(&Tensor::zeros((1, h, w, 3), DType::F32, &Device::Cpu)?)?,
            garment_image: tuple.garment.clone(),
        })
    }

    pub fn total_frames(&self) -> usize {
        self.frames.dims()[0]
    }

    fn select(t: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        Ok(t.index_select(&Tensor::new(idx.as_slice(), t.device())?, 0)?)
    }

    /// Control latent for `indices`. Positions listed in `swapped` get the
    /// ground-truth latent as agnostic input and a zero mask.
    pub fn control(&self, indices: &[usize], swapped: &[usize], full_mask: bool) -> Result<ControlInput> {
        let f = indices.len();
        let pose = Self::select(&self.pose, indices)?;
        if full_mask {
            let (_, h, w, c) = self.neutral.dims4()?;
            let agn = self.neutral.broadcast_as((f, h, w, c))?.contiguous()?;
            let mask = Tensor::ones((f, h, w, 1), self.mask.dtype(), self.mask.device())?;
            return ControlInput::from_parts(&agn, &pose, &mask);
        }
        let mut agn = Vec::with_capacity(f);
        let mut mask = Vec::with_capacity(f);
        for (pos, &i) in indices.iter().enumerate() {
            if swapped.contains(&pos) {
                agn.push(self.frames.get(i)?);
                mask.push(self.mask.get(i)?.zeros_like()?);
            } else {
                agn.push(self.agnostic.get(i)?);
                mask.push(self.mask.get(i)?);
            }
        }
        ControlInput::from_parts(&Tensor::stack(&agn, 0)?, &pose, &Tensor::stack(&mask, 0)?)
    }
}

/// One training example, as seen by the loss.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub scene: usize,
    pub indices: Vec<usize>,
    /// Clip positions whose control input was swapped.
    pub swapped: Vec<usize>,
    /// Denoising target, always from the unswapped frames.
    pub z0: Tensor,
    pub cond: ClipCondition,
}

pub struct Dataset {
    pub scenes: Vec<LatentScene>,
    pub codec: Codec,
    pub swap_pattern: SwapPattern,
    pub augment: bool,
}

impl Dataset {
    pub fn build_item(&self, stage: &StageConfig, rng: &mut ChaCha8Rng, dtype: DType) -> Result<BatchItem> {
        if self.scenes.is_empty() {
            return Err(Error::Data("dataset has no scenes".into()));
        }
        let scene_idx = rng.gen_range(0..self.scenes.len());
        let scene = &self.scenes[scene_idx];
        let f = stage.clip_frames;
        let (stride, start) = draw_stride_start(scene.total_frames(), f, stage.stride_range, rng)?;
        let indices: Vec<usize> = (0..f).map(|i| start + i * stride).collect();
        let k_cap = stage.k_max.min(f / 3);
        let k = if k_cap > 0 { rng.gen_range(0..=k_cap) } else { 0 };
        let swapped = choose_swap_indices(f, k, self.swap_pattern, rng)?;
        let garment = if self.augment {
            augment_garment(&scene.garment_image, rng)?
        } else {
            scene.garment_image.clone()
        };
        let garment_latent = self.codec.encode_tensor(&garment)?.to_dtype(dtype)?;
        let control = scene.control(&indices, &swapped, stage.full_mask)?;
        Ok(BatchItem {
            scene: scene_idx,
            z0: LatentScene::select(&scene.frames, &indices)?.to_dtype(dtype)?,
            cond: ClipCondition {
                control: Some(control.data.to_dtype(dtype)?),
                garment: Some(GarmentSource::Latent(garment_latent)),
                frame_indices: indices.clone(),
            },
            indices,
            swapped,
        })
    }
}

/// Mutable trainer state carried across steps and stages.
pub struct TrainerState {
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub optimizer: AdamW,
    pub losses: Vec<f64>,
}

impl TrainerState {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), step: 0, optimizer: AdamW::new(0.0, 0.0), losses: Vec::new() }
    }
}

/// Mean loss over one batch; returns the graph node for backprop.
pub fn batch_loss(
    stack: &ModelStack,
    data: &Dataset,
    stage: &StageConfig,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for _ in 0..stage.batch_size.max(1) {
        let item = data.build_item(stage, rng, stack.dtype)?;
        let t = rng.gen_range(1..=sched.steps);
        let noise = randn(item.z0.dims(), stack.dtype, rng, &stack.device)?;
        let z_t = q_sample(&item.z0, t, &noise, sched)?;
        let eps = stack.predict_noise(&z_t, t, &item.cond)?;
        let l = (eps - noise)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + l)?,
            None => l,
        });
    }
    Ok((total.expect("batch has at least one item") / stage.batch_size.max(1) as f64)?)
}

/// One optimisation step; returns the loss before the update.
pub fn train_step(
    stack: &ModelStack,
    data: &Dataset,
    stage: &StageConfig,
    view: &FreezeView,
    sched: &DiffusionSchedule,
    state: &mut TrainerState,
) -> Result<f64> {
    let loss = batch_loss(stack, data, stage, sched, &mut state.rng)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() || value > DIVERGENCE_LIMIT {
        return Err(Error::Divergence(format!("loss {value} at step {}", state.step)));
    }
    if !view.trainable.is_empty() {
        let grads = loss.backward()?;
        let (grads, _) = clipped_grads(&grads, &view.trainable, stage.grad_clip)?;
        state.optimizer.lr = stage.learning_rate;
        state.optimizer.weight_decay = stage.weight_decay;
        state.optimizer.apply(&view.trainable, &grads)?;
    }
    state.step += 1;
    state.losses.push(value);
    Ok(value)
}

/// Runs `stage.steps` steps. `on_step(step, loss)` may return `false` to
/// stop early.
pub fn train_stage(
    stack: &ModelStack,
    data: &Dataset,
    stage: &StageConfig,
    sched: &DiffusionSchedule,
    state: &mut TrainerState,
    mut on_step: impl FnMut(usize, f64) -> bool,
) -> Result<Vec<f64>> {
    let view = freeze_apply(stack, &stage.trainable, &stage.frozen)?;
    let mut history = Vec::with_capacity(stage.steps);
    for i in 0..stage.steps {
        let l = train_step(stack, data, stage, &view, sched, state)?;
        history.push(l);
        if !on_step(i, l) {
            break;
        }
    }
    Ok(history)
}

/// Writes `step,loss` rows.
pub fn write_loss_history(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{l}\n"));
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: u8,
    pub step: u64,
    pub config_hash: String,
    pub model: DenoiserConfig,
    pub rng: ChaCha8Rng,
    pub optimizer_step: u64,
    pub params: std::collections::BTreeMap<String, ParamRecord>,
}

pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes a checkpoint directory atomically (temporary directory, then
/// rename).
pub fn save_checkpoint(dir: &Path, stack: &ModelStack, state: &TrainerState, stage: u8, config_hash: &str) -> Result<PathBuf> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    stack.varmap.save(tmp.join(PARAMS_FILE))?;
    let mut opt: HashMap<String, Tensor> = HashMap::new();
    for (k, v) in &state.optimizer.first {
        opt.insert(format!("m.{k}"), v.clone());
    }
    for (k, v) in &state.optimizer.second {
        opt.insert(format!("v.{k}"), v.clone());
    }
    candle_core::safetensors::save(&opt, tmp.join(OPTIMIZER_FILE))?;
    let params = {
        let data = stack.varmap.data().lock().unwrap();
        data.iter()
            .map(|(n, v)| {
                (n.clone(), ParamRecord { shape: v.as_tensor().dims().to_vec(), dtype: format!("{:?}", v.dtype()).to_lowercase() })
            })
            .collect()
    };
    let manifest = CheckpointManifest {
        stage,
        step: state.step,
        config_hash: config_hash.to_owned(),
        model: stack.cfg,
        rng: state.rng.clone(),
        optimizer_step: state.optimizer.step,
        params,
    };
    std::fs::write(tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    if dir.exists() {
        std::fs::remove_dir_all(dir)?;
    }
    std::fs::rename(&tmp, dir)?;
    Ok(dir.to_path_buf())
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads parameters into `stack` and returns the restored trainer state.
pub fn load_checkpoint(dir: &Path, stack: &mut ModelStack) -> Result<(CheckpointManifest, TrainerState)> {
    let manifest = read_manifest(dir)?;
    if manifest.model != stack.cfg {
        return Err(Error::Checkpoint("checkpoint model config differs from the stack".into()));
    }
    stack.varmap.load(dir.join(PARAMS_FILE))?;
    let mut opt = candle_core::safetensors::load(dir.join(OPTIMIZER_FILE), &stack.device)?;
    let mut optimizer = AdamW::new(0.0, 0.0);
    optimizer.step = manifest.optimizer_step;
    for (k, v) in opt.drain() {
        if let Some(name) = k.strip_prefix("m.") {
            optimizer.first.insert(name.to_owned(), v);
        } else if let Some(name) = k.strip_prefix("v.") {
            optimizer.second.insert(name.to_owned(), v);
        }
    }
    let state = TrainerState { rng: manifest.rng.clone(), step: manifest.step, optimizer, losses: Vec::new() };
    Ok((manifest, state))
}
