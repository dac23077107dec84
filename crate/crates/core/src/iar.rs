//! Long-video generation by key frames plus auto-regressive filling.
//!
//! A plan first places one key frame at the start of each of `n` equal
//! divisions of the video. Key frames are denoised jointly as one short clip,
//! then windows of `L` frames sweep the video, advancing by `L − j`. Frames a
//! window did not generate itself (the overlap with earlier output, or a key
//! frame) enter through the agnostic channel with a zero mask and are not
//! rewritten.

use std::fmt;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, VideoTensor};
use crate::condition::{ClipCondition, GarmentSource};
use crate::config::InferenceMode;
use crate::controlnet::{build_control_input, ControlInput};
use crate::data::ConditioningTuple;
use crate::diffusion::{sample_loop, DiffusionSchedule, NoisePredictor, SampleMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FrameConditionSource {
    /// Generated in this window from the normal agnostic input.
    Agnostic,
    /// Produced by an earlier window; conditions with a zero mask.
    PreviousOutput,
    /// A key frame; conditions with a zero mask.
    Keyframe,
}

impl fmt::Display for FrameConditionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameConditionSource::Agnostic => "A",
            FrameConditionSource::PreviousOutput => "P",
            FrameConditionSource::Keyframe => "K",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub tags: Vec<FrameConditionSource>,
}

impl Window {
    pub fn generated(&self) -> impl Iterator<Item = usize> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == FrameConditionSource::Agnostic)
            .map(move |(i, _)| self.start + i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IarPlan {
    pub frames: usize,
    pub subvideos: usize,
    pub window: usize,
    pub overlap: usize,
    /// Empty when `subvideos == 1`: plain auto-regression has no key frames.
    pub keyframe_indices: Vec<usize>,
    pub iterations: Vec<Window>,
}

pub fn plan(frames: usize, subvideos: usize, window: usize, overlap: usize) -> Result<IarPlan> {
    if subvideos < 1 || subvideos > frames {
        return Err(Error::Config(format!("need 1 ≤ n ≤ f, got n={subvideos}, f={frames}")));
    }
    if window > frames || window == 0 {
        return Err(Error::Config(format!("window {window} must lie in [1, {frames}]")));
    }
    if overlap >= window {
        return Err(Error::Config(format!("overlap {overlap} leaves no room in a window of {window}")));
    }
    let keyframe_indices: Vec<usize> = if subvideos >= 2 {
        (0..subvideos).map(|i| frames * i / subvideos).collect()
    } else {
        Vec::new()
    };
    let mut is_key = vec![false; frames];
    for &k in &keyframe_indices {
        is_key[k] = true;
    }
    let mut done = vec![false; frames];
    let mut iterations = Vec::new();
    let mut start = 0;
    loop {
        let start_here = start.min(frames - window);
        let end = start_here + window;
        let tags: Vec<FrameConditionSource> = (start_here..end)
            .map(|i| {
                if is_key[i] {
                    FrameConditionSource::Keyframe
                } else if done[i] {
                    FrameConditionSource::PreviousOutput
                } else {
                    done[i] = true;
                    FrameConditionSource::Agnostic
                }
            })
            .collect();
        if tags.contains(&FrameConditionSource::Agnostic) {
            iterations.push(Window { start: start_here, end, tags });
        }
        if end == frames {
            break;
        }
        start = start_here + window - overlap;
    }
    Ok(IarPlan { frames, subvideos, window, overlap, keyframe_indices, iterations })
}

impl IarPlan {
    /// Number of generation passes: one for the key frames (if any) plus
    /// one per fill window.
    pub fn passes(&self) -> usize {
        self.iterations.len() + usize::from(!self.keyframe_indices.is_empty())
    }

    /// Text table of windows and their per-frame tags.
    pub fn table(&self) -> String {
        let mut s = format!(
            "frames={} subvideos={} window={} overlap={}\nkeyframes: {:?}\n",
            self.frames, self.subvideos, self.window, self.overlap, self.keyframe_indices
        );
        s.push_str("iter\tstart\tend\ttags\n");
        for (i, w) in self.iterations.iter().enumerate() {
            let tags: String = w.tags.iter().map(|t| t.to_string()).collect();
            s.push_str(&format!("{i}\t{}\t{}\t{tags}\n", w.start, w.end));
        }
        s
    }
}

/// Conditions for every frame of a long video, in latent space.
#[derive(Debug, Clone)]
pub struct LongCondition {
    /// `F × h × w × 9` control latent with the normal agnostic inputs.
    pub control: Tensor,
    pub garment: GarmentSource,
}

impl LongCondition {
    pub fn from_tuple(tuple: &ConditioningTuple, codec: &Codec, garment: GarmentSource) -> Result<Self> {
        Ok(Self { control: build_control_input(tuple, codec)?.data, garment })
    }

    pub fn frames(&self) -> usize {
        self.control.dims()[0]
    }

    fn select(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        Ok(self.control.index_select(&Tensor::new(idx.as_slice(), self.control.device())?, 0)?)
    }

    fn clip(&self, indices: Vec<usize>, control: Tensor) -> ClipCondition {
        ClipCondition { control: Some(control), garment: Some(self.garment.clone()), frame_indices: indices }
    }
}

/// Sampling settings shared by every pass.
#[derive(Debug, Clone)]
pub struct SamplerSettings<'a> {
    pub schedule: &'a DiffusionSchedule,
    pub mode: SampleMode,
    pub dtype: DType,
    pub device: Device,
}

fn latent_shape(cond: &LongCondition, frames: usize) -> Result<Vec<usize>> {
    let (_, h, w, _) = cond.control.dims4()?;
    Ok(vec![frames, h, w, crate::codec::LATENT_CHANNELS])
}

/// Generates the key frames jointly as one strided clip.
pub fn generate_keyframes<M: NoisePredictor + ?Sized>(
    plan: &IarPlan,
    model: &M,
    cond: &LongCondition,
    sampler: &SamplerSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = plan.keyframe_indices.len();
    if n == 0 {
        return Err(Error::Config("plan has no key frames".into()));
    }
    let clip = cond.clip(plan.keyframe_indices.clone(), cond.select(&plan.keyframe_indices)?);
    sample_loop(model, &latent_shape(cond, n)?, &clip, sampler.schedule, rng, sampler.mode, sampler.dtype, &sampler.device)
}

/// Fills every frame the key-frame pass did not produce. Returns the
/// assembled latent video and the condition tags each window actually used.
pub fn ar_fill<M: NoisePredictor + ?Sized>(
    plan: &IarPlan,
    keyframes: Option<&Tensor>,
    model: &M,
    cond: &LongCondition,
    sampler: &SamplerSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Vec<Vec<FrameConditionSource>>)> {
    if cond.frames() < plan.frames {
        return Err(Error::Config(format!("conditions cover {} of {} frames", cond.frames(), plan.frames)));
    }
    let mut out: Vec<Option<Tensor>> = vec![None; plan.frames];
    if let Some(k) = keyframes {
        for (pos, &idx) in plan.keyframe_indices.iter().enumerate() {
            out[idx] = Some(k.get(pos)?);
        }
    }
    let mut used = Vec::with_capacity(plan.iterations.len());
    for w in &plan.iterations {
        let indices: Vec<usize> = (w.start..w.end).collect();
        let base = cond.select(&indices)?;
        let mut rows = Vec::with_capacity(indices.len());
        let mut tags = Vec::with_capacity(indices.len());
        for (pos, &idx) in indices.iter().enumerate() {
            let tag = w.tags[pos];
            let row = base.get(pos)?;
            match tag {
                FrameConditionSource::Agnostic => rows.push(row),
                FrameConditionSource::PreviousOutput | FrameConditionSource::Keyframe => {
                    let Some(prev) = &out[idx] else {
                        return Err(Error::Config(format!("frame {idx} tagged {tag:?} has not been generated")));
                    };
                    rows.push(substitute(&row, prev)?);
                }
            }
            tags.push(tag);
        }
        let control = Tensor::stack(&rows, 0)?;
        let clip = cond.clip(indices.clone(), control);
        let z = sample_loop(model, &latent_shape(cond, indices.len())?, &clip, sampler.schedule, rng, sampler.mode, sampler.dtype, &sampler.device)?;
        for idx in w.generated() {
            out[idx] = Some(z.get(idx - w.start)?);
        }
        used.push(tags);
    }
    let frames = out
        .into_iter()
        .enumerate()
        .map(|(i, f)| f.ok_or_else(|| Error::Config(format!("frame {i} was never generated"))))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&frames, 0)?, used))
}

/// Control row `h × w × 9` with the agnostic latent replaced by `latent` and
/// a zero mask.
fn substitute(row: &Tensor, latent: &Tensor) -> Result<Tensor> {
    let c = crate::codec::LATENT_CHANNELS;
    let pose = row.narrow(2, c, c)?;
    let mask = row.narrow(2, 2 * c, 1)?.zeros_like()?;
    Ok(Tensor::cat(&[&latent.to_dtype(row.dtype())?, &pose, &mask], 2)?)
}

/// Generates `frames` latent frames in the requested mode.
#[allow(clippy::too_many_arguments)]
pub fn generate_long_latent<M: NoisePredictor + ?Sized>(
    mode: InferenceMode,
    frames: usize,
    window: usize,
    overlap: usize,
    subvideos: usize,
    model: &M,
    cond: &LongCondition,
    sampler: &SamplerSettings,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, IarPlan)> {
    let single = frames <= window || mode == InferenceMode::Clip;
    let p = if single {
        plan(frames, 1, frames, 0)?
    } else if mode == InferenceMode::Ar {
        plan(frames, 1, window, overlap)?
    } else {
        plan(frames, subvideos, window, overlap)?
    };
    let keys = if p.keyframe_indices.is_empty() {
        None
    } else {
        Some(generate_keyframes(&p, model, cond, sampler, rng)?)
    };
    let (z, _) = ar_fill(&p, keys.as_ref(), model, cond, sampler, rng)?;
    Ok((z, p))
}

/// [`generate_long_latent`] followed by decoding.
#[allow(clippy::too_many_arguments)]
pub fn generate_long<M: NoisePredictor + ?Sized>(
    mode: InferenceMode,
    frames: usize,
    window: usize,
    overlap: usize,
    subvideos: usize,
    model: &M,
    cond: &LongCondition,
    codec: &Codec,
    sampler: &SamplerSettings,
    rng: &mut ChaCha8Rng,
) -> Result<VideoTensor> {
    let (z, _) = generate_long_latent(mode, frames, window, overlap, subvideos, model, cond, sampler, rng)?;
    codec.decode(&crate::codec::VideoLatent::new(z.to_dtype(DType::F32)?)?)
}

/// Builds the control input for a clip from a tuple (normal agnostic path).
pub fn clip_control(tuple: &ConditioningTuple, codec: &Codec) -> Result<ControlInput> {
    build_control_input(tuple, codec)
}
