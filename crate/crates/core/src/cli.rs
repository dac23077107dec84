//! Command line front end. Each run lives in one experiment directory:
//!
//! ```text
//! <out>/config.toml
//! <out>/data/           synthetic scenes and index.json
//! <out>/checkpoints/    stage1, stage2, stage3
//! <out>/samples/        generated latents, videos and frames
//! <out>/reports/        evaluation reports and IAR plans
//! <out>/logs/           loss histories
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, VideoLatent};
use crate::condition::GarmentSource;
use crate::config::{ExperimentConfig, InferenceMode};
use crate::data::{render_scene, ConditioningTuple, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::iar::{generate_long_latent, plan, LongCondition, SamplerSettings};
use crate::io::{export_frames, read_array, write_array, write_atomic};
use crate::metrics::{clip_ssim, perceptual_distance, vfid, FeatureExtractor};
use crate::stack::ModelStack;
use crate::training::{
    build_stage_configs, load_checkpoint, read_manifest, save_checkpoint, train_stage, write_loss_history,
    Dataset, LatentScene, TrainerState,
};

const CHECKPOINT_EVERY: usize = 100;
const PIXEL_RANGE: (f32, f32) = (-1.0, 1.0);

#[derive(Debug, Parser)]
#[command(name = "vitondit", version, about = "Video virtual try-on with a spatio-temporal diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML experiment config. Defaults to `<out>/config.toml`, then to the
    /// built-in desk-scale config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    /// Proceed even when artifact config hashes disagree.
    #[arg(long)]
    pub allow_mismatch: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic scene set.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: u8,
        /// Continue from this stage's own checkpoint.
        #[arg(long)]
        resume: bool,
        /// Replace a different config already stored in the experiment.
        #[arg(long)]
        force: bool,
    },
    /// Generate a video from the latest checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<InferenceMode>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long)]
        subvideos: Option<usize>,
        /// Scene supplying the person, pose and garment conditions.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
    /// Print the interpolated auto-regressive plan table.
    PlanIar {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        overlap: Option<usize>,
        #[arg(long)]
        subvideos: Option<usize>,
        /// Also write the table to `<out>/reports/plan_iar.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare real and generated videos.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `.npy` video or a directory of them.
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, default_value = "ssim,lpips,vfid")]
        metrics: String,
        #[arg(long, default_value = "random3d:0")]
        extractor: String,
    },
}

/// Parses `args` and runs the command; the error carries the exit code.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common, force } => cmd_synth_data(&Experiment::open(&common, force)?, force),
        Command::Train { common, stage, resume, force } => {
            cmd_train(&Experiment::open(&common, force)?, stage, resume, common.allow_mismatch)
        }
        Command::Infer { common, mode, frames, window, overlap, subvideos, scene } => {
            let exp = Experiment::open(&common, false)?;
            let mut inf = exp.cfg.inference.clone();
            inf.mode = mode.unwrap_or(inf.mode);
            inf.frames = frames.unwrap_or(inf.frames);
            inf.window = window.unwrap_or(inf.window);
            inf.overlap = overlap.unwrap_or(inf.overlap);
            inf.subvideos = subvideos.unwrap_or(inf.subvideos);
            cmd_infer(&exp, &inf, scene, common.allow_mismatch).map(|_| ())
        }
        Command::PlanIar { config, frames, window, overlap, subvideos, out } => {
            let cfg = match &config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::desk(),
            };
            let inf = &cfg.inference;
            let p = plan(
                frames.unwrap_or(inf.frames),
                subvideos.unwrap_or(inf.subvideos),
                window.unwrap_or(inf.window),
                overlap.unwrap_or(inf.overlap),
            )?;
            let table = p.table();
            print!("{table}");
            if let Some(out) = out {
                let dir = out.join("reports");
                std::fs::create_dir_all(&dir)?;
                write_atomic(&dir.join("plan_iar.txt"), table.as_bytes())?;
            }
            Ok(())
        }
        Command::Eval { common, real, gen, metrics, extractor } => {
            let exp = Experiment::open(&common, false)?;
            let report = cmd_eval(&exp, &real, &gen, &metrics, &extractor, common.allow_mismatch)?;
            print!("{report}");
            Ok(())
        }
    }
}

/// An opened experiment directory with its resolved config.
pub struct Experiment {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    pub hash: String,
}

impl Experiment {
    /// Resolves the config and creates the directory layout. A config that
    /// differs from the stored copy is refused unless `replace` is set.
    pub fn open(common: &Common, replace: bool) -> Result<Self> {
        let stored = common.out.join("config.toml");
        let mut cfg = match (&common.config, stored.exists()) {
            (Some(p), _) => ExperimentConfig::load(p)?,
            (None, true) => ExperimentConfig::load(&stored)?,
            (None, false) => ExperimentConfig::desk(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        if stored.exists() {
            let prev = ExperimentConfig::load(&stored)?;
            if prev.hash() != cfg.hash() && !replace && !common.allow_mismatch {
                return Err(Error::Config(format!(
                    "{} holds a different config ({}); pass --force to replace it",
                    stored.display(),
                    &prev.hash()[..12]
                )));
            }
        }
        for sub in ["checkpoints", "samples", "reports", "logs"] {
            std::fs::create_dir_all(common.out.join(sub))?;
        }
        write_atomic(&stored, cfg.to_toml()?.as_bytes())?;
        let hash = cfg.hash();
        Ok(Self { dir: common.out.clone(), cfg, hash })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.dir.join("data")
    }

    pub fn checkpoint_dir(&self, stage: u8) -> PathBuf {
        self.dir.join("checkpoints").join(format!("stage{stage}"))
    }

    fn codec(&self) -> Result<Codec> {
        Codec::from_spec(&self.cfg.codec, &Device::Cpu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub index: usize,
    pub seed: u64,
    pub dir: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config_hash: String,
    pub scenes: Vec<SceneRecord>,
}

const SCENE_ARRAYS: [&str; 5] = ["frames", "agnostic", "pose", "mask", "garment"];

/// Renders `data.scenes` scenes under `<out>/data`. The set is rendered into a
/// sibling directory first and moved into place.
pub fn cmd_synth_data(exp: &Experiment, force: bool) -> Result<()> {
    let target = exp.data_dir();
    if target.exists() && !force {
        return Err(Error::Data(format!("{} already exists; pass --force to replace it", target.display())));
    }
    let tmp = exp.dir.join("data.tmp");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    let d = &exp.cfg.data;
    let mut rng = ChaCha8Rng::seed_from_u64(exp.cfg.seed);
    let mut records = Vec::with_capacity(d.scenes);
    for i in 0..d.scenes {
        let seed: u64 = rng.gen();
        let spec = SyntheticSceneSpec::random(seed, d.height, d.width, d.total_frames);
        let scene = render_scene(&spec)?;
        let all: Vec<usize> = (0..d.total_frames).collect();
        let tuple = scene.tuple(&all)?;
        let name = format!("scene_{i:03}");
        let dir = tmp.join(&name);
        let h = Some(exp.hash.as_str());
        write_array(&dir.join("frames.npy"), &scene.frames, Some(8.0), PIXEL_RANGE, h)?;
        write_array(&dir.join("agnostic.npy"), &tuple.agnostic, Some(8.0), PIXEL_RANGE, h)?;
        write_array(&dir.join("pose.npy"), &tuple.pose, Some(8.0), PIXEL_RANGE, h)?;
        write_array(&dir.join("mask.npy"), &tuple.mask, None, (0.0, 1.0), h)?;
        write_array(&dir.join("garment.npy"), &tuple.garment, None, PIXEL_RANGE, h)?;
        std::fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
        records.push(SceneRecord { index: i, seed, dir: name, frames: d.total_frames, height: d.height, width: d.width });
    }
    let index = DatasetIndex { config_hash: exp.hash.clone(), scenes: records };
    std::fs::write(tmp.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    if target.exists() {
        std::fs::remove_dir_all(&target)?;
    }
    std::fs::rename(&tmp, &target)?;
    eprintln!("wrote {} scenes to {}", d.scenes, target.display());
    Ok(())
}

/// Pixel-space arrays of one stored scene.
pub struct StoredScene {
    pub frames: Tensor,
    pub tuple: ConditioningTuple,
}

pub fn load_scenes(exp: &Experiment, allow_mismatch: bool) -> Result<Vec<StoredScene>> {
    let dir = exp.data_dir();
    let text = std::fs::read_to_string(dir.join("index.json"))
        .map_err(|e| Error::Data(format!("no dataset in {} ({e}); run synth-data first", dir.display())))?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    if index.config_hash != exp.hash && !allow_mismatch {
        return Err(Error::Config("dataset was rendered under a different config".into()));
    }
    index
        .scenes
        .iter()
        .map(|r| {
            let d = dir.join(&r.dir);
            let mut arrays = SCENE_ARRAYS.iter().map(|n| read_array(&d.join(format!("{n}.npy"))).map(|(t, _)| t));
            let mut next = || arrays.next().expect("five scene arrays");
            let frames = next()?;
            Ok(StoredScene {
                frames,
                tuple: ConditioningTuple { agnostic: next()?, pose: next()?, mask: next()?, garment: next()? },
            })
        })
        .collect()
}

fn check_hash(found: &str, expected: &str, what: &str, allow_mismatch: bool) -> Result<()> {
    if found != expected {
        eprintln!("warning: {what} config hash {} differs from {}", &found[..12.min(found.len())], &expected[..12]);
        if !allow_mismatch {
            return Err(Error::Config(format!("{what} belongs to a different config; pass --allow-mismatch to proceed")));
        }
    }
    Ok(())
}

pub fn cmd_train(exp: &Experiment, stage: u8, resume: bool, allow_mismatch: bool) -> Result<()> {
    exp.cfg.stage(stage)?;
    let stage_cfg = build_stage_configs(&exp.cfg)[stage as usize - 1].clone();
    let device = Device::Cpu;
    let mut stack = ModelStack::new(exp.cfg.model, exp.cfg.seed, DType::F32, &device)?;
    let own = exp.checkpoint_dir(stage);
    let mut state = TrainerState::new(exp.cfg.seed.wrapping_add(stage as u64));
    let log = exp.dir.join("logs").join(format!("stage{stage}_loss.csv"));
    let mut losses = Vec::new();
    if resume && own.exists() {
        let m = read_manifest(&own)?;
        check_hash(&m.config_hash, &exp.hash, "checkpoint", allow_mismatch)?;
        state = load_checkpoint(&own, &mut stack)?.1;
        losses = read_losses(&log)?;
        losses.truncate(state.step as usize);
    } else if stage > 1 {
        let prior = exp.checkpoint_dir(stage - 1);
        if !prior.exists() {
            return Err(Error::Checkpoint(format!(
                "stage {stage} needs the stage {} checkpoint at {}",
                stage - 1,
                prior.display()
            )));
        }
        let m = read_manifest(&prior)?;
        check_hash(&m.config_hash, &exp.hash, "checkpoint", allow_mismatch)?;
        load_checkpoint(&prior, &mut stack)?;
    }
    let codec = exp.codec()?;
    let scenes = load_scenes(exp, allow_mismatch)?
        .iter()
        .map(|s| LatentScene::from_tuple(&s.frames, &s.tuple, &codec))
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset { scenes, codec, swap_pattern: exp.cfg.data.swap_pattern, augment: exp.cfg.data.augment_garment };
    let sched = exp.cfg.diffusion.schedule()?;
    while (state.step as usize) < stage_cfg.steps {
        let mut chunk = stage_cfg.clone();
        chunk.steps = CHECKPOINT_EVERY.min(stage_cfg.steps - state.step as usize);
        let first = state.step;
        let h = train_stage(&stack, &data, &chunk, &sched, &mut state, |i, l| {
            let step = first as usize + i + 1;
            if step % 10 == 0 {
                eprintln!("stage {stage} step {step}/{} loss {l:.5}", stage_cfg.steps);
            }
            true
        })?;
        losses.extend(h);
        save_checkpoint(&own, &stack, &state, stage, &exp.hash)?;
        write_loss_history(&log, &losses)?;
    }
    if stage_cfg.steps == 0 {
        save_checkpoint(&own, &stack, &state, stage, &exp.hash)?;
        write_loss_history(&log, &losses)?;
    }
    eprintln!("stage {stage} checkpoint at {}", own.display());
    Ok(())
}

fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let Ok(text) = std::fs::read_to_string(path) else { return Ok(Vec::new()) };
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Data(format!("bad loss row {l:?} in {}", path.display())))
        })
        .collect()
}

pub fn cmd_infer(
    exp: &Experiment,
    inf: &crate::config::InferenceConfig,
    scene: usize,
    allow_mismatch: bool,
) -> Result<PathBuf> {
    let device = Device::Cpu;
    let ckpt = (1..=3u8)
        .rev()
        .map(|s| exp.checkpoint_dir(s))
        .find(|d| d.exists())
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", exp.dir.join("checkpoints").display())))?;
    let m = read_manifest(&ckpt)?;
    check_hash(&m.config_hash, &exp.hash, "checkpoint", allow_mismatch)?;
    let mut stack = ModelStack::new(exp.cfg.model, exp.cfg.seed, DType::F32, &device)?;
    load_checkpoint(&ckpt, &mut stack)?;
    if inf.mode == InferenceMode::Clip && inf.frames > exp.cfg.model.max_frames {
        return Err(Error::Config(format!(
            "clip mode generates at most {} frames, asked for {}",
            exp.cfg.model.max_frames, inf.frames
        )));
    }
    let scenes = load_scenes(exp, allow_mismatch)?;
    let stored = scenes.get(scene).ok_or_else(|| Error::Data(format!("scene {scene} not in dataset")))?;
    if inf.frames > stored.frames.dims()[0] {
        return Err(Error::Data(format!("scene {scene} has {} frames, asked for {}", stored.frames.dims()[0], inf.frames)));
    }
    let codec = exp.codec()?;
    let latent = LatentScene::from_tuple(&stored.frames, &stored.tuple, &codec)?;
    let indices: Vec<usize> = (0..inf.frames).collect();
    let control = latent.control(&indices, &[], false)?;
    let garment = stack.garment_features(&codec.encode_tensor(&stored.tuple.garment)?)?;
    let cond = LongCondition { control: control.data, garment: GarmentSource::Features(Arc::new(garment)) };
    let sched = exp.cfg.diffusion.schedule()?;
    let sampler = SamplerSettings { schedule: &sched, mode: exp.cfg.diffusion.sample_mode, dtype: DType::F32, device: device.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(exp.cfg.seed);
    let (z, p) = generate_long_latent(inf.mode, inf.frames, inf.window, inf.overlap, inf.subvideos, &stack, &cond, &sampler, &mut rng)?;
    let video = codec.decode(&VideoLatent::new(z.clone())?)?;
    let mode = format!("{:?}", inf.mode).to_lowercase();
    let out = exp.dir.join("samples").join(&mode);
    let h = Some(exp.hash.as_str());
    write_array(&out.join("latents.npy"), &z, None, (f32::NEG_INFINITY, f32::INFINITY), h)?;
    write_array(&out.join("video.npy"), &video.data, Some(video.fps), PIXEL_RANGE, h)?;
    let idx = Tensor::new(indices.iter().map(|&i| i as u32).collect::<Vec<_>>().as_slice(), &device)?;
    write_array(&out.join("real.npy"), &stored.frames.index_select(&idx, 0)?, Some(video.fps), PIXEL_RANGE, h)?;
    export_frames(&out.join("frames"), &video.data)?;
    if inf.mode == InferenceMode::Iar {
        write_atomic(&out.join("plan.txt"), p.table().as_bytes())?;
    }
    eprintln!("wrote {} frames to {}", inf.frames, out.display());
    Ok(out)
}

fn read_videos(path: &Path) -> Result<Vec<(Tensor, Option<String>)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "npy"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no .npy videos in {}", path.display())));
    }
    files
        .iter()
        .map(|f| {
            let (t, m) = read_array(f)?;
            if t.rank() != 4 {
                return Err(Error::Data(format!("{} is not an f×H×W×3 video", f.display())));
            }
            Ok((t.to_dtype(DType::F32)?, m.config_hash))
        })
        .collect()
}

/// Splits videos into non-overlapping clips of `len` frames.
fn split_clips(videos: &[Tensor], len: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for v in videos {
        let f = v.dims()[0];
        let len = len.min(f);
        for s in (0..=f - len).step_by(len) {
            out.push(v.narrow(0, s, len)?);
        }
    }
    Ok(out)
}

pub fn cmd_eval(
    exp: &Experiment,
    real: &Path,
    gen: &Path,
    metrics: &str,
    extractor: &str,
    allow_mismatch: bool,
) -> Result<String> {
    let real = read_videos(real)?;
    let gen = read_videos(gen)?;
    let hashes: Vec<&Option<String>> = real.iter().chain(&gen).map(|(_, h)| h).collect();
    if hashes.windows(2).any(|w| w[0] != w[1]) && !allow_mismatch {
        return Err(Error::Config("real and generated artifacts carry different config hashes".into()));
    }
    let real: Vec<Tensor> = real.into_iter().map(|(t, _)| t).collect();
    let gen: Vec<Tensor> = gen.into_iter().map(|(t, _)| t).collect();
    let video_ex: FeatureExtractor = extractor.parse()?;
    let clip_len = exp.cfg.data.clip_frames;
    let mut report = format!(
        "config_hash: {}\nextractor: {}\nvfid_convention: whole clips of {clip_len} frames, per-layer channel means\nreal_videos: {}\ngen_videos: {}\n",
        exp.hash,
        video_ex.id,
        real.len(),
        gen.len()
    );
    for metric in metrics.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let value = match metric {
            "ssim" | "lpips" => {
                if real.len() != gen.len() {
                    return Err(Error::Data(format!("{metric} needs paired videos, got {} and {}", real.len(), gen.len())));
                }
                let mut total = 0.0;
                let mut count = 0usize;
                let image_ex = FeatureExtractor::random_image(video_ex.seed);
                for (a, b) in real.iter().zip(&gen) {
                    if a.dims() != b.dims() {
                        return Err(Error::Data(format!("paired videos differ: {:?} vs {:?}", a.dims(), b.dims())));
                    }
                    if metric == "ssim" {
                        total += clip_ssim(a, b)?;
                        count += 1;
                    } else {
                        for i in 0..a.dims()[0] {
                            total += perceptual_distance(&a.get(i)?, &b.get(i)?, &image_ex)?;
                            count += 1;
                        }
                    }
                }
                total / count as f64
            }
            "vfid" => {
                let (rc, gc) = (split_clips(&real, clip_len)?, split_clips(&gen, clip_len)?);
                report.push_str(&format!("real_clips: {}\ngen_clips: {}\n", rc.len(), gc.len()));
                vfid(&rc, &gc, &video_ex)?
            }
            other => return Err(Error::Config(format!("unknown metric {other}"))),
        };
        report.push_str(&format!("{metric}: {value:.6}\n"));
    }
    write_atomic(&exp.dir.join("reports").join("eval.txt"), report.as_bytes())?;
    Ok(report)
}
