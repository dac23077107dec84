//! Criteria that need a trained desk-scale model. The model is trained once
//! and shared between the overfit smoke test and the IAR/AR drift comparison.

use std::sync::Arc;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vitondit::codec::{Codec, VideoLatent};
use vitondit::condition::GarmentSource;
use vitondit::config::{ExperimentConfig, InferenceMode};
use vitondit::data::{render_scene, SyntheticSceneSpec};
use vitondit::diffusion::{randn, DiffusionSchedule};
use vitondit::iar::{generate_long_latent, LongCondition, SamplerSettings};
use vitondit::metrics::{clip_ssim, vfid, FeatureExtractor};
use vitondit::stack::ModelStack;
use vitondit::training::{build_stage_configs, train_stage, Dataset, LatentScene, TrainerState};

use super::Check;

const SCENES: u64 = 4;
const SCENE_SEED: u64 = 100;
const TOTAL_FRAMES: usize = 24;
const BATCH: usize = 4;
const STAGE1_STEPS: usize = 50;
const STAGE2_STEPS: usize = 1000;
const EARLY_LR: f64 = 1e-3;
/// Stage-3 learning-rate phases; their step counts sum to the 2000-step budget.
const STAGE3_PHASES: [(usize, f64); 3] = [(800, 1e-3), (800, 3e-4), (400, 1e-4)];
const LOSS_WINDOW: usize = 50;
const LOSS_RATIO: f64 = 0.05;
const SSIM_MIN: f64 = 0.85;
const HELD_IN_FRAMES: usize = 8;
const SAMPLE_SEED: u64 = 7;

const DRIFT_SEEDS: u64 = 5;
/// Per-tensor Gaussian weight noise, relative to the tensor's RMS.
const WEIGHT_NOISE: f64 = 0.05;
const DRIFT_WINDOW: usize = 8;
const DRIFT_OVERLAP: usize = 2;
const DRIFT_SUBVIDEOS: usize = 3;
const VFID_CLIP: usize = 8;
const VFID_EXTRACTOR: &str = "random3d:0";

pub struct Trained {
    stack: ModelStack,
    data: Dataset,
    schedule: DiffusionSchedule,
    cfg: ExperimentConfig,
    initial_loss: f64,
    /// First stage-3 step whose trailing mean fell below the target.
    crossed_at: Option<usize>,
    final_mean: f64,
    secs: f64,
}

#[derive(Default)]
pub struct Shared {
    trained: Option<Trained>,
}

fn trailing_mean(h: &[f64]) -> f64 {
    let w = &h[h.len().saturating_sub(LOSS_WINDOW)..];
    w.iter().sum::<f64>() / w.len() as f64
}

fn train() -> Result<Trained, Box<dyn std::error::Error>> {
    let t0 = Instant::now();
    let dev = Device::Cpu;
    let mut cfg = ExperimentConfig::desk();
    cfg.data.total_frames = TOTAL_FRAMES;
    cfg.data.augment_garment = false;
    let codec = Codec::from_spec(&cfg.codec, &dev)?;
    let scenes = (0..SCENES)
        .map(|i| {
            let spec = SyntheticSceneSpec::random(SCENE_SEED + i, cfg.data.height, cfg.data.width, TOTAL_FRAMES);
            LatentScene::encode(&render_scene(&spec)?, &codec)
        })
        .collect::<vitondit::Result<Vec<_>>>()?;
    let data = Dataset { scenes, codec, swap_pattern: cfg.data.swap_pattern, augment: false };
    let stack = ModelStack::new(cfg.model, cfg.seed, DType::F32, &dev)?;
    let schedule = cfg.diffusion.schedule()?;
    let mut state = TrainerState::new(1);
    let [mut s1, mut s2, s3] = build_stage_configs(&cfg);
    for (stage, steps) in [(&mut s1, STAGE1_STEPS), (&mut s2, STAGE2_STEPS)] {
        stage.steps = steps;
        stage.batch_size = BATCH;
        stage.learning_rate = EARLY_LR;
        train_stage(&stack, &data, stage, &schedule, &mut state, |_, _| true)?;
    }
    let mut history: Vec<f64> = Vec::new();
    let mut crossed_at = None;
    for (steps, lr) in STAGE3_PHASES {
        let mut stage = s3.clone();
        stage.steps = steps;
        stage.batch_size = BATCH;
        stage.learning_rate = lr;
        train_stage(&stack, &data, &stage, &schedule, &mut state, |_, l| {
            history.push(l);
            if crossed_at.is_none() && history.len() >= LOSS_WINDOW && trailing_mean(&history) < LOSS_RATIO * history[0] {
                crossed_at = Some(history.len() - 1);
            }
            true
        })?;
    }
    Ok(Trained {
        stack,
        data,
        schedule,
        initial_loss: history[0],
        crossed_at,
        final_mean: trailing_mean(&history),
        cfg,
        secs: t0.elapsed().as_secs_f64(),
    })
}

fn trained(shared: &mut Shared) -> Result<&Trained, Box<dyn std::error::Error>> {
    if shared.trained.is_none() {
        shared.trained = Some(train()?);
    }
    Ok(shared.trained.as_ref().expect("just trained"))
}

fn condition(tr: &Trained, scene: usize, frames: usize) -> vitondit::Result<LongCondition> {
    let sc = &tr.data.scenes[scene];
    let indices: Vec<usize> = (0..frames).collect();
    let control = sc.control(&indices, &[], false)?;
    let garment = tr.stack.garment_features(&tr.data.codec.encode_tensor(&sc.garment_image)?)?;
    Ok(LongCondition { control: control.data, garment: GarmentSource::Features(Arc::new(garment)) })
}

fn decode(tr: &Trained, z: Tensor) -> vitondit::Result<Tensor> {
    Ok(tr.data.codec.decode(&VideoLatent::new(z)?)?.data)
}

fn sampler(tr: &Trained) -> SamplerSettings<'_> {
    SamplerSettings { schedule: &tr.schedule, mode: tr.cfg.diffusion.sample_mode, dtype: DType::F32, device: Device::Cpu }
}

pub fn overfit_smoke(shared: &mut Shared) -> Check {
    let tr = trained(shared)?;
    let target = LOSS_RATIO * tr.initial_loss;
    let mut scores = Vec::new();
    for scene in 0..tr.data.scenes.len() {
        let cond = condition(tr, scene, HELD_IN_FRAMES)?;
        let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
        let (z, _) = generate_long_latent(
            InferenceMode::Clip,
            HELD_IN_FRAMES,
            HELD_IN_FRAMES,
            0,
            1,
            &tr.stack,
            &cond,
            &sampler(tr),
            &mut rng,
        )?;
        let truth = decode(tr, tr.data.scenes[scene].frames.narrow(0, 0, HELD_IN_FRAMES)?)?;
        scores.push(clip_ssim(&decode(tr, z)?, &truth)?);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let per_scene: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
    let detail = format!(
        "stage-3 initial loss {:.4}, target {:.4}, first below at step {}, final mean {:.4}; held-in ssim {:.4} [{}] (need > {SSIM_MIN}); training {:.0}s",
        tr.initial_loss,
        target,
        tr.crossed_at.map_or("never".to_string(), |s| s.to_string()),
        tr.final_mean,
        mean,
        per_scene.join(", "),
        tr.secs
    );
    ensure!(tr.crossed_at.is_some(), "loss never fell below target: {detail}");
    ensure!(mean > SSIM_MIN, "held-in ssim too low: {detail}");
    Ok(detail)
}

fn perturb(tr: &Trained, originals: &[(String, Tensor)], seed: u64) -> vitondit::Result<()> {
    let data = tr.stack.varmap.data().lock().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    for (name, t) in originals {
        let rms = t.sqr()?.mean_all()?.to_scalar::<f32>()?.sqrt() as f64;
        let noise = randn(t.dims(), t.dtype(), &mut rng, t.device())?;
        data[name].set(&(t + (noise * (WEIGHT_NOISE * rms))?)?)?;
    }
    Ok(())
}

fn restore(tr: &Trained, originals: &[(String, Tensor)]) -> vitondit::Result<()> {
    let data = tr.stack.varmap.data().lock().unwrap();
    for (name, t) in originals {
        data[name].set(t)?;
    }
    Ok(())
}

fn clips(video: &Tensor) -> vitondit::Result<Vec<Tensor>> {
    (0..video.dims()[0] / VFID_CLIP).map(|c| Ok(video.narrow(0, c * VFID_CLIP, VFID_CLIP)?)).collect()
}

fn long_vfid(tr: &Trained, mode: InferenceMode, seed: u64, real: &[Tensor], ext: &FeatureExtractor) -> vitondit::Result<f64> {
    let mut generated = Vec::new();
    for scene in 0..tr.data.scenes.len() {
        let cond = condition(tr, scene, TOTAL_FRAMES)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (z, _) = generate_long_latent(
            mode,
            TOTAL_FRAMES,
            DRIFT_WINDOW,
            DRIFT_OVERLAP,
            DRIFT_SUBVIDEOS,
            &tr.stack,
            &cond,
            &sampler(tr),
            &mut rng,
        )?;
        generated.extend(clips(&decode(tr, z)?)?);
    }
    vfid(real, &generated, ext)
}

pub fn iar_vs_ar(shared: &mut Shared) -> Check {
    let tr = trained(shared)?;
    let ext: FeatureExtractor = VFID_EXTRACTOR.parse()?;
    let mut real = Vec::new();
    for sc in &tr.data.scenes {
        real.extend(clips(&decode(tr, sc.frames.clone())?)?);
    }
    let originals: Vec<(String, Tensor)> = {
        let data = tr.stack.varmap.data().lock().unwrap();
        data.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect::<vitondit::Result<_>>()?
    };
    let mut pairs = Vec::new();
    for seed in 0..DRIFT_SEEDS {
        perturb(tr, &originals, seed)?;
        let run = (|| Ok::<_, vitondit::Error>((long_vfid(tr, InferenceMode::Ar, seed, &real, &ext)?, long_vfid(tr, InferenceMode::Iar, seed, &real, &ext)?)))();
        restore(tr, &originals)?;
        pairs.push(run?);
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.total_cmp(b));
        v[v.len() / 2]
    };
    let ar_med = median(pairs.iter().map(|p| p.0).collect());
    let iar_med = median(pairs.iter().map(|p| p.1).collect());
    let wins = pairs.iter().filter(|(ar, iar)| iar <= ar).count();
    let rows: Vec<String> = pairs.iter().map(|(ar, iar)| format!("ar {ar:.5} / iar {iar:.5}")).collect();
    let detail = format!(
        "noise {WEIGHT_NOISE}×rms, {} clips/side; iar ≤ ar in {wins}/{DRIFT_SEEDS} seeds; median ar {ar_med:.5} iar {iar_med:.5}; [{}]",
        real.len(),
        rows.join("; ")
    );
    ensure!(wins as u64 == DRIFT_SEEDS, "iar not ≤ ar on every seed: {detail}");
    ensure!(iar_med < ar_med, "iar median not strictly lower: {detail}");
    Ok(detail)
}
