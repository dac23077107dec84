#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitondit::codec::Codec;
use vitondit::config::ExperimentConfig;
use vitondit::data::{render_scene, SwapPattern, SyntheticSceneSpec};
use vitondit::diffusion::randn;
use vitondit::dit::DenoiserConfig;
use vitondit::training::{Dataset, LatentScene};

/// Small enough for float64 gradient checks.
pub fn micro_model() -> DenoiserConfig {
    DenoiserConfig { depth: 2, patch_size: 2, hidden: 8, heads: 2, mlp_ratio: 1, max_frames: 4, steps: 10 }
}

/// Fast model for loop-level tests.
pub fn tiny_model() -> DenoiserConfig {
    DenoiserConfig { depth: 2, patch_size: 2, hidden: 16, heads: 2, mlp_ratio: 2, max_frames: 4, steps: 10 }
}

/// Desk config shrunk to 32×32 frames and a handful of steps.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.model = tiny_model();
    cfg.diffusion.steps = cfg.model.steps;
    cfg.data.scenes = 2;
    cfg.data.height = 32;
    cfg.data.width = 32;
    cfg.data.total_frames = 12;
    cfg.data.clip_frames = 4;
    cfg.data.k_max = 1;
    for s in [&mut cfg.stage1, &mut cfg.stage2, &mut cfg.stage3] {
        s.steps = 3;
        s.batch_size = 1;
    }
    cfg.inference.frames = 10;
    cfg.inference.window = 4;
    cfg.inference.overlap = 1;
    cfg.inference.subvideos = 2;
    cfg
}

pub fn dataset(cfg: &ExperimentConfig, seed: u64) -> Dataset {
    let codec = Codec::from_spec(&cfg.codec, &Device::Cpu).unwrap();
    let scenes = (0..cfg.data.scenes as u64)
        .map(|i| {
            let spec = SyntheticSceneSpec::random(seed + i, cfg.data.height, cfg.data.width, cfg.data.total_frames);
            LatentScene::encode(&render_scene(&spec).unwrap(), &codec).unwrap()
        })
        .collect();
    Dataset { scenes, codec, swap_pattern: SwapPattern::Scattered, augment: cfg.data.augment_garment }
}

pub fn randn_t(shape: &[usize], dtype: DType, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    randn(shape, dtype, &mut rng, &Device::Cpu).unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn bit_equal(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims() && values(a).iter().zip(values(b)).all(|(x, y)| x.to_bits() == y.to_bits())
}
