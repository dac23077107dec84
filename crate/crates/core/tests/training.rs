mod common;

use candle_core::{DType, Device};
use vitondit::error::Error;
use vitondit::params::zero_params;
use vitondit::stack::ModelStack;
use vitondit::training::{
    build_stage_configs, freeze_apply, load_checkpoint, save_checkpoint, train_stage, train_step, TrainerState,
};

fn snapshot(stack: &ModelStack) -> Vec<(String, Vec<f64>)> {
    let data = stack.varmap.data().lock().unwrap();
    let mut v: Vec<_> = data.iter().map(|(k, v)| (k.clone(), common::values(v.as_tensor()))).collect();
    v.sort_by(|a, b| a.0.cmp(&b.0));
    v
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let cfg = common::tiny_config();
    let data = common::dataset(&cfg, 1);
    let sched = cfg.diffusion.schedule().unwrap();
    let mut stage = build_stage_configs(&cfg)[2].clone();
    stage.steps = 4;

    let straight = ModelStack::new(cfg.model, 2, DType::F32, &Device::Cpu).unwrap();
    let mut st = TrainerState::new(3);
    train_stage(&straight, &data, &stage, &sched, &mut st, |_, _| true).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let first = ModelStack::new(cfg.model, 2, DType::F32, &Device::Cpu).unwrap();
    let mut s1 = TrainerState::new(3);
    let mut half = stage.clone();
    half.steps = 2;
    train_stage(&first, &data, &half, &sched, &mut s1, |_, _| true).unwrap();
    let ckpt = tmp.path().join("ck");
    save_checkpoint(&ckpt, &first, &s1, 3, &cfg.hash()).unwrap();

    let mut resumed = ModelStack::new(cfg.model, 99, DType::F32, &Device::Cpu).unwrap();
    let (manifest, mut s2) = load_checkpoint(&ckpt, &mut resumed).unwrap();
    assert_eq!(manifest.step, 2);
    assert_eq!(manifest.config_hash, cfg.hash());
    train_stage(&resumed, &data, &half, &sched, &mut s2, |_, _| true).unwrap();

    assert_eq!(snapshot(&straight), snapshot(&resumed));
    assert_eq!(st.step, s2.step);
}

#[test]
fn non_finite_loss_is_reported_as_divergence() {
    let cfg = common::tiny_config();
    let data = common::dataset(&cfg, 4);
    let sched = cfg.diffusion.schedule().unwrap();
    let stage = build_stage_configs(&cfg)[1].clone();
    let stack = ModelStack::new(cfg.model, 5, DType::F32, &Device::Cpu).unwrap();
    let var = vitondit::params::get_var(&stack.varmap, "denoiser.final.proj.bias").unwrap();
    var.set(&(var.as_tensor().ones_like().unwrap() * f64::NAN).unwrap()).unwrap();
    let view = freeze_apply(&stack, &stage.trainable, &stage.frozen).unwrap();
    let err = train_step(&stack, &data, &stage, &view, &sched, &mut TrainerState::new(6)).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn unknown_selector_is_rejected() {
    let cfg = common::tiny_config();
    let stack = ModelStack::new(cfg.model, 7, DType::F32, &Device::Cpu).unwrap();
    assert!(freeze_apply(&stack, &["nothing.*".into()], &[]).is_err());
}

#[test]
fn garment_path_matters_after_control_is_zeroed() {
    // the denoiser sees the garment only through attention fusion
    let cfg = common::tiny_config();
    let stack = ModelStack::new(cfg.model, 8, DType::F32, &Device::Cpu).unwrap();
    let z = common::randn_t(&[2, 4, 4, 4], DType::F32, 9);
    let cond = |g| vitondit::condition::ClipCondition {
        control: None,
        garment: Some(vitondit::condition::GarmentSource::Latent(common::randn_t(&[1, 4, 4, 4], DType::F32, g))),
        frame_indices: vec![0, 1],
    };
    use vitondit::diffusion::NoisePredictor;
    let a = stack.predict_noise(&z, 3, &cond(10)).unwrap();
    let b = stack.predict_noise(&z, 3, &cond(11)).unwrap();
    assert!(common::max_abs_diff(&a, &b) > 0.0);
    zero_params(&stack.varmap, "denoiser.blocks.*.sca.o.*").unwrap();
    let a = stack.predict_noise(&z, 3, &cond(10)).unwrap();
    let b = stack.predict_noise(&z, 3, &cond(11)).unwrap();
    assert!(common::bit_equal(&a, &b));
}
