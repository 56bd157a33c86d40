use super::*;
use crate::data::ImageShape;
use crate::nn::{build_dncnn_lite, build_sda, Architecture};
use crate::noise::NoiseRng;

fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let mut rng = NoiseRng::new(seed, Stream::Synthetic);
    let clean: Vec<f64> = (0..n * 28 * 28).map(|_| rng.uniform()).collect();
    Dataset::from_clean("toy", ImageShape::gray(28, 28), clean).unwrap()
}

fn flat(d: &Denoiser) -> Vec<f64> {
    d.params().iter().flat_map(|p| p.value.to_vec()).collect()
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut opt = OptimizerState::adam(0.1);
    let mut values = vec![vec![1.0, -2.0], vec![0.5]];
    let grads = vec![vec![1.0, 1.0], vec![1.0]];
    opt.adam_step(&mut values, &grads, &[true, false]);
    assert!((values[0][0] - 0.9).abs() < 1e-6);
    assert!((values[0][1] + 2.1).abs() < 1e-6);
    assert_eq!(values[1], vec![0.5]);
    assert_eq!(opt.first_moment[1], vec![0.0]);
    assert_eq!(opt.second_moment[1], vec![0.0]);
}

#[test]
fn adam_matches_hand_computation_over_two_steps() {
    let mut opt = OptimizerState::adam(0.01);
    let mut v = vec![vec![0.0]];
    opt.adam_step(&mut v, &[vec![2.0]], &[true]);
    opt.adam_step(&mut v, &[vec![-1.0]], &[true]);
    let (b1, b2) = (0.9f64, 0.999f64);
    let m = 0.1 * 0.9 * 2.0 + -0.1;
    let s = 0.001 * 0.999 * 4.0 + 0.001 * 1.0;
    let step2 = 0.01 * (m / (1.0 - b1 * b1)) / ((s / (1.0 - b2 * b2)).sqrt() + 1e-8);
    let expected = -0.01 * 2.0 / (2.0 + 1e-8) - step2;
    assert!((v[0][0] - expected).abs() < 1e-12, "{} vs {expected}", v[0][0]);
}

#[test]
fn sgd_with_weight_decay() {
    let mut opt = OptimizerState::sgd(0.5);
    opt.weight_decay = 0.1;
    let mut v = vec![vec![2.0]];
    opt.adam_step(&mut v, &[vec![1.0]], &[true]);
    assert!((v[0][0] - (2.0 - 0.5 * 1.2)).abs() < 1e-15);
}

#[test]
fn lr_schedule_steps_down() {
    let s = LrSchedule::step(1e-4, 50, 5e-5);
    assert_eq!(s.at(0), 1e-4);
    assert_eq!(s.at(49), 1e-4);
    assert_eq!(s.at(50), 5e-5);
    assert_eq!(LrSchedule::constant(0.3).at(1000), 0.3);
}

#[test]
fn zero_epochs_leave_init_untouched() {
    let ds = toy_dataset(8, 1).corrupt(&NoiseSpec::gaussian_255(25.0), 1, 0).unwrap();
    let mut d = build_sda(1, 9).unwrap();
    let before = flat(&d);
    let cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::Sure), 0, 4, 1e-3, 0);
    let out = train(&mut d, TrainData::new(&ds), &cfg).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(flat(&d), before);
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let ds = toy_dataset(16, 2);
    let noise = NoiseSpec::gaussian_255(50.0);
    let run = || {
        let mut d = build_sda(1, 3).unwrap();
        let mut data = TrainData::new(&ds);
        data.noise = Some(noise);
        let cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::Sure), 3, 8, 1e-3, 11);
        let out = train(&mut d, data, &cfg).unwrap();
        (flat(&d), out.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha.len(), 3);
    assert!(ha.iter().zip(&hb).all(|(x, y)| x.loss == y.loss));
    assert!(ha[2].loss < ha[0].loss, "{:?}", ha.iter().map(|h| h.loss).collect::<Vec<_>>());
    assert!(ha[0].mse_vs_gt.is_some());
}

#[test]
fn mse_gt_without_clean_images_fails_before_training() {
    let ds = toy_dataset(4, 3).corrupt(&NoiseSpec::gaussian_255(25.0), 0, 0).unwrap().without_clean();
    let mut d = build_sda(1, 0).unwrap();
    let before = flat(&d);
    let cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::MseGt), 2, 2, 1e-3, 0);
    let err = train(&mut d, TrainData::new(&ds), &cfg).unwrap_err();
    assert!(matches!(err, TrainError::MissingGroundTruth { .. }), "{err}");
    assert_eq!(flat(&d), before);
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = toy_dataset(4, 3).corrupt(&NoiseSpec::gaussian_255(25.0), 0, 0).unwrap();
    let mut d = build_sda(1, 0).unwrap();
    let mut cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::Sure), 1, 0, 1e-3, 0);
    assert!(matches!(train(&mut d, TrainData::new(&ds), &cfg), Err(TrainError::Config(_))));
    cfg.batch_size = 5;
    assert!(matches!(train(&mut d, TrainData::new(&ds), &cfg), Err(TrainError::Config(_))));
    cfg.batch_size = 2;
    cfg.lr = LrSchedule::constant(-1.0);
    assert!(matches!(train(&mut d, TrainData::new(&ds), &cfg), Err(TrainError::Config(_))));
}

#[test]
fn huge_learning_rate_aborts_with_last_good_checkpoint() {
    let ds = toy_dataset(8, 4);
    let mut data = TrainData::new(&ds);
    data.noise = Some(NoiseSpec::gaussian_255(25.0));
    let mut d = build_dncnn_lite(3, 8, 2).unwrap();
    let mut cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::MseGt), 20, 4, 1e300, 0);
    cfg.optimizer = OptimizerKind::Sgd;
    match train(&mut d, data, &cfg) {
        Err(TrainError::NumericalAbort { last_good, .. }) => {
            assert!(last_good.params.iter().all(|t| t.data.iter().all(|v| v.is_finite())));
            assert_eq!(flat(&d), last_good.params.iter().flat_map(|t| t.data.clone()).collect::<Vec<_>>());
        }
        other => panic!("expected numerical abort, got {other:?}"),
    }
}

#[test]
fn frozen_batch_norm_is_untouched_by_training() {
    let ds = toy_dataset(8, 5).corrupt(&NoiseSpec::gaussian_255(25.0), 0, 0).unwrap();
    let mut d = build_dncnn_lite(3, 8, 1).unwrap();
    d.apply_param_mask(MaskPolicy::FreezeBatchNorm);
    let bn = |d: &Denoiser| -> Vec<f64> {
        let mut v: Vec<f64> = d
            .params()
            .iter()
            .filter(|p| p.is_batch_norm())
            .flat_map(|p| p.value.to_vec())
            .collect();
        v.extend(d.buffers().into_iter().flat_map(|(_, b)| b.to_vec()));
        v
    };
    let before = bn(&d);
    assert!(!before.is_empty());
    let conv_before = flat(&d);
    let cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::Sure), 2, 4, 1e-2, 0);
    train(&mut d, TrainData::new(&ds), &cfg).unwrap();
    assert_eq!(bn(&d), before);
    assert_ne!(flat(&d), conv_before);
}

#[test]
fn checkpoints_and_resume_continue_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    let ds = toy_dataset(8, 6).corrupt(&NoiseSpec::gaussian_255(30.0), 0, 0).unwrap();
    let mut cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::Sure), 4, 4, 1e-3, 5);
    cfg.checkpoint_every = Some(2);
    let mut full = build_sda(1, 1).unwrap();
    let mut data = TrainData::new(&ds);
    data.checkpoint_dir = Some(dir.path());
    let out = train(&mut full, data, &cfg).unwrap();
    assert_eq!(out.checkpoints_written.len(), 2);

    let mid = Checkpoint::load(&out.checkpoints_written[0]).unwrap();
    assert_eq!(mid.epoch, 2);
    let (resumed, rest) = resume(&mid, TrainData::new(&ds), &cfg).unwrap();
    assert_eq!(rest.history.len(), 2);
    assert_eq!(flat(&resumed), flat(&full));
}

#[test]
fn early_stopping_triggers_on_rising_validation_loss() {
    let ds = toy_dataset(8, 7).corrupt(&NoiseSpec::gaussian_255(25.0), 0, 0).unwrap();
    let val = toy_dataset(4, 8).corrupt(&NoiseSpec::gaussian_255(25.0), 1, 0).unwrap();
    let mut d = build_sda(1, 1).unwrap();
    let mut cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::MseReg), 200, 4, 3e-3, 0);
    assert_eq!(cfg.early_stopping(), Some(3));
    cfg.early_stopping = Some(1);
    let mut data = TrainData::new(&ds);
    data.validation = Some(&val);
    let out = train(&mut d, data, &cfg).unwrap();
    assert!(out.stopped_early);
    assert!(out.history.len() < 200);
    assert!(out.final_val_psnr().is_some());
}

#[test]
fn pure_training_warns_on_large_zeta() {
    let ds = toy_dataset(4, 9);
    let mut data = TrainData::new(&ds);
    data.noise = Some(NoiseSpec::Poisson { zeta: 0.3 });
    let mut d = build_sda(1, 1).unwrap();
    let cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::Pure), 1, 4, 1e-3, 0);
    let out = train(&mut d, data, &cfg).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert!(out.history[0].loss.is_finite());
}

#[test]
fn csv_log_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    let row = EpochLog {
        epoch: 0,
        objective: ObjectiveKind::Sure,
        loss: 0.5,
        mse_vs_gt: Some(0.1),
        divergence_estimate: 12.0,
        data_fidelity: 0.7,
        val_psnr: None,
        lr: 1e-3,
        wall_ms: 5,
    };
    write_csv(&path, &[row]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,objective,loss,mse_vs_gt,divergence_estimate,data_fidelity,val_psnr,lr,wall_ms"
    );
    assert!(lines.next().unwrap().starts_with("0,sure,0.5,0.1,12.0,0.7,,0.001,5"));
}

#[test]
fn refine_never_reports_worse_sure_with_keep_best() {
    let ds = toy_dataset(1, 10).corrupt(&NoiseSpec::gaussian_255(25.0), 0, 0).unwrap();
    let d = build_dncnn_lite(3, 8, 4).unwrap();
    let ckpt = Checkpoint::from_denoiser(&d, None, 0, 0);
    let y = ds.noisy_image(0).unwrap();
    let mut cfg = RefineConfig::new(25.0 / 255.0, 1);
    cfg.epochs = 5;
    cfg.lr = LrSchedule::constant(1e-3);
    let out = refine(&ckpt, &y, &cfg).unwrap();
    assert!(out.sure_after <= out.sure_before);
    assert_eq!(out.history.len(), 5);
    assert_eq!(out.denoised.shape(), &[1, 1, 28, 28]);
    let refined = out.checkpoint.to_denoiser().unwrap();
    assert!(refined
        .params()
        .iter()
        .filter(|p| p.is_batch_norm())
        .all(|p| !p.trainable));
    let bn_then: Vec<f64> = d.buffers().into_iter().flat_map(|(_, b)| b.to_vec()).collect();
    let bn_now: Vec<f64> = refined.buffers().into_iter().flat_map(|(_, b)| b.to_vec()).collect();
    assert_eq!(bn_then, bn_now);
}

#[test]
fn refine_rejects_batches() {
    let d = build_sda(1, 0).unwrap();
    let ckpt = Checkpoint::from_denoiser(&d, None, 0, 0);
    let y = Tensor::zeros(&[2, 1, 28, 28]);
    assert!(matches!(
        refine(&ckpt, &y, &RefineConfig::new(0.1, 0)),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ds = toy_dataset(4, 11).corrupt(&NoiseSpec::gaussian_255(25.0), 0, 0).unwrap();
    let mut d = build_dncnn_lite(3, 8, 7).unwrap();
    let cfg = TrainConfig::new(RiskObjective::new(ObjectiveKind::Sure), 1, 2, 1e-3, 0);
    let out = train(&mut d, TrainData::new(&ds), &cfg).unwrap();
    let bytes = out.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.checkpoint);
    let mut restored = back.to_denoiser().unwrap();
    let y = ds.batch(&[0, 1], 0, 0).unwrap().y;
    let a = d.predict(&y).unwrap().to_vec();
    let b = restored.predict(&y).unwrap().to_vec();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn truncated_or_foreign_checkpoints_are_rejected() {
    let d = build_sda(1, 0).unwrap();
    let bytes = Checkpoint::from_denoiser(&d, None, 0, 0).to_bytes();
    for cut in [0, 5, 20, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, CheckpointError::Corrupt(_)), "{err}");
    }
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(matches!(Checkpoint::from_bytes(&longer), Err(CheckpointError::Corrupt(_))));

    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut other = Denoiser::build(Architecture::DncnnLite { in_channels: 1, depth: 3, channels: 8 }, 0).unwrap();
    assert!(matches!(
        ckpt.load_into(&mut other),
        Err(CheckpointError::ArchitectureMismatch { .. })
    ));
}

#[test]
fn newer_format_version_is_reported() {
    let d = build_sda(1, 0).unwrap();
    let bytes = Checkpoint::from_denoiser(&d, None, 0, 0).to_bytes();
    let len = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[17..17 + len]).unwrap();
    let patched = header.replacen("\"version\":1", "\"version\":2", 1);
    assert_eq!(patched.len(), header.len());
    let mut out = bytes[..17].to_vec();
    out.extend_from_slice(patched.as_bytes());
    out.extend_from_slice(&bytes[17 + len..]);
    assert!(matches!(
        Checkpoint::from_bytes(&out),
        Err(CheckpointError::VersionMismatch { found: 2, supported: 1 })
    ));
}
