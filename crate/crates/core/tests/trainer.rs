use std::fs;
use std::path::Path;

use mim_core::checkpoint::Checkpoint;
use mim_core::objective::ScheduleKind;
use mim_core::optim::{adamw_step, adamw_update, AdamWConfig, OptimizerState};
use mim_core::trainer::{element_loss, init_state, run_training, train_step, METRICS_FILE};
use mim_core::volume::{generate_synthetic, write_volume, SyntheticSpec, Volume};
use mim_core::{MimError, Tensor, TrainConfig};

fn tiny_config() -> TrainConfig {
    TrainConfig::from_json(
        r#"{
            "steps": 5, "warmup_steps": 1, "checkpoint_every": 2,
            "hierarchy": {"level_shape": [[24,24,24],[12,12,12],[8,8,8]], "grid": [6,4,4], "token_resize": [4,4,4]},
            "network": {"base_channels": 4, "embed_dim": 16, "depth": 1, "heads": 2, "decoder_dim": 8,
                        "decoder_depth": 1, "decoder_heads": 2, "recon_dim": 64, "proj_dim": 8,
                        "token_resize": [4,4,4]}
        }"#,
    )
    .unwrap()
}

fn volume(seed: u64) -> Volume {
    generate_synthetic(seed, [1, 24, 24, 24], &SyntheticSpec::default()).unwrap()
}

fn dataset(dir: &Path, n: u64) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        write_volume(dir.join(format!("vol_{i:03}")), &volume(i)).unwrap();
    }
}

#[test]
fn single_adamw_step_matches_hand_oracle() {
    let cfg = AdamWConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut theta = vec![0.5f32];
    let (mut m, mut v) = (vec![0.0], vec![0.0]);
    adamw_update(&mut theta, &[1.0], &mut m, &mut v, 1, 0.1, &cfg, true);
    let expected = 0.5 - 0.1 / (1.0 + 1e-8);
    assert!((theta[0] as f64 - expected).abs() < 1e-6);
}

#[test]
fn non_finite_gradient_aborts_without_update() {
    let cfg = tiny_config();
    let mut state = init_state(&cfg).unwrap();
    let before = state.params.clone();
    let mut grads: std::collections::BTreeMap<String, Tensor> = state
        .params
        .iter()
        .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
        .collect();
    let first = grads.keys().next().unwrap().clone();
    let shape = grads[&first].shape().to_vec();
    grads.insert(first.clone(), Tensor::full(&shape, f32::NAN));
    let err = adamw_step(&mut state.params, &grads, &mut state.opt, 1e-3, &cfg.adamw()).unwrap_err();
    assert!(matches!(err, MimError::NonFiniteGradient(name) if name == first));
    assert_eq!(state.params, before);
    assert_eq!(state.opt, OptimizerState::new(&before));
}

#[test]
fn identical_elements_give_identical_reports() {
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    let v = volume(0);
    let w = [1.0; 3];
    let a = element_loss(&v, &state.params, &cfg, 7, &w).unwrap();
    let b = element_loss(&v, &state.params, &cfg, 7, &w).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn level_one_only_without_alignment_reduces_to_a_third_of_level_one() {
    let mut cfg = tiny_config();
    cfg.loss.alpha = 0.0;
    cfg.loss.schedule = ScheduleKind::Level1Only;
    let state = init_state(&cfg).unwrap();
    let w = cfg.loss.schedule.level_weights(3, 1, cfg.steps);
    assert_eq!(w, vec![1.0, 0.0, 0.0]);
    let (r, _) = element_loss(&volume(1), &state.params, &cfg, 3, &w).unwrap();
    let expected = r.recon_per_level[0] / 3.0;
    assert!((r.total - expected).abs() <= 1e-6 * expected.abs());
}

#[test]
fn step_zero_checkpoint_reproduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    let path = dir.path().join("zero.ckpt");
    Checkpoint {
        config: cfg.clone(),
        state: state.clone(),
    }
    .save(&path)
    .unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let v = volume(2);
    let w = [1.0; 3];
    let a = element_loss(&v, &state.params, &cfg, 5, &w).unwrap();
    let b = element_loss(&v, &loaded.state.params, &loaded.config, 5, &w).unwrap();
    assert_eq!(a.0.total.to_bits(), b.0.total.to_bits());
}

#[test]
fn train_step_averages_the_batch() {
    let cfg = tiny_config();
    let mut state = init_state(&cfg).unwrap();
    let (a, b) = (volume(3), volume(4));
    let report = train_step(&[&a, &b], &mut state, &cfg, 1).unwrap();
    assert_eq!(report.per_volume.len(), 2);
    assert_eq!(state.step, 1);
    assert_eq!(state.opt.t, 1);
    let mean = (report.per_volume[0].total + report.per_volume[1].total) / 2.0;
    assert!((report.loss.total - mean).abs() < 1e-12);
    assert!(train_step(&[], &mut state, &cfg, 2).is_err());
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    dataset(&data, 3);
    let cfg = tiny_config();

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary = run_training(&cfg, &data, &a, None).unwrap();
    run_training(&cfg, &data, &b, None).unwrap();
    let csv_a = fs::read_to_string(a.join(METRICS_FILE)).unwrap();
    assert_eq!(csv_a, fs::read_to_string(b.join(METRICS_FILE)).unwrap());
    assert_eq!(csv_a.lines().count(), 1 + 5);
    assert_eq!(summary.reports.len(), 5);
    assert!(a.join("checkpoints/step_000002.ckpt").exists());
    assert!(a.join("checkpoints/step_000004.ckpt").exists());
    assert!(summary.final_checkpoint.exists());
    let effective = TrainConfig::load(a.join("effective_config.json")).unwrap();
    assert_eq!(effective, cfg);

    // Resume in a fresh directory and in the original one.
    let c = dir.path().join("c");
    let resumed = run_training(&cfg, &data, &c, Some(&a.join("checkpoints/step_000002.ckpt"))).unwrap();
    assert_eq!(resumed.reports, summary.reports[2..]);
    let tail_a: Vec<&str> = csv_a.lines().skip(3).collect();
    let csv_c = fs::read_to_string(c.join(METRICS_FILE)).unwrap();
    assert_eq!(csv_c.lines().skip(1).collect::<Vec<_>>(), tail_a);

    run_training(&cfg, &data, &b, Some(&b.join("checkpoints/step_000004.ckpt"))).unwrap();
    assert_eq!(fs::read_to_string(b.join(METRICS_FILE)).unwrap(), csv_a);
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn empty_or_missing_dataset_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(matches!(
        run_training(&cfg, &empty, &dir.path().join("o"), None),
        Err(MimError::EmptyDataset(_))
    ));
    assert!(matches!(
        run_training(&cfg, &dir.path().join("absent"), &dir.path().join("o"), None),
        Err(MimError::Io { .. })
    ));
}
