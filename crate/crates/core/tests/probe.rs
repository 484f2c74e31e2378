use mim_core::probe::{
    compare_probes, dsc, export_recon_slices, linear_probe, probe_gain, read_pgm, recon_slices,
    ProbeConfig,
};
use mim_core::trainer::init_state;
use mim_core::volume::{generate_synthetic, SyntheticSpec, Volume};
use mim_core::{MimError, TrainConfig};
use proptest::prelude::*;

fn tiny_config() -> TrainConfig {
    TrainConfig::from_json(
        r#"{
            "hierarchy": {"level_shape": [[24,24,24],[12,12,12],[8,8,8]], "grid": [6,4,4], "token_resize": [4,4,4]},
            "network": {"base_channels": 4, "embed_dim": 16, "depth": 1, "heads": 2, "decoder_dim": 8,
                        "decoder_depth": 1, "decoder_heads": 2, "recon_dim": 64, "proj_dim": 8,
                        "token_resize": [4,4,4]}
        }"#,
    )
    .unwrap()
}

fn volumes(n: u64, side: usize) -> Vec<Volume> {
    (0..n)
        .map(|i| generate_synthetic(40 + i, [1, side, side, side], &SyntheticSpec::default()).unwrap())
        .collect()
}

fn quick() -> ProbeConfig {
    ProbeConfig {
        probe_steps: 20,
        batch_voxels: 512,
        ..ProbeConfig::default()
    }
}

#[test]
fn probe_is_deterministic_per_seed() {
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    let data = volumes(4, 24);
    let a = linear_probe(&state.params, &cfg, &data, &quick()).unwrap();
    let b = linear_probe(&state.params, &cfg, &data, &quick()).unwrap();
    assert_eq!(a, b);
    assert!(a.per_class.iter().all(|d| (0.0..=1.0).contains(d)));
}

#[test]
fn untrained_head_still_yields_a_report() {
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    let pcfg = ProbeConfig {
        probe_steps: 0,
        ..quick()
    };
    let r = linear_probe(&state.params, &cfg, &volumes(2, 24), &pcfg).unwrap();
    assert!((0.0..=1.0).contains(&r.mean));
}

#[test]
fn larger_volumes_are_center_cropped() {
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    assert!(linear_probe(&state.params, &cfg, &volumes(2, 32), &quick()).is_ok());
}

#[test]
fn probe_requires_labels() {
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    let mut data = volumes(2, 24);
    data[1].labels = None;
    data[1].header.has_labels = false;
    let err = linear_probe(&state.params, &cfg, &data, &quick()).unwrap_err();
    assert!(matches!(err, MimError::MissingLabels(_)));
}

#[test]
fn comparison_rows_cover_both_encoders() {
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    let rows = compare_probes(&state.params, &cfg, &volumes(2, 24), &quick(), &[0, 1]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(probe_gain(&rows).is_finite());
}

#[test]
fn reconstruction_keeps_unmasked_pixels() {
    let cfg = tiny_config();
    let state = init_state(&cfg).unwrap();
    let v = &volumes(1, 24)[0];
    let s = recon_slices(&state.params, &cfg, v).unwrap();
    assert_eq!(s.original.len(), s.height * s.width);
    assert!(s.hidden.iter().any(|&h| h) && s.hidden.iter().any(|&h| !h));
    for i in 0..s.original.len() {
        if s.hidden[i] {
            assert_eq!(s.masked[i], 0);
        } else {
            assert_eq!(s.recon[i], s.original[i]);
            assert_eq!(s.masked[i], s.original[i]);
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let files = export_recon_slices(&state.params, &cfg, v, dir.path()).unwrap();
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
    let (w, h, recon) = read_pgm(&files[2]).unwrap();
    assert_eq!((w, h), (s.width, s.height));
    assert_eq!(recon, s.recon);
}

proptest! {
    #[test]
    fn dsc_is_symmetric_and_one_only_on_equality(
        a in proptest::collection::vec(any::<bool>(), 1..64),
        flips in proptest::collection::vec(any::<bool>(), 1..64),
    ) {
        let b: Vec<bool> = a.iter().zip(flips.iter().cycle()).map(|(&x, &f)| x ^ f).collect();
        let ab = dsc(&a, &b).unwrap();
        prop_assert_eq!(ab, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab == 1.0, a == b);
    }
}
