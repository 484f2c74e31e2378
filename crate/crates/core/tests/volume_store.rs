use mim_core::volume::{generate_synthetic, normalize_intensity, read_volume, write_volume, SyntheticSpec};
use proptest::prelude::*;

#[test]
fn single_sphere_label_count_matches_lattice_count() {
    let spec = SyntheticSpec {
        num_blobs: 1,
        blob_radius_range: [4.0, 4.0],
        noise_std: 0.0,
        background_level: 0.1,
    };
    for seed in 0..20 {
        let v = generate_synthetic(seed, [1, 32, 32, 32], &spec).unwrap();
        let count = v.labels.as_ref().unwrap().iter().filter(|&&l| l == 1).count();
        // Lattice points inside a radius-4 ball number ~268 with a boundary
        // term bounded by the sphere surface.
        assert!((120..=400).contains(&count), "seed {seed}: {count}");
        // Inside voxels are brighter than the background.
        let inside: Vec<f32> = v
            .voxels
            .iter()
            .zip(v.labels.as_ref().unwrap())
            .filter(|(_, &l)| l == 1)
            .map(|(&x, _)| x)
            .collect();
        assert!(inside.iter().all(|&x| x > 0.1));
    }
}

#[test]
fn voxels_are_normalized() {
    let v = generate_synthetic(9, [2, 16, 16, 16], &SyntheticSpec {
        noise_std: 0.5,
        blob_radius_range: [2.0, 6.0],
        ..SyntheticSpec::default()
    })
    .unwrap();
    assert!(v.voxels.iter().all(|&x| (0.0..=1.0).contains(&x)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_is_bit_exact(seed in any::<u64>(), c in 1usize..3, h in 8usize..14, d in 8usize..12) {
        let spec = SyntheticSpec { blob_radius_range: [1.0, 3.0], ..SyntheticSpec::default() };
        let v = generate_synthetic(seed, [c, h, 9, d], &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol");
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        prop_assert_eq!(&back.header, &v.header);
        prop_assert_eq!(&back.labels, &v.labels);
        let a: Vec<u32> = v.voxels.iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.voxels.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalization_is_monotone_and_idempotent(mut raw in prop::collection::vec(-5.0f32..5.0, 1..64)) {
        raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let out = normalize_intensity(&raw, -2.0, 3.0).unwrap();
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(normalize_intensity(&out, 0.0, 1.0).unwrap(), out);
    }
}
