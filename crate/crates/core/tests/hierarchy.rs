use mim_core::hierarchy::{
    build_pairs, build_plan, crop_level1, patchify, sample_mask, HierarchyConfig, NextLevelSource,
};
use mim_core::volume::{generate_synthetic, SyntheticSpec, Volume};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn volume(size: usize, seed: u64) -> Volume {
    generate_synthetic(seed, [1, size, size, size], &SyntheticSpec::default()).unwrap()
}

/// Straightforward align-corners-false trilinear resize of one channel.
fn reference_resize(src: &[f32], input: [usize; 3], output: [usize; 3]) -> Vec<f32> {
    let tap = |o: usize, a: usize| {
        let scale = input[a] as f64 / output[a] as f64;
        let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input[a] - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(input[a] - 1), (s - lo as f64) as f32)
    };
    let at = |i: usize, j: usize, k: usize| src[(i * input[1] + j) * input[2] + k];
    let lerp = |a: f32, b: f32, w: f32| a + w * (b - a);
    let mut out = Vec::new();
    for i in 0..output[0] {
        let (h0, h1, wh) = tap(i, 0);
        for j in 0..output[1] {
            let (w0, w1, ww) = tap(j, 1);
            for k in 0..output[2] {
                let (d0, d1, wd) = tap(k, 2);
                let c0 = lerp(
                    lerp(at(h0, w0, d0), at(h0, w0, d1), wd),
                    lerp(at(h0, w1, d0), at(h0, w1, d1), wd),
                    ww,
                );
                let c1 = lerp(
                    lerp(at(h1, w0, d0), at(h1, w0, d1), wd),
                    lerp(at(h1, w1, d0), at(h1, w1, d1), wd),
                    ww,
                );
                out.push(lerp(c0, c1, wh));
            }
        }
    }
    out
}

#[test]
fn crop_offsets_cover_exactly_the_valid_range() {
    let x = volume(48, 2);
    let mut cfg = HierarchyConfig::desk();
    cfg.level_shape[0] = [32; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut seen_min = [usize::MAX; 3];
    let mut seen_max = [0usize; 3];
    for _ in 0..1000 {
        let v = crop_level1(&x, &cfg, &mut rng).unwrap();
        for a in 0..3 {
            let off = v.provenance.lo[a];
            assert_eq!(off.fract(), 0.0);
            let off = off as usize;
            assert!(off <= 16);
            assert_eq!(v.provenance.hi[a] as usize, off + 32);
            seen_min[a] = seen_min[a].min(off);
            seen_max[a] = seen_max[a].max(off);
        }
    }
    assert_eq!(seen_min, [0; 3]);
    assert_eq!(seen_max, [16; 3]);
}

#[test]
fn crop_is_deterministic_per_seed() {
    let x = volume(48, 2);
    let mut cfg = HierarchyConfig::desk();
    cfg.level_shape[0] = [32; 3];
    let a = crop_level1(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let b = crop_level1(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn canonical_mask_sizes() {
    let s = sample_mask(216, 0.6, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!((s.masked.len(), s.unmasked.len()), (130, 86));
    let s = sample_mask(10, 0.5, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(s.masked.len(), 5);
}

#[test]
fn mask_membership_is_uniform() {
    let mut hits = [0usize; 216];
    for seed in 0..1000 {
        let s = sample_mask(216, 0.6, &mut ChaCha8Rng::seed_from_u64(seed));
        for &m in &s.masked {
            hits[m] += 1;
        }
    }
    for (i, &h) in hits.iter().enumerate() {
        let f = h as f64 / 1000.0;
        assert!((f - 0.6).abs() <= 0.05, "token {i}: {f}");
    }
}

#[test]
fn children_are_resized_parent_tokens() {
    let cfg = HierarchyConfig::desk();
    let h = build_plan(&volume(48, 3), &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for e in &h.plan.entries {
        let Some(link) = e.parent else { continue };
        let parent = &h.volumes[link.volume];
        let grid = cfg.grid[parent.level - 1];
        let token = &patchify(&parent.voxels, grid).unwrap()[link.token];
        let s = token.shape();
        let expected = reference_resize(token.data(), [s[1], s[2], s[3]], cfg.level_shape[e.level - 1]);
        let child = &h.volumes[e.id];
        let a: Vec<u32> = child.voxels.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = expected.iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b, "volume {}", e.id);
    }
}

#[test]
fn plan_is_deterministic_and_serializable() {
    let cfg = HierarchyConfig::desk();
    let x = volume(48, 3);
    let a = build_plan(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let b = build_plan(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(a.plan.to_json(), b.plan.to_json());
    let back: mim_core::hierarchy::MaskPlan = serde_json::from_str(&a.plan.to_json()).unwrap();
    assert_eq!(back, a.plan);
}

#[test]
fn pairs_point_at_parent_tokens() {
    let cfg = HierarchyConfig::desk();
    let h = build_plan(&volume(48, 1), &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let pairs = build_pairs(&h.plan);
    assert_eq!(pairs.pairs.len(), 6);
    for p in &pairs.pairs {
        let parent = h.plan.entry(p.parent);
        assert_eq!(p.negatives.len(), parent.n - 1);
        assert!(!p.negatives.contains(&p.positive));
        assert!(parent.masked.contains(&p.positive));
        assert_eq!(h.plan.entry(p.context).parent.unwrap().token, p.positive);
    }
    let root = &pairs.pairs[..2];
    assert_eq!(root[0].negatives.len(), 215);
    assert_ne!(root[0].positive, root[1].positive);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn plan_invariants(seed in any::<u64>(), ratio in 0.2f64..0.8, unmasked_source in any::<bool>()) {
        let mut cfg = HierarchyConfig::desk();
        cfg.mask_ratio = ratio;
        if unmasked_source {
            cfg.next_level_source = NextLevelSource::Unmasked;
        }
        let h = build_plan(&volume(48, seed % 7), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let source = h.volumes[0].provenance;
        prop_assert!(source.lo.iter().all(|&v| v >= 0.0) && source.hi.iter().all(|&v| v <= 48.0));
        for e in &h.plan.entries {
            let mut all: Vec<usize> = e.masked.iter().chain(&e.unmasked).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..e.n).collect::<Vec<_>>());
            prop_assert_eq!(e.masked.len(), ((ratio * e.n as f64) + 0.5).floor() as usize);
            if let Some(link) = e.parent {
                let p = h.plan.entry(link.volume);
                prop_assert!(p.provenance.contains(&e.provenance));
                let set = if unmasked_source { &p.unmasked } else { &p.masked };
                prop_assert!(set.contains(&link.token));
            }
        }
    }
}
