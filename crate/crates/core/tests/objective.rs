use mim_core::objective::{
    align_adjacent, align_pair_graph, align_pair_loss, gradient_suite, recon_loss_graph, ReconDistance,
};
use mim_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

/// Explicit scalar InfoNCE: enumerate every dot product and norm by hand.
fn oracle_pair(c: &[f64], p: &[Vec<f64>], pos: usize, tau: f64) -> f64 {
    let mut cc = 0.0;
    for x in c {
        cc += x * x;
    }
    let mut sims = Vec::new();
    for row in p {
        let mut dot = 0.0;
        let mut pp = 0.0;
        for k in 0..c.len() {
            dot += c[k] * row[k];
            pp += row[k] * row[k];
        }
        sims.push(dot / (cc.sqrt() * pp.sqrt()));
    }
    let mut denom = 0.0;
    for s in &sims {
        denom += (s / tau).exp();
    }
    -((sims[pos] / tau).exp() / denom).ln()
}

fn graph_pair(c: &[f64], p: &[Vec<f64>], pos: usize, tau: f64) -> f64 {
    let d = c.len();
    let mut g = Graph::<f64>::new();
    let cv = g.constant(Tensor::new(vec![1, d], c.to_vec()).unwrap());
    let pv = g.constant(Tensor::new(vec![p.len(), d], p.concat()).unwrap());
    let l = align_pair_graph(&mut g, cv, pv, pos, tau).unwrap();
    g.value(l).item()
}

fn embedding(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, d).prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn case() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, usize, f64)> {
    (1usize..=4, 2usize..=8).prop_flat_map(|(d, n)| {
        (embedding(d), prop::collection::vec(embedding(d), n), 0..n, 0.05f64..2.0)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pair_loss_matches_oracle((c, p, pos, tau) in case()) {
        let want = oracle_pair(&c, &p, pos, tau);
        prop_assert!((align_pair_loss(&c, pos, &p, tau).unwrap() - want).abs() <= 1e-6);
        prop_assert!((graph_pair(&c, &p, pos, tau) - want).abs() <= 1e-6);
        prop_assert!(want >= 0.0);
    }

    #[test]
    fn adjacent_loss_matches_oracle(cases in prop::collection::vec(case(), 1..4)) {
        let plain: Vec<f64> = cases.iter().map(|(c, p, pos, tau)| graph_pair(c, p, *pos, *tau)).collect();
        let mut want = 0.0;
        for (c, p, pos, tau) in &cases {
            want += oracle_pair(c, p, *pos, *tau);
        }
        want /= cases.len() as f64;
        prop_assert!((align_adjacent(&plain).unwrap() - want).abs() <= 1e-6);
    }

    #[test]
    fn recon_is_zero_only_at_identity(y in prop::collection::vec(-1.0f64..1.0, 6), shift in 0.01f64..1.0) {
        let mut g = Graph::<f64>::new();
        let yv = g.constant(Tensor::new(vec![2, 3], y.clone()).unwrap());
        let same = recon_loss_graph(&mut g, yv, yv, ReconDistance::L2).unwrap();
        prop_assert_eq!(g.value(same).item(), 0.0);
        let off = g.constant(Tensor::new(vec![2, 3], y.iter().map(|v| v + shift).collect()).unwrap());
        let l = recon_loss_graph(&mut g, off, yv, ReconDistance::L2).unwrap();
        prop_assert!(g.value(l).item() > 0.0);
    }
}

#[test]
fn uniform_similarity_is_log_n() {
    let p = vec![vec![0.2, -0.4, 1.0]; 4];
    let l = graph_pair(&[1.0, 2.0, 0.5], &p, 3, 0.1);
    assert!((l - 1.3863).abs() < 1e-4);
}

#[test]
fn every_loss_passes_gradient_check() {
    let reports = gradient_suite(1e-3, 1e-3, 0);
    assert!(reports.len() >= 7);
    for r in &reports {
        println!("{}", r.line());
        assert!(r.passed, "{}", r.line());
    }
}
