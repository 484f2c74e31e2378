//! Central-difference gradient verification.
//!
//! Checks run in `f64` so that the finite-difference quotient is dominated by
//! truncation error rather than rounding noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(op_name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        GradCheckReport {
            op_name: op_name.into(),
            max_rel_error,
            tolerance,
            // NaN compares false, so a non-finite error is a failure.
            passed: max_rel_error <= tolerance,
        }
    }

    /// Combines several reports for the same op into the worst case.
    pub fn worst(op_name: impl Into<String>, reports: &[GradCheckReport], tolerance: f64) -> Self {
        let max = reports.iter().map(|r| r.max_rel_error).fold(0.0, |a: f64, b| {
            if a.is_nan() || b.is_nan() {
                f64::NAN
            } else {
                a.max(b)
            }
        });
        GradCheckReport::new(op_name, max, tolerance)
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<18} max_rel_error={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.op_name,
            self.max_rel_error,
            self.tolerance
        )
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares `grad_fn(x)` against central differences of `value_fn` on every
/// element of `x`.
pub fn grad_check_fn(
    op_name: &str,
    value_fn: impl Fn(&Tensor<f64>) -> f64,
    grad_fn: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    x: &Tensor<f64>,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let analytic = grad_fn(x);
    if analytic.shape() != x.shape() {
        return GradCheckReport::new(op_name, f64::INFINITY, tol);
    }
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = value_fn(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig - eps;
        let minus = value_fn(&Tensor::from_parts(x.shape().to_vec(), probe.clone()));
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = rel_error(analytic.data()[i], numeric);
        if err.is_nan() || err > worst {
            worst = err;
            if worst.is_nan() || worst.is_infinite() {
                break;
            }
        }
    }
    GradCheckReport::new(op_name, worst, tol)
}

/// Gradient check of a scalar-valued graph function of one input.
pub fn grad_check(
    op_name: &str,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>,
    x: &Tensor<f64>,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let f = &f;
    grad_check_inputs(op_name, move |g, vs| f(g, vs[0]), std::slice::from_ref(x), eps, tol)
}

/// Gradient check of a scalar-valued graph function with respect to each of
/// several inputs; the report carries the worst input.
pub fn grad_check_inputs(
    op_name: &str,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    let eval = |xs: &[Tensor<f64>], want: Option<usize>| -> Option<(f64, Option<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone(), want == Some(i)))
            .collect();
        let loss = f(&mut g, &vars).ok()?;
        let value = g.value(loss).data().iter().sum::<f64>();
        let grad = match want {
            Some(i) => Some(g.backward(loss).ok()?.get(vars[i])?.clone()),
            None => None,
        };
        Some((value, grad))
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for slot in 0..inputs.len() {
        let value_fn = |x: &Tensor<f64>| {
            let mut xs = inputs.to_vec();
            xs[slot] = x.clone();
            eval(&xs, None).map_or(f64::NAN, |(v, _)| v)
        };
        let grad_fn = |_: &Tensor<f64>| {
            eval(inputs, Some(slot))
                .and_then(|(_, g)| g)
                .unwrap_or_else(|| Tensor::full(&[1], f64::NAN))
        };
        reports.push(grad_check_fn(op_name, value_fn, grad_fn, &inputs[slot], eps, tol));
    }
    GradCheckReport::worst(op_name, &reports, tol)
}

/// Deterministic projection weights so that weighted sums have non-degenerate
/// gradients (a plain sum of softmax outputs, for example, is constant).
pub fn probe_weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| {
        let u = (i as f64 * 0.754_877_666_246_692_7 + 0.31).fract();
        0.25 + 1.5 * u * if i % 3 == 1 { -1.0 } else { 1.0 }
    })
}

/// `sum(out * w)` with [`probe_weights`].
pub fn weighted_sum(g: &mut Graph<f64>, out: Var) -> Result<Var> {
    let w = g.constant(probe_weights(g.shape(out)));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Gradient checks for every primitive in the catalog.
pub fn primitive_suite(eps: f64, tol: f64, seed: u64) -> Vec<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut run = |name: &str,
                   cases: Vec<(Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)>| {
        let reports: Vec<_> = cases
            .into_iter()
            .map(|(xs, f)| {
                grad_check_inputs(
                    name,
                    |g, vs| {
                        let y = f(g, vs)?;
                        weighted_sum(g, y)
                    },
                    &xs,
                    eps,
                    tol,
                )
            })
            .collect();
        out.push(GradCheckReport::worst(name, &reports, tol));
    };
    let r = &mut rng;

    run(
        "add",
        vec![
            (
                vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[3, 4], -1.0, 1.0)],
                Box::new(|g, v| g.add(v[0], v[1])),
            ),
            (
                vec![random_tensor(r, &[4], -1.0, 1.0), random_tensor(r, &[3, 4], -1.0, 1.0)],
                Box::new(|g, v| g.add(v[0], v[1])),
            ),
        ],
    );
    run(
        "sub",
        vec![(
            vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[4], -1.0, 1.0)],
            Box::new(|g, v| g.sub(v[0], v[1])),
        )],
    );
    run(
        "mul",
        vec![(
            vec![random_tensor(r, &[4, 5], -1.0, 1.0), random_tensor(r, &[5], -1.0, 1.0)],
            Box::new(|g, v| g.mul(v[0], v[1])),
        )],
    );
    run(
        "div",
        vec![(
            vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[4], 0.5, 1.5)],
            Box::new(|g, v| g.div(v[0], v[1])),
        )],
    );
    run(
        "scale",
        vec![(vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| Ok(g.scale(v[0], -1.7))))],
    );
    run(
        "add_scalar",
        vec![(vec![random_tensor(r, &[5], -1.0, 1.0)], Box::new(|g, v| Ok(g.add_scalar(v[0], 0.4))))],
    );
    run(
        "matmul",
        vec![
            (
                vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[4, 5], -1.0, 1.0)],
                Box::new(|g, v| g.matmul(v[0], v[1])),
            ),
            (
                vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[2, 4, 2], -1.0, 1.0)],
                Box::new(|g, v| g.matmul(v[0], v[1])),
            ),
        ],
    );
    run(
        "transpose",
        vec![(
            vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0)],
            Box::new(|g, v| g.permute(v[0], &[2, 0, 1])),
        )],
    );
    run(
        "reshape",
        vec![(vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0)], Box::new(|g, v| g.reshape(v[0], &[6, 4])))],
    );
    run(
        "gather",
        vec![(
            vec![random_tensor(r, &[5, 3], -1.0, 1.0)],
            Box::new(|g, v| g.gather(v[0], &[4, 0, 4, 2])),
        )],
    );
    run(
        "concat",
        vec![(
            vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[2, 2], -1.0, 1.0)],
            Box::new(|g, v| g.concat(&[v[0], v[1]], 1)),
        )],
    );
    run(
        "layer_norm",
        vec![(
            vec![
                random_tensor(r, &[4, 6], -2.0, 2.0),
                random_tensor(r, &[6], 0.5, 1.5),
                random_tensor(r, &[6], -0.5, 0.5),
            ],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        )],
    );
    run(
        "gelu",
        vec![(vec![random_tensor(r, &[3, 5], -3.0, 3.0)], Box::new(|g, v| Ok(g.gelu(v[0]))))],
    );
    run(
        "softmax",
        vec![
            (vec![random_tensor(r, &[3, 5], -2.0, 2.0)], Box::new(|g, v| g.softmax(v[0], 1))),
            (vec![random_tensor(r, &[3, 5], -2.0, 2.0)], Box::new(|g, v| g.softmax(v[0], 0))),
        ],
    );
    run(
        "log_softmax",
        vec![(vec![random_tensor(r, &[3, 5], -2.0, 2.0)], Box::new(|g, v| g.log_softmax(v[0], 1)))],
    );
    run(
        "mean",
        vec![
            (vec![random_tensor(r, &[3, 4], -1.0, 1.0)], Box::new(|g, v| Ok(g.mean(v[0])))),
            (vec![random_tensor(r, &[3, 4, 2], -1.0, 1.0)], Box::new(|g, v| g.mean_axis(v[0], 1))),
        ],
    );
    run(
        "sum",
        vec![
            (vec![random_tensor(r, &[3, 4], -1.0, 1.0)], Box::new(|g, v| Ok(g.sum(v[0])))),
            (vec![random_tensor(r, &[3, 4, 2], -1.0, 1.0)], Box::new(|g, v| g.sum_axis(v[0], 0))),
        ],
    );
    run(
        "l2_norm",
        vec![(vec![random_tensor(r, &[4, 5], -1.0, 1.0)], Box::new(|g, v| g.l2_norm(v[0], 1)))],
    );
    run(
        "conv3d",
        vec![
            (
                vec![
                    random_tensor(r, &[2, 4, 8, 8, 8], -1.0, 1.0),
                    random_tensor(r, &[3, 4, 2, 2, 2], -0.5, 0.5),
                    random_tensor(r, &[3], -0.5, 0.5),
                ],
                Box::new(|g, v| g.conv3d(v[0], v[1], Some(v[2]), 2)),
            ),
            (
                vec![
                    random_tensor(r, &[1, 2, 5, 5, 5], -1.0, 1.0),
                    random_tensor(r, &[2, 2, 3, 3, 3], -0.5, 0.5),
                ],
                Box::new(|g, v| g.conv3d(v[0], v[1], None, 1)),
            ),
        ],
    );
    run(
        "trilinear_resize",
        vec![
            (
                vec![random_tensor(r, &[2, 4, 8, 8, 8], -1.0, 1.0)],
                Box::new(|g, v| g.resize(v[0], [5, 11, 4])),
            ),
            (
                vec![random_tensor(r, &[1, 3, 2, 4], -1.0, 1.0)],
                Box::new(|g, v| g.resize(v[0], [6, 4, 8])),
            ),
        ],
    );
    out
}
