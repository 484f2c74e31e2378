//! Reconstruction and cross-level alignment losses.
//!
//! Each loss comes in two forms: a graph form used for training and gradient
//! checks, and a plain `f64` form over slices for direct evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{MimError, Result};
use crate::hierarchy::MaskPlan;
use crate::network::ForwardBundle;
use crate::tensor::gradcheck::{grad_check_inputs, random_tensor, weighted_sum, GradCheckReport};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignVariant {
    Infonce,
    ByolCosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub temperature: f64,
    pub variant: AlignVariant,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            temperature: 0.1,
            variant: AlignVariant::Infonce,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MimError::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Per-token reconstruction distance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconDistance {
    /// Euclidean norm of the token residual.
    #[default]
    L2,
    /// Mean squared residual over the token's voxels.
    Squared,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Simultaneous,
    CoarseToFine,
    FineToCoarse,
    Level1Only,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 4] = [
        ScheduleKind::Simultaneous,
        ScheduleKind::CoarseToFine,
        ScheduleKind::FineToCoarse,
        ScheduleKind::Level1Only,
    ];

    /// `(start, end)` weight of each of `levels` levels.
    fn endpoints(self, levels: usize) -> Vec<(f64, f64)> {
        (0..levels)
            .map(|l| match self {
                ScheduleKind::Simultaneous => (1.0, 1.0),
                ScheduleKind::Level1Only => (if l == 0 { 1.0 } else { 0.0 }, if l == 0 { 1.0 } else { 0.0 }),
                _ if l == 0 => (1.0, 1.0),
                ScheduleKind::CoarseToFine if l == 1 => (2.0, 1.0),
                ScheduleKind::CoarseToFine => (0.0, 1.0),
                ScheduleKind::FineToCoarse if l == levels - 1 => (2.0, 1.0),
                ScheduleKind::FineToCoarse => (0.0, 1.0),
            })
            .collect()
    }

    /// Level weights at `step` of a `steps`-step run, ramping linearly from
    /// the start weights at step 0 to the end weights at the last step.
    pub fn level_weights(self, levels: usize, step: usize, steps: usize) -> Vec<f64> {
        let t = if steps == 0 {
            0.0
        } else {
            (step as f64 / steps as f64).clamp(0.0, 1.0)
        };
        self.endpoints(levels)
            .into_iter()
            .map(|(a, b)| a + (b - a) * t)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub schedule: ScheduleKind,
    #[serde(default)]
    pub recon_distance: ReconDistance,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            schedule: ScheduleKind::Simultaneous,
            recon_distance: ReconDistance::L2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon_per_level: Vec<f64>,
    pub align_per_pair: Vec<f64>,
    pub level_weights: Vec<f64>,
    pub recon_total: f64,
    pub align_total: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.recon_per_level
            .iter()
            .chain(&self.align_per_pair)
            .chain([&self.recon_total, &self.align_total, &self.total])
            .all(|v| v.is_finite())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossReport) -> &Vec<f64>| -> Vec<f64> {
            let len = reports.first().map_or(0, |r| f(r).len());
            (0..len)
                .map(|i| reports.iter().map(|r| f(r)[i]).sum::<f64>() / n)
                .collect()
        };
        LossReport {
            recon_per_level: avg(&|r| &r.recon_per_level),
            align_per_pair: avg(&|r| &r.align_per_pair),
            level_weights: reports.first().map(|r| r.level_weights.clone()).unwrap_or_default(),
            recon_total: reports.iter().map(|r| r.recon_total).sum::<f64>() / n,
            align_total: reports.iter().map(|r| r.align_total).sum::<f64>() / n,
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
        }
    }
}

// ---- plain evaluation ------------------------------------------------------

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mean over rows of the per-row Euclidean residual norm.
pub fn recon_level_loss(y_hat: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    if y_hat.len() != y.len() || y.is_empty() || y_hat.iter().zip(y).any(|(a, b)| a.len() != b.len()) {
        return Err(MimError::shape("recon_level_loss", "prediction and target shapes differ"));
    }
    let total: f64 = y_hat
        .iter()
        .zip(y)
        .map(|(a, b)| norm(&a.iter().zip(b).map(|(p, t)| t - p).collect::<Vec<_>>()))
        .sum();
    Ok(total / y.len() as f64)
}

/// `(1/L) Σ_l w_l · L_R^l`.
pub fn recon_total(per_level: &[f64], weights: &[f64]) -> Result<f64> {
    if per_level.is_empty() || per_level.len() != weights.len() {
        return Err(MimError::Loss(format!(
            "{} level losses for {} level weights",
            per_level.len(),
            weights.len()
        )));
    }
    Ok(per_level.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / per_level.len() as f64)
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MimError::shape("cosine_sim", format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(MimError::ZeroVector("cosine_sim"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `-log softmax(s / τ)[positive]` with `s_k = cos(c, p_k)` over all patches.
pub fn align_pair_loss(c: &[f64], positive: usize, patches: &[Vec<f64>], tau: f64) -> Result<f64> {
    if patches.len() < 2 || positive >= patches.len() {
        return Err(MimError::Loss(format!(
            "positive {positive} among {} patches",
            patches.len()
        )));
    }
    let logits = patches
        .iter()
        .map(|p| cosine_sim(c, p).map(|s| s / tau))
        .collect::<Result<Vec<_>>>()?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[positive])
}

/// Mean of the given pair losses.
pub fn align_adjacent(pair_losses: &[f64]) -> Result<f64> {
    if pair_losses.is_empty() {
        return Err(MimError::Loss("no pairs between adjacent levels".into()));
    }
    Ok(pair_losses.iter().sum::<f64>() / pair_losses.len() as f64)
}

/// `(1/(L−1)) Σ L_C^{l,l+1}`.
pub fn align_total(per_adjacent: &[f64]) -> Result<f64> {
    if per_adjacent.is_empty() {
        return Err(MimError::Loss("no adjacent level pairs".into()));
    }
    Ok(per_adjacent.iter().sum::<f64>() / per_adjacent.len() as f64)
}

pub fn byol_cosine(c: &[f64], p: &[f64]) -> Result<f64> {
    Ok(2.0 - 2.0 * cosine_sim(c, p)?)
}

pub fn combine_total(recon: f64, align: f64, alpha: f64) -> f64 {
    recon + alpha * align
}

// ---- graph evaluation ------------------------------------------------------

/// Reconstruction loss of one volume: `(|M|, C)` predictions and targets.
pub fn recon_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    y_hat: Var,
    y: Var,
    distance: ReconDistance,
) -> Result<Var> {
    if g.shape(y_hat) != g.shape(y) || g.shape(y).len() != 2 {
        return Err(MimError::shape(
            "recon_level_loss",
            format!("{:?} vs {:?}", g.shape(y_hat), g.shape(y)),
        ));
    }
    let diff = g.sub(y, y_hat)?;
    match distance {
        ReconDistance::L2 => {
            let per_token = g.l2_norm(diff, 1)?;
            Ok(g.mean(per_token))
        }
        ReconDistance::Squared => {
            let sq = g.mul(diff, diff)?;
            Ok(g.mean(sq))
        }
    }
}

fn nonzero_rows<T: Scalar>(g: &Graph<T>, x: Var) -> Result<()> {
    let t = g.value(x);
    let d = *t.shape().last().unwrap();
    if t.data().chunks(d).any(|row| row.iter().all(|v| *v == T::ZERO)) {
        return Err(MimError::ZeroVector("cosine_sim"));
    }
    Ok(())
}

/// Cosine similarities `(1, N)` between `c (1, D)` and each row of `p (N, D)`.
pub fn cosine_graph<T: Scalar>(g: &mut Graph<T>, c: Var, p: Var) -> Result<Var> {
    let (sc, sp) = (g.shape(c).to_vec(), g.shape(p).to_vec());
    if sc.len() != 2 || sc[0] != 1 || sp.len() != 2 || sp[1] != sc[1] {
        return Err(MimError::shape("cosine_sim", format!("{sc:?} vs {sp:?}")));
    }
    nonzero_rows(g, c)?;
    nonzero_rows(g, p)?;
    let ct = g.transpose(c)?;
    let cn = g.l2_norm(ct, 0)?;
    let c_hat = g.div(ct, cn)?;
    let pt = g.transpose(p)?;
    let pn = g.l2_norm(pt, 0)?;
    let p_hat = g.div(pt, pn)?;
    let row = g.transpose(c_hat)?;
    g.matmul(row, p_hat)
}

/// InfoNCE for one child context against all patches of its parent.
pub fn align_pair_graph<T: Scalar>(
    g: &mut Graph<T>,
    c: Var,
    p: Var,
    positive: usize,
    tau: f64,
) -> Result<Var> {
    let n = g.shape(p)[0];
    if n < 2 || positive >= n {
        return Err(MimError::Loss(format!("positive {positive} among {n} patches")));
    }
    let s = cosine_graph(g, c, p)?;
    let logits = g.scale(s, 1.0 / tau);
    let ls = g.log_softmax(logits, 1)?;
    let col = g.reshape(ls, &[n, 1])?;
    let pick = g.gather(col, &[positive])?;
    let pick = g.reshape(pick, &[1])?;
    Ok(g.scale(pick, -1.0))
}

/// `2 − 2·cos(c, p_positive)`.
pub fn byol_graph<T: Scalar>(g: &mut Graph<T>, c: Var, p: Var, positive: usize) -> Result<Var> {
    let row = g.gather(p, &[positive])?;
    let s = cosine_graph(g, c, row)?;
    let s = g.reshape(s, &[1])?;
    let s = g.scale(s, -2.0);
    Ok(g.add_scalar(s, 2.0))
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let all = g.concat(xs, 0)?;
    Ok(g.mean(all))
}

/// `Σ w_i x_i / n` over one-element losses.
fn weighted_mean<T: Scalar>(g: &mut Graph<T>, xs: &[Var], w: &[f64]) -> Result<Var> {
    let scaled: Vec<Var> = xs.iter().zip(w).map(|(&x, &wi)| g.scale(x, wi)).collect();
    mean_of(g, &scaled)
}

/// Graph nodes of a full hierarchy objective.
#[derive(Clone, Debug)]
pub struct ObjectiveVars {
    pub recon_per_level: Vec<Var>,
    pub align_per_pair: Vec<Var>,
    pub recon_total: Var,
    pub align_total: Var,
    pub total: Var,
    pub level_weights: Vec<f64>,
}

impl ObjectiveVars {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).item().as_f64();
        LossReport {
            recon_per_level: self.recon_per_level.iter().map(|&x| v(x)).collect(),
            align_per_pair: self.align_per_pair.iter().map(|&x| v(x)).collect(),
            level_weights: self.level_weights.clone(),
            recon_total: v(self.recon_total),
            align_total: v(self.align_total),
            total: v(self.total),
        }
    }
}

/// Reconstruction per level (mean over that level's volumes), alignment per
/// adjacent pair of levels (mean over children), and their combination.
pub fn hierarchy_objective<T: Scalar>(
    g: &mut Graph<T>,
    bundle: &ForwardBundle,
    plan: &MaskPlan,
    weights: &LossWeights,
    align: &AlignConfig,
    level_weights: &[f64],
) -> Result<ObjectiveVars> {
    let levels = plan.levels.len();
    if level_weights.len() != levels {
        return Err(MimError::Loss(format!(
            "{} level weights for {levels} levels",
            level_weights.len()
        )));
    }
    let mut recon_per_level = Vec::with_capacity(levels);
    for ids in &plan.levels {
        let losses = ids
            .iter()
            .map(|&id| {
                let v = &bundle.volumes[id];
                recon_loss_graph(g, v.y_hat, v.target, weights.recon_distance)
            })
            .collect::<Result<Vec<_>>>()?;
        recon_per_level.push(mean_of(g, &losses)?);
    }
    let recon_total = weighted_mean(g, &recon_per_level, level_weights)?;

    let mut align_per_pair = Vec::with_capacity(levels - 1);
    for ids in &plan.levels[1..] {
        let losses = ids
            .iter()
            .map(|&id| {
                let link = plan
                    .entry(id)
                    .parent
                    .ok_or_else(|| MimError::Loss(format!("volume {id} has no parent")))?;
                let c = bundle.contexts[&id];
                let p = bundle.patches[&link.volume];
                match align.variant {
                    AlignVariant::Infonce => align_pair_graph(g, c, p, link.token, align.temperature),
                    AlignVariant::ByolCosine => byol_graph(g, c, p, link.token),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if losses.is_empty() {
            return Err(MimError::Loss("no pairs between adjacent levels".into()));
        }
        align_per_pair.push(mean_of(g, &losses)?);
    }
    let align_total = mean_of(g, &align_per_pair)?;
    let scaled = g.scale(align_total, weights.alpha);
    let total = g.add(recon_total, scaled)?;
    Ok(ObjectiveVars {
        recon_per_level,
        align_per_pair,
        recon_total,
        align_total,
        total,
        level_weights: level_weights.to_vec(),
    })
}

/// Finite-difference checks of every loss with respect to its tensor inputs.
pub fn gradient_suite(eps: f64, tol: f64, seed: u64) -> Vec<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut t = |shape: &[usize]| random_tensor(&mut rng, shape, -1.0, 1.0);

    let (y_hat, y) = (t(&[5, 6]), t(&[5, 6]));
    out.push(grad_check_inputs(
        "recon_l2",
        |g, v| recon_loss_graph(g, v[0], v[1], ReconDistance::L2),
        &[y_hat.clone(), y.clone()],
        eps,
        tol,
    ));
    out.push(grad_check_inputs(
        "recon_squared",
        |g, v| recon_loss_graph(g, v[0], v[1], ReconDistance::Squared),
        &[y_hat, y],
        eps,
        tol,
    ));

    let (c, p) = (t(&[1, 4]), t(&[6, 4]));
    out.push(grad_check_inputs(
        "cosine_sim",
        |g, v| {
            let s = cosine_graph(g, v[0], v[1])?;
            weighted_sum(g, s)
        },
        &[c.clone(), p.clone()],
        eps,
        tol,
    ));
    out.push(grad_check_inputs(
        "align_pair_infonce",
        |g, v| align_pair_graph(g, v[0], v[1], 2, 0.5),
        &[c.clone(), p.clone()],
        eps,
        tol,
    ));
    out.push(grad_check_inputs(
        "align_pair_byol",
        |g, v| byol_graph(g, v[0], v[1], 3),
        &[c, p],
        eps,
        tol,
    ));

    let (c1, c2, p) = (t(&[1, 4]), t(&[1, 4]), t(&[7, 4]));
    out.push(grad_check_inputs(
        "align_adjacent",
        |g, v| {
            let a = align_pair_graph(g, v[0], v[2], 1, 0.3)?;
            let b = align_pair_graph(g, v[1], v[2], 5, 0.3)?;
            mean_of(g, &[a, b])
        },
        &[c1, c2, p],
        eps,
        tol,
    ));

    let inputs = vec![
        t(&[3, 5]),
        t(&[3, 5]),
        t(&[2, 5]),
        t(&[2, 5]),
        t(&[1, 4]),
        t(&[6, 4]),
        t(&[1, 4]),
        t(&[6, 4]),
    ];
    out.push(grad_check_inputs(
        "combined_objective",
        |g, v| {
            let r1 = recon_loss_graph(g, v[0], v[1], ReconDistance::L2)?;
            let r2 = recon_loss_graph(g, v[2], v[3], ReconDistance::L2)?;
            let recon = weighted_mean(g, &[r1, r2], &[1.0, 1.5])?;
            let a12 = align_pair_graph(g, v[4], v[5], 0, 0.1)?;
            let a23 = align_pair_graph(g, v[6], v[7], 4, 0.1)?;
            let align = mean_of(g, &[a12, a23])?;
            let scaled = g.scale(align, 0.1);
            g.add(recon, scaled)
        },
        &inputs,
        eps,
        tol,
    ));
    out
}

/// Rows of a `(n, d)` tensor as plain vectors.
pub fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let d = *t.shape().last().unwrap();
    t.data()
        .chunks(d)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recon_examples() {
        assert_eq!(recon_level_loss(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 5.0);
        let y = vec![vec![1.0, 2.0], vec![0.5, -1.0]];
        assert_eq!(recon_level_loss(&y, &y).unwrap(), 0.0);
        let two = recon_level_loss(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(two, 2.0);
    }

    #[test]
    fn recon_total_examples() {
        let sim = ScheduleKind::Simultaneous.level_weights(3, 0, 100);
        assert_eq!(recon_total(&[3.0, 6.0, 9.0], &sim).unwrap(), 6.0);
        let l1 = ScheduleKind::Level1Only.level_weights(3, 40, 100);
        assert_eq!(recon_total(&[3.0, 6.0, 9.0], &l1).unwrap(), 1.0);
        let c2f = ScheduleKind::CoarseToFine.level_weights(3, 0, 100);
        assert_eq!(c2f, vec![1.0, 2.0, 0.0]);
        assert_eq!(recon_total(&[3.0, 6.0, 9.0], &c2f).unwrap(), 5.0);
        assert!(recon_total(&[1.0, 2.0], &sim).is_err());
    }

    #[test]
    fn schedules_reach_equal_weights() {
        for kind in [ScheduleKind::CoarseToFine, ScheduleKind::FineToCoarse] {
            assert_eq!(kind.level_weights(3, 100, 100), vec![1.0, 1.0, 1.0]);
        }
        assert_eq!(ScheduleKind::FineToCoarse.level_weights(3, 0, 10), vec![1.0, 0.0, 2.0]);
        assert_eq!(ScheduleKind::CoarseToFine.level_weights(3, 5, 10), vec![1.0, 1.5, 0.5]);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let s = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((s - 0.707_106_78).abs() < 1e-7);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(MimError::ZeroVector(_))));
    }

    #[test]
    fn align_examples() {
        let p = vec![vec![1.0, 0.5]; 4];
        let l = align_pair_loss(&[0.3, 0.2], 1, &p, 0.1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-4);
        let l = align_pair_loss(&[1.0, 0.0], 0, &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        assert!((l - 0.31326).abs() < 1e-5);
        let l = align_pair_loss(&[1.0, 0.0], 0, &[vec![1.0, 0.0], vec![0.0, 1.0]], 1e-3).unwrap();
        assert!(l < 1e-2);
        assert!((align_adjacent(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(align_adjacent(&[]).is_err());
        assert!((align_total(&[0.2, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(align_total(&[0.7]).unwrap(), 0.7);
        assert_eq!(align_total(&[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn byol_examples() {
        assert!(byol_cosine(&[1.0, 2.0], &[1.0, 2.0]).unwrap().abs() < 1e-12);
        assert_eq!(byol_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(byol_cosine(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), 4.0);
    }

    #[test]
    fn combine_examples() {
        assert!((combine_total(1.0, 2.0, 0.1) - 1.2).abs() < 1e-15);
        assert_eq!(combine_total(1.5, 2.0, 0.0), 1.5);
        assert_eq!(combine_total(0.0, 0.0, 0.1), 0.0);
    }

    #[test]
    fn graph_matches_plain_forms() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let p = g.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5]).unwrap());
        let l = align_pair_graph(&mut g, c, p, 2, 0.2).unwrap();
        let plain = align_pair_loss(&[1.0, 1.0], 2, &rows(g.value(p)), 0.2).unwrap();
        assert!((g.value(l).item() - plain).abs() < 1e-12);

        let y = g.constant(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let r = recon_loss_graph(&mut g, z, y, ReconDistance::L2).unwrap();
        assert_eq!(g.value(r).item(), 5.0);
    }

    #[test]
    fn zero_context_is_an_error() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let p = g.constant(Tensor::ones(&[3, 2]));
        assert!(matches!(align_pair_graph(&mut g, c, p, 0, 0.1), Err(MimError::ZeroVector(_))));
    }
}
