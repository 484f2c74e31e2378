//! The pre-training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::TrainConfig;
use crate::error::{MimError, Result};
use crate::hierarchy::build_plan;
use crate::network::{forward_hierarchy, ParameterSet};
use crate::objective::{hierarchy_objective, LossReport};
use crate::optim::{adamw_step, OptimizerState};
use crate::tensor::{Graph, Tensor};
use crate::volume::{list_volumes, read_volume, Volume};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LEVEL_WEIGHTS_FILE: &str = "level_weights.csv";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective_config.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Fresh parameters, zero moments and the batch-sampling stream for `cfg`.
pub fn init_state(cfg: &TrainConfig) -> Result<TrainState> {
    let params = ParameterSet::init(&cfg.network, &cfg.hierarchy.grid, cfg.seed)?;
    let opt = OptimizerState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    Ok(TrainState {
        params,
        opt,
        step: 0,
        rng,
    })
}

/// Loss and parameter gradients of one volume under the plan drawn from
/// `plan_seed`.
pub fn element_loss(
    volume: &Volume,
    params: &ParameterSet,
    cfg: &TrainConfig,
    plan_seed: u64,
    level_weights: &[f64],
) -> Result<(LossReport, BTreeMap<String, Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(plan_seed);
    let h = build_plan(volume, &cfg.hierarchy, &mut rng)?;
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let bundle = forward_hierarchy(&mut g, &bound, &cfg.network, &cfg.hierarchy.grid, &h)?;
    let obj = hierarchy_objective(&mut g, &bundle, &h.plan, &cfg.loss, &cfg.align, level_weights)?;
    let report = obj.report(&g);
    if !report.is_finite() {
        return Ok((report, BTreeMap::new()));
    }
    let grads = g.backward(obj.total)?;
    let map = bound
        .iter()
        .map(|(name, &v)| {
            let t = grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            (name.clone(), t)
        })
        .collect();
    Ok((report, map))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    /// Batch mean.
    pub loss: LossReport,
    pub per_volume: Vec<LossReport>,
}

/// One optimizer step over `batch`; `step` is 1-based.
pub fn train_step(batch: &[&Volume], state: &mut TrainState, cfg: &TrainConfig, step: usize) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(MimError::Config("empty batch".into()));
    }
    let seeds: Vec<u64> = batch.iter().map(|_| state.rng.next_u64()).collect();
    let weights = cfg
        .loss
        .schedule
        .level_weights(cfg.hierarchy.levels, step, cfg.steps);
    let params = &state.params;
    let results = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(v, &seed)| element_loss(v, params, cfg, seed, &weights))
        .collect::<Result<Vec<_>>>()?;
    let mut per_volume = Vec::with_capacity(results.len());
    let mut sums: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (report, grads) in results {
        if !report.is_finite() {
            return Err(MimError::NonFiniteLoss { step });
        }
        for (name, g) in grads {
            match sums.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                None => {
                    sums.insert(name, g.to_vec());
                }
            }
        }
        per_volume.push(report);
    }
    let inv = 1.0 / batch.len() as f32;
    let grads = sums
        .into_iter()
        .map(|(name, acc)| {
            let shape = state.params.get(&name).expect("bound parameter").shape().to_vec();
            Ok((name, Tensor::new(shape, acc.into_iter().map(|x| x * inv).collect())?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let lr = cfg.lr_at(step);
    adamw_step(&mut state.params, &grads, &mut state.opt, lr, &cfg.adamw())?;
    state.step = step;
    Ok(StepReport {
        step,
        lr,
        loss: LossReport::mean(&per_volume),
        per_volume,
    })
}

/// Dataset indices of the batch at 1-based `step`: consecutive volumes,
/// wrapping around.
pub fn batch_indices(step: usize, batch_size: usize, n: usize) -> Vec<usize> {
    (0..batch_size)
        .map(|i| ((step - 1) * batch_size + i) % n)
        .collect()
}

pub fn metrics_header(levels: usize) -> String {
    let mut h = String::from("step,lr");
    for l in 1..=levels {
        write!(h, ",recon_l{l}").unwrap();
    }
    for l in 1..levels {
        write!(h, ",align_{l}{}", l + 1).unwrap();
    }
    h.push_str(",total");
    h
}

pub fn metrics_row(r: &StepReport) -> String {
    let mut row = format!("{},{}", r.step, r.lr);
    for x in r.loss.recon_per_level.iter().chain(&r.loss.align_per_pair) {
        write!(row, ",{x}").unwrap();
    }
    write!(row, ",{}", r.loss.total).unwrap();
    row
}

pub fn level_weights_header(levels: usize) -> String {
    let mut h = String::from("step");
    for l in 1..=levels {
        write!(h, ",w_l{l}").unwrap();
    }
    h
}

fn level_weights_row(r: &StepReport) -> String {
    let mut row = r.step.to_string();
    for w in &r.loss.level_weights {
        write!(row, ",{w}").unwrap();
    }
    row
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Reads every volume under `dir` in sorted order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Volume>> {
    if !dir.is_dir() {
        return Err(MimError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    let paths = list_volumes(dir)?;
    if paths.is_empty() {
        return Err(MimError::EmptyDataset(dir.to_path_buf()));
    }
    paths.iter().map(read_volume).collect()
}

/// Opens a CSV for appending after keeping its header and the rows whose
/// step is at most `keep`; creates it with `header` when absent or empty.
fn open_csv(path: &Path, header: &str, keep: usize) -> Result<fs::File> {
    let mut text = format!("{header}\n");
    if keep > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let step: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s <= keep) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, &text).map_err(|e| MimError::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| MimError::io(path, e))
}

fn append_line(file: &mut fs::File, path: &Path, line: &str) -> Result<()> {
    writeln!(file, "{line}").map_err(|e| MimError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub reports: Vec<StepReport>,
}

/// Trains for `cfg.steps` steps on the volumes in `data_dir`, writing
/// metrics, the effective configuration and checkpoints to `out_dir`.
/// With `resume`, training continues from that checkpoint's step.
pub fn run_training(
    cfg: &TrainConfig,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = load_dataset(data_dir)?;
    fs::create_dir_all(out_dir.join("checkpoints")).map_err(|e| MimError::io(out_dir, e))?;
    let effective = out_dir.join(EFFECTIVE_CONFIG_FILE);
    fs::write(&effective, cfg.to_json()).map_err(|e| MimError::io(&effective, e))?;

    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config != *cfg {
                return Err(MimError::Checkpoint {
                    path: path.to_path_buf(),
                    detail: "configuration differs from the requested run".into(),
                });
            }
            ck.state
        }
        None => init_state(cfg)?,
    };
    let levels = cfg.hierarchy.levels;
    let metrics_path = out_dir.join(METRICS_FILE);
    let weights_path = out_dir.join(LEVEL_WEIGHTS_FILE);
    let mut metrics = open_csv(&metrics_path, &metrics_header(levels), state.step)?;
    let mut weights = open_csv(&weights_path, &level_weights_header(levels), state.step)?;

    let mut reports = Vec::new();
    for step in state.step + 1..=cfg.steps {
        let batch: Vec<&Volume> = batch_indices(step, cfg.batch_size, data.len())
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let report = train_step(&batch, &mut state, cfg, step)?;
        append_line(&mut metrics, &metrics_path, &metrics_row(&report))?;
        append_line(&mut weights, &weights_path, &level_weights_row(&report))?;
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            save(cfg, &state, &checkpoint_path(out_dir, step))?;
        }
        reports.push(report);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save(cfg, &state, &final_checkpoint)?;
    Ok(TrainSummary {
        final_checkpoint,
        reports,
    })
}

fn save(cfg: &TrainConfig, state: &TrainState, path: &Path) -> Result<()> {
    Checkpoint {
        config: cfg.clone(),
        state: state.clone(),
    }
    .save(path)
}
