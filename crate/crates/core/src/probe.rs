//! Transfer evaluation: Dice overlap, a frozen-encoder linear probe, and
//! reconstruction slice export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{MimError, Result};
use crate::hierarchy::{build_plan_seeded, crop, patchify, unpatchify, LevelVolume, MaskSplit};
use crate::network::{decode_predict, encode_unmasked, network_input, ParameterSet};
use crate::tensor::{Graph, Tensor};
use crate::volume::Volume;

/// `2|A∩B| / (|A|+|B|)`, and 1 when both sets are empty.
pub fn dsc(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MimError::shape(
            "dsc",
            format!("prediction has {} voxels, truth {}", pred.len(), truth.len()),
        ));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Dice per class (background, foreground), averaged over volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DscReport {
    pub per_class: Vec<f64>,
    pub mean: f64,
}

impl DscReport {
    pub fn foreground(&self) -> f64 {
        self.per_class[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub frozen: bool,
    pub seed: u64,
    /// Voxels sampled per head update.
    pub batch_voxels: usize,
    /// Fraction of the sorted dataset, taken from the end, held out for scoring.
    pub holdout_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            probe_steps: 300,
            probe_lr: 1e-2,
            frozen: true,
            seed: 0,
            batch_voxels: 16384,
            holdout_fraction: 0.5,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.frozen {
            return Err(MimError::Config("only the frozen-encoder probe is supported".into()));
        }
        if !(self.probe_lr > 0.0) || self.batch_voxels == 0 {
            return Err(MimError::Config("probe_lr and batch_voxels must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(MimError::Config("holdout_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// `(train, held_out)` index ranges of a dataset of `n` volumes.
    pub fn split(&self, n: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
        if n < 2 {
            return Err(MimError::Config(format!("probe needs at least 2 volumes, found {n}")));
        }
        let held = ((n as f64 * self.holdout_fraction).round() as usize).clamp(1, n - 1);
        Ok((0..n - held, n - held..n))
    }
}

/// Centered crop of voxels and labels to the level-1 shape.
fn probe_crop(v: &Volume, shape: [usize; 3]) -> Result<(LevelVolume, Vec<u8>)> {
    let labels = v
        .labels
        .as_ref()
        .ok_or_else(|| MimError::MissingLabels(format!("seed {:?}", v.header.seed)))?;
    let s = v.header.spatial();
    if (0..3).any(|a| s[a] < shape[a]) {
        return Err(MimError::VolumeTooSmall {
            found: s,
            needed: shape,
        });
    }
    let off: [usize; 3] = std::array::from_fn(|a| (s[a] - shape[a]) / 2);
    let c = v.header.channels();
    let x = Tensor::new(vec![c, s[0], s[1], s[2]], v.voxels.clone())?;
    let l = Tensor::new(vec![1, s[0], s[1], s[2]], labels.iter().map(|&b| b as f32).collect())?;
    let voxels = crop(&x, off, shape);
    let labels = crop(&l, off, shape).data().iter().map(|&b| b as u8).collect();
    Ok((
        LevelVolume {
            id: 0,
            level: 1,
            voxels,
            provenance: crate::hierarchy::Box3 {
                lo: off.map(|o| o as f64),
                hi: std::array::from_fn(|a| (off[a] + shape[a]) as f64),
            },
        },
        labels,
    ))
}

/// Encoder features of every token of `lv` with nothing masked, upsampled
/// trilinearly to one `embed_dim` vector per voxel: `(E, H, W, D)`.
pub fn voxel_features(params: &ParameterSet, cfg: &TrainConfig, lv: &LevelVolume) -> Result<Tensor> {
    let grid = cfg.hierarchy.grid[0];
    let n = grid.pow(3);
    let split = MaskSplit {
        masked: Vec::new(),
        unmasked: (0..n).collect(),
    };
    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let input = g.constant(network_input(lv, grid, &cfg.network)?);
    let z = encode_unmasked(&mut g, &bound, &cfg.network, 1, input, &split)?;
    let zt = g.transpose(z)?;
    let e = cfg.network.embed_dim;
    let grid_map = g.value(zt).reshape(&[e, grid, grid, grid])?;
    grid_map.resized(lv.spatial())
}

struct ProbeVolume {
    features: Tensor,
    labels: Vec<u8>,
}

impl ProbeVolume {
    fn voxels(&self) -> usize {
        self.labels.len()
    }

    fn feature(&self, i: usize, e: usize, out: &mut [f64]) {
        let n = self.voxels();
        let d = self.features.data();
        for (c, o) in out.iter_mut().enumerate().take(e) {
            *o = d[c * n + i] as f64;
        }
    }
}

/// Affine two-class head over standardized features.
struct Head {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    w: Vec<[f64; 2]>,
    b: [f64; 2],
}

impl Head {
    fn logits(&self, f: &[f64]) -> [f64; 2] {
        let mut out = self.b;
        for (c, &x) in f.iter().enumerate() {
            let x = (x - self.mean[c]) * self.inv_std[c];
            out[0] += self.w[c][0] * x;
            out[1] += self.w[c][1] * x;
        }
        out
    }
}

fn fit_head(train: &[ProbeVolume], e: usize, pcfg: &ProbeConfig) -> Head {
    let mut rng = ChaCha8Rng::seed_from_u64(pcfg.seed);
    let total: usize = train.iter().map(ProbeVolume::voxels).sum();
    let mut mean = vec![0.0; e];
    let mut sq = vec![0.0; e];
    let mut f = vec![0.0; e];
    for v in train {
        for i in 0..v.voxels() {
            v.feature(i, e, &mut f);
            for c in 0..e {
                mean[c] += f[c];
                sq[c] += f[c] * f[c];
            }
        }
    }
    let inv_std = (0..e)
        .map(|c| {
            mean[c] /= total as f64;
            let var = sq[c] / total as f64 - mean[c] * mean[c];
            1.0 / var.max(0.0).sqrt().max(1e-6)
        })
        .collect();

    let init = Normal::new(0.0, 0.01).expect("positive std");
    let mut head = Head {
        mean,
        inv_std,
        w: (0..e)
            .map(|_| [init.sample(&mut rng), init.sample(&mut rng)])
            .collect(),
        b: [0.0; 2],
    };
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![[0.0; 2]; e + 1];
    let mut s = vec![[0.0; 2]; e + 1];
    let mut grad = vec![[0.0; 2]; e + 1];
    let mut xs = vec![0.0; e];
    for t in 1..=pcfg.probe_steps {
        grad.iter_mut().for_each(|g| *g = [0.0; 2]);
        for _ in 0..pcfg.batch_voxels {
            let v = &train[rng.random_range(0..train.len())];
            let i = rng.random_range(0..v.voxels());
            v.feature(i, e, &mut f);
            let y = (v.labels[i] != 0) as usize;
            let z = head.logits(&f);
            let mx = z[0].max(z[1]);
            let ez = [(z[0] - mx).exp(), (z[1] - mx).exp()];
            let p = [ez[0] / (ez[0] + ez[1]), ez[1] / (ez[0] + ez[1])];
            for c in 0..e {
                xs[c] = (f[c] - head.mean[c]) * head.inv_std[c];
            }
            for k in 0..2 {
                let d = p[k] - (k == y) as usize as f64;
                for c in 0..e {
                    grad[c][k] += d * xs[c];
                }
                grad[e][k] += d;
            }
        }
        let lr = pcfg.probe_lr * 0.5 * (1.0 + (std::f64::consts::PI * (t - 1) as f64 / pcfg.probe_steps as f64).cos());
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for j in 0..=e {
            for k in 0..2 {
                let g = grad[j][k] / pcfg.batch_voxels as f64;
                m[j][k] = b1 * m[j][k] + (1.0 - b1) * g;
                s[j][k] = b2 * s[j][k] + (1.0 - b2) * g * g;
                let step = lr * (m[j][k] / bc1) / ((s[j][k] / bc2).sqrt() + eps);
                if j < e {
                    head.w[j][k] -= step;
                } else {
                    head.b[k] -= step;
                }
            }
        }
    }
    head
}

fn score(head: &Head, vols: &[ProbeVolume], e: usize) -> Result<DscReport> {
    let mut per_class = [0.0f64; 2];
    let mut f = vec![0.0; e];
    for v in vols {
        let mut pred = Vec::with_capacity(v.voxels());
        for i in 0..v.voxels() {
            v.feature(i, e, &mut f);
            let z = head.logits(&f);
            pred.push(z[1] > z[0]);
        }
        let truth: Vec<bool> = v.labels.iter().map(|&l| l != 0).collect();
        let inv = |x: &[bool]| x.iter().map(|b| !b).collect::<Vec<_>>();
        per_class[0] += dsc(&inv(&pred), &inv(&truth))?;
        per_class[1] += dsc(&pred, &truth)?;
    }
    let per_class: Vec<f64> = per_class.iter().map(|d| d / vols.len() as f64).collect();
    let mean = per_class.iter().sum::<f64>() / 2.0;
    Ok(DscReport { per_class, mean })
}

/// Trains an affine voxel classifier on frozen encoder features of the
/// training split of `data` and scores it on the held-out split.
pub fn linear_probe(
    params: &ParameterSet,
    cfg: &TrainConfig,
    data: &[Volume],
    pcfg: &ProbeConfig,
) -> Result<DscReport> {
    pcfg.validate()?;
    let (train, held) = pcfg.split(data.len())?;
    let shape = cfg.hierarchy.level_shape[0];
    let vols = data
        .par_iter()
        .map(|v| {
            let (lv, labels) = probe_crop(v, shape)?;
            Ok(ProbeVolume {
                features: voxel_features(params, cfg, &lv)?,
                labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let e = cfg.network.embed_dim;
    let head = fit_head(&vols[train], e, pcfg);
    score(&head, &vols[held], e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInit {
    Pretrained,
    Random,
}

impl EncoderInit {
    pub fn name(self) -> &'static str {
        match self {
            EncoderInit::Pretrained => "pretrained",
            EncoderInit::Random => "random",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub seed: u64,
    pub init: EncoderInit,
    pub report: DscReport,
}

/// Probes the pretrained parameters and a freshly initialized encoder with
/// the same seed, for every seed.
pub fn compare_probes(
    params: &ParameterSet,
    cfg: &TrainConfig,
    data: &[Volume],
    base: &ProbeConfig,
    seeds: &[u64],
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        let pcfg = ProbeConfig { seed, ..base.clone() };
        let random = ParameterSet::init(&cfg.network, &cfg.hierarchy.grid, seed)?;
        for (init, p) in [(EncoderInit::Pretrained, params), (EncoderInit::Random, &random)] {
            rows.push(ProbeRow {
                seed,
                init,
                report: linear_probe(p, cfg, data, &pcfg)?,
            });
        }
    }
    Ok(rows)
}

/// Mean foreground DSC of pretrained rows minus that of random rows.
pub fn probe_gain(rows: &[ProbeRow]) -> f64 {
    let mean = |init| {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r.init == init)
            .map(|r| r.report.foreground())
            .collect();
        xs.iter().sum::<f64>() / xs.len().max(1) as f64
    };
    mean(EncoderInit::Pretrained) - mean(EncoderInit::Random)
}

/// Appends `seed,init,dsc` rows, writing the header if the file is new.
pub fn append_probe_csv(path: &Path, rows: &[ProbeRow]) -> Result<()> {
    let fresh = !path.exists();
    let mut text = String::new();
    if fresh {
        text.push_str("seed,init,dsc\n");
    }
    for r in rows {
        writeln!(text, "{},{},{}", r.seed, r.init.name(), r.report.foreground()).unwrap();
    }
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MimError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| MimError::io(path, e))
}

/// 8-bit quantization of an intensity in `[0, 1]`.
pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Axial mid-slices of one level-1 volume.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconSlices {
    pub height: usize,
    pub width: usize,
    pub original: Vec<u8>,
    pub masked: Vec<u8>,
    pub recon: Vec<u8>,
    /// Per pixel, whether it lies in a masked token.
    pub hidden: Vec<bool>,
}

/// Masks the level-1 volume drawn from the configured hierarchy seed,
/// predicts the masked tokens, and pastes the predictions into the
/// original at masked positions.
pub fn recon_slices(params: &ParameterSet, cfg: &TrainConfig, volume: &Volume) -> Result<ReconSlices> {
    let h = build_plan_seeded(volume, &cfg.hierarchy)?;
    let lv = &h.volumes[0];
    let split = h.plan.entry(0).split();
    let grid = cfg.hierarchy.grid[0];
    let original = network_input(lv, grid, &cfg.network)?;

    let mut g = Graph::<f32>::new();
    let bound = params.bind(&mut g);
    let input = g.constant(original.clone());
    let z = encode_unmasked(&mut g, &bound, &cfg.network, 1, input, &split)?;
    let (_, y_hat) = decode_predict(&mut g, &bound, &cfg.network, 1, z, &split)?;
    let y_hat = g.value(y_hat).clone();

    let mut tokens = patchify(&original, grid)?;
    let mut blanked = tokens.clone();
    let width = tokens[0].numel();
    let flags = split.flags();
    for (row, &t) in split.masked.iter().enumerate() {
        let shape = tokens[t].shape().to_vec();
        let pred = y_hat.data()[row * width..(row + 1) * width].to_vec();
        tokens[t] = Tensor::new(shape.clone(), pred)?;
        blanked[t] = Tensor::zeros(&shape);
    }
    let recon = unpatchify(&tokens, grid)?;
    let masked = unpatchify(&blanked, grid)?;

    let s = original.shape().to_vec();
    let (hh, ww, dd) = (s[1], s[2], s[3]);
    let k = dd / 2;
    let side = hh / grid;
    let slice = |t: &Tensor| -> Vec<u8> {
        let d = t.data();
        (0..hh * ww)
            .map(|p| quantize(d[p * dd + k]))
            .collect()
    };
    let hidden = (0..hh * ww)
        .map(|p| {
            let (i, j) = (p / ww, p % ww);
            flags[((i / side) * grid + j / side) * grid + k / side]
        })
        .collect();
    Ok(ReconSlices {
        height: hh,
        width: ww,
        original: slice(&original),
        masked: slice(&masked),
        recon: slice(&recon),
        hidden,
    })
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| MimError::io(path, e))
}

/// Parses a binary PGM written by [`write_pgm`] into `(width, height, pixels)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| MimError::io(path, e))?;
    let bad = || MimError::io(path, std::io::Error::new(std::io::ErrorKind::InvalidData, "not a P5 image"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(bad());
    }
    let (w, h) = (num(&fields[1])?, num(&fields[2])?);
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels))
}

/// Writes `orig.pgm`, `masked.pgm` and `recon.pgm` into `out_dir`.
pub fn export_recon_slices(
    params: &ParameterSet,
    cfg: &TrainConfig,
    volume: &Volume,
    out_dir: &Path,
) -> Result<[PathBuf; 3]> {
    let s = recon_slices(params, cfg, volume)?;
    fs::create_dir_all(out_dir).map_err(|e| MimError::io(out_dir, e))?;
    let paths = ["orig.pgm", "masked.pgm", "recon.pgm"].map(|n| out_dir.join(n));
    for (p, px) in paths.iter().zip([&s.original, &s.masked, &s.recon]) {
        write_pgm(p, s.width, s.height, px)?;
    }
    Ok(paths)
}
