//! Multi-level masked-volume hierarchy.
//!
//! A level-1 crop is cut from the source volume, patchified into a token grid
//! and masked. Selected tokens of each level are resized into the volumes of
//! the next level, and so on down to the last level. Volumes are visited in
//! breadth-first order; all random draws for one plan come from one RNG in
//! that order.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MimError, Result};
use crate::tensor::Tensor;
use crate::volume::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NextLevelSource {
    Masked,
    Unmasked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierarchyConfig {
    pub levels: usize,
    pub level_shape: Vec<[usize; 3]>,
    pub grid: Vec<usize>,
    pub mask_ratio: f64,
    /// Children spawned per volume at each expansion; `levels - 1` entries.
    pub fanout: Vec<usize>,
    /// Voxels per token fed to the network, per axis.
    pub token_resize: [usize; 3],
    pub next_level_source: NextLevelSource,
    pub seed: u64,
    #[serde(default)]
    pub resize_to_fit: bool,
}

impl HierarchyConfig {
    pub fn desk() -> Self {
        HierarchyConfig {
            levels: 3,
            level_shape: vec![[48; 3], [24; 3], [16; 3]],
            grid: vec![6, 4, 4],
            mask_ratio: 0.6,
            fanout: vec![2, 2],
            token_resize: [8; 3],
            next_level_source: NextLevelSource::Masked,
            seed: 0,
            resize_to_fit: false,
        }
    }

    pub fn paper() -> Self {
        HierarchyConfig {
            levels: 3,
            level_shape: vec![[384, 384, 192], [96; 3], [16; 3]],
            grid: vec![6, 6, 4],
            mask_ratio: 0.6,
            fanout: vec![4, 4],
            token_resize: [16; 3],
            next_level_source: NextLevelSource::Masked,
            seed: 0,
            resize_to_fit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels;
        if l < 2 {
            return Err(MimError::Config(format!("levels = {l}, need at least 2")));
        }
        if self.level_shape.len() != l || self.grid.len() != l || self.fanout.len() != l - 1 {
            return Err(MimError::Config(format!(
                "{l} levels need {l} level shapes, {l} grids and {} fanouts; got {}, {}, {}",
                l - 1,
                self.level_shape.len(),
                self.grid.len(),
                self.fanout.len()
            )));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(MimError::Config(format!(
                "mask ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if self.token_resize.contains(&0) {
            return Err(MimError::Config("token_resize must be positive".into()));
        }
        for (shape, &g) in self.level_shape.iter().zip(&self.grid) {
            if g == 0 || shape.iter().any(|&s| s == 0 || s % g != 0) {
                return Err(MimError::Divisibility {
                    shape: *shape,
                    grid: g,
                });
            }
        }
        for lvl in 0..l - 1 {
            let available = self.source_count(lvl);
            if self.fanout[lvl] > available {
                return Err(MimError::FanoutExceedsSource {
                    fanout: self.fanout[lvl],
                    available,
                });
            }
        }
        Ok(())
    }

    /// Token count of a volume at 0-based level `lvl`.
    pub fn tokens(&self, lvl: usize) -> usize {
        self.grid[lvl].pow(3)
    }

    pub fn masked_count(&self, lvl: usize) -> usize {
        masked_count(self.tokens(lvl), self.mask_ratio)
    }

    fn source_count(&self, lvl: usize) -> usize {
        let m = self.masked_count(lvl);
        match self.next_level_source {
            NextLevelSource::Masked => m,
            NextLevelSource::Unmasked => self.tokens(lvl) - m,
        }
    }

    /// Number of volumes at each level.
    pub fn volumes_per_level(&self) -> Vec<usize> {
        let mut out = vec![1];
        for f in &self.fanout {
            out.push(out.last().unwrap() * f);
        }
        out
    }
}

/// `round_half_up(ratio * n)`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64 + 0.5).floor() as usize).min(n)
}

/// Axis-aligned box in source-volume voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Box3 {
    pub fn contains(&self, other: &Box3) -> bool {
        (0..3).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    /// The sub-box covering voxels `[start, start + extent)` of a grid of
    /// `shape` voxels spanning `self`.
    fn sub_box(&self, shape: [usize; 3], start: [usize; 3], extent: [usize; 3]) -> Box3 {
        let mut out = *self;
        for a in 0..3 {
            let step = (self.hi[a] - self.lo[a]) / shape[a] as f64;
            out.lo[a] = self.lo[a] + start[a] as f64 * step;
            out.hi[a] = self.lo[a] + (start[a] + extent[a]) as f64 * step;
        }
        out
    }
}

/// One node of the hierarchy with its voxels, `[C, H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelVolume {
    pub id: usize,
    /// 1-based level.
    pub level: usize,
    pub voxels: Tensor,
    pub provenance: Box3,
}

impl LevelVolume {
    pub fn channels(&self) -> usize {
        self.voxels.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[1], s[2], s[3]]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSplit {
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
}

impl MaskSplit {
    pub fn n(&self) -> usize {
        self.masked.len() + self.unmasked.len()
    }

    /// Per-token flag, `true` for masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.n()];
        for &m in &self.masked {
            f[m] = true;
        }
        f
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentLink {
    pub volume: usize,
    pub token: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub id: usize,
    pub level: usize,
    pub n: usize,
    pub masked: Vec<usize>,
    pub unmasked: Vec<usize>,
    pub parent: Option<ParentLink>,
    pub children: Vec<usize>,
    pub provenance: Box3,
}

impl PlanEntry {
    pub fn split(&self) -> MaskSplit {
        MaskSplit {
            masked: self.masked.clone(),
            unmasked: self.unmasked.clone(),
        }
    }
}

/// The mask and parent structure of one hierarchy; serializes as the plan dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Volume ids per level, level 1 first.
    pub levels: Vec<Vec<usize>>,
    pub entries: Vec<PlanEntry>,
}

impl MaskPlan {
    pub fn entry(&self, id: usize) -> &PlanEntry {
        &self.entries[id]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub plan: MaskPlan,
    pub volumes: Vec<LevelVolume>,
}

/// Cuts a uniformly placed level-1 crop out of `x`.
pub fn crop_level1(x: &Volume, cfg: &HierarchyConfig, rng: &mut impl Rng) -> Result<LevelVolume> {
    let target = cfg.level_shape[0];
    let c = x.header.channels();
    let spatial = x.header.spatial();
    let mut source = Tensor::new(vec![c, spatial[0], spatial[1], spatial[2]], x.voxels.clone())?;
    let mut frame = Box3 {
        lo: [0.0; 3],
        hi: spatial.map(|s| s as f64),
    };
    if (0..3).any(|a| spatial[a] < target[a]) {
        if !cfg.resize_to_fit {
            return Err(MimError::VolumeTooSmall {
                found: spatial,
                needed: target,
            });
        }
        let fitted = std::array::from_fn(|a| spatial[a].max(target[a]));
        source = source.resized(fitted)?;
        frame = frame.sub_box(fitted, [0; 3], fitted);
    }
    let have = [source.shape()[1], source.shape()[2], source.shape()[3]];
    let offset: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=have[a] - target[a]));
    let voxels = crop(&source, offset, target);
    Ok(LevelVolume {
        id: 0,
        level: 1,
        voxels,
        provenance: frame.sub_box(have, offset, target),
    })
}

pub(crate) fn crop(x: &Tensor, offset: [usize; 3], size: [usize; 3]) -> Tensor {
    let s = x.shape();
    let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
    let [oh, ow, od] = offset;
    let [sh, sw, sd] = size;
    let src = x.data();
    let mut out = Vec::with_capacity(c * sh * sw * sd);
    for ci in 0..c {
        for i in 0..sh {
            for j in 0..sw {
                let row = ((ci * h + oh + i) * w + ow + j) * d + od;
                out.extend_from_slice(&src[row..row + sd]);
            }
        }
    }
    Tensor::new(vec![c, sh, sw, sd], out).expect("crop size")
}

/// Voxels per token along each axis.
pub fn token_shape(spatial: [usize; 3], grid: usize) -> Result<[usize; 3]> {
    if grid == 0 || spatial.iter().any(|&s| s % grid != 0) {
        return Err(MimError::Divisibility {
            shape: spatial,
            grid,
        });
    }
    Ok(spatial.map(|s| s / grid))
}

/// Grid coordinates of token `t` in lexicographic `(h, w, d)` block order.
pub fn token_coords(t: usize, grid: usize) -> [usize; 3] {
    [t / (grid * grid), (t / grid) % grid, t % grid]
}

/// Splits `[C, H, W, D]` voxels into `grid³` tokens of shape `[C, h, w, d]`.
pub fn patchify(voxels: &Tensor, grid: usize) -> Result<Vec<Tensor>> {
    let s = voxels.shape();
    let ts = token_shape([s[1], s[2], s[3]], grid)?;
    Ok((0..grid.pow(3))
        .map(|t| {
            let g = token_coords(t, grid);
            crop(voxels, std::array::from_fn(|a| g[a] * ts[a]), ts)
        })
        .collect())
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &[Tensor], grid: usize) -> Result<Tensor> {
    if tokens.len() != grid.pow(3) || tokens.is_empty() {
        return Err(MimError::shape(
            "unpatchify",
            format!("{} tokens for grid {grid}", tokens.len()),
        ));
    }
    let ts = tokens[0].shape().to_vec();
    let (c, th, tw, td) = (ts[0], ts[1], ts[2], ts[3]);
    let (h, w, d) = (th * grid, tw * grid, td * grid);
    let mut out = vec![0.0f32; c * h * w * d];
    for (t, tok) in tokens.iter().enumerate() {
        if tok.shape() != ts.as_slice() {
            return Err(MimError::shape("unpatchify", "tokens differ in shape"));
        }
        let g = token_coords(t, grid);
        let src = tok.data();
        for ci in 0..c {
            for i in 0..th {
                for j in 0..tw {
                    let dst = ((ci * h + g[0] * th + i) * w + g[1] * tw + j) * d + g[2] * td;
                    let from = ((ci * th + i) * tw + j) * td;
                    out[dst..dst + td].copy_from_slice(&src[from..from + td]);
                }
            }
        }
    }
    Tensor::new(vec![c, h, w, d], out)
}

/// Uniform masked subset of size `round_half_up(ratio * n)`; both sets sorted.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> MaskSplit {
    let m = masked_count(n, ratio);
    let mut masked = index::sample(rng, n, m).into_vec();
    masked.sort_unstable();
    let mut flags = vec![false; n];
    for &i in &masked {
        flags[i] = true;
    }
    let unmasked = (0..n).filter(|&i| !flags[i]).collect();
    MaskSplit { masked, unmasked }
}

/// Samples `fanout` source tokens of `parent` without replacement and resizes
/// each into a next-level volume. Returns the children with their parent token.
pub fn spawn_children(
    parent: &LevelVolume,
    split: &MaskSplit,
    cfg: &HierarchyConfig,
    next_id: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(LevelVolume, usize)>> {
    let lvl = parent.level - 1;
    if parent.level >= cfg.levels {
        return Err(MimError::Config(format!(
            "level {} volumes have no children",
            parent.level
        )));
    }
    let source = match cfg.next_level_source {
        NextLevelSource::Masked => &split.masked,
        NextLevelSource::Unmasked => &split.unmasked,
    };
    let fanout = cfg.fanout[lvl];
    if fanout > source.len() {
        return Err(MimError::FanoutExceedsSource {
            fanout,
            available: source.len(),
        });
    }
    let mut picked: Vec<usize> = index::sample(rng, source.len(), fanout)
        .into_iter()
        .map(|i| source[i])
        .collect();
    picked.sort_unstable();

    let grid = cfg.grid[lvl];
    let tokens = patchify(&parent.voxels, grid)?;
    let ts = token_shape(parent.spatial(), grid)?;
    let target = cfg.level_shape[lvl + 1];
    picked
        .into_iter()
        .enumerate()
        .map(|(k, t)| {
            let g = token_coords(t, grid);
            let start = std::array::from_fn(|a| g[a] * ts[a]);
            Ok((
                LevelVolume {
                    id: next_id + k,
                    level: parent.level + 1,
                    voxels: tokens[t].resized(target)?,
                    provenance: parent.provenance.sub_box(parent.spatial(), start, ts),
                },
                t,
            ))
        })
        .collect()
}

/// Crop, then breadth-first mask and expand down to the last level.
pub fn build_plan(x: &Volume, cfg: &HierarchyConfig, rng: &mut impl Rng) -> Result<Hierarchy> {
    cfg.validate()?;
    let root = crop_level1(x, cfg, rng)?;
    let mut volumes = vec![root];
    let mut entries: Vec<PlanEntry> = Vec::new();
    let mut parents: Vec<Option<ParentLink>> = vec![None];
    let mut levels = vec![Vec::new(); cfg.levels];

    let mut cursor = 0;
    while cursor < volumes.len() {
        let v = &volumes[cursor];
        let lvl = v.level - 1;
        levels[lvl].push(v.id);
        token_shape(v.spatial(), cfg.grid[lvl])?;
        let split = sample_mask(cfg.tokens(lvl), cfg.mask_ratio, rng);
        let mut children_ids = Vec::new();
        let spawned = if v.level < cfg.levels {
            spawn_children(v, &split, cfg, volumes.len(), rng)?
        } else {
            Vec::new()
        };
        entries.push(PlanEntry {
            id: v.id,
            level: v.level,
            n: split.n(),
            masked: split.masked,
            unmasked: split.unmasked,
            parent: parents[cursor],
            children: Vec::new(),
            provenance: v.provenance,
        });
        let parent_id = v.id;
        for (child, token) in spawned {
            children_ids.push(child.id);
            parents.push(Some(ParentLink {
                volume: parent_id,
                token,
            }));
            volumes.push(child);
        }
        entries[cursor].children = children_ids;
        cursor += 1;
    }
    Ok(Hierarchy {
        plan: MaskPlan { levels, entries },
        volumes,
    })
}

/// [`build_plan`] driven by the configuration's own seed.
pub fn build_plan_seeded(x: &Volume, cfg: &HierarchyConfig) -> Result<Hierarchy> {
    build_plan(x, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    /// The child volume providing the context.
    pub context: usize,
    /// The parent volume whose tokens are contrasted.
    pub parent: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
}

/// One entry per non-root volume: its parent token is the positive and
/// every other parent token is a negative.
pub fn build_pairs(plan: &MaskPlan) -> PairSet {
    let pairs = plan
        .entries
        .iter()
        .filter_map(|e| {
            let link = e.parent?;
            let n = plan.entry(link.volume).n;
            Some(Pair {
                context: e.id,
                parent: link.volume,
                positive: link.token,
                negatives: (0..n).filter(|&t| t != link.token).collect(),
            })
        })
        .collect();
    PairSet { pairs }
}
