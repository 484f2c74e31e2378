//! Hybrid conv + transformer encoder, masked-token decoder and heads.
//!
//! Every level volume enters the network at `grid × token_resize` voxels per
//! axis. Stride-2 conv stages run on the voxels with masked tokens zeroed
//! before every conv; a patch-embedding conv lands on the token grid, and
//! each conv stage is pooled per token and added through a lateral
//! projection. Only unmasked tokens enter the transformer.

mod layers;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use layers::Bound;
use layers::{block, block_shapes, linear, linear_shapes, norm};

use crate::error::{MimError, Result};
use crate::hierarchy::{patchify, unpatchify, Hierarchy, LevelVolume, MaskSplit};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub conv_stages: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub recon_dim: usize,
    pub proj_dim: usize,
    pub token_resize: [usize; 3],
}

impl NetworkConfig {
    pub fn desk() -> Self {
        NetworkConfig {
            in_channels: 1,
            base_channels: 8,
            conv_stages: 2,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 4,
            recon_dim: 512,
            proj_dim: 64,
            token_resize: [8; 3],
        }
    }

    pub fn paper() -> Self {
        NetworkConfig {
            in_channels: 1,
            base_channels: 48,
            conv_stages: 2,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            decoder_dim: 384,
            decoder_depth: 4,
            decoder_heads: 12,
            recon_dim: 4096,
            proj_dim: 2048,
            token_resize: [16; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MimError::Config(msg));
        let positive = [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("conv_stages", self.conv_stages),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("decoder_dim", self.decoder_dim),
            ("decoder_depth", self.decoder_depth),
            ("decoder_heads", self.decoder_heads),
            ("proj_dim", self.proj_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return bad(format!("network {name} must be positive"));
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!(
                "decoder_dim {} not divisible by decoder_heads {}",
                self.decoder_dim, self.decoder_heads
            ));
        }
        let [t, tw, td] = self.token_resize;
        if t != tw || t != td {
            return bad(format!("token_resize {:?} must be cubic", self.token_resize));
        }
        let reduce = 1usize << self.conv_stages;
        if t % reduce != 0 {
            return bad(format!(
                "token_resize {t} not divisible by 2^conv_stages = {reduce}"
            ));
        }
        let voxels = self.in_channels * t * t * t;
        if self.recon_dim != voxels {
            return bad(format!(
                "recon_dim {} must equal the voxel count {voxels} of a target token",
                self.recon_dim
            ));
        }
        Ok(())
    }

    pub fn token_side(&self) -> usize {
        self.token_resize[0]
    }

    /// Channels produced by conv stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }

    fn patch_kernel(&self) -> usize {
        self.token_side() >> self.conv_stages
    }

    /// Names and shapes of every parameter, for volumes whose token grids
    /// are `grids[l]` per axis at 0-based level `l`.
    pub fn parameter_shapes(&self, grids: &[usize]) -> Vec<(String, Vec<usize>)> {
        let e = self.embed_dim;
        let dd = self.decoder_dim;
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for s in 0..self.conv_stages {
            let c = self.stage_channels(s);
            out.push((format!("encoder.conv{}.weight", s + 1), vec![c, c_in, 2, 2, 2]));
            out.push((format!("encoder.conv{}.bias", s + 1), vec![c]));
            linear_shapes(&format!("encoder.lateral{}", s + 1), c, e, &mut out);
            c_in = c;
        }
        let k = self.patch_kernel();
        out.push(("encoder.patch.weight".into(), vec![e, c_in, k, k, k]));
        out.push(("encoder.patch.bias".into(), vec![e]));
        for (l, &g) in grids.iter().enumerate() {
            out.push((format!("encoder.pos.l{}", l + 1), vec![g.pow(3), e]));
        }
        for i in 0..self.depth {
            block_shapes(&format!("encoder.block{i}"), e, e * self.mlp_ratio, &mut out);
        }
        out.push(("encoder.norm.gamma".into(), vec![e]));
        out.push(("encoder.norm.beta".into(), vec![e]));

        linear_shapes("decoder.embed", e, dd, &mut out);
        out.push(("decoder.mask_token".into(), vec![1, dd]));
        for (l, &g) in grids.iter().enumerate() {
            out.push((format!("decoder.pos.l{}", l + 1), vec![g.pow(3), dd]));
        }
        for i in 0..self.decoder_depth {
            block_shapes(&format!("decoder.block{i}"), dd, dd * self.mlp_ratio, &mut out);
        }
        out.push(("decoder.norm.gamma".into(), vec![dd]));
        out.push(("decoder.norm.beta".into(), vec![dd]));

        linear_shapes("head.recon", dd, self.recon_dim, &mut out);
        linear_shapes("head.lift", dd, e, &mut out);
        linear_shapes("head.proj.fc1", e, e, &mut out);
        linear_shapes("head.proj.fc2", e, self.proj_dim, &mut out);
        out
    }
}

/// Whether decoupled weight decay applies to the named parameter.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with("mask_token")
        || name.contains(".pos."))
}

/// Named network parameters, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    /// Seeded initialization: conv and linear weights `N(0, 1/fan_in)`,
    /// positional embeddings and the mask token `N(0, 0.02²)`, norm scales
    /// one, biases and shifts zero.
    pub fn init(cfg: &NetworkConfig, grids: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.parameter_shapes(grids) {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                let std = if decays(&name) {
                    let fan_in: usize = if shape.len() == 5 {
                        shape[1..].iter().product()
                    } else {
                        shape[0]
                    };
                    (1.0 / fan_in as f32).sqrt()
                } else {
                    0.02
                };
                let dist = Normal::new(0.0f32, std).expect("positive std");
                let n = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| dist.sample(&mut rng)).collect())?
            };
            tensors.insert(name, t);
        }
        Ok(ParameterSet { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ParameterSet { tensors }
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(slot) if slot.shape() == value.shape() => {
                *slot = value;
                Ok(())
            }
            Some(slot) => Err(MimError::shape(
                "parameter",
                format!("{name}: {:?} vs {:?}", slot.shape(), value.shape()),
            )),
            None => Err(MimError::Config(format!("unknown parameter {name}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every parameter as a trainable leaf of `g`.
    pub fn bind<T: Scalar>(&self, g: &mut Graph<T>) -> Bound {
        Bound::new(
            self.tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.cast::<T>())))
                .collect(),
        )
    }
}

/// Per-token resize of a level volume to `grid × token_side` voxels per axis.
/// Resizing token by token keeps every network token a function of its
/// own source token only.
pub fn network_input(v: &LevelVolume, grid: usize, cfg: &NetworkConfig) -> Result<Tensor> {
    let t = cfg.token_side();
    if v.spatial() == [grid * t; 3] {
        return Ok(v.voxels.clone());
    }
    let tokens = patchify(&v.voxels, grid)?
        .into_iter()
        .map(|tok| tok.resized(cfg.token_resize))
        .collect::<Result<Vec<_>>>()?;
    unpatchify(&tokens, grid)
}

/// Flattened voxels of the selected tokens, one row each.
pub fn token_rows(input: &Tensor, grid: usize, indices: &[usize]) -> Result<Tensor> {
    let tokens = patchify(input, grid)?;
    let width = tokens[0].numel();
    let mut data = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        data.extend_from_slice(tokens[i].data());
    }
    Tensor::new(vec![indices.len(), width], data)
}

fn check_split(split: &MaskSplit, n: usize) -> Result<()> {
    if split.n() != n {
        return Err(MimError::shape(
            "mask",
            format!("mask covers {} tokens, grid has {n}", split.n()),
        ));
    }
    if split.unmasked.is_empty() {
        return Err(MimError::shape("mask", "no unmasked tokens"));
    }
    if split.masked.iter().chain(&split.unmasked).any(|&i| i >= n) {
        return Err(MimError::shape("mask", "token index out of range"));
    }
    Ok(())
}

/// `1` on voxels of unmasked tokens and `0` on masked ones at `side` voxels
/// per token.
fn keep_mask<T: Scalar>(flags: &[bool], grid: usize, side: usize) -> Tensor<T> {
    let s = grid * side;
    Tensor::from_fn(&[s, s, s], |i| {
        let (a, b, c) = (i / (s * s), (i / s) % s, i % s);
        let t = ((a / side) * grid + b / side) * grid + c / side;
        if flags[t] {
            T::ZERO
        } else {
            T::ONE
        }
    })
}

/// Mean over each token's voxels: `(1, C, g·r, g·r, g·r)` to `(g³, C)`.
fn pool_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, grid: usize, side: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let n = grid.pow(3);
    if side == 1 {
        let y = g.reshape(x, &[c, n])?;
        return g.transpose(y);
    }
    let y = g.reshape(x, &[c, grid, side, grid, side, grid, side])?;
    let y = g.permute(y, &[1, 3, 5, 0, 2, 4, 6])?;
    let y = g.reshape(y, &[n, c, side.pow(3)])?;
    g.mean_axis(y, 2)
}

fn level_grid(shape: &[usize], cfg: &NetworkConfig) -> Result<usize> {
    let t = cfg.token_side();
    if shape.len() != 4 || shape[0] != cfg.in_channels {
        return Err(MimError::shape(
            "encoder",
            format!("input {shape:?} must be [{}, H, W, D]", cfg.in_channels),
        ));
    }
    let side = shape[1];
    if side % t != 0 || shape[2] != side || shape[3] != side {
        return Err(MimError::shape(
            "encoder",
            format!("input {shape:?} is not a cubic grid of {t}-voxel tokens"),
        ));
    }
    Ok(side / t)
}

/// Encoder features for the unmasked tokens: `(|U|, embed_dim)`.
pub fn encode_unmasked<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetworkConfig,
    level: usize,
    input: Var,
    split: &MaskSplit,
) -> Result<Var> {
    let shape = g.shape(input).to_vec();
    let grid = level_grid(&shape, cfg)?;
    check_split(split, grid.pow(3))?;
    let flags = split.flags();
    let t = cfg.token_side();

    let mut h = g.reshape(input, &[1, shape[0], shape[1], shape[2], shape[3]])?;
    let mut stages = Vec::with_capacity(cfg.conv_stages);
    for s in 0..cfg.conv_stages {
        let keep = g.constant(keep_mask(&flags, grid, t >> s));
        h = g.mul(h, keep)?;
        let k = p.get(&format!("encoder.conv{}.weight", s + 1))?;
        let b = p.get(&format!("encoder.conv{}.bias", s + 1))?;
        h = g.conv3d(h, k, Some(b), 2)?;
        h = g.gelu(h);
        stages.push(h);
    }
    let keep = g.constant(keep_mask(&flags, grid, cfg.patch_kernel()));
    h = g.mul(h, keep)?;
    let k = p.get("encoder.patch.weight")?;
    let b = p.get("encoder.patch.bias")?;
    let e = g.conv3d(h, k, Some(b), cfg.patch_kernel())?;
    let e = g.reshape(e, &[cfg.embed_dim, grid.pow(3)])?;
    let e = g.transpose(e)?;
    let mut x = g.gather(e, &split.unmasked)?;

    for (s, f) in stages.into_iter().enumerate() {
        let pooled = pool_tokens(g, f, grid, t >> (s + 1))?;
        let rows = g.gather(pooled, &split.unmasked)?;
        let lat = linear(g, p, &format!("encoder.lateral{}", s + 1), rows)?;
        x = g.add(x, lat)?;
    }
    let pos = p.get(&format!("encoder.pos.l{level}"))?;
    let pos = g.gather(pos, &split.unmasked)?;
    x = g.add(x, pos)?;
    for i in 0..cfg.depth {
        x = block(g, p, &format!("encoder.block{i}"), x, cfg.heads)?;
    }
    norm(g, p, "encoder.norm", x)
}

/// Rows ordered unmasked-then-masked, scattered back into token order.
fn to_token_order<T: Scalar>(
    g: &mut Graph<T>,
    split: &MaskSplit,
    unmasked_rows: Var,
    masked_rows: Var,
) -> Result<Var> {
    let both = g.concat(&[unmasked_rows, masked_rows], 0)?;
    let mut slot = vec![0usize; split.n()];
    for (pos, &t) in split.unmasked.iter().chain(&split.masked).enumerate() {
        slot[t] = pos;
    }
    g.gather(both, &slot)
}

/// Decoder latents over the full grid `(N, decoder_dim)` and predictions for
/// the masked tokens `(|M|, recon_dim)`.
pub fn decode_predict<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetworkConfig,
    level: usize,
    z: Var,
    split: &MaskSplit,
) -> Result<(Var, Var)> {
    let zs = g.shape(z).to_vec();
    if zs != [split.unmasked.len(), cfg.embed_dim] {
        return Err(MimError::shape(
            "decoder",
            format!(
                "z {zs:?} does not match [{}, {}]",
                split.unmasked.len(),
                cfg.embed_dim
            ),
        ));
    }
    let visible = linear(g, p, "decoder.embed", z)?;
    let token = p.get("decoder.mask_token")?;
    let hidden = g.gather(token, &vec![0; split.masked.len()])?;
    let mut x = to_token_order(g, split, visible, hidden)?;
    let pos = p.get(&format!("decoder.pos.l{level}"))?;
    x = g.add(x, pos)?;
    for i in 0..cfg.decoder_depth {
        x = block(g, p, &format!("decoder.block{i}"), x, cfg.decoder_heads)?;
    }
    let q = norm(g, p, "decoder.norm", x)?;
    let rows = g.gather(q, &split.masked)?;
    let y_hat = linear(g, p, "head.recon", rows)?;
    Ok((q, y_hat))
}

/// Per-token embeddings of a parent volume `(N, embed_dim)`: encoder
/// features for unmasked tokens, lifted decoder latents for masked ones.
pub fn parent_tokens<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    z: Var,
    q: Var,
    split: &MaskSplit,
) -> Result<Var> {
    let rows = g.gather(q, &split.masked)?;
    let lifted = linear(g, p, "head.lift", rows)?;
    to_token_order(g, split, z, lifted)
}

fn projection<T: Scalar>(g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
    let h = linear(g, p, "head.proj.fc1", x)?;
    let h = g.gelu(h);
    linear(g, p, "head.proj.fc2", h)
}

/// Context vector of a child: the projected mean of its unmasked-token
/// features, `(1, proj_dim)`.
pub fn project_context<T: Scalar>(g: &mut Graph<T>, p: &Bound, z_child: Var) -> Result<Var> {
    let pooled = g.mean_axis(z_child, 0)?;
    let e = g.shape(pooled)[0];
    let pooled = g.reshape(pooled, &[1, e])?;
    projection(g, p, pooled)
}

/// Context vector of a child `(1, proj_dim)` and patch embeddings of its
/// parent `(N, proj_dim)` through the shared projection head.
pub fn project<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    z_child: Var,
    parent: Var,
) -> Result<(Var, Var)> {
    let c = project_context(g, p, z_child)?;
    let patches = projection(g, p, parent)?;
    Ok((c, patches))
}

/// Graph outputs for one level volume.
#[derive(Clone, Copy, Debug)]
pub struct VolumeForward {
    pub id: usize,
    pub level: usize,
    pub z: Var,
    pub q: Var,
    pub y_hat: Var,
    pub target: Var,
}

/// Forward outputs over a whole hierarchy.
#[derive(Clone, Debug)]
pub struct ForwardBundle {
    pub volumes: Vec<VolumeForward>,
    /// Context vector per non-root volume id.
    pub contexts: BTreeMap<usize, Var>,
    /// Patch embeddings per parent volume id.
    pub patches: BTreeMap<usize, Var>,
}

/// Runs every volume of `h` through the network.
pub fn forward_hierarchy<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &NetworkConfig,
    grids: &[usize],
    h: &Hierarchy,
) -> Result<ForwardBundle> {
    let mut volumes = Vec::with_capacity(h.volumes.len());
    for v in &h.volumes {
        let entry = h.plan.entry(v.id);
        let split = entry.split();
        let grid = grids[v.level - 1];
        let input = network_input(v, grid, cfg)?;
        let target = g.constant(token_rows(&input, grid, &split.masked)?.cast::<T>());
        let input = g.constant(input.cast::<T>());
        let z = encode_unmasked(g, p, cfg, v.level, input, &split)?;
        let (q, y_hat) = decode_predict(g, p, cfg, v.level, z, &split)?;
        volumes.push(VolumeForward {
            id: v.id,
            level: v.level,
            z,
            q,
            y_hat,
            target,
        });
    }
    let mut patches = BTreeMap::new();
    let mut contexts = BTreeMap::new();
    for e in &h.plan.entries {
        if e.children.is_empty() {
            continue;
        }
        let parent = volumes[e.id];
        let tokens = parent_tokens(g, p, parent.z, parent.q, &e.split())?;
        patches.insert(e.id, projection(g, p, tokens)?);
        for &child in &e.children {
            contexts.insert(child, project_context(g, p, volumes[child].z)?);
        }
    }
    Ok(ForwardBundle {
        volumes,
        contexts,
        patches,
    })
}

/// Smallest configuration exercising every network component: level grids
/// of 2³ tokens, embed width 8, one block each.
pub fn miniature() -> (NetworkConfig, crate::hierarchy::HierarchyConfig) {
    let net = NetworkConfig {
        in_channels: 1,
        base_channels: 2,
        conv_stages: 1,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        decoder_dim: 4,
        decoder_depth: 1,
        decoder_heads: 1,
        recon_dim: 64,
        proj_dim: 4,
        token_resize: [4; 3],
    };
    let hier = crate::hierarchy::HierarchyConfig {
        levels: 2,
        level_shape: vec![[8; 3], [4; 3]],
        grid: vec![2, 2],
        mask_ratio: 0.5,
        fanout: vec![2],
        token_resize: [4; 3],
        next_level_source: crate::hierarchy::NextLevelSource::Masked,
        seed: 0,
        resize_to_fit: false,
    };
    (net, hier)
}

/// Finite-difference check of every network parameter on the miniature
/// configuration, through a weighted sum of predictions, contexts and patch
/// embeddings.
pub fn gradient_check(eps: f64, tol: f64, seed: u64) -> Result<crate::tensor::gradcheck::GradCheckReport> {
    use crate::tensor::gradcheck::{grad_check_inputs, random_tensor, weighted_sum};
    use crate::volume::{generate_synthetic, SyntheticSpec};

    let (net, hier_cfg) = miniature();
    let spec = SyntheticSpec {
        num_blobs: 1,
        blob_radius_range: [2.0, 3.0],
        noise_std: 0.05,
        background_level: 0.2,
    };
    let volume = generate_synthetic(seed, [1, 8, 8, 8], &spec)?;
    let h = crate::hierarchy::build_plan(&volume, &hier_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let params = ParameterSet::init(&net, &hier_cfg.grid, seed)?;
    let names: Vec<String> = params.names().cloned().collect();
    // Checked at a generic point rather than at initialization, where the
    // near-zero mask token makes the decoder norm badly conditioned.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let inputs: Vec<Tensor<f64>> = params
        .iter()
        .map(|(name, t)| {
            let r = random_tensor(&mut rng, t.shape(), -0.5, 0.5);
            if name.ends_with(".gamma") {
                r.map(|v| 1.0 + 0.4 * v)
            } else {
                r
            }
        })
        .collect();
    let grids = hier_cfg.grid.clone();
    Ok(grad_check_inputs(
        "network",
        |g, vars| {
            let bound = Bound::new(names.iter().cloned().zip(vars.iter().copied()).collect());
            let out = forward_hierarchy(g, &bound, &net, &grids, &h)?;
            let mut terms = Vec::new();
            for v in &out.volumes {
                terms.push(weighted_sum(g, v.y_hat)?);
            }
            for &c in out.contexts.values() {
                terms.push(weighted_sum(g, c)?);
            }
            for &p in out.patches.values() {
                terms.push(weighted_sum(g, p)?);
            }
            let all = g.concat(&terms, 0)?;
            Ok(g.sum(all))
        },
        &inputs,
        eps,
        tol,
    ))
}
