use std::collections::BTreeMap;

use crate::error::{MimError, Result};
use crate::tensor::{Graph, Scalar, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameters of a [`super::ParameterSet`] recorded as graph leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub(crate) fn new(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MimError::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn linear<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn norm<T: Scalar>(g: &mut Graph<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    g.layer_norm(x, gamma, beta, LN_EPS)
}

/// Multi-head self-attention over the rows of `x (n, dim)`.
pub(crate) fn attention<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let (n, dim) = {
        let s = g.shape(x);
        (s[0], s[1])
    };
    let dh = dim / heads;
    let split = |g: &mut Graph<T>, which: &str| -> Result<Var> {
        let y = if which == "k" {
            let w = p.get(&format!("{name}.k.weight"))?;
            g.matmul(x, w)?
        } else {
            linear(g, p, &format!("{name}.{which}"), x)?
        };
        let y = g.reshape(y, &[n, heads, dh])?;
        g.permute(y, &[1, 0, 2])
    };
    let q = split(g, "q")?;
    let k = split(g, "k")?;
    let v = split(g, "v")?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = g.softmax(scores, 2)?;
    let mixed = g.matmul(attn, v)?;
    let mixed = g.permute(mixed, &[1, 0, 2])?;
    let mixed = g.reshape(mixed, &[n, dim])?;
    linear(g, p, &format!("{name}.out"), mixed)
}

/// Pre-norm transformer block.
pub(crate) fn block<T: Scalar>(
    g: &mut Graph<T>,
    p: &Bound,
    name: &str,
    x: Var,
    heads: usize,
) -> Result<Var> {
    let h = norm(g, p, &format!("{name}.ln1"), x)?;
    let h = attention(g, p, &format!("{name}.attn"), h, heads)?;
    let x = g.add(x, h)?;
    let h = norm(g, p, &format!("{name}.ln2"), x)?;
    let h = linear(g, p, &format!("{name}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, p, &format!("{name}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// Parameter shapes of one [`block`].
pub(crate) fn block_shapes(name: &str, dim: usize, hidden: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for ln in ["ln1", "ln2"] {
        out.push((format!("{name}.{ln}.gamma"), vec![dim]));
        out.push((format!("{name}.{ln}.beta"), vec![dim]));
    }
    for which in ["q", "v", "out"] {
        linear_shapes(&format!("{name}.attn.{which}"), dim, dim, out);
    }
    out.push((format!("{name}.attn.k.weight"), vec![dim, dim]));
    linear_shapes(&format!("{name}.mlp.fc1"), dim, hidden, out);
    linear_shapes(&format!("{name}.mlp.fc2"), hidden, dim, out);
}

pub(crate) fn linear_shapes(name: &str, fan_in: usize, fan_out: usize, out: &mut Vec<(String, Vec<usize>)>) {
    out.push((format!("{name}.weight"), vec![fan_in, fan_out]));
    out.push((format!("{name}.bias"), vec![fan_out]));
}
