use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{MimError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// The primitive catalog, addressable by name through [`Graph::apply_primitive`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Transpose,
    Reshape,
    Gather,
    Concat,
    LayerNorm,
    Gelu,
    Softmax,
    LogSoftmax,
    Mean,
    Sum,
    L2Norm,
    Conv3d,
    TrilinearResize,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::MatMul,
        Primitive::Transpose,
        Primitive::Reshape,
        Primitive::Gather,
        Primitive::Concat,
        Primitive::LayerNorm,
        Primitive::Gelu,
        Primitive::Softmax,
        Primitive::LogSoftmax,
        Primitive::Mean,
        Primitive::Sum,
        Primitive::L2Norm,
        Primitive::Conv3d,
        Primitive::TrilinearResize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Gather => "gather",
            Primitive::Concat => "concat",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::L2Norm => "l2_norm",
            Primitive::Conv3d => "conv3d",
            Primitive::TrilinearResize => "trilinear_resize",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| MimError::UnknownPrimitive(name.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Ints(Vec<i64>),
}

pub type Attrs = BTreeMap<String, AttrValue>;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar,
    MatMul {
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Permute(Vec<usize>),
    Reshape,
    Gather(Vec<usize>),
    Concat {
        axis: usize,
        sizes: Vec<usize>,
    },
    LayerNorm {
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu,
    Softmax {
        axis: usize,
    },
    LogSoftmax {
        axis: usize,
    },
    Mean {
        axis: Option<usize>,
    },
    Sum {
        axis: Option<usize>,
    },
    L2Norm {
        axis: usize,
    },
    Conv3d {
        geom: ConvGeom,
        has_bias: bool,
    },
    Resize {
        planes: usize,
        input: [usize; 3],
        output: [usize; 3],
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<usize, Tensor<T>> {
        self.grads
    }
}

/// The computation record. Nodes are appended in evaluation order, so the
/// node list is always topologically sorted.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Sums `g` (length `n_big`) down to `n_small` by folding repetitions.
fn fold_to<T: Scalar>(g: Vec<T>, n_small: usize) -> Vec<T> {
    if g.len() == n_small {
        return g;
    }
    let mut out = vec![T::ZERO; n_small];
    for chunk in g.chunks(n_small) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ------------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok(sa.to_vec())
        } else if is_suffix(sa, sb) {
            Ok(sb.to_vec())
        } else {
            Err(MimError::shape(
                op,
                format!("{sa:?} vs {sb:?} (only leading-axis expansion is allowed)"),
            ))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        op: Op<T>,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var> {
        let shape = self.broadcast_shape(name, a, b)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let (na, nb) = (da.len(), db.len());
        let out: Vec<T> = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        Ok(self.push(Tensor::from_parts(shape, out), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", Op::Div, a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let out = self.value(x).map(|v| v * f);
        self.push(out, Op::Scale(f), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, value: f64) -> Var {
        let c = T::lit(value);
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
        let out = self
            .value(x)
            .map(|v| half * v * (T::ONE + (c * (v + k * v * v * v)).tanh()));
        self.push(out, Op::Gelu, &[x])
    }

    // ---- linear algebra & layout -----------------------------------------

    /// `(..., m, k) @ (k, n)` or batched `(..., m, k) @ (..., k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(MimError::shape(
                "matmul",
                format!("operands must be at least 2-D, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(MimError::shape(
                "matmul",
                format!("inner axes differ: {sa:?} @ {sb:?} (axis {} vs axis {})", sa.len() - 1, sb.len() - 2),
            ));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let b_shared = batch_b.is_empty();
        if !b_shared && batch_a != batch_b {
            return Err(MimError::shape(
                "matmul",
                format!("batch axes differ: {sa:?} @ {sb:?}"),
            ));
        }
        let batch: usize = batch_a.iter().product();
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), batch, m, k, n, b_shared);
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                batch,
                m,
                k,
                n,
                b_shared,
            },
            &[a, b],
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(MimError::shape(
                "transpose",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let out = kernels::permute(self.value(x).data(), &shape, perm);
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        Ok(self.push(Tensor::from_parts(out_shape, out), Op::Permute(perm.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(MimError::shape("transpose", "needs at least 2 axes"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape, &[x]))
    }

    /// Selects rows along axis 0.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if indices.is_empty() {
            return Err(MimError::shape("gather", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(MimError::shape(
                "gather",
                format!("index {bad} out of range for axis 0 of {shape:?}"),
            ));
        }
        let row: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Gather(indices.to_vec()),
            &[x],
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| MimError::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(MimError::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(MimError::shape(
                    "concat",
                    format!("{s:?} vs {base:?} off axis {axis}"),
                ));
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &len) in xs.iter().zip(&sizes) {
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { axis, sizes }, xs))
    }

    // ---- normalization & activations --------------------------------------

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().unwrap();
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(MimError::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{dim}] for input {shape:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (xv, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / dim;
        let inv_n = T::lit(1.0 / dim as f64);
        let eps = T::lit(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::ONE / (var + eps).sqrt();
            rstd.push(rs);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[i] + b[i]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    fn norm_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(MimError::shape(
                op,
                format!("axis {axis} out of range for {:?}", self.shape(x)),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.norm_axis("softmax", x, axis)?;
        let out = self.softmax_values(x, axis, false);
        Ok(self.push(out, Op::Softmax { axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.norm_axis("log_softmax", x, axis)?;
        let out = self.softmax_values(x, axis, true);
        Ok(self.push(out, Op::LogSoftmax { axis }, &[x]))
    }

    fn softmax_values(&self, x: Var, axis: usize, log: bool) -> Tensor<T> {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let d = t.data();
        let mut out = vec![T::ZERO; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = d[at(0)];
                for j in 1..len {
                    if d[at(j)] > max {
                        max = d[at(j)];
                    }
                }
                let mut sum = T::ZERO;
                for j in 0..len {
                    let e = (d[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                if log {
                    let lse = sum.ln();
                    for j in 0..len {
                        out[at(j)] = d[at(j)] - max - lse;
                    }
                } else {
                    let inv = T::ONE / sum;
                    for j in 0..len {
                        out[at(j)] *= inv;
                    }
                }
            }
        }
        Tensor::from_parts(t.shape().to_vec(), out)
    }

    // ---- reductions -------------------------------------------------------

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let t = self.value(x);
        let (shape, out) = match axis {
            None => {
                let s: T = t.data().iter().copied().sum();
                let v = if mean { s / T::lit(t.numel() as f64) } else { s };
                (vec![1], vec![v])
            }
            Some(ax) => {
                self.norm_axis(name, x, ax)?;
                let (outer, len, inner) = split_axis(t.shape(), ax);
                let d = t.data();
                let mut out = vec![T::ZERO; outer * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let src = &d[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    let inv = T::lit(1.0 / len as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = t.shape().to_vec();
                shape.remove(ax);
                if shape.is_empty() {
                    shape.push(1);
                }
                (shape, out)
            }
        };
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        Ok(self.push(Tensor::from_parts(shape, out), op, &[x]))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(x, None, true).expect("full reduction is always valid")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, None, false).expect("full reduction is always valid")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), true)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Some(axis), false)
    }

    /// Euclidean norm along `axis`, which is removed from the shape.
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sq = {
            self.norm_axis("l2_norm", x, axis)?;
            let t = self.value(x);
            let (outer, len, inner) = split_axis(t.shape(), axis);
            let d = t.data();
            let mut out = vec![T::ZERO; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        let v = d[(o * len + j) * inner + i];
                        out[o * inner + i] += v * v;
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::from_parts(shape, out.into_iter().map(|v| v.sqrt()).collect())
        };
        Ok(self.push(sq, Op::L2Norm { axis }, &[x]))
    }

    // ---- volumetric -------------------------------------------------------

    /// Unpadded 3D convolution: `x (N,Cin,H,W,D)`, `kernel (Cout,Cin,kh,kw,kd)`,
    /// optional `bias (Cout)`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 5 || sk.len() != 5 {
            return Err(MimError::shape(
                "conv3d",
                format!("input {sx:?} and kernel {sk:?} must both be 5-D"),
            ));
        }
        if sx[1] != sk[1] {
            return Err(MimError::shape(
                "conv3d",
                format!("input channels (axis 1) {} vs kernel channels (axis 1) {}", sx[1], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(MimError::Attribute {
                op: "conv3d",
                attr: "stride".into(),
            });
        }
        let mut output = [0; 3];
        for a in 0..3 {
            if sx[2 + a] < sk[2 + a] {
                return Err(MimError::shape(
                    "conv3d",
                    format!("kernel axis {} ({}) exceeds input axis {} ({})", 2 + a, sk[2 + a], 2 + a, sx[2 + a]),
                ));
            }
            output[a] = (sx[2 + a] - sk[2 + a]) / stride + 1;
        }
        if let Some(b) = bias {
            if self.shape(b) != [sk[0]] {
                return Err(MimError::shape(
                    "conv3d",
                    format!("bias {:?} must be [{}]", self.shape(b), sk[0]),
                ));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            c_out: sk[0],
            input: [sx[2], sx[3], sx[4]],
            kernel: [sk[2], sk[3], sk[4]],
            output,
            stride,
        };
        let out = kernels::conv3d(
            self.value(x).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = vec![sx[0], sk[0], output[0], output[1], output[2]];
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv3d {
                geom,
                has_bias: bias.is_some(),
            },
            &inputs,
        ))
    }

    /// Trilinear resize of the trailing three axes (align-corners false,
    /// edge clamping).
    pub fn resize(&mut self, x: Var, size: [usize; 3]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 3 || size.contains(&0) {
            return Err(MimError::shape(
                "trilinear_resize",
                format!("input {shape:?} needs 3 spatial axes, target {size:?} must be positive"),
            ));
        }
        let r = shape.len();
        let input = [shape[r - 3], shape[r - 2], shape[r - 1]];
        let planes: usize = shape[..r - 3].iter().product();
        let out = kernels::resize3d(self.value(x).data(), planes, input, size);
        let mut out_shape = shape[..r - 3].to_vec();
        out_shape.extend(size);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Resize {
                planes,
                input,
                output: size,
            },
            &[x],
        ))
    }

    // ---- name-based dispatch ---------------------------------------------

    /// Applies a catalog primitive by name.
    pub fn apply_primitive(&mut self, name: &str, inputs: &[Var], attrs: &Attrs) -> Result<Var> {
        let prim = Primitive::from_name(name)?;
        let op = prim.name();
        let want = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(MimError::shape(op, format!("expected {n} inputs, got {}", inputs.len())))
            }
        };
        let float = |key: &str| -> Result<f64> {
            match attrs.get(key) {
                Some(AttrValue::Float(v)) => Ok(*v),
                Some(AttrValue::Int(v)) => Ok(*v as f64),
                _ => Err(MimError::Attribute { op, attr: key.into() }),
            }
        };
        let int = |key: &str| -> Result<Option<usize>> {
            match attrs.get(key) {
                None => Ok(None),
                Some(AttrValue::Int(v)) if *v >= 0 => Ok(Some(*v as usize)),
                _ => Err(MimError::Attribute { op, attr: key.into() }),
            }
        };
        let ints = |key: &str| -> Result<Option<Vec<usize>>> {
            match attrs.get(key) {
                None => Ok(None),
                Some(AttrValue::Ints(v)) if v.iter().all(|&i| i >= 0) => {
                    Ok(Some(v.iter().map(|&i| i as usize).collect()))
                }
                _ => Err(MimError::Attribute { op, attr: key.into() }),
            }
        };
        let required = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| MimError::Attribute { op, attr: key.into() })
        };
        let last_axis = |v: Var, g: &Self| g.shape(v).len() - 1;

        match prim {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => {
                want(2)?;
                let (a, b) = (inputs[0], inputs[1]);
                match prim {
                    Primitive::Add => self.add(a, b),
                    Primitive::Sub => self.sub(a, b),
                    Primitive::Mul => self.mul(a, b),
                    Primitive::Div => self.div(a, b),
                    _ => self.matmul(a, b),
                }
            }
            Primitive::Scale => {
                want(1)?;
                Ok(self.scale(inputs[0], float("factor")?))
            }
            Primitive::AddScalar => {
                want(1)?;
                Ok(self.add_scalar(inputs[0], float("value")?))
            }
            Primitive::Transpose => {
                want(1)?;
                match ints("axes")? {
                    Some(perm) => self.permute(inputs[0], &perm),
                    None => self.transpose(inputs[0]),
                }
            }
            Primitive::Reshape => {
                want(1)?;
                let shape = ints("shape")?.ok_or(MimError::Attribute { op, attr: "shape".into() })?;
                self.reshape(inputs[0], &shape)
            }
            Primitive::Gather => {
                want(1)?;
                let idx = ints("indices")?.ok_or(MimError::Attribute { op, attr: "indices".into() })?;
                self.gather(inputs[0], &idx)
            }
            Primitive::Concat => self.concat(inputs, int("axis")?.unwrap_or(0)),
            Primitive::LayerNorm => {
                want(3)?;
                let eps = if attrs.contains_key("eps") { float("eps")? } else { 1e-5 };
                self.layer_norm(inputs[0], inputs[1], inputs[2], eps)
            }
            Primitive::Gelu => {
                want(1)?;
                Ok(self.gelu(inputs[0]))
            }
            Primitive::Softmax | Primitive::LogSoftmax => {
                want(1)?;
                let axis = int("axis")?.unwrap_or_else(|| last_axis(inputs[0], self));
                if prim == Primitive::Softmax {
                    self.softmax(inputs[0], axis)
                } else {
                    self.log_softmax(inputs[0], axis)
                }
            }
            Primitive::Mean | Primitive::Sum => {
                want(1)?;
                let mean = prim == Primitive::Mean;
                match int("axis")? {
                    Some(ax) => self.reduce(inputs[0], Some(ax), mean),
                    None => self.reduce(inputs[0], None, mean),
                }
            }
            Primitive::L2Norm => {
                want(1)?;
                let axis = int("axis")?.unwrap_or_else(|| last_axis(inputs[0], self));
                self.l2_norm(inputs[0], axis)
            }
            Primitive::Conv3d => {
                if inputs.len() != 2 && inputs.len() != 3 {
                    return Err(MimError::shape(op, format!("expected 2 or 3 inputs, got {}", inputs.len())));
                }
                let stride = required(int("stride")?, "stride")?;
                self.conv3d(inputs[0], inputs[1], inputs.get(2).copied(), stride)
            }
            Primitive::TrilinearResize => {
                want(1)?;
                let size = ints("size")?.ok_or(MimError::Attribute { op, attr: "size".into() })?;
                let size: [usize; 3] = size
                    .try_into()
                    .map_err(|_| MimError::Attribute { op, attr: "size".into() })?;
                self.resize(inputs[0], size)
            }
        }
    }

    // ---- reverse pass -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Every differentiable leaf gets
    /// a gradient of its own shape; leaves the loss does not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(MimError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::ONE]);
        let mut grads = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = pending[id].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                grads.insert(id, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            for (slot, input_grad) in self.input_grads(node, g) {
                if self.nodes[node.inputs[slot]].requires_grad {
                    accumulate(&mut pending[node.inputs[slot]], input_grad);
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads
                    .entry(id)
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        // Leaves created after the loss cannot be reached by it.
        for (id, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads.insert(id, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, node: &Node<T>, slot: usize) -> bool {
        self.nodes[node.inputs[slot]].requires_grad
    }

    fn input_value(&self, node: &Node<T>, slot: usize) -> &Tensor<T> {
        &self.nodes[node.inputs[slot]].value
    }

    /// Vector-Jacobian products for each input slot of `node`.
    fn input_grads(&self, node: &Node<T>, g: Vec<T>) -> Vec<(usize, Vec<T>)> {
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add | Op::Sub => {
                let na = self.input_value(node, 0).numel();
                let nb = self.input_value(node, 1).numel();
                let mut res = Vec::with_capacity(2);
                if self.wants(node, 1) {
                    let gb: Vec<T> = if matches!(node.op, Op::Sub) {
                        g.iter().map(|&v| -v).collect()
                    } else {
                        g.clone()
                    };
                    res.push((1, fold_to(gb, nb)));
                }
                if self.wants(node, 0) {
                    res.push((0, fold_to(g, na)));
                }
                res
            }
            Op::Mul | Op::Div => {
                let a = self.input_value(node, 0).data();
                let b = self.input_value(node, 1).data();
                let (na, nb) = (a.len(), b.len());
                let is_div = matches!(node.op, Op::Div);
                let mut res = Vec::with_capacity(2);
                if self.wants(node, 0) {
                    let ga: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| if is_div { v / b[i % nb] } else { v * b[i % nb] })
                        .collect();
                    res.push((0, fold_to(ga, na)));
                }
                if self.wants(node, 1) {
                    let gb: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let (av, bv) = (a[i % na], b[i % nb]);
                            if is_div {
                                -v * av / (bv * bv)
                            } else {
                                v * av
                            }
                        })
                        .collect();
                    res.push((1, fold_to(gb, nb)));
                }
                res
            }
            Op::Scale(f) => vec![(0, g.into_iter().map(|v| v * *f).collect())],
            Op::AddScalar | Op::Reshape => vec![(0, g)],
            Op::Gelu => {
                let x = self.input_value(node, 0).data();
                let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
                let three = T::lit(3.0);
                let gx = g
                    .iter()
                    .zip(x)
                    .map(|(&gv, &v)| {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let d = half * (T::ONE + t) + half * v * (T::ONE - t * t) * c * (T::ONE + three * k * v * v);
                        gv * d
                    })
                    .collect();
                vec![(0, gx)]
            }
            Op::MatMul {
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let a = self.input_value(node, 0).data();
                let b = self.input_value(node, 1).data();
                let mut res = Vec::with_capacity(2);
                if self.wants(node, 0) {
                    res.push((0, kernels::matmul_grad_a(&g, b, *batch, *m, *k, *n, *b_shared)));
                }
                if self.wants(node, 1) {
                    res.push((1, kernels::matmul_grad_b(a, &g, *batch, *m, *k, *n, *b_shared)));
                }
                res
            }
            Op::Permute(perm) => {
                let inv = kernels::inverse_perm(perm);
                vec![(0, kernels::permute(&g, out.shape(), &inv))]
            }
            Op::Gather(indices) => {
                let x = self.input_value(node, 0);
                let row: usize = x.shape()[1..].iter().product();
                let mut gx = vec![T::ZERO; x.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &v) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]) {
                        *d += v;
                    }
                }
                vec![(0, gx)]
            }
            Op::Concat { axis, sizes } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut res = Vec::with_capacity(sizes.len());
                let mut offset = 0;
                for (slot, &len) in sizes.iter().enumerate() {
                    if self.wants(node, slot) {
                        let mut gs = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gs.extend_from_slice(&g[start..start + len * inner]);
                        }
                        res.push((slot, gs));
                    }
                    offset += len;
                }
                res
            }
            Op::LayerNorm { xhat, rstd } => {
                let gamma = self.input_value(node, 1).data();
                let dim = gamma.len();
                let rows = xhat.len() / dim;
                let inv_n = T::lit(1.0 / dim as f64);
                let mut res = Vec::with_capacity(3);
                if self.wants(node, 0) {
                    let mut gx = vec![T::ZERO; xhat.len()];
                    for r in 0..rows {
                        let (gr, hr) = (&g[r * dim..(r + 1) * dim], &xhat[r * dim..(r + 1) * dim]);
                        let mut mean_d = T::ZERO;
                        let mut mean_dh = T::ZERO;
                        for i in 0..dim {
                            let d = gr[i] * gamma[i];
                            mean_d += d;
                            mean_dh += d * hr[i];
                        }
                        mean_d = mean_d * inv_n;
                        mean_dh = mean_dh * inv_n;
                        for i in 0..dim {
                            let d = gr[i] * gamma[i];
                            gx[r * dim + i] = rstd[r] * (d - mean_d - hr[i] * mean_dh);
                        }
                    }
                    res.push((0, gx));
                }
                if self.wants(node, 1) {
                    let mut gg = vec![T::ZERO; dim];
                    for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % dim] += gv * h;
                    }
                    res.push((1, gg));
                }
                if self.wants(node, 2) {
                    res.push((2, fold_to(g, dim)));
                }
                res
            }
            Op::Softmax { axis } | Op::LogSoftmax { axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        if log {
                            let gsum: T = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = g[at(j)] - y[at(j)].exp() * gsum;
                            }
                        } else {
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
                vec![(0, gx)]
            }
            Op::Mean { axis } | Op::Sum { axis } => {
                let mean = matches!(node.op, Op::Mean { .. });
                let x = self.input_value(node, 0);
                let gx = match axis {
                    None => {
                        let v = if mean { g[0] / T::lit(x.numel() as f64) } else { g[0] };
                        vec![v; x.numel()]
                    }
                    Some(ax) => {
                        let (outer, len, inner) = split_axis(x.shape(), *ax);
                        let f = if mean { T::lit(1.0 / len as f64) } else { T::ONE };
                        let mut gx = Vec::with_capacity(x.numel());
                        for o in 0..outer {
                            for _ in 0..len {
                                gx.extend(g[o * inner..(o + 1) * inner].iter().map(|&v| v * f));
                            }
                        }
                        gx
                    }
                };
                vec![(0, gx)]
            }
            Op::L2Norm { axis } => {
                let x = self.input_value(node, 0);
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let (xd, nd) = (x.data(), out.data());
                let mut gx = vec![T::ZERO; x.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = nd[o * inner + i];
                        if norm == T::ZERO {
                            continue;
                        }
                        let f = g[o * inner + i] / norm;
                        for j in 0..len {
                            let at = (o * len + j) * inner + i;
                            gx[at] = f * xd[at];
                        }
                    }
                }
                vec![(0, gx)]
            }
            Op::Conv3d { geom, has_bias } => {
                let x = self.input_value(node, 0).data();
                let k = self.input_value(node, 1).data();
                let (dx, dk, db) = kernels::conv3d_backward(
                    x,
                    k,
                    &g,
                    geom,
                    self.wants(node, 0),
                    self.wants(node, 1),
                    *has_bias && self.wants(node, 2),
                );
                let mut res = Vec::with_capacity(3);
                res.extend(dx.map(|d| (0, d)));
                res.extend(dk.map(|d| (1, d)));
                res.extend(db.map(|d| (2, d)));
                res
            }
            Op::Resize {
                planes,
                input,
                output,
            } => vec![(0, kernels::resize3d_backward(&g, *planes, *input, *output))],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_rule() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[3, 4]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 4]);
        assert!(g.value(c).data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[4, 4]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("axis"), "{err}");
    }

    #[test]
    fn conv3d_stride_arithmetic() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 8, 8, 8]));
        let k = g.constant(Tensor::ones(&[4, 1, 2, 2, 2]));
        let y = g.conv3d(x, k, None, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4, 4, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f32 * 0.7).sin() * 4.0));
        let y = g.softmax(x, 1).unwrap();
        for row in g.value(y).data().chunks(5) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-6);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2], &[0.3, -1.0, 4.0, 2.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.param(t(&[2], &[5.0, 6.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.get(y).unwrap().shape(), &[2]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(g.backward(x), Err(MimError::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_only_on_leading_axes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[4, 3]));
        let bias = g.constant(Tensor::ones(&[3]));
        let col = g.constant(Tensor::ones(&[4, 1]));
        let y = g.add(a, bias).unwrap();
        assert_eq!(g.shape(y), &[4, 3]);
        assert!(g.add(a, col).is_err());
    }

    #[test]
    fn unknown_primitive_by_name() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[2]));
        let err = g.apply_primitive("fft", &[x], &Attrs::new()).unwrap_err();
        assert!(matches!(err, MimError::UnknownPrimitive(_)));
    }

    #[test]
    fn apply_primitive_conv_needs_stride() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[1, 1, 4, 4, 4]));
        let k = g.constant(Tensor::ones(&[1, 1, 2, 2, 2]));
        let err = g.apply_primitive("conv3d", &[x, k], &Attrs::new()).unwrap_err();
        assert!(matches!(err, MimError::Attribute { .. }));
        let mut attrs = Attrs::new();
        attrs.insert("stride".into(), AttrValue::Int(2));
        let y = g.apply_primitive("conv3d", &[x, k], &attrs).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2, 2]);
    }

    #[test]
    fn resize_constant_and_identity() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::full(&[1, 2, 3, 5, 4], 0.37));
        let up = g.resize(c, [7, 2, 9]).unwrap();
        assert!(g.value(up).data().iter().all(|&v| v == 0.37));
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32).cos()));
        let same = g.resize(x, [3, 4, 5]).unwrap();
        assert_eq!(g.value(same), g.value(x));
    }

    #[test]
    fn each_node_visited_once_on_shared_subexpression() {
        // x is used by three consumers; the gradient must be accumulated, not overwritten.
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[1], &[2.0]));
        let a = g.mul(x, x).unwrap();
        let b = g.add(a, x).unwrap();
        let loss = g.sum(b);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }
}
