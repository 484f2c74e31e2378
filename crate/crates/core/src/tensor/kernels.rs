//! Loop kernels over raw row-major buffers. Shape validation happens in the
//! graph layer; these functions assume consistent arguments.

use super::Scalar;

/// `c[batch] = a[batch] @ b[batch or shared]`, `a: (m,k)`, `b: (k,n)`.
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<T> {
    let mut c = vec![T::ZERO; batch * m * n];
    for bi in 0..batch {
        let a_off = bi * m * k;
        let b_off = if b_shared { 0 } else { bi * k * n };
        let c_off = bi * m * n;
        for i in 0..m {
            let c_row = &mut c[c_off + i * n..c_off + (i + 1) * n];
            let a_row = &a[a_off + i * k..a_off + (i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::ZERO {
                    continue;
                }
                let b_row = &b[b_off + p * n..b_off + (p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// `da = dc @ b^T` per batch.
pub(crate) fn matmul_grad_a<T: Scalar>(
    dc: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<T> {
    let mut da = vec![T::ZERO; batch * m * k];
    for bi in 0..batch {
        let b_off = if b_shared { 0 } else { bi * k * n };
        for i in 0..m {
            let dc_row = &dc[bi * m * n + i * n..bi * m * n + (i + 1) * n];
            let da_row = &mut da[bi * m * k + i * k..bi * m * k + (i + 1) * k];
            for (p, dv) in da_row.iter_mut().enumerate() {
                let b_row = &b[b_off + p * n..b_off + (p + 1) * n];
                let mut acc = T::ZERO;
                for (&g, &bv) in dc_row.iter().zip(b_row) {
                    acc += g * bv;
                }
                *dv = acc;
            }
        }
    }
    da
}

/// `db = a^T @ dc`, summed over the batch when `b` is shared.
pub(crate) fn matmul_grad_b<T: Scalar>(
    a: &[T],
    dc: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<T> {
    let out_batch = if b_shared { 1 } else { batch };
    let mut db = vec![T::ZERO; out_batch * k * n];
    for bi in 0..batch {
        let db_off = if b_shared { 0 } else { bi * k * n };
        for i in 0..m {
            let a_row = &a[bi * m * k + i * k..bi * m * k + (i + 1) * k];
            let dc_row = &dc[bi * m * n + i * n..bi * m * n + (i + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                if av == T::ZERO {
                    continue;
                }
                let db_row = &mut db[db_off + p * n..db_off + (p + 1) * n];
                for (d, &g) in db_row.iter_mut().zip(dc_row) {
                    *d += av * g;
                }
            }
        }
    }
    db
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` takes input axis `perm[i]`.
pub(crate) fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a strided, unpadded 3D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub stride: usize,
}

impl ConvGeom {
    fn in_index(&self, n: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        (((n * self.c_in + c) * self.input[0] + x) * self.input[1] + y) * self.input[2] + z
    }

    fn k_index(&self, o: usize, c: usize, a: usize, b: usize, d: usize) -> usize {
        (((o * self.c_in + c) * self.kernel[0] + a) * self.kernel[1] + b) * self.kernel[2] + d
    }

    fn out_len(&self) -> usize {
        self.batch * self.c_out * self.output.iter().product::<usize>()
    }
}

/// Gathers each output position's receptive field into a row: `(positions, c_in*k³)`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n: usize) -> Vec<T> {
    let [oh, ow, od] = g.output;
    let [kh, kw, kd] = g.kernel;
    let cols = g.c_in * kh * kw * kd;
    let mut out = Vec::with_capacity(oh * ow * od * cols);
    for i in 0..oh {
        for j in 0..ow {
            for l in 0..od {
                for c in 0..g.c_in {
                    for a in 0..kh {
                        for b in 0..kw {
                            let base = g.in_index(n, c, i * g.stride + a, j * g.stride + b, l * g.stride);
                            out.extend_from_slice(&x[base..base + kd]);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d<T: Scalar>(x: &[T], k: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let positions: usize = g.output.iter().product();
    let cols = g.c_in * g.kernel.iter().product::<usize>();
    let mut out = vec![T::ZERO; g.out_len()];
    for n in 0..g.batch {
        let patches = im2col(x, g, n);
        for o in 0..g.c_out {
            let w = &k[o * cols..(o + 1) * cols];
            let b = bias.map_or(T::ZERO, |b| b[o]);
            let dst = &mut out[(n * g.c_out + o) * positions..(n * g.c_out + o + 1) * positions];
            for (p, d) in dst.iter_mut().enumerate() {
                let row = &patches[p * cols..(p + 1) * cols];
                let mut acc = b;
                for (&wv, &xv) in w.iter().zip(row) {
                    acc += wv * xv;
                }
                *d = acc;
            }
        }
    }
    out
}

/// Returns `(dx, dk, dbias)`; each is computed only when requested.
pub(crate) fn conv3d_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    dy: &[T],
    g: &ConvGeom,
    want_x: bool,
    want_k: bool,
    want_bias: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let positions: usize = g.output.iter().product();
    let [kh, kw, kd] = g.kernel;
    let cols = g.c_in * kh * kw * kd;
    let mut dx = want_x.then(|| vec![T::ZERO; x.len()]);
    let mut dk = want_k.then(|| vec![T::ZERO; k.len()]);
    let mut db = want_bias.then(|| vec![T::ZERO; g.c_out]);
    let [_, ow, od] = g.output;

    for n in 0..g.batch {
        if let Some(db) = db.as_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                let start = (n * g.c_out + o) * positions;
                for &v in &dy[start..start + positions] {
                    *d += v;
                }
            }
        }
        if let Some(dk) = dk.as_mut() {
            let patches = im2col(x, g, n);
            for o in 0..g.c_out {
                let dy_o = &dy[(n * g.c_out + o) * positions..(n * g.c_out + o + 1) * positions];
                let dk_o = &mut dk[o * cols..(o + 1) * cols];
                for (p, &gv) in dy_o.iter().enumerate() {
                    if gv == T::ZERO {
                        continue;
                    }
                    let row = &patches[p * cols..(p + 1) * cols];
                    for (d, &xv) in dk_o.iter_mut().zip(row) {
                        *d += gv * xv;
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            for p in 0..positions {
                let i = p / (ow * od);
                let j = (p / od) % ow;
                let l = p % od;
                for o in 0..g.c_out {
                    let gv = dy[(n * g.c_out + o) * positions + p];
                    if gv == T::ZERO {
                        continue;
                    }
                    for c in 0..g.c_in {
                        for a in 0..kh {
                            for b in 0..kw {
                                let base =
                                    g.in_index(n, c, i * g.stride + a, j * g.stride + b, l * g.stride);
                                let kbase = g.k_index(o, c, a, b, 0);
                                for d in 0..kd {
                                    dx[base + d] += gv * k[kbase + d];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// Per-axis sampling table for align-corners-false linear interpolation
/// with edge clamping: `(lower index, upper index, upper weight)`.
pub(crate) fn linear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn lerp<T: Scalar>(a: T, b: T, w: T) -> T {
    a + w * (b - a)
}

/// Trilinear resize of the trailing three axes; `planes` is the product of
/// the leading axes.
pub(crate) fn resize3d<T: Scalar>(
    x: &[T],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
) -> Vec<T> {
    let taps: Vec<Vec<(usize, usize, T)>> = (0..3)
        .map(|a| {
            linear_taps(input[a], output[a])
                .into_iter()
                .map(|(l, h, w)| (l, h, T::lit(w)))
                .collect()
        })
        .collect();
    let [ih, iw, id] = input;
    let [oh, ow, od] = output;
    let in_plane = ih * iw * id;
    let mut out = Vec::with_capacity(planes * oh * ow * od);
    for p in 0..planes {
        let src = &x[p * in_plane..(p + 1) * in_plane];
        let at = |a: usize, b: usize, c: usize| src[(a * iw + b) * id + c];
        for &(h0, h1, wh) in &taps[0] {
            for &(w0, w1, ww) in &taps[1] {
                for &(d0, d1, wd) in &taps[2] {
                    let c00 = lerp(at(h0, w0, d0), at(h0, w0, d1), wd);
                    let c01 = lerp(at(h0, w1, d0), at(h0, w1, d1), wd);
                    let c10 = lerp(at(h1, w0, d0), at(h1, w0, d1), wd);
                    let c11 = lerp(at(h1, w1, d0), at(h1, w1, d1), wd);
                    let c0 = lerp(c00, c01, ww);
                    let c1 = lerp(c10, c11, ww);
                    out.push(lerp(c0, c1, wh));
                }
            }
        }
    }
    out
}

pub(crate) fn resize3d_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    input: [usize; 3],
    output: [usize; 3],
) -> Vec<T> {
    let taps: Vec<Vec<(usize, usize, T)>> = (0..3)
        .map(|a| {
            linear_taps(input[a], output[a])
                .into_iter()
                .map(|(l, h, w)| (l, h, T::lit(w)))
                .collect()
        })
        .collect();
    let [ih, iw, id] = input;
    let in_plane = ih * iw * id;
    let out_plane: usize = output.iter().product();
    let mut dx = vec![T::ZERO; planes * in_plane];
    for p in 0..planes {
        let g = &dy[p * out_plane..(p + 1) * out_plane];
        let dst = &mut dx[p * in_plane..(p + 1) * in_plane];
        let mut gi = 0;
        for &(h0, h1, wh) in &taps[0] {
            for &(w0, w1, ww) in &taps[1] {
                for &(d0, d1, wd) in &taps[2] {
                    let v = g[gi];
                    gi += 1;
                    let vh = [(h0, v * (T::ONE - wh)), (h1, v * wh)];
                    for (h, gh) in vh {
                        for (w, gw) in [(w0, gh * (T::ONE - ww)), (w1, gh * ww)] {
                            let base = (h * iw + w) * id;
                            dst[base + d0] += gw * (T::ONE - wd);
                            dst[base + d1] += gw * wd;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_arithmetic() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let out = permute(&data, &shape, &[2, 0, 1]);
        // out[(c, a, b)] = in[(a, b, c)]
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(out[(c * 2 + a) * 3 + b], data[(a * 3 + b) * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn taps_identity_when_sizes_match() {
        for (i, &(lo, _, w)) in linear_taps(7, 7).iter().enumerate() {
            assert_eq!(lo, i);
            assert_eq!(w, 0.0);
        }
    }

    #[test]
    fn taps_clamp_at_edges() {
        let taps = linear_taps(4, 8);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[7], (3, 3, 0.0));
    }
}
