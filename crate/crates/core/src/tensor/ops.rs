//! Differentiable operations. Each forward method on [`Var`] records an
//! [`Op`] whose `backward` maps the output gradient to input gradients.

use super::gemm::gemm;
use super::tape::Var;
use super::{strides, Tensor};
use crate::error::{dim_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(super) enum UnaryKind {
    Relu,
    Gelu,
    Softplus,
}

/// Convolution flavour for [`Var::convolve`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    /// Dense cross-correlation, kernel `[C_out, C_in, kh, kw]`.
    Standard,
    /// One filter per channel, kernel `[C, 1, kh, kw]`.
    Depthwise,
    /// 1×1 dense mixing, kernel `[C_out, C_in, 1, 1]`.
    Pointwise,
}

pub(super) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Reshape {
        a: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    BroadcastTo {
        a: usize,
    },
    SumAll {
        a: usize,
    },
    MeanAll {
        a: usize,
    },
    SumLast {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
        training: bool,
    },
    Prelu {
        x: usize,
        slope: usize,
    },
    GemPool {
        x: usize,
        p: usize,
        eps: f64,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
    },
    Depthwise {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    GatherFlat {
        a: usize,
        idx: Vec<usize>,
    },
}

type Contributions = Vec<(usize, Vec<f64>)>;

impl Op {
    pub(super) fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Binary { a, b, .. } | MatMul { a, b } => vec![*a, *b],
            Unary { a, .. }
            | Scale { a, .. }
            | Permute { a, .. }
            | Reshape { a }
            | Narrow { a, .. }
            | BroadcastTo { a }
            | SumAll { a }
            | MeanAll { a }
            | SumLast { a }
            | Softmax { a }
            | LogSoftmax { a }
            | GatherFlat { a, .. } => vec![*a],
            Concat { inputs, .. } => inputs.clone(),
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Prelu { x, slope } => vec![*x, *slope],
            GemPool { x, p, .. } => vec![*x, *p],
            Conv2d { x, w, bias, .. } => {
                let mut v = vec![*x, *w];
                v.extend(bias);
                v
            }
            Depthwise { x, w, .. } => vec![*x, *w],
            GatherRows { table, .. } => vec![*table],
        }
    }

    /// Input-gradient contributions given the output gradient `g`.
    pub(super) fn backward<'a>(
        &self,
        g: &[f64],
        out: &Tensor,
        value: &dyn Fn(usize) -> &'a Tensor,
    ) -> Contributions {
        use Op::*;
        match self {
            Leaf => vec![],
            Binary { kind, a, b } => {
                let (av, bv) = (value(*a), value(*b));
                let out_shape = out.shape();
                let amap = broadcast_map(av.shape(), out_shape);
                let bmap = broadcast_map(bv.shape(), out_shape);
                let mut ga = vec![0.0; av.numel()];
                let mut gb = vec![0.0; bv.numel()];
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        let sign = if *kind == BinaryKind::Sub { -1.0 } else { 1.0 };
                        for (o, &gv) in g.iter().enumerate() {
                            ga[amap[o]] += gv;
                            gb[bmap[o]] += sign * gv;
                        }
                    }
                    BinaryKind::Mul => {
                        let (ad, bd) = (av.data(), bv.data());
                        for (o, &gv) in g.iter().enumerate() {
                            ga[amap[o]] += gv * bd[bmap[o]];
                            gb[bmap[o]] += gv * ad[amap[o]];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Unary { kind, a } => {
                let x = value(*a).data();
                let gx = match kind {
                    UnaryKind::Relu => x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                    UnaryKind::Gelu => x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| gv * gelu_grad(xv))
                        .collect(),
                    UnaryKind::Softplus => x
                        .iter()
                        .zip(g)
                        .map(|(&xv, &gv)| gv * sigmoid(xv))
                        .collect(),
                };
                vec![(*a, gx)]
            }
            Scale { a, factor } => vec![(*a, g.iter().map(|v| v * factor).collect())],
            MatMul { a, b } => matmul_backward(g, value(*a), value(*b), *a, *b),
            Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (data, _) = permute_data(g, out.shape(), &inverse);
                vec![(*a, data)]
            }
            Reshape { a } => vec![(*a, g.to_vec())],
            Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &i in inputs {
                    let len = value(i).shape()[*axis];
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    res.push((i, gi));
                }
                res
            }
            Narrow { a, axis, start } => {
                let ishape = value(*a).shape();
                let outer: usize = ishape[..*axis].iter().product();
                let inner: usize = ishape[axis + 1..].iter().product();
                let total = ishape[*axis];
                let len = out.shape()[*axis];
                let mut ga = vec![0.0; value(*a).numel()];
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*a, ga)]
            }
            BroadcastTo { a } => {
                let av = value(*a);
                let map = broadcast_map(av.shape(), out.shape());
                let mut ga = vec![0.0; av.numel()];
                for (o, &gv) in g.iter().enumerate() {
                    ga[map[o]] += gv;
                }
                vec![(*a, ga)]
            }
            SumAll { a } => vec![(*a, vec![g[0]; value(*a).numel()])],
            MeanAll { a } => {
                let n = value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            SumLast { a } => {
                let av = value(*a);
                let d = *av.shape().last().unwrap();
                let ga = (0..av.numel()).map(|i| g[i / d]).collect();
                vec![(*a, ga)]
            }
            Softmax { a } => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                vec![(*a, ga)]
            }
            LogSoftmax { a } => {
                let y = out.data();
                let d = *out.shape().last().unwrap();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let gsum: f64 = gr.iter().sum();
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = gv - yv.exp() * gsum;
                    }
                }
                vec![(*a, ga)]
            }
            LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gm = value(*gamma).data();
                let d = gm.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                for (row, ((xr, gr), dxr)) in xhat
                    .chunks(d)
                    .zip(g.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                        ggamma[j] += gr[j] * xr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gm[j];
                        dxr[j] = rstd[row] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            } => {
                let shape = out.shape();
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let gm = value(*gamma).data();
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            ggamma[ci] += g[i] * xhat[i];
                            gbeta[ci] += g[i];
                            let dxh = g[i] * gm[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * xhat[i];
                        }
                    }
                }
                let m = (b * inner) as f64;
                let mut gx = vec![0.0; g.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * inner;
                        for i in base..base + inner {
                            let dxh = g[i] * gm[ci];
                            gx[i] = if *training {
                                rstd[ci]
                                    * (dxh
                                        - sum_dxhat[ci] / m
                                        - xhat[i] * sum_dxhat_xhat[ci] / m)
                            } else {
                                rstd[ci] * dxh
                            };
                        }
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Prelu { x, slope } => {
                let xv = value(*x);
                let a = value(*slope).data();
                let shape = xv.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let mut gx = vec![0.0; g.len()];
                let mut ga = vec![0.0; c];
                for (i, (&xi, &gi)) in xv.data().iter().zip(g).enumerate() {
                    let ci = (i / inner) % c;
                    if xi >= 0.0 {
                        gx[i] = gi;
                    } else {
                        gx[i] = a[ci] * gi;
                        ga[ci] += gi * xi;
                    }
                }
                vec![(*x, gx), (*slope, ga)]
            }
            GemPool { x, p, eps } => {
                let xv = value(*x);
                let pv = value(*p).item();
                let inner: usize = xv.shape()[2..].iter().product();
                let n = inner as f64;
                let y = out.data();
                let mut gx = vec![0.0; xv.numel()];
                let mut gp = 0.0;
                for (row, xr) in xv.data().chunks(inner).enumerate() {
                    let mut m = 0.0;
                    let mut m_log = 0.0;
                    for &xi in xr {
                        let xc = xi.max(*eps);
                        let pw = xc.powf(pv);
                        m += pw;
                        m_log += pw * xc.ln();
                    }
                    m /= n;
                    m_log /= n;
                    let scale = g[row] * m.powf(1.0 / pv - 1.0) / n;
                    for (j, &xi) in xr.iter().enumerate() {
                        if xi >= *eps {
                            gx[row * inner + j] = scale * xi.powf(pv - 1.0);
                        }
                    }
                    gp += g[row] * y[row] * (-m.ln() / (pv * pv) + m_log / (pv * m));
                }
                vec![(*x, gx), (*p, vec![gp])]
            }
            Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
                cols,
            } => {
                let xv = value(*x);
                let wv = value(*w);
                let (b, cin, h, wd) = dims4(xv.shape());
                let (cout, _, kh, kw) = dims4(wv.shape());
                let (_, _, ho, wo) = dims4(out.shape());
                let ckk = cin * kh * kw;
                let hw = ho * wo;
                let mut gw = vec![0.0; wv.numel()];
                let mut gx = vec![0.0; xv.numel()];
                let mut dcols = vec![0.0; ckk * hw];
                for bi in 0..b {
                    let gb = &g[bi * cout * hw..(bi + 1) * cout * hw];
                    let cb = &cols[bi * ckk * hw..(bi + 1) * ckk * hw];
                    gemm(cout, hw, ckk, gb, false, cb, true, &mut gw, true);
                    gemm(ckk, cout, hw, wv.data(), true, gb, false, &mut dcols, false);
                    col2im(
                        &dcols,
                        &mut gx[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        (cin, h, wd),
                        (kh, kw),
                        (ho, wo),
                        *stride,
                        *pad,
                    );
                }
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(bias) = bias {
                    let mut gbias = vec![0.0; cout];
                    for (i, chunk) in g.chunks(hw).enumerate() {
                        gbias[i % cout] += chunk.iter().sum::<f64>();
                    }
                    res.push((*bias, gbias));
                }
                res
            }
            Depthwise { x, w, stride, pad } => {
                let xv = value(*x);
                let wv = value(*w);
                let (b, c, h, wd) = dims4(xv.shape());
                let (_, _, kh, kw) = dims4(wv.shape());
                let (_, _, ho, wo) = dims4(out.shape());
                let (xd, wdat) = (xv.data(), wv.data());
                let mut gx = vec![0.0; xv.numel()];
                let mut gw = vec![0.0; wv.numel()];
                for bi in 0..b {
                    for ci in 0..c {
                        let xbase = (bi * c + ci) * h * wd;
                        let obase = (bi * c + ci) * ho * wo;
                        let kbase = ci * kh * kw;
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[obase + oy * wo + ox];
                                for ki in 0..kh {
                                    let iy = (oy * stride + ki) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kj in 0..kw {
                                        let ix = (ox * stride + kj) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = xbase + iy as usize * wd + ix as usize;
                                        let ki_flat = kbase + ki * kw + kj;
                                        gx[xi] += gv * wdat[ki_flat];
                                        gw[ki_flat] += gv * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![(*x, gx), (*w, gw)]
            }
            GatherRows { table, idx } => {
                let tv = value(*table);
                let d = tv.shape()[1];
                let mut gt = vec![0.0; tv.numel()];
                for (r, &row) in idx.iter().enumerate() {
                    for j in 0..d {
                        gt[row * d + j] += g[r * d + j];
                    }
                }
                vec![(*table, gt)]
            }
            GatherFlat { a, idx } => {
                let mut ga = vec![0.0; value(*a).numel()];
                for (&i, &gv) in idx.iter().zip(g) {
                    ga[i] += gv;
                }
                vec![(*a, ga)]
            }
        }
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
        + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("cannot broadcast {:?} with {:?}", a, b)),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of `src` broadcast to it.
fn broadcast_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let numel: usize = out.iter().product();
    if src == out {
        return (0..numel).collect();
    }
    let pad = out.len() - src.len();
    let src_strides = strides(src);
    let bstrides: Vec<usize> = (0..out.len())
        .map(|i| {
            if i < pad || src[i - pad] == 1 {
                0
            } else {
                src_strides[i - pad]
            }
        })
        .collect();
    strided_offsets(out, &bstrides)
}

/// Offsets visited when walking `shape` in row-major order with `strides`.
fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let nd = shape.len();
    let mut res = Vec::with_capacity(numel);
    let mut idx = vec![0; nd];
    let mut off = 0;
    for _ in 0..numel {
        res.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    res
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let st = strides(shape);
    let pst: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let out = strided_offsets(&new_shape, &pst)
        .into_iter()
        .map(|o| data[o])
        .collect();
    (out, new_shape)
}

fn matmul_backward(g: &[f64], a: &Tensor, b: &Tensor, ai: usize, bi: usize) -> Contributions {
    let ash = a.shape();
    let bsh = b.shape();
    let k = ash[ash.len() - 1];
    let n = bsh[bsh.len() - 1];
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    if bsh.len() == 2 {
        let rows = a.numel() / k;
        gemm(rows, n, k, g, false, b.data(), true, &mut ga, false);
        gemm(k, rows, n, a.data(), true, g, false, &mut gb, false);
    } else {
        let m = ash[ash.len() - 2];
        let batch = a.numel() / (m * k);
        for i in 0..batch {
            let gs = &g[i * m * n..(i + 1) * m * n];
            let as_ = &a.data()[i * m * k..(i + 1) * m * k];
            let bs = &b.data()[i * k * n..(i + 1) * k * n];
            gemm(m, n, k, gs, false, bs, true, &mut ga[i * m * k..(i + 1) * m * k], false);
            gemm(k, m, n, as_, true, gs, false, &mut gb[i * k * n..(i + 1) * k * n], false);
        }
    }
    vec![(ai, ga), (bi, gb)]
}

fn im2col(
    x: &[f64],
    cols: &mut [f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        cols[row + oy * wo + ox] =
                            if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    dx: &mut [f64],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    (ho, wo): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci * h + iy as usize) * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

/// Output extent of a convolution along one axis.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * pad {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Statistics of one training-mode batch-norm call, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape())?;
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| apply_binary(kind, x, y))
                .collect()
        } else {
            let amap = broadcast_map(a.shape(), &out_shape);
            let bmap = broadcast_map(b.shape(), &out_shape);
            amap.iter()
                .zip(&bmap)
                .map(|(&i, &j)| apply_binary(kind, a.data()[i], b.data()[j]))
                .collect()
        };
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.tape().push(
            value,
            Op::Binary {
                kind,
                a: self.id(),
                b: other.id(),
            },
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    fn unary(self, kind: UnaryKind, f: fn(f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.tape().push(value, Op::Unary { kind, a: self.id() })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu, |x| x.max(0.0))
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(self) -> Var<'t> {
        self.unary(UnaryKind::Gelu, gelu)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus, softplus)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = self.value().map(|v| v * factor);
        self.tape().push(
            value,
            Op::Scale {
                a: self.id(),
                factor,
            },
        )
    }

    /// `[..., M, K] × [K, N]` or batched `[..., M, K] × [..., K, N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(dim_err!("matmul needs matrices, got {:?} and {:?}", ash, bsh));
        }
        let k = ash[ash.len() - 1];
        let m = ash[ash.len() - 2];
        let n = bsh[bsh.len() - 1];
        if bsh[bsh.len() - 2] != k {
            return Err(dim_err!("matmul inner extents differ: {:?} × {:?}", ash, bsh));
        }
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; out_shape.iter().product()];
        if bsh.len() == 2 {
            gemm(a.numel() / k, k, n, a.data(), false, b.data(), false, &mut out, false);
        } else {
            if ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
                return Err(dim_err!("matmul batch extents differ: {:?} × {:?}", ash, bsh));
            }
            let batch = a.numel() / (m * k).max(1);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.tape().push(
            value,
            Op::MatMul {
                a: self.id(),
                b: other.id(),
            },
        ))
    }

    /// `x · W + b` over the last axis, with `W: [In, Out]`.
    pub fn linear(self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let xs = self.shape();
        let ws = weight.shape();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(dim_err!(
                "linear: input {:?} does not match weight {:?}",
                xs,
                ws
            ));
        }
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => {
                if b.shape() != [ws[1]] {
                    return Err(dim_err!(
                        "linear: bias {:?} does not match weight {:?}",
                        b.shape(),
                        ws
                    ));
                }
                y.add(b)
            }
            None => Ok(y),
        }
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        let mut seen = vec![false; a.ndim()];
        if perm.len() != a.ndim()
            || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(dim_err!("invalid permutation {:?} for {:?}", perm, a.shape()));
        }
        let (data, shape) = permute_data(a.data(), a.shape(), perm);
        let value = Tensor::new(&shape, data)?;
        Ok(self.tape().push(
            value,
            Op::Permute {
                a: self.id(),
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swap two axes.
    pub fn transpose(self, d0: usize, d1: usize) -> Result<Var<'t>> {
        let mut perm: Vec<usize> = (0..self.shape().len()).collect();
        if d0 >= perm.len() || d1 >= perm.len() {
            return Err(dim_err!("transpose axes {d0},{d1} out of range"));
        }
        perm.swap(d0, d1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape().push(value, Op::Reshape { a: self.id() }))
    }

    /// Join along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape();
        if axis >= base.len() {
            return Err(dim_err!("concat axis {axis} out of range for {:?}", base));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(dim_err!("concat extents differ: {:?} vs {:?}", base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base.to_vec();
        shape[axis] = total;
        let value = Tensor::new(&shape, data)?;
        Ok(first.tape().push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.id()).collect(),
                axis,
            },
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(dim_err!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                shape
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.tape().push(
            value,
            Op::Narrow {
                a: self.id(),
                axis,
                start,
            },
        ))
    }

    /// Split along `axis` at `index` into two parts.
    pub fn split_at(self, axis: usize, index: usize) -> Result<(Var<'t>, Var<'t>)> {
        let n = *self
            .shape()
            .get(axis)
            .ok_or_else(|| dim_err!("split axis {axis} out of range"))?;
        if index > n {
            return Err(dim_err!("split index {index} beyond extent {n}"));
        }
        Ok((self.narrow(axis, 0, index)?, self.narrow(axis, index, n - index)?))
    }

    /// `[B, C, H, W] -> [B, C, H·W]`.
    pub fn flatten_spatial(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(dim_err!("flatten_spatial expects [B,C,H,W], got {:?}", s));
        }
        self.reshape(&[s[0], s[1], s[2] * s[3]])
    }

    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t>> {
        let a = self.value();
        if broadcast_shape(a.shape(), shape)? != shape {
            return Err(dim_err!("cannot broadcast {:?} to {:?}", a.shape(), shape));
        }
        let data = broadcast_map(a.shape(), shape)
            .into_iter()
            .map(|i| a.data()[i])
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape().push(value, Op::BroadcastTo { a: self.id() }))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.tape().push(value, Op::SumAll { a: self.id() })
    }

    pub fn mean(self) -> Var<'t> {
        let a = self.value();
        let value = Tensor::scalar(a.sum() / a.numel() as f64);
        self.tape().push(value, Op::MeanAll { a: self.id() })
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Result<Var<'t>> {
        let a = self.value();
        let shape = a.shape();
        let d = *shape
            .last()
            .ok_or_else(|| dim_err!("sum_last on a scalar"))?;
        if d == 0 {
            return Err(dim_err!("sum_last over an empty axis"));
        }
        let data = a.data().chunks(d).map(|c| c.iter().sum()).collect();
        let value = Tensor::new(&shape[..shape.len() - 1], data)?;
        Ok(self.tape().push(value, Op::SumLast { a: self.id() }))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let a = self.value();
        let d = *a.shape().last().expect("softmax on a scalar");
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let value = Tensor::new(a.shape(), data).unwrap();
        self.tape().push(value, Op::Softmax { a: self.id() })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        let a = self.value();
        let d = *a.shape().last().expect("log_softmax on a scalar");
        let mut data = a.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::new(a.shape(), data).unwrap();
        self.tape().push(value, Op::LogSoftmax { a: self.id() })
    }

    /// Normalize each last-axis vector to zero mean and unit variance, then
    /// apply `gamma`, `beta` of shape `[D]`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| dim_err!("layer_norm on a scalar"))?;
        if d == 0 {
            return Err(dim_err!("layer_norm over an empty axis"));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(dim_err!(
                "layer_norm affine {:?}/{:?} does not match D={d}",
                gv.shape(),
                bv.shape()
            ));
        }
        let mut xhat = Vec::with_capacity(x.numel());
        let mut rstd = Vec::with_capacity(x.numel() / d);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * gv.data()[j] + bv.data()[j]);
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.tape().push(
            value,
            Op::LayerNorm {
                x: self.id(),
                gamma: gamma.id(),
                beta: beta.id(),
                xhat,
                rstd,
            },
        ))
    }

    /// Batch normalization over axis 1 of `[B, C, ...]`.
    ///
    /// With `running = None` the batch statistics are used (training mode)
    /// and returned; otherwise the given `(mean, var)` are applied.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() < 2 {
            return Err(dim_err!("batch_norm expects [B, C, ...], got {:?}", shape));
        }
        let (b, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(dim_err!("batch_norm affine does not match C={c}"));
        }
        let training = running.is_none();
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(dim_err!("batch_norm running stats do not match C={c}"));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                if b < 2 {
                    return Err(Error::Usage(format!(
                        "batch_norm in training mode needs a batch of at least 2, got {b}"
                    )));
                }
                let count = (b * inner) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, chunk) in x.data().chunks(inner).enumerate() {
                    mean[i % c] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for (i, chunk) in x.data().chunks(inner).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += chunk.iter().map(|v| (v - m).powi(2)).sum::<f64>();
                }
                let unbiased = var.iter().map(|v| v / (count - 1.0)).collect();
                var.iter_mut().for_each(|v| *v /= count);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(x.numel());
        let mut out = Vec::with_capacity(x.numel());
        for (i, chunk) in x.data().chunks(inner.max(1)).enumerate() {
            let ci = i % c;
            for &v in chunk {
                let h = (v - mean[ci]) * rstd[ci];
                xhat.push(h);
                out.push(h * gv.data()[ci] + bv.data()[ci]);
            }
        }
        let value = Tensor::new(shape, out)?;
        let y = self.tape().push(
            value,
            Op::BatchNorm {
                x: self.id(),
                gamma: gamma.id(),
                beta: beta.id(),
                xhat,
                rstd,
                training,
            },
        );
        Ok((y, stats))
    }

    /// PReLU with one slope per channel (axis 1).
    pub fn prelu(self, slope: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let a = slope.value();
        let shape = x.shape();
        if shape.len() < 2 || a.shape() != [shape[1]] {
            return Err(dim_err!(
                "prelu slope {:?} does not match channels of {:?}",
                a.shape(),
                shape
            ));
        }
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a.data()[(i / inner) % c] * v })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.tape().push(
            value,
            Op::Prelu {
                x: self.id(),
                slope: slope.id(),
            },
        ))
    }

    /// Generalized-mean pooling of `[B, C, ...]` to `[B, C]` with scalar
    /// exponent `p` (shape `[1]`). Inputs are clamped to `eps` first.
    pub fn gem_pool(self, p: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape();
        if shape.len() < 3 {
            return Err(dim_err!("gem_pool expects [B, C, ...], got {:?}", shape));
        }
        let pv = p.value();
        if pv.numel() != 1 {
            return Err(dim_err!("gem_pool exponent must be a scalar"));
        }
        let pv = pv.item();
        if !(pv > 0.0) || !pv.is_finite() {
            return Err(Error::Param(format!("GeM exponent must be positive, got {pv}")));
        }
        let inner: usize = shape[2..].iter().product();
        if inner == 0 {
            return Err(dim_err!("gem_pool over an empty spatial extent"));
        }
        let data = x
            .data()
            .chunks(inner)
            .map(|row| {
                let m = row.iter().map(|&v| v.max(eps).powf(pv)).sum::<f64>() / inner as f64;
                m.powf(1.0 / pv)
            })
            .collect();
        let value = Tensor::new(&shape[..2], data)?;
        Ok(self.tape().push(
            value,
            Op::GemPool {
                x: self.id(),
                p: p.id(),
                eps,
            },
        ))
    }

    /// 2-D cross-correlation of `[B, C_in, H, W]`.
    pub fn convolve(
        self,
        kernel: Var<'t>,
        bias: Option<Var<'t>>,
        mode: ConvMode,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let w = kernel.value();
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(dim_err!(
                "convolve expects 4-D input and kernel, got {:?} and {:?}",
                xs,
                ws
            ));
        }
        let (b, cin, h, wd) = dims4(xs);
        let (cout, kcin, kh, kw) = dims4(ws);
        match mode {
            ConvMode::Depthwise if kcin != 1 || cout != cin => {
                return Err(dim_err!(
                    "depthwise kernel {:?} must be [C, 1, k, k] with C = {cin}",
                    ws
                ))
            }
            ConvMode::Pointwise if kh != 1 || kw != 1 => {
                return Err(dim_err!("pointwise kernel must be 1×1, got {:?}", ws))
            }
            ConvMode::Standard | ConvMode::Pointwise if kcin != cin => {
                return Err(dim_err!(
                    "kernel {:?} expects {kcin} input channels, input has {cin}",
                    ws
                ))
            }
            _ => {}
        }
        let (Some(ho), Some(wo)) = (
            conv_out_extent(h, kh, stride, pad),
            conv_out_extent(wd, kw, stride, pad),
        ) else {
            return Err(dim_err!(
                "kernel {kh}×{kw} (stride {stride}, pad {pad}) does not fit input {h}×{wd}"
            ));
        };
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return Err(dim_err!("conv bias {:?} does not match {cout} outputs", bias.shape()));
            }
        }
        let hw = ho * wo;
        let mut out = vec![0.0; b * cout * hw];
        let op = if mode == ConvMode::Depthwise {
            let (xd, wdat) = (x.data(), w.data());
            for bi in 0..b {
                for ci in 0..cin {
                    let xbase = (bi * cin + ci) * h * wd;
                    let obase = (bi * cin + ci) * hw;
                    let kbase = ci * kh * kw;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = 0.0;
                            for ki in 0..kh {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += xd[xbase + iy as usize * wd + ix as usize]
                                        * wdat[kbase + ki * kw + kj];
                                }
                            }
                            out[obase + oy * wo + ox] = acc;
                        }
                    }
                }
            }
            if bias.is_some() {
                return Err(dim_err!("depthwise convolution takes no bias"));
            }
            Op::Depthwise {
                x: self.id(),
                w: kernel.id(),
                stride,
                pad,
            }
        } else {
            let ckk = cin * kh * kw;
            let mut cols = vec![0.0; b * ckk * hw];
            for bi in 0..b {
                let cb = &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw];
                im2col(
                    &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                    cb,
                    (cin, h, wd),
                    (kh, kw),
                    (ho, wo),
                    stride,
                    pad,
                );
                gemm(
                    cout,
                    ckk,
                    hw,
                    w.data(),
                    false,
                    cb,
                    false,
                    &mut out[bi * cout * hw..(bi + 1) * cout * hw],
                    false,
                );
            }
            if let Some(bias) = bias {
                let bv = bias.value();
                for (i, chunk) in out.chunks_mut(hw).enumerate() {
                    let bc = bv.data()[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bc);
                }
            }
            Op::Conv2d {
                x: self.id(),
                w: kernel.id(),
                bias: bias.map(|b| b.id()),
                stride,
                pad,
                cols,
            }
        };
        let value = Tensor::new(&[b, cout, ho, wo], out)?;
        Ok(self.tape().push(value, op))
    }

    /// Rows `idx` of a `[R, D]` table, as `[idx.len(), D]`.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let shape = t.shape();
        if shape.len() != 2 {
            return Err(dim_err!("gather_rows expects a [R, D] table, got {:?}", shape));
        }
        let (r, d) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= r {
                return Err(Error::Data(format!("row index {i} out of range for {r} rows")));
            }
            data.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(&[idx.len(), d], data)?;
        Ok(self.tape().push(
            value,
            Op::GatherRows {
                table: self.id(),
                idx: idx.to_vec(),
            },
        ))
    }

    /// Elements at flat positions `idx`, as a vector.
    pub fn gather_flat(self, idx: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(
                *t.data()
                    .get(i)
                    .ok_or_else(|| dim_err!("flat index {i} out of range"))?,
            );
        }
        let value = Tensor::new(&[idx.len()], data)?;
        Ok(self.tape().push(
            value,
            Op::GatherFlat {
                a: self.id(),
                idx: idx.to_vec(),
            },
        ))
    }
}

fn apply_binary(kind: BinaryKind, x: f64, y: f64) -> f64 {
    match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    }
}
