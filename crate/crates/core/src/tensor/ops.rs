//! Differentiable operations on [`Var`].
//!
//! Each constructor validates shapes, computes the forward value and records
//! the op so [`Var::backward`] can route gradients to its inputs.

use std::rc::Rc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{checked_mode, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Index value meaning "write zero" in [`gather`].
pub const GATHER_ZERO: u32 = u32::MAX;

pub(crate) enum Op {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddTrailing(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
        alpha: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSumExp {
        x: Var,
        mask: Option<Rc<Tensor>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        x: Var,
        index: Rc<Vec<u32>>,
    },
    GatherRows {
        x: Var,
        index: Rc<Vec<u32>>,
        width: usize,
    },
    Reshape(Var),
    Sum(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Var> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddTrailing(a, b) => vec![a, b],
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => vec![a, b],
            Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Scale(x, _)
            | Op::Softmax { x, .. }
            | Op::LogSumExp { x, .. }
            | Op::Gelu(x)
            | Op::Gather { x, .. }
            | Op::GatherRows { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::MeanAxis { x, .. }
            | Op::L2Normalize { x, .. } => vec![x],
        }
    }

    pub(crate) fn backward(&self, out: &Tensor, g: &Tensor, emit: &mut dyn FnMut(&Var, Tensor)) {
        let gd = g.data();
        match self {
            Op::Add(a, b) => {
                emit(a, g.clone());
                emit(b, g.clone());
            }
            Op::Sub(a, b) => {
                emit(a, g.clone());
                emit(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    emit(a, zip_with(g, b.value(), |x, y| x * y));
                }
                if b.requires_grad() {
                    emit(b, zip_with(g, a.value(), |x, y| x * y));
                }
            }
            Op::Scale(x, s) => emit(x, g.map(|v| v * s)),
            Op::AddTrailing(x, b) => {
                emit(x, g.clone());
                if b.requires_grad() {
                    let n = b.value().len();
                    let mut acc = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (a, v) in acc.iter_mut().zip(chunk) {
                            *a += v;
                        }
                    }
                    emit(b, Tensor::from_parts(b.shape().to_vec(), acc));
                }
            }
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = out.shape()[1];
                if a.requires_grad() {
                    let mut da = vec![0.0; m * k];
                    if *trans_b {
                        gemm_nn(gd, b.value().data(), &mut da, m, n, k);
                    } else {
                        gemm_nt(gd, b.value().data(), &mut da, m, n, k);
                    }
                    emit(a, Tensor::from_parts(a.shape().to_vec(), da));
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; k * n];
                    if *trans_b {
                        gemm_tn(gd, a.value().data(), &mut db, n, m, k);
                    } else {
                        gemm_tn(a.value().data(), gd, &mut db, k, m, n);
                    }
                    emit(b, Tensor::from_parts(b.shape().to_vec(), db));
                }
            }
            Op::Linear { x, w, b } => {
                let (din, dout) = (w.shape()[0], w.shape()[1]);
                let rows = x.value().len() / din;
                if x.requires_grad() {
                    let mut dx = vec![0.0; rows * din];
                    gemm_nt(gd, w.value().data(), &mut dx, rows, dout, din);
                    emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if w.requires_grad() {
                    let mut dw = vec![0.0; din * dout];
                    gemm_tn(x.value().data(), gd, &mut dw, din, rows, dout);
                    emit(w, Tensor::from_parts(w.shape().to_vec(), dw));
                }
                if let Some(b) = b {
                    if b.requires_grad() {
                        let mut db = vec![0.0; dout];
                        for row in gd.chunks(dout) {
                            for (a, v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        emit(b, Tensor::from_parts(vec![dout], db));
                    }
                }
            }
            Op::Bmm {
                a,
                b,
                trans_b,
                alpha,
            } => {
                let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = out.shape()[2];
                let gs: Vec<f64> = gd.iter().map(|v| v * alpha).collect();
                if a.requires_grad() {
                    let mut da = vec![0.0; batch * m * k];
                    let bd = b.value().data();
                    for i in 0..batch {
                        let gi = &gs[i * m * n..(i + 1) * m * n];
                        let bi = &bd[i * k * n..(i + 1) * k * n];
                        let di = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gi, bi, di, m, n, k);
                        } else {
                            gemm_nt(gi, bi, di, m, n, k);
                        }
                    }
                    emit(a, Tensor::from_parts(a.shape().to_vec(), da));
                }
                if b.requires_grad() {
                    let mut db = vec![0.0; batch * k * n];
                    let ad = a.value().data();
                    for i in 0..batch {
                        let gi = &gs[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let di = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gi, ai, di, n, m, k);
                        } else {
                            gemm_tn(ai, gi, di, k, m, n);
                        }
                    }
                    emit(b, Tensor::from_parts(b.shape().to_vec(), db));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                if inner == 1 {
                    for r in 0..outer {
                        let s = r * n..(r + 1) * n;
                        kernels::softmax_row_backward(&y[s.clone()], &gd[s.clone()], &mut dx[s]);
                    }
                } else {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| y[at(j)] * gd[at(j)]).sum();
                            for j in 0..n {
                                dx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                            }
                        }
                    }
                }
                emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::LogSumExp { x, mask } => {
                let xd = x.value().data();
                let n = *x.shape().last().unwrap();
                let mut dx = vec![0.0; xd.len()];
                for (r, (row, drow)) in xd.chunks(n).zip(dx.chunks_mut(n)).enumerate() {
                    let lse = out.data()[r];
                    for (j, (d, &v)) in drow.iter_mut().zip(row).enumerate() {
                        let m = mask
                            .as_ref()
                            .map_or(0.0, |m| m.data()[(r * n + j) % m.len()]);
                        *d = gd[r] * (v + m - lse).exp();
                    }
                }
                emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = gamma.value().len();
                let gm = gamma.value().data();
                if x.requires_grad() {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, ((gr, hr), dr)) in gd
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(dx.chunks_mut(c))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for j in 0..c {
                            dr[j] = rstd[r] * (gr[j] * gm[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
                }
                if gamma.requires_grad() {
                    let mut dg = vec![0.0; c];
                    for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    emit(gamma, Tensor::from_parts(vec![c], dg));
                }
                if beta.requires_grad() {
                    let mut db = vec![0.0; c];
                    for gr in gd.chunks(c) {
                        for j in 0..c {
                            db[j] += gr[j];
                        }
                    }
                    emit(beta, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Gelu(x) => emit(
                x,
                zip_with(g, x.value(), |gv, xv| gv * kernels::gelu_grad(xv)),
            ),
            Op::Gather { x, index } => {
                let mut dx = vec![0.0; x.value().len()];
                for (&src, &gv) in index.iter().zip(gd) {
                    if src != GATHER_ZERO {
                        dx[src as usize] += gv;
                    }
                }
                emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::GatherRows { x, index, width } => {
                let w = *width;
                let mut dx = vec![0.0; x.value().len()];
                for (&src, gr) in index.iter().zip(gd.chunks(w)) {
                    if src != GATHER_ZERO {
                        let s = src as usize * w;
                        for (d, &gv) in dx[s..s + w].iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
                emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::Reshape(x) => emit(x, Tensor::from_parts(x.shape().to_vec(), gd.to_vec())),
            Op::Sum(x) => emit(x, Tensor::full(x.shape(), gd[0])),
            Op::MeanAxis { x, outer, n, inner } => {
                let scale = 1.0 / *n as f64;
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..*outer {
                    let go = &gd[o * inner..(o + 1) * inner];
                    for j in 0..*n {
                        let base = (o * n + j) * inner;
                        for (d, &gv) in dx[base..base + inner].iter_mut().zip(go) {
                            *d = gv * scale;
                        }
                    }
                }
                emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
            }
            Op::L2Normalize { x, norms } => {
                let d = *x.shape().last().unwrap();
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    if nrm <= DEGENERATE_NORM {
                        continue;
                    }
                    let s = r * d..(r + 1) * d;
                    let yr = &y[s.clone()];
                    let gr = &gd[s.clone()];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, &yv), &gv) in dx[s].iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / nrm;
                    }
                }
                emit(x, Tensor::from_parts(x.shape().to_vec(), dx));
            }
        }
    }
}

/// Row norms at or below this are treated as zero by [`l2_normalize_rows`].
pub const DEGENERATE_NORM: f64 = 1e-12;

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, a.shape(), b.shape());
    }
    Ok(())
}

pub fn add(a: &Var, b: &Var) -> Result<Var> {
    same_shape("add", a, b)?;
    let v = zip_with(a.value(), b.value(), |x, y| x + y);
    Var::from_op(v, "add", Op::Add(a.clone(), b.clone()))
}

pub fn sub(a: &Var, b: &Var) -> Result<Var> {
    same_shape("sub", a, b)?;
    let v = zip_with(a.value(), b.value(), |x, y| x - y);
    Var::from_op(v, "sub", Op::Sub(a.clone(), b.clone()))
}

pub fn mul(a: &Var, b: &Var) -> Result<Var> {
    same_shape("mul", a, b)?;
    let v = zip_with(a.value(), b.value(), |x, y| x * y);
    Var::from_op(v, "mul", Op::Mul(a.clone(), b.clone()))
}

pub fn scale(x: &Var, s: f64) -> Result<Var> {
    Var::from_op(x.value().map(|v| v * s), "scale", Op::Scale(x.clone(), s))
}

/// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
pub fn add_trailing(x: &Var, b: &Var) -> Result<Var> {
    let (xs, bs) = (x.shape(), b.shape());
    if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
        return shape_err("add_trailing", xs, bs);
    }
    let n = b.value().len();
    let bd = b.value().data();
    let data: Vec<f64> = x
        .value()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bd[i % n])
        .collect();
    Var::from_op(
        Tensor::from_parts(xs.to_vec(), data),
        "add_trailing",
        Op::AddTrailing(x.clone(), b.clone()),
    )
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul(a: &Var, b: &Var) -> Result<Var> {
    matmul_impl(a, b, false)
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_t(a: &Var, b: &Var) -> Result<Var> {
    matmul_impl(a, b, true)
}

fn matmul_impl(a: &Var, b: &Var, trans_b: bool) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return shape_err("matmul", sa, sb);
    }
    let (m, k) = (sa[0], sa[1]);
    let (kb, n) = if trans_b {
        (sb[1], sb[0])
    } else {
        (sb[0], sb[1])
    };
    if k != kb {
        return shape_err("matmul", sa, sb);
    }
    let mut out = vec![0.0; m * n];
    if trans_b {
        gemm_nt(a.value().data(), b.value().data(), &mut out, m, k, n);
    } else {
        gemm_nn(a.value().data(), b.value().data(), &mut out, m, k, n);
    }
    Var::from_op(
        Tensor::from_parts(vec![m, n], out),
        "matmul",
        Op::MatMul {
            a: a.clone(),
            b: b.clone(),
            trans_b,
        },
    )
}

/// Dense layer over the last axis: `x[…×in] · w[in×out] (+ b[out])`.
pub fn linear(x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
    let (xs, ws) = (x.shape(), w.shape());
    if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
        return shape_err("linear", xs, ws);
    }
    let (din, dout) = (ws[0], ws[1]);
    if let Some(b) = b {
        if b.shape() != [dout] {
            return shape_err("linear bias", ws, b.shape());
        }
    }
    let rows = x.value().len() / din;
    let mut out = vec![0.0; rows * dout];
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(b.value().data());
        }
    }
    gemm_nn(
        x.value().data(),
        w.value().data(),
        &mut out,
        rows,
        din,
        dout,
    );
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = dout;
    Var::from_op(
        Tensor::from_parts(shape, out),
        "linear",
        Op::Linear {
            x: x.clone(),
            w: w.clone(),
            b: b.cloned(),
        },
    )
}

/// Batched `alpha · a[g×m×k] · b[g×k×n]`, or `b[g×n×k]ᵀ` when `trans_b`.
pub fn bmm(a: &Var, b: &Var, trans_b: bool, alpha: f64) -> Result<Var> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
        return shape_err("bmm", sa, sb);
    }
    let (batch, m, k) = (sa[0], sa[1], sa[2]);
    let (kb, n) = if trans_b {
        (sb[2], sb[1])
    } else {
        (sb[1], sb[2])
    };
    if k != kb {
        return shape_err("bmm", sa, sb);
    }
    let ad = a.value().data();
    let bd = b.value().data();
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        let ai = &ad[i * m * k..(i + 1) * m * k];
        let bi = &bd[i * k * n..(i + 1) * k * n];
        let oi = &mut out[i * m * n..(i + 1) * m * n];
        if trans_b {
            gemm_nt(ai, bi, oi, m, k, n);
        } else {
            gemm_nn(ai, bi, oi, m, k, n);
        }
    }
    if alpha != 1.0 {
        out.iter_mut().for_each(|v| *v *= alpha);
    }
    Var::from_op(
        Tensor::from_parts(vec![batch, m, n], out),
        "bmm",
        Op::Bmm {
            a: a.clone(),
            b: b.clone(),
            trans_b,
            alpha,
        },
    )
}

/// Max-subtracted softmax along `axis`.
pub fn softmax(x: &Var, axis: usize) -> Result<Var> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Invalid(format!(
            "softmax axis {axis} out of range for rank {}",
            shape.len()
        )));
    }
    if shape[axis] == 0 {
        return Err(Error::Invalid("softmax over an empty axis".into()));
    }
    let (outer, n, inner) = split_axis(shape, axis);
    let mut data = x.value().data().to_vec();
    if inner == 1 {
        data.chunks_mut(n).for_each(kernels::softmax_row);
    } else {
        let mut row = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for j in 0..n {
                    row[j] = data[(o * n + j) * inner + i];
                }
                kernels::softmax_row(&mut row);
                for j in 0..n {
                    data[(o * n + j) * inner + i] = row[j];
                }
            }
        }
    }
    Var::from_op(
        Tensor::from_parts(shape.to_vec(), data),
        "softmax",
        Op::Softmax { x: x.clone(), axis },
    )
}

/// Softmax over the last axis of `x + mask`. The mask holds constant additive
/// logits, shares `x`'s last axis and repeats over `x`'s flat layout, so a
/// `[nW, L, L]` mask applies to every group of a `[G·nW, L, L]` score tensor.
pub fn masked_softmax(x: &Var, mask: &Rc<Tensor>) -> Result<Var> {
    let (xs, ms) = (x.shape(), mask.shape());
    if ms.is_empty() || xs.is_empty() || ms.last() != xs.last() || !x.value().len().is_multiple_of(mask.len())
    {
        return shape_err("masked_softmax", xs, ms);
    }
    let n = *xs.last().unwrap();
    let md = mask.data();
    let mut data: Vec<f64> = x
        .value()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + md[i % md.len()])
        .collect();
    data.chunks_mut(n).for_each(kernels::softmax_row);
    Var::from_op(
        Tensor::from_parts(xs.to_vec(), data),
        "masked_softmax",
        Op::Softmax {
            x: x.clone(),
            axis: xs.len() - 1,
        },
    )
}

/// `log Σ exp` over the last axis of `x (+ mask)`; the output drops that axis.
pub fn log_sum_exp(x: &Var, mask: Option<&Rc<Tensor>>) -> Result<Var> {
    let xs = x.shape();
    if xs.is_empty() || *xs.last().unwrap() == 0 {
        return Err(Error::Invalid("log_sum_exp over an empty axis".into()));
    }
    if let Some(m) = mask {
        let ms = m.shape();
        if ms.len() > xs.len() || xs[xs.len() - ms.len()..] != *ms {
            return shape_err("log_sum_exp mask", xs, ms);
        }
    }
    let n = *xs.last().unwrap();
    let xd = x.value().data();
    let mut row = vec![0.0; n];
    let out: Vec<f64> = xd
        .chunks(n)
        .enumerate()
        .map(|(r, xr)| {
            for (j, (dst, &v)) in row.iter_mut().zip(xr).enumerate() {
                *dst = v + mask.map_or(0.0, |m| m.data()[(r * n + j) % m.len()]);
            }
            kernels::log_sum_exp(&row)
        })
        .collect();
    Var::from_op(
        Tensor::from_parts(xs[..xs.len() - 1].to_vec(), out),
        "log_sum_exp",
        Op::LogSumExp {
            x: x.clone(),
            mask: mask.cloned(),
        },
    )
}

/// Layer normalization over the trailing channel axis.
pub fn layer_norm(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> Result<Var> {
    let xs = x.shape();
    let c = xs.last().copied().unwrap_or(0);
    if c == 0 {
        return Err(Error::Invalid("layer_norm over zero channels".into()));
    }
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!(
            "layer_norm eps must be > 0, got {eps}"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err("layer_norm", xs, gamma.shape());
    }
    let xd = x.value().data();
    let rows = xd.len() / c;
    let mut xhat = vec![0.0; xd.len()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; xd.len()];
    let (gm, bt) = (gamma.value().data(), beta.value().data());
    for r in 0..rows {
        let row = &xd[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..c {
            let h = (row[j] - mean) * rs;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gm[j] + bt[j];
        }
    }
    Var::from_op(
        Tensor::from_parts(xs.to_vec(), out),
        "layer_norm",
        Op::LayerNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            rstd,
        },
    )
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Var) -> Result<Var> {
    Var::from_op(x.value().map(kernels::gelu), "gelu", Op::Gelu(x.clone()))
}

/// `out[i] = x[index[i]]` (flat offsets), or 0 where `index[i] == GATHER_ZERO`.
pub fn gather(x: &Var, index: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    if n != index.len() {
        return shape_err("gather", shape, &[index.len()]);
    }
    let xd = x.value().data();
    if checked_mode() {
        if let Some(&bad) = index
            .iter()
            .find(|&&i| i != GATHER_ZERO && i as usize >= xd.len())
        {
            return Err(Error::Invalid(format!(
                "gather index {bad} out of bounds for {} elements",
                xd.len()
            )));
        }
    }
    let data: Vec<f64> = index
        .iter()
        .map(|&i| {
            if i == GATHER_ZERO {
                0.0
            } else {
                xd[i as usize]
            }
        })
        .collect();
    Var::from_op(
        Tensor::from_parts(shape.to_vec(), data),
        "gather",
        Op::Gather {
            x: x.clone(),
            index,
        },
    )
}

/// Row gather: output row `i` (of `width` elements) is input row `index[i]`,
/// or zeros where `index[i] == GATHER_ZERO`. `shape` must hold
/// `index.len() * width` elements.
pub fn gather_rows(x: &Var, index: Rc<Vec<u32>>, width: usize, shape: &[usize]) -> Result<Var> {
    let n: usize = shape.iter().product();
    if width == 0 || n != index.len() * width || !x.value().len().is_multiple_of(width) {
        return shape_err("gather_rows", x.shape(), shape);
    }
    let xd = x.value().data();
    let rows = xd.len() / width;
    if checked_mode() {
        if let Some(&bad) = index
            .iter()
            .find(|&&i| i != GATHER_ZERO && i as usize >= rows)
        {
            return Err(Error::Invalid(format!(
                "gather_rows index {bad} out of bounds for {rows} rows"
            )));
        }
    }
    let mut data = vec![0.0; n];
    for (&src, dst) in index.iter().zip(data.chunks_mut(width)) {
        if src != GATHER_ZERO {
            let s = src as usize * width;
            dst.copy_from_slice(&xd[s..s + width]);
        }
    }
    Var::from_op(
        Tensor::from_parts(shape.to_vec(), data),
        "gather_rows",
        Op::GatherRows {
            x: x.clone(),
            index,
            width,
        },
    )
}

pub fn reshape(x: &Var, shape: &[usize]) -> Result<Var> {
    let v = x.value().reshape(shape)?;
    Var::from_op(v, "reshape", Op::Reshape(x.clone()))
}

pub fn sum(x: &Var) -> Result<Var> {
    Var::from_op(Tensor::scalar(x.value().sum()), "sum", Op::Sum(x.clone()))
}

pub fn mean(x: &Var) -> Result<Var> {
    let n = x.value().len();
    if n == 0 {
        return Err(Error::Invalid("mean of an empty tensor".into()));
    }
    scale(&sum(x)?, 1.0 / n as f64)
}

/// Arithmetic mean over one axis, which is removed from the shape.
pub fn mean_axis(x: &Var, axis: usize) -> Result<Var> {
    let shape = x.shape();
    if axis >= shape.len() || shape[axis] == 0 {
        return Err(Error::Invalid(format!(
            "mean_axis: bad axis {axis} for shape {shape:?}"
        )));
    }
    let (outer, n, inner) = split_axis(shape, axis);
    let xd = x.value().data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let acc = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let base = (o * n + j) * inner;
            for (a, v) in acc.iter_mut().zip(&xd[base..base + inner]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    let mut out_shape = shape.to_vec();
    out_shape.remove(axis);
    Var::from_op(
        Tensor::from_parts(out_shape, out),
        "mean_axis",
        Op::MeanAxis {
            x: x.clone(),
            outer,
            n,
            inner,
        },
    )
}

/// Scales each row (last axis) to unit L2 norm. Rows whose norm is at most
/// [`DEGENERATE_NORM`] map to zero and are reported in the returned count.
pub fn l2_normalize_rows(x: &Var) -> Result<(Var, usize)> {
    let d = x.shape().last().copied().unwrap_or(0);
    if d == 0 {
        return Err(Error::Invalid("l2_normalize_rows over zero width".into()));
    }
    let xd = x.value().data();
    let mut norms = Vec::with_capacity(xd.len() / d);
    let mut out = vec![0.0; xd.len()];
    let mut degenerate = 0;
    for (row, dst) in xd.chunks(d).zip(out.chunks_mut(d)) {
        let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(nrm);
        if nrm <= DEGENERATE_NORM {
            degenerate += 1;
            continue;
        }
        for (o, v) in dst.iter_mut().zip(row) {
            *o = v / nrm;
        }
    }
    let v = Var::from_op(
        Tensor::from_parts(x.shape().to_vec(), out),
        "l2_normalize_rows",
        Op::L2Normalize {
            x: x.clone(),
            norms,
        },
    )?;
    Ok((v, degenerate))
}

/// Nonlinearity between the two dense layers of [`mlp_block`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    /// Test hook: makes the block purely linear.
    Identity,
}

/// Two dense layers with an activation in between; shape-preserving over the
/// trailing channel axis when `w2` maps back to the input width.
pub fn mlp_block(x: &Var, w1: &Var, b1: &Var, w2: &Var, b2: &Var, act: Activation) -> Result<Var> {
    if w1.shape().len() != 2 || w2.shape().len() != 2 || w1.shape()[1] != w2.shape()[0] {
        return shape_err("mlp_block", w1.shape(), w2.shape());
    }
    let h = linear(x, w1, Some(b1))?;
    let h = match act {
        Activation::Gelu => gelu(&h)?,
        Activation::Identity => h,
    };
    linear(&h, w2, Some(b2))
}
