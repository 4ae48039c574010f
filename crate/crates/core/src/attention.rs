//! Windowed multi-head self-attention: 3D spatial windows (plain and
//! shifted), per-position temporal attention, the joint 4D baseline and the
//! spatio-temporal divided block built from them.
//!
//! All variants share one kernel. Tokens are grouped into independent
//! `outer` groups, each group is tiled by a [`WindowLayout`], and every
//! `(group, head, window)` triple becomes one batch entry of a batched matmul.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::patching::{GridDims, WindowLayout};
use crate::tensor::ops::{self, Activation, GATHER_ZERO};
use crate::tensor::probe;
use crate::tensor::{Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Projection weights of one attention layer. `wq`, `wk`, `wv` and `wo` are
/// `[C, C]` with heads laid out as consecutive column blocks of width `C/heads`.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub bo: Option<Var>,
    /// Optional `[heads, (2m-1)^3]` relative position bias table (spatial only).
    pub rel_bias: Option<Var>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormWeights {
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Debug, Clone)]
pub struct MlpWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// One divided block: spatial MSA, MLP, temporal MSA, MLP, each pre-normed
/// with a residual connection.
#[derive(Debug, Clone)]
pub struct StdaBlockWeights {
    pub ln_spatial: LayerNormWeights,
    pub spatial: AttnWeights,
    pub ln_mlp1: LayerNormWeights,
    pub mlp1: MlpWeights,
    pub ln_temporal: LayerNormWeights,
    pub temporal: AttnWeights,
    pub ln_mlp2: LayerNormWeights,
    pub mlp2: MlpWeights,
}

/// Row indices that move tokens into `[outer, heads, nW, L]` windowed order
/// and back.
struct WindowIndex {
    forward: Rc<Vec<u32>>,
    inverse: Rc<Vec<u32>>,
    groups: usize,
    len: usize,
}

fn window_index(outer: usize, layout: &WindowLayout, heads: usize) -> WindowIndex {
    let (nw, l, positions) = (
        layout.num_windows(),
        layout.window_len(),
        layout.positions(),
    );
    let sources = layout.slot_sources();
    let mut slot_of = vec![0usize; positions];
    for (k, s) in sources.iter().enumerate() {
        if let Some(p) = *s {
            slot_of[p] = k;
        }
    }
    let mut forward = Vec::with_capacity(outer * heads * nw * l);
    for o in 0..outer {
        for h in 0..heads {
            for s in &sources {
                forward.push(match s {
                    Some(p) => ((o * positions + p) * heads + h) as u32,
                    None => GATHER_ZERO,
                });
            }
        }
    }
    let mut inverse = Vec::with_capacity(outer * positions * heads);
    for o in 0..outer {
        for &k in &slot_of {
            for h in 0..heads {
                inverse.push(((o * heads + h) * nw * l + k) as u32);
            }
        }
    }
    WindowIndex {
        forward: Rc::new(forward),
        inverse: Rc::new(inverse),
        groups: outer * heads * nw,
        len: l,
    }
}

/// Offsets into the relative-bias table for each `(i, j)` slot pair of a
/// window, `[L, L]`.
fn relative_offsets(window: &[usize]) -> Vec<usize> {
    let l: usize = window.iter().product();
    let coords: Vec<Vec<usize>> = (0..l)
        .map(|mut i| {
            let mut c = vec![0; window.len()];
            for a in (0..window.len()).rev() {
                c[a] = i % window[a];
                i /= window[a];
            }
            c
        })
        .collect();
    let mut out = Vec::with_capacity(l * l);
    for ci in &coords {
        for cj in &coords {
            let mut off = 0;
            for a in 0..window.len() {
                off = off * (2 * window[a] - 1) + (ci[a] + window[a] - 1 - cj[a]);
            }
            out.push(off);
        }
    }
    out
}

pub fn rel_bias_table_len(window: &[usize]) -> usize {
    window.iter().map(|m| 2 * m - 1).product()
}

/// Multi-head attention over the tokens of `x` (rows of width `C`), grouped
/// into `outer` groups of `layout.positions()` consecutive rows each.
fn windowed_attention(
    x: &Var,
    w: &AttnWeights,
    outer: usize,
    layout: &WindowLayout,
) -> Result<Var> {
    let c = *x.shape().last().unwrap_or(&0);
    let heads = w.heads;
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    if x.value().len() != outer * layout.positions() * c {
        return Err(Error::Invalid(format!(
            "attention input {:?} does not hold {outer} groups of {} tokens",
            x.shape(),
            layout.positions()
        )));
    }
    let dh = c / heads;
    let idx = window_index(outer, layout, heads);
    let mask = layout.mask().map(Rc::new);
    let bias_index = w.rel_bias.as_ref().map(|table| {
        let offs = relative_offsets(&layout.window);
        let r = table.shape()[1];
        let nw = layout.num_windows();
        let mut index = Vec::with_capacity(heads * nw * offs.len());
        for h in 0..heads {
            for _ in 0..nw {
                index.extend(offs.iter().map(|&o| (h * r + o) as u32));
            }
        }
        Rc::new(index)
    });
    let (g, l) = (idx.groups, idx.len);

    let _scope = probe::attention_scope();
    let q = ops::linear(x, &w.wq, None)?;
    let k = ops::linear(x, &w.wk, None)?;
    let v = ops::linear(x, &w.wv, None)?;
    let qw = ops::gather_rows(&q, idx.forward.clone(), dh, &[g, l, dh])?;
    let kw = ops::gather_rows(&k, idx.forward.clone(), dh, &[g, l, dh])?;
    let vw = ops::gather_rows(&v, idx.forward.clone(), dh, &[g, l, dh])?;
    let mut scores = ops::bmm(&qw, &kw, true, 1.0 / (dh as f64).sqrt())?;
    probe::record_scores(g * l * l);
    if let (Some(table), Some(bi)) = (&w.rel_bias, bias_index) {
        let nw = layout.num_windows();
        let bias = ops::gather(table, bi, &[heads, nw, l, l])?;
        let s5 = ops::reshape(&scores, &[outer, heads, nw, l, l])?;
        scores = ops::reshape(&ops::add_trailing(&s5, &bias)?, &[g, l, l])?;
    }
    let probs = match &mask {
        Some(m) => ops::masked_softmax(&scores, m)?,
        None => ops::softmax(&scores, 2)?,
    };
    let attended = ops::bmm(&probs, &vw, false, 1.0)?;
    let merged = ops::gather_rows(&attended, idx.inverse, dh, x.shape())?;
    ops::linear(&merged, &w.wo, w.bo.as_ref())
}

/// Window attention inside `m^3` spatial windows, independently per frame.
/// With `shifted`, windows are displaced by `floor(m/2)` and cross-boundary
/// pairs are masked.
pub fn spatial_attention(x: &Var, w: &AttnWeights, m: usize, shifted: bool) -> Result<Var> {
    let dims = GridDims::of(x)?;
    let layout = WindowLayout::spatial(dims.spatial(), m, shifted)?;
    windowed_attention(x, w, dims.b * dims.t, &layout)
}

/// Attention over the `T` frames of each spatial position.
pub fn temporal_attention(x: &Var, w: &AttnWeights) -> Result<Var> {
    let dims = GridDims::of(x)?;
    let layout = WindowLayout::new(&[dims.t, dims.h, dims.w, dims.d], &[dims.t, 1, 1, 1], false)?;
    windowed_attention(x, w, dims.b, &layout)
}

/// Joint space-time attention inside `d^4` windows (reference baseline).
pub fn joint_attention(x: &Var, w: &AttnWeights, d: usize, shifted: bool) -> Result<Var> {
    let dims = GridDims::of(x)?;
    if dims.t < d {
        return Err(Error::Invalid(format!(
            "joint 4D window {d} exceeds {} frames",
            dims.t
        )));
    }
    let layout = WindowLayout::new(&[dims.t, dims.h, dims.w, dims.d], &[d; 4], shifted)?;
    windowed_attention(x, w, dims.b, &layout)
}

fn residual(x: &Var, ln: &LayerNormWeights, f: impl FnOnce(&Var) -> Result<Var>) -> Result<Var> {
    let y = ops::layer_norm(x, &ln.gamma, &ln.beta, LN_EPS)?;
    ops::add(x, &f(&y)?)
}

fn mlp(x: &Var, w: &MlpWeights) -> Result<Var> {
    ops::mlp_block(x, &w.w1, &w.b1, &w.w2, &w.b2, Activation::Gelu)
}

/// One divided block; `shifted` selects the shifted spatial windows.
pub fn stda_block(x: &Var, w: &StdaBlockWeights, m: usize, shifted: bool) -> Result<Var> {
    let x = residual(x, &w.ln_spatial, |y| {
        spatial_attention(y, &w.spatial, m, shifted)
    })?;
    let x = residual(&x, &w.ln_mlp1, |y| mlp(y, &w.mlp1))?;
    let x = residual(&x, &w.ln_temporal, |y| temporal_attention(y, &w.temporal))?;
    residual(&x, &w.ln_mlp2, |y| mlp(y, &w.mlp2))
}

/// Regular then shifted divided block.
pub fn stda_block_pair(x: &Var, pair: &[StdaBlockWeights; 2], m: usize) -> Result<Var> {
    let x = stda_block(x, &pair[0], m, false)?;
    stda_block(&x, &pair[1], m, true)
}

/// Dense single-window reference: softmax(q kᵀ/√dh + bias) v per head over
/// `tokens` rows `[n, C]`, followed by the output projection.
pub fn dense_reference(tokens: &Tensor, w: &AttnWeights, bias: Option<&[f64]>) -> Tensor {
    let c = tokens.shape()[1];
    let n = tokens.shape()[0];
    let dh = c / w.heads;
    let proj = |m: &Var| -> Vec<f64> {
        let md = m.value().data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for o in 0..c {
                out[i * c + o] = (0..c)
                    .map(|k| tokens.data()[i * c + k] * md[k * c + o])
                    .sum();
            }
        }
        out
    };
    let (q, k, v) = (proj(&w.wq), proj(&w.wk), proj(&w.wv));
    let mut merged = vec![0.0; n * c];
    for h in 0..w.heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| {
                    let dot: f64 = (0..dh)
                        .map(|e| q[i * c + h * dh + e] * k[j * c + h * dh + e])
                        .sum();
                    dot / (dh as f64).sqrt() + bias.map_or(0.0, |b| b[(h * n + i) * n + j])
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            for e in 0..dh {
                merged[i * c + h * dh + e] =
                    (0..n).map(|j| ex[j] / s * v[j * c + h * dh + e]).sum();
            }
        }
    }
    let wo = w.wo.value().data();
    let bo = w.bo.as_ref().map(|b| b.value().data().to_vec());
    Tensor::from_fn(&[n, c], |idx| {
        let (i, o) = (idx / c, idx % c);
        let acc: f64 = (0..c).map(|k| merged[i * c + k] * wo[k * c + o]).sum();
        acc + bo.as_ref().map_or(0.0, |b| b[o])
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::patching::{cyclic_shift, cyclic_unshift, shift_for};
    use crate::tensor::no_grad;
    use crate::testutil::{numeric_grad, random_tensor, rel_err};

    fn attn(c: usize, heads: usize, seed: u64) -> AttnWeights {
        let m = |s| Var::constant(random_tensor(&[c, c], seed * 10 + s));
        AttnWeights {
            wq: m(1),
            wk: m(2),
            wv: m(3),
            wo: m(4),
            bo: Some(Var::constant(random_tensor(&[c], seed * 10 + 5))),
            rel_bias: None,
            heads,
        }
    }

    fn grid(shape: [usize; 6], seed: u64) -> Var {
        Var::constant(random_tensor(&shape, seed))
    }

    /// Rows `[n, C]` of `x` at the listed flat token indices.
    fn rows(x: &Tensor, ids: &[usize]) -> Tensor {
        let c = *x.shape().last().unwrap();
        let mut d = Vec::new();
        for &i in ids {
            d.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![ids.len(), c], d).unwrap()
    }

    #[test]
    fn spatial_matches_dense_reference_per_window() {
        for heads in [1, 2] {
            let x = grid([1, 2, 6, 3, 3, 4], 1);
            let w = attn(4, heads, 2);
            let out = spatial_attention(&x, &w, 3, false).unwrap();
            let layout = WindowLayout::spatial([6, 3, 3], 3, false).unwrap();
            let s = 6 * 3 * 3;
            for t in 0..2 {
                for win in layout.slot_sources().chunks(27) {
                    let ids: Vec<usize> = win.iter().map(|p| t * s + p.unwrap()).collect();
                    let expect = dense_reference(&rows(x.value(), &ids), &w, None);
                    let got = rows(out.value(), &ids);
                    assert!(got.max_abs_diff(&expect) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn shifted_spatial_equals_masked_reference_on_rolled_grid() {
        // No padding: shifted attention == unroll(regular-window attention on
        // the rolled grid with region masks). Check every window densely.
        let x = grid([1, 1, 4, 4, 2, 2], 3);
        let w = attn(2, 1, 4);
        let out = spatial_attention(&x, &w, 2, true).unwrap();
        let layout = WindowLayout::spatial([4, 4, 2], 2, true).unwrap();
        let mask = layout.mask().unwrap();
        let l = layout.window_len();
        for (wi, win) in layout.slot_sources().chunks(l).enumerate() {
            let ids: Vec<usize> = win.iter().map(|p| p.unwrap()).collect();
            let bias: Vec<f64> = mask.data()[wi * l * l..(wi + 1) * l * l].to_vec();
            let expect = dense_reference(&rows(x.value(), &ids), &w, Some(&bias));
            assert!(rows(out.value(), &ids).max_abs_diff(&expect) < 1e-12);
        }
        // And it agrees with the explicit roll -> attend -> unroll pipeline
        // when the mask is inactive (all tokens in one region per window).
        let s = shift_for(2);
        let rolled = cyclic_shift(&x, s).unwrap();
        assert_eq!(cyclic_unshift(&rolled, s).unwrap().value(), x.value());
    }

    #[test]
    fn temporal_matches_dense_reference() {
        let x = grid([2, 4, 2, 2, 1, 6], 5);
        let w = attn(6, 3, 6);
        let out = temporal_attention(&x, &w).unwrap();
        let s = 4;
        for b in 0..2 {
            for p in 0..s {
                let ids: Vec<usize> = (0..4).map(|t| (b * 4 + t) * s + p).collect();
                let expect = dense_reference(&rows(x.value(), &ids), &w, None);
                assert!(rows(out.value(), &ids).max_abs_diff(&expect) < 1e-12);
            }
        }
    }

    #[test]
    fn padded_window_matches_reference_on_real_tokens() {
        // Extent 5 with window 3 pads to 6; padded keys must carry zero weight.
        let x = grid([1, 1, 5, 1, 1, 2], 7);
        let w = attn(2, 1, 8);
        let out = spatial_attention(&x, &w, 3, false).unwrap();
        for ids in [vec![0, 1, 2], vec![3, 4]] {
            let expect = dense_reference(&rows(x.value(), &ids), &w, None);
            assert!(rows(out.value(), &ids).max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn single_token_window_is_value_path() {
        let x = grid([1, 2, 2, 2, 2, 4], 9);
        let w = attn(4, 2, 10);
        let out = spatial_attention(&x, &w, 1, false).unwrap();
        let xt = x.value();
        let expect = no_grad(|| {
            let v = ops::linear(&Var::constant(xt.clone()), &w.wv, None).unwrap();
            ops::linear(&v, &w.wo, w.bo.as_ref())
                .unwrap()
                .value()
                .clone()
        });
        assert!(out.value().max_abs_diff(&expect) < 1e-12);
        // T = 1 temporal attention is the same value path.
        let x1 = grid([1, 1, 2, 2, 1, 4], 11);
        let out = temporal_attention(&x1, &w).unwrap();
        let expect = ops::linear(
            &ops::linear(&x1, &w.wv, None).unwrap(),
            &w.wo,
            w.bo.as_ref(),
        )
        .unwrap();
        assert!(out.value().max_abs_diff(expect.value()) < 1e-12);
        // Joint with d = 1 equals spatial with M = 1 at T = 1.
        let j = joint_attention(&x1, &w, 1, false).unwrap();
        let sp = spatial_attention(&x1, &w, 1, false).unwrap();
        assert!(j.value().max_abs_diff(sp.value()) < 1e-12);
    }

    #[test]
    fn identical_tokens_share_weight_equally() {
        let mut data = random_tensor(&[1, 1, 2, 1, 1, 3], 12).into_data();
        let (a, b) = data.split_at_mut(3);
        b.copy_from_slice(a);
        let x = Var::constant(Tensor::new(vec![1, 1, 2, 1, 1, 3], data).unwrap());
        let w = attn(3, 1, 13);
        let out = spatial_attention(&x, &w, 2, false).unwrap();
        let d = out.value().data();
        assert!((0..3).all(|i| (d[i] - d[i + 3]).abs() < 1e-15));
        // Temporally constant input stays temporally constant.
        let base = random_tensor(&[1, 1, 2, 2, 1, 3], 14);
        let rep: Vec<f64> = (0..3).flat_map(|_| base.data().to_vec()).collect();
        let x = Var::constant(Tensor::new(vec![1, 3, 2, 2, 1, 3], rep).unwrap());
        let out = temporal_attention(&x, &w).unwrap();
        let d = out.value().data();
        let n = 12;
        assert!(
            (0..n).all(|i| (d[i] - d[n + i]).abs() < 1e-14 && (d[i] - d[2 * n + i]).abs() < 1e-14)
        );
    }

    #[test]
    fn joint_window_token_counts() {
        let l = WindowLayout::new(&[8, 8, 8, 8], &[4; 4], false).unwrap();
        assert_eq!(l.window_len(), 256);
        let l = WindowLayout::spatial([16; 3], 6, false).unwrap();
        assert_eq!(l.window_len(), 216);
        let x = grid([1, 2, 4, 4, 4, 2], 15);
        assert!(joint_attention(&x, &attn(2, 1, 16), 4, false).is_err());
    }

    #[test]
    fn head_divisibility_is_config_error() {
        let x = grid([1, 1, 2, 2, 2, 4], 17);
        assert!(matches!(
            spatial_attention(&x, &attn(4, 3, 18), 2, false),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn spatial_locality_probe() {
        let x0 = random_tensor(&[1, 2, 4, 4, 4, 2], 19);
        let w = attn(2, 1, 20);
        let base = spatial_attention(&Var::constant(x0.clone()), &w, 2, true).unwrap();
        let layout = WindowLayout::spatial([4, 4, 4], 2, true).unwrap();
        let l = layout.window_len();
        let src = layout.slot_sources();
        // Perturb frame 1, token at position 0; find its window.
        let mut x1 = x0.clone();
        x1.data_mut()[64 * 2] += 1.0;
        let pert = spatial_attention(&Var::constant(x1), &w, 2, true).unwrap();
        let win = src.iter().position(|p| *p == Some(0)).unwrap() / l;
        let same: Vec<usize> = src[win * l..(win + 1) * l]
            .iter()
            .map(|p| p.unwrap())
            .collect();
        for t in 0..2 {
            for p in 0..64 {
                let i = (t * 64 + p) * 2;
                let changed = base.value().data()[i..i + 2] != pert.value().data()[i..i + 2];
                if t == 0 || !same.contains(&p) {
                    assert!(!changed, "leak to t={t} p={p}");
                }
            }
        }
    }

    #[test]
    fn temporal_locality_probe() {
        let x0 = random_tensor(&[1, 3, 2, 2, 2, 2], 21);
        let w = attn(2, 1, 22);
        let base = temporal_attention(&Var::constant(x0.clone()), &w).unwrap();
        let mut x1 = x0;
        x1.data_mut()[(8 + 5) * 2] -= 0.5;
        let pert = temporal_attention(&Var::constant(x1), &w).unwrap();
        for t in 0..3 {
            for p in 0..8 {
                let i = (t * 8 + p) * 2;
                let changed = base.value().data()[i..i + 2] != pert.value().data()[i..i + 2];
                assert_eq!(changed, p == 5, "t={t} p={p}");
            }
        }
    }

    #[test]
    fn relative_bias_matches_reference_and_breaks_equivariance() {
        let x = grid([1, 1, 2, 2, 1, 2], 23);
        let mut w = attn(2, 2, 24);
        let r = rel_bias_table_len(&[2, 2, 1]);
        let table = random_tensor(&[2, r], 25);
        w.rel_bias = Some(Var::constant(table.clone()));
        let out = spatial_attention(&x, &w, 2, false).unwrap();
        let offs = relative_offsets(&[2, 2, 1]);
        let bias: Vec<f64> = (0..2)
            .flat_map(|h| offs.iter().map(move |&o| (h, o)))
            .map(|(h, o)| table.data()[h * r + o])
            .collect();
        let expect = dense_reference(&rows(x.value(), &[0, 1, 2, 3]), &w, Some(&bias));
        assert!(
            out.value()
                .max_abs_diff(&expect.reshape(&[1, 1, 2, 2, 1, 2]).unwrap())
                < 1e-12
        );
    }

    #[test]
    fn block_pair_gradient_wrt_shifted_wq() {
        let c = 4;
        let ln = || LayerNormWeights {
            gamma: Var::constant(Tensor::ones(&[c])),
            beta: Var::constant(Tensor::zeros(&[c])),
        };
        let mlpw = |s| MlpWeights {
            w1: Var::constant(random_tensor(&[c, 2 * c], s).map(|v| v * 0.5)),
            b1: Var::constant(random_tensor(&[2 * c], s + 1)),
            w2: Var::constant(random_tensor(&[2 * c, c], s + 2).map(|v| v * 0.5)),
            b2: Var::constant(random_tensor(&[c], s + 3)),
        };
        let block = |s: u64| StdaBlockWeights {
            ln_spatial: ln(),
            spatial: attn(c, 2, s),
            ln_mlp1: ln(),
            mlp1: mlpw(s + 100),
            ln_temporal: ln(),
            temporal: attn(c, 2, s + 1),
            ln_mlp2: ln(),
            mlp2: mlpw(s + 200),
        };
        let x = grid([1, 2, 4, 4, 2, c], 26);
        let target = random_tensor(&[1, 2, 4, 4, 2, c], 27);
        let wq0 = random_tensor(&[c, c], 28);
        let f = |wq: &Var| {
            let mut pair = [block(30), block(40)];
            pair[1].spatial.wq = wq.clone();
            let y = stda_block_pair(&x, &pair, 2).unwrap();
            let t = Var::constant(target.clone());
            ops::sum(&ops::mul(&y, &t).unwrap()).unwrap()
        };
        let leaf = Var::leaf(wq0.clone());
        f(&leaf).backward().unwrap();
        let num = numeric_grad(
            |t: &Tensor| no_grad(|| f(&Var::constant(t.clone())).value().item()),
            &wq0,
            1e-4,
        );
        assert!(rel_err(&leaf.grad().unwrap(), &num) < 1e-3);
    }

    #[test]
    fn zero_branches_give_identity_block() {
        let c = 6;
        let z = |s: &[usize]| Var::constant(Tensor::zeros(s));
        let ln = || LayerNormWeights {
            gamma: Var::constant(Tensor::ones(&[c])),
            beta: z(&[c]),
        };
        let at = || AttnWeights {
            wq: z(&[c, c]),
            wk: z(&[c, c]),
            wv: z(&[c, c]),
            wo: z(&[c, c]),
            bo: Some(z(&[c])),
            rel_bias: None,
            heads: 3,
        };
        let ml = || MlpWeights {
            w1: z(&[c, 4 * c]),
            b1: z(&[4 * c]),
            w2: z(&[4 * c, c]),
            b2: z(&[c]),
        };
        let blk = || StdaBlockWeights {
            ln_spatial: ln(),
            spatial: at(),
            ln_mlp1: ln(),
            mlp1: ml(),
            ln_temporal: ln(),
            temporal: at(),
            ln_mlp2: ln(),
            mlp2: ml(),
        };
        let x = grid([1, 2, 4, 4, 4, c], 29);
        let y = stda_block_pair(&x, &[blk(), blk()], 2).unwrap();
        assert_eq!(y.value(), x.value());
        assert_eq!(y.shape(), &[1, 2, 4, 4, 4, c]);
    }

    #[test]
    fn probe_counts_spatial_scores() {
        let x = grid([1, 2, 4, 4, 4, 2], 31);
        let w = attn(2, 2, 32);
        let p = probe::Probe::start();
        spatial_attention(&x, &w, 2, true).unwrap();
        let r = p.finish();
        // 2 frames x 2 heads x 8 windows x 8^2 scores.
        assert_eq!(r.score_elements, 2 * 2 * 8 * 64);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn permutation_equivariance_within_window(seed in 0u64..500, perm_seed in 0u64..500) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            // One 2x2x2 window per frame: a permutation of its tokens permutes outputs.
            let x = random_tensor(&[1, 1, 2, 2, 2, 4], seed);
            let w = attn(4, 2, seed + 1);
            let mut perm: Vec<usize> = (0..8).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let px = rows(&x, &perm).reshape(&[1, 1, 2, 2, 2, 4]).unwrap();
            let out = spatial_attention(&Var::constant(x), &w, 2, false).unwrap();
            let pout = spatial_attention(&Var::constant(px), &w, 2, false).unwrap();
            let expect = rows(out.value(), &perm);
            prop_assert!(rows(pout.value(), &(0..8).collect::<Vec<_>>()).max_abs_diff(&expect) < 1e-12);
        }

        #[test]
        fn attention_rows_sum_to_one(seed in 0u64..500, h in 3usize..7) {
            // Masked (padded + shifted) windows. Channel 0 is random and drives
            // the scores; channel 1 is 1 at real tokens, so with identity value
            // and output maps it reads back the attention row sum. Padded
            // slots gather zeros and would lower the sum if they leaked.
            let c = 2;
            let id = Var::constant(Tensor::eye(c));
            let w = AttnWeights {
                wq: Var::constant(random_tensor(&[c, c], seed)),
                wk: Var::constant(random_tensor(&[c, c], seed + 1)),
                wv: id.clone(),
                wo: id,
                bo: None,
                rel_bias: None,
                heads: 1,
            };
            let mut x = random_tensor(&[1, 1, h, 4, 1, c], seed + 2);
            x.data_mut().chunks_mut(2).for_each(|r| r[1] = 1.0);
            let out = spatial_attention(&Var::constant(x), &w, 3, true).unwrap();
            prop_assert!(out.value().data().chunks(2).all(|r| (r[1] - 1.0).abs() < 1e-12));
        }
    }
}
