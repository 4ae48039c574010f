//! Patch partition and embedding, patch merging, window tiling and cyclic
//! shifts over token grids shaped `[B, T, H, W, D, C]`.

use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::ops::{self, GATHER_ZERO};
use crate::tensor::{Tensor, Var};
use crate::volume::Volume4D;

/// Logit added to masked attention scores.
pub const MASK_LOGIT: f64 = -1e9;

/// Token grid of one encoder stage.
#[derive(Debug, Clone)]
pub struct PatchGrid {
    /// `[B, T, H', W', D', C']`
    pub tokens: Var,
    pub patch_size: usize,
    pub stage: usize,
}

/// Extents of a `[B, T, H, W, D, C]` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub c: usize,
}

impl GridDims {
    pub fn of(x: &Var) -> Result<Self> {
        match *x.shape() {
            [b, t, h, w, d, c] => Ok(GridDims { b, t, h, w, d, c }),
            _ => Err(Error::Invalid(format!(
                "token grid must be [B, T, H, W, D, C], got {:?}",
                x.shape()
            ))),
        }
    }

    pub fn shape(&self) -> [usize; 6] {
        [self.b, self.t, self.h, self.w, self.d, self.c]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn tokens(&self) -> usize {
        self.b * self.t * self.h * self.w * self.d
    }
}

impl PatchGrid {
    pub fn dims(&self) -> GridDims {
        GridDims::of(&self.tokens).expect("PatchGrid holds a rank-6 grid")
    }
}

/// Stacks volumes of identical shape into a `[B, T, H, W, D]` tensor.
pub fn batch_volumes(volumes: &[&Volume4D]) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let [h, w, d] = first.spatial();
    let t = first.frames();
    let mut data = Vec::with_capacity(volumes.len() * first.data().len());
    for v in volumes {
        if v.frames() != t || v.spatial() != [h, w, d] {
            return shape_err("batch_volumes", first.tensor().shape(), v.tensor().shape());
        }
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![volumes.len(), t, h, w, d], data)
}

/// Splits `[B, T, H, W, D]` voxels into non-overlapping `P^3` patches and maps
/// each flattened patch (row-major within the patch) through `w[P^3, C]` and
/// `b[C]`.
pub fn patch_embed(x: &Var, p: usize, w: &Var, b: &Var) -> Result<PatchGrid> {
    let [bs, t, h, wd, d] = match *x.shape() {
        [a, b, c, e, f] => [a, b, c, e, f],
        _ => {
            return Err(Error::Invalid(format!(
                "patch_embed input must be [B, T, H, W, D], got {:?}",
                x.shape()
            )))
        }
    };
    if p == 0 || h % p != 0 || wd % p != 0 || d % p != 0 {
        return Err(Error::Invalid(format!(
            "extents {:?} not divisible by patch size {p}",
            [h, wd, d]
        )));
    }
    let p3 = p * p * p;
    if w.shape().len() != 2 || w.shape()[0] != p3 {
        return shape_err("patch_embed", &[p3], w.shape());
    }
    let (gh, gw, gd) = (h / p, wd / p, d / p);
    let mut index = Vec::with_capacity(x.value().len());
    for frame in 0..bs * t {
        for i in 0..gh {
            for j in 0..gw {
                for k in 0..gd {
                    for a in 0..p {
                        for bb in 0..p {
                            for cc in 0..p {
                                let (xx, yy, zz) = (i * p + a, j * p + bb, k * p + cc);
                                index.push((((frame * h + xx) * wd + yy) * d + zz) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    let patches = ops::gather(x, Rc::new(index), &[bs, t, gh, gw, gd, p3])?;
    let tokens = ops::linear(&patches, w, Some(b))?;
    Ok(PatchGrid {
        tokens,
        patch_size: p,
        stage: 1,
    })
}

/// Zero-pads odd spatial extents up to the next even size.
pub fn pad_to_even(g: &Var) -> Result<Var> {
    let dims = GridDims::of(g)?;
    let [h, w, d] = dims.spatial();
    let (ph, pw, pd) = (h + h % 2, w + w % 2, d + d % 2);
    if (ph, pw, pd) == (h, w, d) {
        return Ok(g.clone());
    }
    let mut index = Vec::with_capacity(dims.b * dims.t * ph * pw * pd);
    for f in 0..dims.b * dims.t {
        for x in 0..ph {
            for y in 0..pw {
                for z in 0..pd {
                    index.push(if x < h && y < w && z < d {
                        (((f * h + x) * w + y) * d + z) as u32
                    } else {
                        GATHER_ZERO
                    });
                }
            }
        }
    }
    ops::gather_rows(
        g,
        Rc::new(index),
        dims.c,
        &[dims.b, dims.t, ph, pw, pd, dims.c],
    )
}

/// Concatenates each 2x2x2 neighbourhood (offsets in row-major order, 8C
/// channels) and maps it through `w[8C, 2C]`.
pub fn patch_merge(g: &PatchGrid, w: &Var) -> Result<PatchGrid> {
    let dims = g.dims();
    let [h, wd, d] = dims.spatial();
    if h % 2 != 0 || wd % 2 != 0 || d % 2 != 0 {
        return Err(Error::Invalid(format!(
            "patch_merge needs even extents, got {:?}",
            [h, wd, d]
        )));
    }
    let c = dims.c;
    if w.shape() != [8 * c, 2 * c] {
        return shape_err("patch_merge", &[8 * c, 2 * c], w.shape());
    }
    let (mh, mw, md) = (h / 2, wd / 2, d / 2);
    let mut index = Vec::with_capacity(dims.tokens());
    for f in 0..dims.b * dims.t {
        for x in 0..mh {
            for y in 0..mw {
                for z in 0..md {
                    for dx in 0..2 {
                        for dy in 0..2 {
                            for dz in 0..2 {
                                let (xx, yy, zz) = (2 * x + dx, 2 * y + dy, 2 * z + dz);
                                index.push((((f * h + xx) * wd + yy) * d + zz) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    let cat = ops::gather_rows(
        &g.tokens,
        Rc::new(index),
        c,
        &[dims.b, dims.t, mh, mw, md, 8 * c],
    )?;
    Ok(PatchGrid {
        tokens: ops::linear(&cat, w, None)?,
        patch_size: g.patch_size * 2,
        stage: g.stage + 1,
    })
}

/// Mean over all `T·H'·W'·D'` tokens: `[B, T, H, W, D, C] -> [B, C]`.
pub fn global_pool(g: &Var) -> Result<Var> {
    let dims = GridDims::of(g)?;
    let flat = ops::reshape(g, &[dims.b, dims.t * dims.h * dims.w * dims.d, dims.c])?;
    ops::mean_axis(&flat, 1)
}

/// Non-overlapping window tiling of an N-axis grid with optional Swin shift.
///
/// Axes longer than the requested window are padded up to a multiple of it
/// and, when shifted, rolled by `-floor(M/2)` after padding. Axes no longer
/// than the window collapse to a single window covering the axis, unshifted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowLayout {
    pub extents: Vec<usize>,
    pub window: Vec<usize>,
    pub shift: Vec<usize>,
    pub padded: Vec<usize>,
}

impl WindowLayout {
    pub fn new(extents: &[usize], window: &[usize], shifted: bool) -> Result<Self> {
        if extents.len() != window.len() || extents.is_empty() {
            return shape_err("WindowLayout", extents, window);
        }
        if extents.contains(&0) || window.contains(&0) {
            return Err(Error::Invalid(format!(
                "window layout needs positive sizes, got {extents:?} / {window:?}"
            )));
        }
        let mut eff = Vec::with_capacity(extents.len());
        let mut shift = Vec::with_capacity(extents.len());
        let mut padded = Vec::with_capacity(extents.len());
        for (&n, &m) in extents.iter().zip(window) {
            if n <= m {
                eff.push(n);
                shift.push(0);
                padded.push(n);
            } else {
                eff.push(m);
                shift.push(if shifted { m / 2 } else { 0 });
                padded.push(n.div_ceil(m) * m);
            }
        }
        Ok(WindowLayout {
            extents: extents.to_vec(),
            window: eff,
            shift,
            padded,
        })
    }

    /// Cubic spatial windows of side `m` over `[H, W, D]`.
    pub fn spatial(hwd: [usize; 3], m: usize, shifted: bool) -> Result<Self> {
        Self::new(&hwd, &[m; 3], shifted)
    }

    pub fn num_windows(&self) -> usize {
        self.padded
            .iter()
            .zip(&self.window)
            .map(|(p, m)| p / m)
            .product()
    }

    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn positions(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.extents
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    /// Per-axis window grid and in-window coordinates of slot `(w, l)` in the
    /// rolled, padded grid.
    fn rolled_coord(&self, w: usize, l: usize, out: &mut [usize]) {
        let n = self.extents.len();
        let (mut w, mut l) = (w, l);
        for a in (0..n).rev() {
            let m = self.window[a];
            let nw = self.padded[a] / m;
            out[a] = (w % nw) * m + l % m;
            w /= nw;
            l /= m;
        }
    }

    /// Row-major grid position feeding each `(window, slot)` pair, `None` for
    /// padding. Length `num_windows * window_len`.
    pub fn slot_sources(&self) -> Vec<Option<usize>> {
        let n = self.extents.len();
        let mut q = vec![0; n];
        let mut out = Vec::with_capacity(self.num_windows() * self.window_len());
        for w in 0..self.num_windows() {
            for l in 0..self.window_len() {
                self.rolled_coord(w, l, &mut q);
                let mut pos = 0;
                let mut real = true;
                for a in 0..n {
                    let p = (q[a] + self.shift[a]) % self.padded[a];
                    if p >= self.extents[a] {
                        real = false;
                    }
                    pos = pos * self.extents[a] + p;
                }
                out.push(real.then_some(pos));
            }
        }
        out
    }

    fn region(&self, a: usize, q: usize) -> u8 {
        let (p, m, s) = (self.padded[a], self.window[a], self.shift[a]);
        if s == 0 || q < p - m {
            0
        } else if q < p - s {
            1
        } else {
            2
        }
    }

    /// Additive logits `[nW, L, L]` blocking padded keys and, for shifted
    /// layouts, pairs from different pre-roll regions. `None` when nothing is
    /// masked.
    pub fn mask(&self) -> Option<Tensor> {
        if !self.is_padded() && !self.is_shifted() {
            return None;
        }
        let (nw, l) = (self.num_windows(), self.window_len());
        let n = self.extents.len();
        let sources = self.slot_sources();
        let mut q = vec![0; n];
        let mut data = vec![0.0; nw * l * l];
        let mut regions = vec![0u32; l];
        for w in 0..nw {
            for (i, r) in regions.iter_mut().enumerate() {
                self.rolled_coord(w, i, &mut q);
                *r = (0..n).fold(0, |acc, a| acc * 3 + u32::from(self.region(a, q[a])));
            }
            let block = &mut data[w * l * l..(w + 1) * l * l];
            for i in 0..l {
                for j in 0..l {
                    if sources[w * l + j].is_none() || regions[i] != regions[j] {
                        block[i * l + j] = MASK_LOGIT;
                    }
                }
            }
        }
        Some(Tensor::from_fn(&[nw, l, l], |i| data[i]))
    }
}

/// Windows of a `[B, T, H, W, D, C]` grid, laid out `[B, nW, T, m, m, m, C]`.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub windows: Var,
    pub layout: WindowLayout,
    pub grid: GridDims,
}

/// Pads the spatial axes to multiples of `m` and tiles them into `m^3`
/// windows, each carrying all frames.
pub fn window_partition(g: &Var, m: usize) -> Result<WindowSet> {
    let dims = GridDims::of(g)?;
    let layout = WindowLayout::spatial(dims.spatial(), m, false)?;
    let (nw, l) = (layout.num_windows(), layout.window_len());
    let sources = layout.slot_sources();
    let s = dims.h * dims.w * dims.d;
    let mut index = Vec::with_capacity(dims.b * nw * dims.t * l);
    for b in 0..dims.b {
        for w in 0..nw {
            for t in 0..dims.t {
                for slot in &sources[w * l..(w + 1) * l] {
                    index.push(match slot {
                        Some(p) => ((b * dims.t + t) * s + p) as u32,
                        None => GATHER_ZERO,
                    });
                }
            }
        }
    }
    let [m0, m1, m2] = [layout.window[0], layout.window[1], layout.window[2]];
    let windows = ops::gather_rows(
        g,
        Rc::new(index),
        dims.c,
        &[dims.b, nw, dims.t, m0, m1, m2, dims.c],
    )?;
    Ok(WindowSet {
        windows,
        layout,
        grid: dims,
    })
}

/// Inverse of [`window_partition`]; padding is dropped.
pub fn window_reverse(ws: &WindowSet) -> Result<Var> {
    let dims = ws.grid;
    let (nw, l) = (ws.layout.num_windows(), ws.layout.window_len());
    let s = dims.h * dims.w * dims.d;
    let mut index = vec![0u32; dims.tokens()];
    for (k, slot) in ws.layout.slot_sources().iter().enumerate() {
        let Some(p) = *slot else { continue };
        let (w, i) = (k / l, k % l);
        for b in 0..dims.b {
            for t in 0..dims.t {
                index[(b * dims.t + t) * s + p] = (((b * nw + w) * dims.t + t) * l + i) as u32;
            }
        }
    }
    ops::gather_rows(&ws.windows, Rc::new(index), dims.c, &dims.shape())
}

fn roll(g: &Var, shift: [usize; 3], forward: bool) -> Result<Var> {
    let dims = GridDims::of(g)?;
    let ext = dims.spatial();
    if shift.iter().zip(ext).all(|(s, n)| s % n == 0) {
        return Ok(g.clone());
    }
    let mut index = Vec::with_capacity(dims.tokens());
    let src = |q: usize, a: usize| {
        let (n, s) = (ext[a], shift[a] % ext[a]);
        if forward {
            (q + s) % n
        } else {
            (q + n - s) % n
        }
    };
    for f in 0..dims.b * dims.t {
        for x in 0..dims.h {
            for y in 0..dims.w {
                for z in 0..dims.d {
                    let (sx, sy, sz) = (src(x, 0), src(y, 1), src(z, 2));
                    index.push((((f * dims.h + sx) * dims.w + sy) * dims.d + sz) as u32);
                }
            }
        }
    }
    ops::gather_rows(g, Rc::new(index), dims.c, &dims.shape())
}

/// Swin shift for window size `m`: `floor(m/2)` per spatial axis.
pub fn shift_for(m: usize) -> [usize; 3] {
    [m / 2; 3]
}

/// Circular roll by `-shift` on each spatial axis: `out[q] = in[q + shift]`.
pub fn cyclic_shift(g: &Var, shift: [usize; 3]) -> Result<Var> {
    roll(g, shift, true)
}

/// Inverse of [`cyclic_shift`].
pub fn cyclic_unshift(g: &Var, shift: [usize; 3]) -> Result<Var> {
    roll(g, shift, false)
}
