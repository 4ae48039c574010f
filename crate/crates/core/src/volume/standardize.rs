use rand::seq::index;
use rand::Rng;

use super::Volume4D;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardizeOptions {
    /// Target `(T, H, W, D)`.
    pub target: [usize; 4],
    /// Apply the per-volume z-score after cropping.
    pub normalize: bool,
}

impl Default for StandardizeOptions {
    fn default() -> Self {
        Self {
            target: [15, 96, 96, 96],
            normalize: true,
        }
    }
}

/// Crops or zero-pads each spatial axis around its center, samples exactly
/// `target[0]` frames in their original order and optionally z-scores.
///
/// Along an axis of length `n` mapped to `t`, crops start at `(n - t) / 2`;
/// pads put `(t - n) / 2` zeros before and the remainder after.
pub fn standardize<R: Rng + ?Sized>(
    v: &Volume4D,
    opts: &StandardizeOptions,
    rng: &mut R,
) -> Result<Volume4D> {
    let [tt, th, tw, td] = opts.target;
    if opts.target.contains(&0) {
        return Err(Error::Invalid(format!(
            "target extents must be positive, got {:?}",
            opts.target
        )));
    }
    let nt = v.frames();
    if nt < tt {
        return Err(Error::InsufficientFrames {
            needed: tt,
            available: nt,
        });
    }
    let frames: Vec<usize> = if nt == tt {
        (0..nt).collect()
    } else {
        let mut idx = index::sample(rng, nt, tt).into_vec();
        idx.sort_unstable();
        idx
    };

    let [sh, sw, sd] = v.spatial();
    // out index o on an axis reads input o + shift, where shift may be negative.
    let shift = |n: usize, t: usize| -> isize {
        if n >= t {
            ((n - t) / 2) as isize
        } else {
            -(((t - n) / 2) as isize)
        }
    };
    let (oh, ow, od) = (shift(sh, th), shift(sw, tw), shift(sd, td));
    let src_index = |o: usize, off: isize, n: usize| -> Option<usize> {
        let i = o as isize + off;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    };

    let frame_out = th * tw * td;
    let mut out = vec![0.0; tt * frame_out];
    for (k, &f) in frames.iter().enumerate() {
        let src = v.frame(f);
        let dst = &mut out[k * frame_out..(k + 1) * frame_out];
        for x in 0..th {
            let Some(ix) = src_index(x, oh, sh) else {
                continue;
            };
            for y in 0..tw {
                let Some(iy) = src_index(y, ow, sw) else {
                    continue;
                };
                for z in 0..td {
                    let Some(iz) = src_index(z, od, sd) else {
                        continue;
                    };
                    dst[(x * tw + y) * td + z] = src[(ix * sw + iy) * sd + iz];
                }
            }
        }
    }
    if opts.normalize {
        zscore_nonzero(&mut out);
    }
    let vol = Volume4D::from_frames(tt, [th, tw, td], out)?;
    Ok(vol.with_metadata_of(v))
}

/// Z-scores the nonzero entries of `data` in place; zeros stay zero.
///
/// Returns `false` and leaves the data untouched when fewer than two voxels are
/// nonzero or their spread is zero.
pub fn zscore_nonzero(data: &mut [f64]) -> bool {
    let (mut n, mut sum) = (0usize, 0.0);
    for &v in data.iter().filter(|v| **v != 0.0) {
        n += 1;
        sum += v;
    }
    if n < 2 {
        return false;
    }
    let mean = sum / n as f64;
    let var = data
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return false;
    }
    for v in data.iter_mut().filter(|v| **v != 0.0) {
        *v = (*v - mean) / sd;
    }
    true
}
