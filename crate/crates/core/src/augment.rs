//! Stochastic fMRI augmentations and the two-view pair sampler.
//!
//! Every draw comes from a caller-supplied ChaCha generator, so a seed fixes
//! the whole augmentation. Drawn parameters are logged at debug level.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::Volume4D;

pub const MASK_BLOCK: usize = 4;
pub const MASK_FRACTION: f64 = 0.2;
pub const STRIDE_LEN: usize = 5;
pub const STRIDE_MAX_GAP: usize = 3;
/// Shortest sequence that fits the widest stride.
pub const STRIDE_MIN_FRAMES: usize = 1 + (STRIDE_LEN - 1) * STRIDE_MAX_GAP;
pub const AFFINE_SCALE: (f64, f64) = (0.9, 1.1);
pub const AFFINE_MAX_DEG: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Level {
    #[default]
    Off,
    Low,
    High,
}

impl Level {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" | "none" => Ok(Level::Off),
            "low" => Ok(Level::Low),
            "high" => Ok(Level::High),
            other => Err(Error::Config(format!("unknown level {other:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Off => "off",
            Level::Low => "low",
            Level::High => "high",
        }
    }

    /// Upper bound of the uniform noise sigma range.
    pub fn noise_max(self) -> f64 {
        match self {
            Level::Off => 0.0,
            Level::Low => 0.1,
            Level::High => 0.5,
        }
    }

    /// Upper bound of the uniform smoothing sigma range, in voxels.
    pub fn smooth_max(self) -> f64 {
        match self {
            Level::Off => 0.0,
            Level::Low => 0.5,
            Level::High => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSpec {
    pub noise: Level,
    pub smoothing: Level,
    pub affine: bool,
    pub masking: bool,
    pub striding: bool,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::off()
    }
}

impl AugmentationSpec {
    pub fn off() -> Self {
        Self {
            noise: Level::Off,
            smoothing: Level::Off,
            affine: false,
            masking: false,
            striding: false,
            seed: 0,
        }
    }

    /// Low noise, low smoothing, striding and masking.
    pub fn pretrain_default() -> Self {
        Self {
            noise: Level::Low,
            smoothing: Level::Low,
            masking: true,
            striding: true,
            ..Self::off()
        }
    }

    /// Low noise, low smoothing and affine.
    pub fn finetune_default() -> Self {
        Self {
            noise: Level::Low,
            smoothing: Level::Low,
            affine: true,
            ..Self::off()
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

/// Adds `N(0, sigma^2)` to every voxel, with sigma drawn from the level's range.
pub fn add_noise<R: Rng + ?Sized>(v: &Volume4D, level: Level, rng: &mut R) -> Volume4D {
    let max = level.noise_max();
    if max == 0.0 {
        return v.clone();
    }
    let sigma = rng.random_range(0.0..max);
    log::debug!("noise: sigma={sigma:.6}");
    add_noise_sigma(v, sigma, rng)
}

pub fn add_noise_sigma<R: Rng + ?Sized>(v: &Volume4D, sigma: f64, rng: &mut R) -> Volume4D {
    if sigma <= 0.0 {
        return v.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("positive finite sigma");
    let data = v.data().iter().map(|x| x + normal.sample(rng)).collect();
    v.map_data(data).expect("same shape")
}

/// Per-frame 3D Gaussian blur with sigma drawn from the level's range.
pub fn smooth<R: Rng + ?Sized>(v: &Volume4D, level: Level, rng: &mut R) -> Volume4D {
    let max = level.smooth_max();
    if max == 0.0 {
        return v.clone();
    }
    let sigma = rng.random_range(0.0..max);
    log::debug!("smooth: sigma={sigma:.6}");
    smooth_sigma(v, sigma)
}

/// Normalized Gaussian taps for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian blur over the three spatial axes of every frame.
/// Samples past the border repeat the edge voxel.
pub fn smooth_sigma(v: &Volume4D, sigma: f64) -> Volume4D {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return v.clone();
    }
    let [h, w, d] = v.spatial();
    let mut data = v.data().to_vec();
    let n = v.frame_len();
    let mut line = Vec::new();
    for frame in data.chunks_mut(n) {
        // (length, stride, outer offsets) for each axis.
        let axes: [(usize, usize, Vec<usize>); 3] = [
            (h, w * d, (0..w * d).collect()),
            (
                w,
                d,
                (0..h)
                    .flat_map(|x| (0..d).map(move |z| x * w * d + z))
                    .collect(),
            ),
            (d, 1, (0..h * w).map(|i| i * d).collect()),
        ];
        for (len, stride, starts) in &axes {
            for &s in starts {
                line.clear();
                line.extend((0..*len).map(|i| frame[s + i * stride]));
                convolve_line(&line, &k, |i, val| frame[s + i * stride] = val);
            }
        }
    }
    v.map_data(data).expect("same shape")
}

fn convolve_line(line: &[f64], k: &[f64], mut put: impl FnMut(usize, f64)) {
    let r = (k.len() / 2) as isize;
    let last = line.len() as isize - 1;
    for i in 0..line.len() {
        let c = line[i];
        // Accumulating differences keeps constant lines exactly constant.
        let mut acc = 0.0;
        for (j, &wj) in k.iter().enumerate() {
            let p = (i as isize + j as isize - r).clamp(0, last) as usize;
            acc += wj * (line[p] - c);
        }
        put(i, c + acc);
    }
}

/// One isotropic scale and three rotation angles (degrees, about x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub scale: f64,
    pub rot_deg: [f64; 3],
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        scale: 1.0,
        rot_deg: [0.0; 3],
    };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let scale = rng.random_range(AFFINE_SCALE.0..=AFFINE_SCALE.1);
        let mut rot_deg = [0.0; 3];
        for r in &mut rot_deg {
            *r = rng.random_range(-AFFINE_MAX_DEG..=AFFINE_MAX_DEG);
        }
        AffineParams { scale, rot_deg }
    }

    /// `scale * Rz * Ry * Rx`.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let [ax, ay, az] = self.rot_deg.map(f64::to_radians);
        let rx = [
            [1.0, 0.0, 0.0],
            [0.0, ax.cos(), -ax.sin()],
            [0.0, ax.sin(), ax.cos()],
        ];
        let ry = [
            [ay.cos(), 0.0, ay.sin()],
            [0.0, 1.0, 0.0],
            [-ay.sin(), 0.0, ay.cos()],
        ];
        let rz = [
            [az.cos(), -az.sin(), 0.0],
            [az.sin(), az.cos(), 0.0],
            [0.0, 0.0, 1.0],
        ];
        let m = matmul3(&rz, &matmul3(&ry, &rx));
        m.map(|row| row.map(|x| x * self.scale))
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Draws one transform and resamples every frame with it.
pub fn affine_transform<R: Rng + ?Sized>(v: &Volume4D, rng: &mut R) -> Volume4D {
    let p = AffineParams::draw(rng);
    log::debug!("affine: scale={:.6} rot_deg={:?}", p.scale, p.rot_deg);
    affine_with(v, &p)
}

/// Trilinear resampling `out(p) = in(c + A (p - c))` about the volume center,
/// zero outside the input. With `scale > 1` content moves toward the center.
pub fn affine_with(v: &Volume4D, params: &AffineParams) -> Volume4D {
    let [h, w, d] = v.spatial();
    let ext = [h, w, d];
    let m = params.matrix();
    let c = ext.map(|n| (n as f64 - 1.0) / 2.0);
    let n = v.frame_len();
    // Source coordinates are shared by all frames; precompute taps once.
    let mut taps: Vec<([usize; 8], [f64; 8])> = Vec::with_capacity(n);
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let q = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let mut s = [0.0; 3];
                for i in 0..3 {
                    s[i] = c[i] + m[i][0] * q[0] + m[i][1] * q[1] + m[i][2] * q[2];
                }
                taps.push(trilinear_taps(s, ext, w, d));
            }
        }
    }
    let mut out = vec![0.0; v.data().len()];
    for t in 0..v.frames() {
        let src = v.frame(t);
        let dst = &mut out[t * n..(t + 1) * n];
        for (o, (idx, wt)) in dst.iter_mut().zip(&taps) {
            *o = (0..8).map(|k| wt[k] * src[idx[k]]).sum();
        }
    }
    v.map_data(out).expect("same shape")
}

fn trilinear_taps(s: [f64; 3], ext: [usize; 3], w: usize, d: usize) -> ([usize; 8], [f64; 8]) {
    let mut idx = [0usize; 8];
    let mut wt = [0.0; 8];
    let base = s.map(f64::floor);
    let frac = [s[0] - base[0], s[1] - base[1], s[2] - base[2]];
    for k in 0..8 {
        let mut weight = 1.0;
        let mut p = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let bit = (k >> (2 - a)) & 1;
            let f = if bit == 1 { frac[a] } else { 1.0 - frac[a] };
            weight *= f;
            let coord = base[a] as i64 + bit as i64;
            if coord < 0 || coord >= ext[a] as i64 {
                inside = false;
            } else {
                p[a] = coord as usize;
            }
        }
        if inside && weight != 0.0 {
            idx[k] = (p[0] * w + p[1]) * d + p[2];
            wt[k] = weight;
        }
    }
    (idx, wt)
}

/// Zeroes a random 20% of the 4x4x4 spatial blocks in every frame.
pub fn random_mask<R: Rng + ?Sized>(v: &Volume4D, rng: &mut R) -> Result<Volume4D> {
    let [h, w, d] = v.spatial();
    if [h, w, d].iter().any(|n| n % MASK_BLOCK != 0) {
        return Err(Error::Invalid(format!(
            "masking needs extents divisible by {MASK_BLOCK}, got {:?}",
            [h, w, d]
        )));
    }
    let (bh, bw, bd) = (h / MASK_BLOCK, w / MASK_BLOCK, d / MASK_BLOCK);
    let nblocks = bh * bw * bd;
    let count = masked_block_count(nblocks);
    let chosen = index::sample(rng, nblocks, count);
    log::debug!("mask: {count} of {nblocks} blocks");
    let mut voxels = Vec::with_capacity(count * MASK_BLOCK.pow(3));
    for b in chosen.iter() {
        let (bx, by, bz) = (b / (bw * bd), (b / bd) % bw, b % bd);
        for x in bx * MASK_BLOCK..(bx + 1) * MASK_BLOCK {
            for y in by * MASK_BLOCK..(by + 1) * MASK_BLOCK {
                for z in bz * MASK_BLOCK..(bz + 1) * MASK_BLOCK {
                    voxels.push((x * w + y) * d + z);
                }
            }
        }
    }
    let n = v.frame_len();
    let mut data = v.data().to_vec();
    for frame in data.chunks_mut(n) {
        for &i in &voxels {
            frame[i] = 0.0;
        }
    }
    v.map_data(data)
}

pub fn masked_block_count(nblocks: usize) -> usize {
    (MASK_FRACTION * nblocks as f64).floor() as usize
}

/// Draws five strictly increasing 0-based frame indices with gaps in {1,2,3}.
pub fn stride_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < STRIDE_MIN_FRAMES {
        return Err(Error::InsufficientFrames {
            needed: STRIDE_MIN_FRAMES,
            available: n,
        });
    }
    let gaps: Vec<usize> = (0..STRIDE_LEN - 1)
        .map(|_| rng.random_range(1..=STRIDE_MAX_GAP))
        .collect();
    let span: usize = gaps.iter().sum();
    let start = rng.random_range(0..n - span);
    let mut idx = vec![start];
    for g in gaps {
        idx.push(idx.last().unwrap() + g);
    }
    log::debug!("stride: indices={idx:?}");
    Ok(idx)
}

pub fn temporal_stride<R: Rng + ?Sized>(v: &Volume4D, rng: &mut R) -> Result<Volume4D> {
    let idx = stride_indices(v.frames(), rng)?;
    v.select_frames(&idx)
}

/// Applies one independent draw of every enabled augmentation, in the order
/// striding, affine, smoothing, noise, masking.
pub fn augment_view<R: Rng + ?Sized>(
    source: &Volume4D,
    spec: &AugmentationSpec,
    rng: &mut R,
) -> Result<Volume4D> {
    let mut v = if spec.striding {
        temporal_stride(source, rng)?
    } else {
        source.clone()
    };
    if spec.affine {
        v = affine_transform(&v, rng);
    }
    v = smooth(&v, spec.smoothing, rng);
    v = add_noise(&v, spec.noise, rng);
    if spec.masking {
        v = random_mask(&v, rng)?;
    }
    Ok(v)
}

/// Two independently augmented views of `source`, reproducible from
/// `spec.seed`.
pub fn make_pair(source: &Volume4D, spec: &AugmentationSpec) -> Result<(Volume4D, Volume4D)> {
    let mut r1 = ChaCha8Rng::seed_from_u64(spec.seed);
    r1.set_stream(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(spec.seed);
    r2.set_stream(2);
    Ok((
        augment_view(source, spec, &mut r1)?,
        augment_view(source, spec, &mut r2)?,
    ))
}
