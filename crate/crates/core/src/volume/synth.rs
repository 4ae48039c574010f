//! Labeled synthetic 4D datasets with planted class structure.
//!
//! Every class owns a template made of Gaussian blobs of equal amplitude and
//! width; classes differ only in where their blobs sit. A sample multiplies its
//! class template by a smooth temporal envelope and adds white noise.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{parse_nifti, write_nifti, Datatype, Volume4D};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    /// `(T, H, W, D)`.
    pub grid: [usize; 4],
    pub blob_count: usize,
    /// Blob standard deviation in voxels.
    pub blob_width: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 5,
            samples_per_class: 40,
            grid: [5, 24, 24, 24],
            blob_count: 2,
            blob_width: 2.5,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0
            || self.samples_per_class == 0
            || self.blob_count == 0
            || self.grid.contains(&0)
        {
            return Err(Error::Config(format!(
                "synthetic dataset needs positive counts and extents: {self:?}"
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if !(self.blob_width > 0.0 && self.blob_width.is_finite()) {
            return Err(Error::Config(format!(
                "blob_width must be > 0, got {}",
                self.blob_width
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Seed of the `index`-th sample in class-major order.
    pub fn sample_seed(&self, index: usize) -> u64 {
        mix(self.seed ^ mix(index as u64 + 1))
    }

    /// Voxel templates `[H, W, D]`, one per class.
    pub fn templates(&self) -> Vec<Vec<f64>> {
        let [_, h, w, d] = self.grid;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let margin = |n: usize| (n as f64 * 0.2).min(self.blob_width);
        (0..self.n_classes)
            .map(|_| {
                let centers: Vec<[f64; 3]> = (0..self.blob_count)
                    .map(|_| {
                        let mut c = [0.0; 3];
                        for (ci, n) in c.iter_mut().zip([h, w, d]) {
                            let m = margin(n);
                            let hi = (n as f64 - 1.0 - m).max(m);
                            *ci = if hi > m { rng.random_range(m..hi) } else { m };
                        }
                        c
                    })
                    .collect();
                let inv = 1.0 / (2.0 * self.blob_width * self.blob_width);
                let mut t = vec![0.0; h * w * d];
                for x in 0..h {
                    for y in 0..w {
                        for z in 0..d {
                            let p = [x as f64, y as f64, z as f64];
                            t[(x * w + y) * d + z] = centers
                                .iter()
                                .map(|c| {
                                    let r2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
                                    (-r2 * inv).exp()
                                })
                                .sum();
                        }
                    }
                }
                t
            })
            .collect()
    }
}

pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `n_classes * samples_per_class` labeled volumes in class-major
/// order. Identical specs give identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Volume4D>> {
    spec.validate()?;
    let templates = spec.templates();
    let [nt, h, w, d] = spec.grid;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(spec.len());
    for (k, template) in templates.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let g = k * spec.samples_per_class + i;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.sample_seed(g));
            let amp: f64 = rng.random_range(0.2..0.5);
            let freq: f64 = rng.random_range(0.5..1.5);
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            let mut data = Vec::with_capacity(nt * template.len());
            for t in 0..nt {
                let env = 1.0 + amp * (2.0 * PI * freq * t as f64 / nt as f64 + phase).sin();
                for &v in template {
                    let n = if spec.noise_sigma > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    data.push(v * env + n);
                }
            }
            let vol = Volume4D::from_frames(nt, [h, w, d], data)?
                .with_label(k)
                .with_subject(format!("class_{k:02}/sample_{i:03}"));
            out.push(vol);
        }
    }
    Ok(out)
}

/// Writes volumes under `dir` as `class_KK/sample_III.nii` plus a manifest
/// with one `path label seed` line per sample.
pub fn write_dataset(dir: &Path, spec: &SyntheticSpec, volumes: &[Volume4D]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut per_class = vec![0usize; spec.n_classes];
    for (g, v) in volumes.iter().enumerate() {
        let label = v
            .label
            .ok_or_else(|| Error::Invalid(format!("volume {g} has no label")))?;
        if label >= spec.n_classes {
            return Err(Error::Invalid(format!(
                "label {label} >= n_classes {}",
                spec.n_classes
            )));
        }
        let i = per_class[label];
        per_class[label] += 1;
        let rel = format!("class_{label:02}/sample_{i:03}.nii");
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, write_nifti(v, Datatype::Float64))?;
        manifest.push_str(&format!("{rel} {label} {}\n", spec.sample_seed(g)));
    }
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

/// Loads a dataset written by [`write_dataset`], in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<Volume4D>> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [rel, label, seed] = fields[..] else {
            return Err(Error::Schema(format!(
                "manifest line {}: expected 3 fields",
                n + 1
            )));
        };
        let label: usize = label
            .parse()
            .map_err(|_| Error::Schema(format!("manifest line {}: bad label {label:?}", n + 1)))?;
        seed.parse::<u64>()
            .map_err(|_| Error::Schema(format!("manifest line {}: bad seed {seed:?}", n + 1)))?;
        let bytes = fs::read(dir.join(rel))?;
        let (_, v) = parse_nifti(&bytes)?;
        out.push(
            v.with_label(label)
                .with_subject(rel.trim_end_matches(".nii")),
        );
    }
    Ok(out)
}
