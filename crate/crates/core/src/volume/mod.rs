//! 4D fMRI volumes: NIfTI-1 ingestion, standardization and synthetic data.

pub mod nifti;
mod standardize;
pub mod synth;

pub use nifti::{parse_nifti, write_nifti, Datatype, Endian, Nifti1Header};
pub use standardize::{standardize, zscore_nonzero, StandardizeOptions};
pub use synth::{generate_synthetic, read_dataset, write_dataset, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A time series of 3D voxel grids stored as `[T, H, W, D, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    data: Tensor,
    pub voxel_size_mm: [f64; 3],
    pub tr_seconds: f64,
    pub subject_id: String,
    pub label: Option<usize>,
}

impl Volume4D {
    pub fn new(data: Tensor) -> Result<Self> {
        let s = data.shape();
        if s.len() != 5 || s[4] != 1 || s[..4].contains(&0) {
            return Err(Error::Invalid(format!(
                "volume tensor must be [T, H, W, D, 1] with positive extents, got {s:?}"
            )));
        }
        Ok(Self {
            data,
            voxel_size_mm: [1.0; 3],
            tr_seconds: 1.0,
            subject_id: String::new(),
            label: None,
        })
    }

    /// Builds a volume from a `[T, H, W, D]` buffer.
    pub fn from_frames(frames: usize, spatial: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let t = Tensor::new(vec![frames, spatial[0], spatial[1], spatial[2], 1], data)?;
        Self::new(t)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_subject(mut self, id: impl Into<String>) -> Self {
        self.subject_id = id.into();
        self
    }

    /// Copies spacing, subject and label from `other`.
    pub fn with_metadata_of(mut self, other: &Volume4D) -> Self {
        self.voxel_size_mm = other.voxel_size_mm;
        self.tr_seconds = other.tr_seconds;
        self.subject_id = other.subject_id.clone();
        self.label = other.label;
        self
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }

    pub fn frame_len(&self) -> usize {
        self.spatial().iter().product()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data.data()[t * n..(t + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        self.data.data()
    }

    /// Same metadata, new voxel values of identical shape.
    pub fn map_data(&self, data: Vec<f64>) -> Result<Volume4D> {
        let t = Tensor::new(self.data.shape().to_vec(), data)?;
        Ok(Volume4D {
            data: t,
            ..self.clone_meta()
        })
    }

    /// Keeps the listed frames, in the given order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Volume4D> {
        let n = self.frame_len();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.frames() {
                return Err(Error::Invalid(format!(
                    "frame {i} out of range for {} frames",
                    self.frames()
                )));
            }
            out.extend_from_slice(self.frame(i));
        }
        let v = Volume4D::from_frames(indices.len(), self.spatial(), out)?;
        Ok(v.with_metadata_of(self))
    }

    fn clone_meta(&self) -> Volume4D {
        Volume4D {
            data: Tensor::zeros(&[1, 1, 1, 1, 1]),
            voxel_size_mm: self.voxel_size_mm,
            tr_seconds: self.tr_seconds,
            subject_id: self.subject_id.clone(),
            label: self.label,
        }
    }
}

/// Evenly spaced, order-preserving selection of `count` of `total` frames.
pub fn even_frames(total: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > total {
        return Err(Error::InsufficientFrames {
            needed: count,
            available: total,
        });
    }
    if count == 1 {
        return Ok(vec![(total - 1) / 2]);
    }
    Ok((0..count).map(|i| i * (total - 1) / (count - 1)).collect())
}
