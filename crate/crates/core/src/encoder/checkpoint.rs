//! Named-tensor container: a text header followed by raw little-endian f64 data.
//!
//! ```text
//! stda-checkpoint 1
//! [config]
//! model.embed_dim = 36
//! [manifest]
//! encoder.patch_embed.weight f64 216,36 0 62208
//!
//! <blob>
//! ```
//!
//! Offsets and lengths are in bytes from the start of the blob. Scalars use
//! the shape token `-`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::{join_list, KvMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "stda-checkpoint 1";

/// Which parameters [`super::Model::load_checkpoint`] restores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadScope {
    /// Every model tensor; the head and projector must match.
    Full,
    /// Only `encoder.*` tensors; the projector and head keep their values.
    EncoderOnly,
}

#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    /// Model config plus optional `state.*` training metadata.
    pub meta: KvMap,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Prefix for optimizer moments and other non-parameter tensors.
    pub const STATE_PREFIX: &'static str = "state.";

    pub fn new(meta: KvMap) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\n[config]\n{}[manifest]\n", self.meta.to_text());
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let shape = if t.shape().is_empty() {
                "-".to_string()
            } else {
                join_list(t.shape())
            };
            let len = t.len() * 8;
            head.push_str(&format!("{name} f64 {shape} {offset} {len}\n"));
            offset += len;
        }
        head.push('\n');
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes.windows(2).position(|w| w == b"\n\n").ok_or_else(|| {
            Error::Format("checkpoint header has no terminating blank line".into())
        })?;
        let head = std::str::from_utf8(&bytes[..split + 1])
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let blob = &bytes[split + 2..];
        let mut lines = head.lines();
        if lines.next() != Some(MAGIC) {
            return Err(Error::Format("not a checkpoint (bad magic line)".into()));
        }
        if lines.next() != Some("[config]") {
            return Err(Error::Format("checkpoint lacks [config] section".into()));
        }
        let mut config = String::new();
        let mut found_manifest = false;
        for line in lines.by_ref() {
            if line == "[manifest]" {
                found_manifest = true;
                break;
            }
            config.push_str(line);
            config.push('\n');
        }
        if !found_manifest {
            return Err(Error::Format("checkpoint lacks [manifest] section".into()));
        }
        let meta = KvMap::parse(&config)?;
        let mut records = Vec::new();
        let mut expected = 0usize;
        for line in lines {
            let rec = parse_record(line)?;
            if rec.offset != expected {
                return Err(Error::Corrupt(format!(
                    "tensor {} starts at byte {}, expected {expected}",
                    rec.name, rec.offset
                )));
            }
            expected += rec.len;
            records.push(rec);
        }
        if blob.len() != expected {
            return Err(Error::Corrupt(format!(
                "manifest describes {expected} data bytes, found {}",
                blob.len()
            )));
        }
        let mut tensors = Vec::with_capacity(records.len());
        for rec in records {
            let data = blob[rec.offset..rec.offset + rec.len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push((rec.name, Tensor::new(rec.shape, data)?));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let name = path.file_name().ok_or_else(|| {
            Error::Invalid(format!(
                "checkpoint path {} has no file name",
                path.display()
            ))
        })?;
        let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Record {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn parse_record(line: &str) -> Result<Record> {
    let bad = || Error::Format(format!("bad manifest record {line:?}"));
    let f: Vec<&str> = line.split_whitespace().collect();
    let [name, dtype, shape, offset, len] = f[..] else {
        return Err(bad());
    };
    if dtype != "f64" {
        return Err(Error::Unsupported(format!("tensor dtype {dtype}")));
    }
    let shape: Vec<usize> = if shape == "-" {
        Vec::new()
    } else {
        shape
            .split(',')
            .map(|s| s.parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    let offset: usize = offset.parse().map_err(|_| bad())?;
    let len: usize = len.parse().map_err(|_| bad())?;
    if shape.iter().product::<usize>() * 8 != len {
        return Err(Error::Corrupt(format!(
            "tensor {name} shape {shape:?} does not match length {len}"
        )));
    }
    Ok(Record {
        name: name.to_string(),
        shape,
        offset,
        len,
    })
}
