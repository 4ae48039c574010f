//! Assembles typed settings from a `key = value` config plus overrides.

use std::path::{Path, PathBuf};

use stda_core::augment::{AugmentationSpec, Level};
use stda_core::config::KvMap;
use stda_core::encoder::ModelConfig;
use stda_core::train::{NtXentMode, PretrainOptions, TrainSchedule};
use stda_core::volume::SyntheticSpec;
use stda_core::{Error, Result};

/// Which defaults apply before the config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone)]
pub struct DataOptions {
    pub dir: Option<PathBuf>,
    /// Trailing samples of each class kept out of training for validation.
    pub holdout_per_class: usize,
    /// Labeled samples per class used for fine-tuning; `None` uses all
    /// non-held-out samples.
    pub train_per_class: Option<usize>,
    /// Crop/pad to `model.extent` and z-score; frames are subsampled to
    /// `data.frames` when set.
    pub standardize: bool,
    pub frames: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub sched: TrainSchedule,
    pub aug: AugmentationSpec,
    pub pretrain: PretrainOptions,
    pub freeze_encoder: bool,
    pub head_lr_scale: f64,
    pub data: DataOptions,
    pub workers: usize,
    /// Everything above, serialized.
    pub snapshot: KvMap,
}

pub fn load_kv(path: Option<&Path>, overrides: &[String]) -> Result<KvMap> {
    let mut kv = match path {
        Some(p) => KvMap::parse(
            &std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
        )?,
        None => KvMap::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {o:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn level(kv: &KvMap, key: &str, slot: &mut Level) -> Result<()> {
    if let Some(v) = kv.get(key) {
        *slot = Level::parse(v)
            .map_err(|_| Error::Config(format!("{key}: expected off, low or high, got {v:?}")))?;
    }
    Ok(())
}

impl Settings {
    pub fn from_kv(kv: &KvMap, phase: Phase) -> Result<Self> {
        let model = ModelConfig::from_kv(kv, &ModelConfig::default())?;
        let mut sched = match phase {
            Phase::Pretrain => TrainSchedule::pretrain(),
            Phase::Finetune => TrainSchedule::finetune_small(),
        };
        kv.read_into("train.epochs", &mut sched.epochs)?;
        kv.read_into("train.lr", &mut sched.base_lr)?;
        kv.read_into("train.batch_size", &mut sched.batch_size)?;
        kv.read_into("train.weight_decay", &mut sched.weight_decay)?;
        kv.read_into("train.warmup_epochs", &mut sched.warmup_epochs)?;
        kv.read_into("train.seed", &mut sched.seed)?;
        sched.validate()?;

        let mut pretrain = PretrainOptions::default();
        kv.read_into("train.tau", &mut pretrain.tau)?;
        if let Some(m) = kv.get("train.loss_mode") {
            pretrain.mode = NtXentMode::parse(m)?;
        }
        kv.read_into("train.clip_norm", &mut pretrain.clip_norm)?;
        kv.read_into("train.knn_every", &mut pretrain.knn_every)?;
        let mut freeze_encoder = false;
        kv.read_into("train.freeze_encoder", &mut freeze_encoder)?;
        let mut head_lr_scale = 1.0;
        kv.read_into("train.head_lr_scale", &mut head_lr_scale)?;

        let mut aug = match phase {
            Phase::Pretrain => AugmentationSpec::pretrain_default(),
            Phase::Finetune => AugmentationSpec::finetune_default(),
        };
        level(kv, "augment.noise", &mut aug.noise)?;
        level(kv, "augment.smoothing", &mut aug.smoothing)?;
        kv.read_into("augment.affine", &mut aug.affine)?;
        kv.read_into("augment.masking", &mut aug.masking)?;
        kv.read_into("augment.striding", &mut aug.striding)?;
        aug.seed = sched.seed;

        let mut data = DataOptions {
            dir: kv.get("data.dir").map(PathBuf::from),
            holdout_per_class: 10,
            train_per_class: None,
            standardize: false,
            frames: None,
        };
        kv.read_into("data.holdout_per_class", &mut data.holdout_per_class)?;
        data.train_per_class = kv.parsed("data.train_per_class")?;
        kv.read_into("data.standardize", &mut data.standardize)?;
        data.frames = kv.parsed("data.frames")?;

        // A config shared with gen-synth may carry generator keys.
        synth_from_kv(kv)?;

        let mut workers = 1;
        kv.read_into("workers", &mut workers)?;
        if workers > 1 {
            log::info!("workers = {workers} requested; kernels run single-threaded");
        }
        kv.reject_unused()?;

        let mut s = Settings {
            model,
            sched,
            aug,
            pretrain,
            freeze_encoder,
            head_lr_scale,
            data,
            workers,
            snapshot: KvMap::new(),
        };
        s.snapshot = s.to_kv();
        Ok(s)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv();
        let s = &self.sched;
        kv.set("train.epochs", s.epochs);
        kv.set("train.lr", s.base_lr);
        kv.set("train.batch_size", s.batch_size);
        kv.set("train.weight_decay", s.weight_decay);
        kv.set("train.warmup_epochs", s.warmup_epochs);
        kv.set("train.seed", s.seed);
        kv.set("train.tau", self.pretrain.tau);
        kv.set("train.loss_mode", self.pretrain.mode.as_str());
        kv.set("train.clip_norm", self.pretrain.clip_norm);
        kv.set("train.knn_every", self.pretrain.knn_every);
        kv.set("train.freeze_encoder", self.freeze_encoder);
        kv.set("train.head_lr_scale", self.head_lr_scale);
        kv.set("augment.noise", self.aug.noise.as_str());
        kv.set("augment.smoothing", self.aug.smoothing.as_str());
        kv.set("augment.affine", self.aug.affine);
        kv.set("augment.masking", self.aug.masking);
        kv.set("augment.striding", self.aug.striding);
        if let Some(d) = &self.data.dir {
            kv.set("data.dir", d.display());
        }
        kv.set("data.holdout_per_class", self.data.holdout_per_class);
        if let Some(n) = self.data.train_per_class {
            kv.set("data.train_per_class", n);
        }
        kv.set("data.standardize", self.data.standardize);
        if let Some(f) = self.data.frames {
            kv.set("data.frames", f);
        }
        kv.set("workers", self.workers);
        kv
    }
}

/// Synthetic-generator settings only, for `gen-synth`.
pub fn synth_from_kv(kv: &KvMap) -> Result<SyntheticSpec> {
    let mut synth = SyntheticSpec::default();
    kv.read_into("synth.classes", &mut synth.n_classes)?;
    kv.read_into("synth.per_class", &mut synth.samples_per_class)?;
    kv.read_into("synth.frames", &mut synth.grid[0])?;
    if let Some(e) = kv.parsed::<usize>("synth.extent")? {
        synth.grid[1..].fill(e);
    }
    kv.read_into("synth.blob_count", &mut synth.blob_count)?;
    kv.read_into("synth.blob_width", &mut synth.blob_width)?;
    kv.read_into("synth.noise", &mut synth.noise_sigma)?;
    kv.read_into("synth.seed", &mut synth.seed)?;
    synth.validate()?;
    Ok(synth)
}

pub fn synth_to_kv(s: &SyntheticSpec) -> KvMap {
    let mut kv = KvMap::new();
    kv.set("synth.classes", s.n_classes);
    kv.set("synth.per_class", s.samples_per_class);
    kv.set("synth.frames", s.grid[0]);
    kv.set("synth.extent", s.grid[1]);
    kv.set("synth.blob_count", s.blob_count);
    kv.set("synth.blob_width", s.blob_width);
    kv.set("synth.noise", s.noise_sigma);
    kv.set("synth.seed", s.seed);
    kv
}
