use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{cross_entropy, nt_xent, NtXentMode, DEFAULT_TAU};
use super::metrics::{accuracy, argmax_rows, knn_validate, macro_f1};
use super::optim::{clip_grad_norm, lr_at, AdamW, AdamWConfig, TrainSchedule};
use crate::augment::{augment_view, make_pair, AugmentationSpec};
use crate::encoder::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::patching::batch_volumes;
use crate::tensor::{no_grad, Tensor, Var};
use crate::volume::synth::mix;
use crate::volume::{even_frames, Volume4D};

pub const DEFAULT_CLIP_NORM: f64 = 1.0;

/// Tab-separated, append-only training log. `-` marks an absent value.
#[derive(Debug)]
pub struct MetricLog {
    lines: Vec<String>,
    sink: Option<BufWriter<File>>,
}

impl MetricLog {
    pub fn in_memory() -> Self {
        MetricLog {
            lines: Vec::new(),
            sink: None,
        }
    }

    /// Starts a fresh log at `path`; records are appended and flushed one by one.
    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path)?;
        Ok(MetricLog {
            lines: Vec::new(),
            sink: Some(BufWriter::new(f)),
        })
    }

    pub fn record(&mut self, fields: &[String]) -> Result<()> {
        let line = fields.join("\t");
        if let Some(w) = &mut self.sink {
            writeln!(w, "{line}")?;
            w.flush()?;
        }
        self.lines.push(line);
        Ok(())
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn text(&self) -> String {
        self.lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

pub const PRETRAIN_HEADER: &[&str] = &["kind", "epoch", "step", "lr", "loss", "knn_acc"];
pub const FINETUNE_HEADER: &[&str] = &["kind", "epoch", "step", "lr", "loss", "val_acc", "val_f1"];

/// Resamples `v` to the model's frame count by even spacing when needed.
pub fn fit_frames(v: &Volume4D, frames: usize) -> Result<Volume4D> {
    if v.frames() == frames {
        Ok(v.clone())
    } else {
        v.select_frames(&even_frames(v.frames(), frames)?)
    }
}

/// Encoder features `[N, d_e]` for unaugmented views, without building a graph.
pub fn encode_all(model: &Model, vols: &[Volume4D], batch: usize) -> Result<Tensor> {
    if vols.is_empty() {
        return Err(Error::Invalid("nothing to encode".into()));
    }
    let de = model.config.feature_dim();
    let mut out = Vec::with_capacity(vols.len() * de);
    no_grad(|| -> Result<()> {
        for chunk in vols.chunks(batch.max(1)) {
            let views = chunk
                .iter()
                .map(|v| fit_frames(v, model.config.frames))
                .collect::<Result<Vec<_>>>()?;
            let x = batch_volumes(&views.iter().collect::<Vec<_>>())?;
            let h = model.encode(&Var::constant(x))?;
            out.extend_from_slice(h.value().data());
        }
        Ok(())
    })?;
    Tensor::new(vec![vols.len(), de], out)
}

pub fn labels_of(vols: &[Volume4D], n_classes: usize) -> Result<Vec<usize>> {
    vols.iter()
        .enumerate()
        .map(|(i, v)| match v.label {
            Some(l) if l < n_classes => Ok(l),
            Some(l) => Err(Error::Invalid(format!(
                "volume {i} has label {l}, out of range for {n_classes} classes"
            ))),
            None => Err(Error::Invalid(format!("volume {i} has no label"))),
        })
        .collect()
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(
        mix(seed ^ mix(epoch as u64)),
    ));
    order
}

/// Seed for the augmentation draws of one sample in one epoch.
fn view_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    mix(seed ^ mix(((epoch as u64) << 32) | index as u64 | 1 << 63))
}

fn batches(n: usize, b: usize, min: usize) -> usize {
    n / b + usize::from(n % b >= min)
}

fn checkpoint_with_state(
    model: &Model,
    opt: Option<&AdamW>,
    extra: &[(&str, String)],
) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    for (k, v) in extra {
        ck.meta.set(*k, v);
    }
    if let Some(opt) = opt {
        ck.meta.set("state.step", opt.step);
        for ((_, p), m) in model.params.iter().zip(&opt.m) {
            ck.tensors
                .push((format!("state.m.{}", p.name()), m.clone()));
        }
        for ((_, p), v) in model.params.iter().zip(&opt.v) {
            ck.tensors
                .push((format!("state.v.{}", p.name()), v.clone()));
        }
    }
    ck
}

/// A non-finite activation inside a training step is reported as divergence.
fn forward_guard<T>(
    r: Result<T>,
    epoch: usize,
    step: usize,
    lr: f64,
    last: Option<f64>,
) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(op) => Error::Diverged(format!(
            "non-finite value in {op} at epoch {epoch}, step {step} (lr {lr}, last finite loss {})",
            opt(last)
        )),
        e => e,
    })
}

fn diverged(
    what: &str,
    value: f64,
    epoch: usize,
    step: usize,
    lr: f64,
    last: Option<f64>,
) -> Error {
    Error::Diverged(format!(
        "{what} became {value} at epoch {epoch}, step {step} (lr {lr}, last finite loss {})",
        opt(last)
    ))
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub tau: f64,
    pub mode: NtXentMode,
    pub clip_norm: f64,
    /// Run kNN validation every this many epochs (and after the last one).
    pub knn_every: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            mode: NtXentMode::Standard,
            clip_norm: DEFAULT_CLIP_NORM,
            knn_every: 1,
        }
    }
}

/// Labeled views for kNN validation.
#[derive(Debug, Clone)]
pub struct KnnSet {
    pub train: Vec<Volume4D>,
    pub val: Vec<Volume4D>,
    pub n_classes: usize,
}

impl KnnSet {
    pub fn accuracy(&self, model: &Model, batch: usize) -> Result<f64> {
        let tr = encode_all(model, &self.train, batch)?;
        let va = encode_all(model, &self.val, batch)?;
        knn_validate(
            &tr,
            &labels_of(&self.train, self.n_classes)?,
            &va,
            &labels_of(&self.val, self.n_classes)?,
        )
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    /// `(epoch, accuracy)`; epoch 0 is the initial model.
    pub knn: Vec<(usize, f64)>,
    pub best_epoch: usize,
    /// Best kNN checkpoint, or the final one without validation.
    pub best: Checkpoint,
    /// Final weights with optimizer state.
    pub last: Checkpoint,
}

impl PretrainReport {
    pub fn best_knn(&self) -> Option<f64> {
        self.knn
            .iter()
            .map(|&(_, a)| a)
            .fold(None, |b, a| Some(b.map_or(a, |b: f64| b.max(a))))
    }
}

/// Contrastive pretraining of the encoder and projector on unlabeled sources.
pub fn pretrain(
    model: &mut Model,
    sources: &[Volume4D],
    aug: &AugmentationSpec,
    sched: &TrainSchedule,
    opts: &PretrainOptions,
    knn: Option<&KnnSet>,
    log: &mut MetricLog,
) -> Result<PretrainReport> {
    sched.validate()?;
    let b = sched.batch_size;
    if sources.len() < 2 || b < 2 {
        return Err(Error::Invalid(format!(
            "pretraining needs >= 2 sources and batch >= 2 (got {} and {b})",
            sources.len()
        )));
    }
    let per_epoch = batches(sources.len(), b, 2);
    let total = per_epoch * sched.epochs;
    let warmup = per_epoch * sched.warmup_epochs;
    let mut optim = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: sched.weight_decay,
            ..AdamWConfig::default()
        },
    );
    log.record(
        &PRETRAIN_HEADER
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>(),
    )?;

    let mut report = PretrainReport {
        step_losses: Vec::new(),
        epoch_losses: Vec::new(),
        knn: Vec::new(),
        best_epoch: 0,
        best: model.to_checkpoint(),
        last: model.to_checkpoint(),
    };
    let mut best_acc = f64::NEG_INFINITY;
    let mut validate = |model: &Model,
                        epoch: usize,
                        step: usize,
                        loss: Option<f64>,
                        log: &mut MetricLog,
                        report: &mut PretrainReport|
     -> Result<()> {
        let Some(set) = knn else { return Ok(()) };
        let acc = set.accuracy(model, b)?;
        log::info!("epoch {epoch}: knn accuracy {acc:.4}");
        log.record(&[
            "eval".into(),
            epoch.to_string(),
            step.to_string(),
            "-".into(),
            opt(loss),
            acc.to_string(),
        ])?;
        report.knn.push((epoch, acc));
        if acc > best_acc {
            best_acc = acc;
            report.best_epoch = epoch;
            report.best = checkpoint_with_state(
                model,
                None,
                &[
                    ("state.epoch", epoch.to_string()),
                    ("state.knn_acc", acc.to_string()),
                ],
            );
        }
        Ok(())
    };
    validate(model, 0, 0, None, log, &mut report)?;

    let mut step = 0usize;
    let mut last_loss = None;
    for epoch in 1..=sched.epochs {
        let order = shuffled(sources.len(), sched.seed, epoch);
        let mut sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(b).filter(|c| c.len() >= 2) {
            let mut views = Vec::with_capacity(2 * chunk.len());
            for &i in chunk {
                let spec = aug.with_seed(view_seed(sched.seed, epoch, i));
                let (v1, v2) = make_pair(&sources[i], &spec)?;
                views.push(fit_frames(&v1, model.config.frames)?);
                views.push(fit_frames(&v2, model.config.frames)?);
            }
            let x = Var::constant(batch_volumes(&views.iter().collect::<Vec<_>>())?);
            let lr = lr_at(step + 1, sched.base_lr, warmup, total);
            model.params.zero_grad();
            let loss = forward_guard(
                model
                    .encode(&x)
                    .and_then(|h| model.project(&h))
                    .and_then(|(z, _)| nt_xent(&z, opts.tau, opts.mode)),
                epoch,
                step,
                lr,
                last_loss,
            )?;
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(diverged("loss", lv, epoch, step, lr, last_loss));
            }
            loss.backward()?;
            let mut grads: Vec<Option<Tensor>> =
                model.params.iter().map(|(_, p)| p.grad()).collect();
            let norm = clip_grad_norm(&mut grads, opts.clip_norm);
            if !norm.is_finite() {
                return Err(diverged("gradient norm", norm, epoch, step, lr, last_loss));
            }
            optim.step(&mut model.params, &grads, lr)?;
            step += 1;
            last_loss = Some(lv);
            sum += lv;
            count += 1;
            report.step_losses.push(lv);
            log.record(&[
                "step".into(),
                epoch.to_string(),
                step.to_string(),
                lr.to_string(),
                lv.to_string(),
                "-".into(),
            ])?;
        }
        let mean = sum / count as f64;
        report.epoch_losses.push(mean);
        log::info!("epoch {epoch}/{}: mean loss {mean:.5}", sched.epochs);
        if epoch % opts.knn_every.max(1) == 0 || epoch == sched.epochs {
            validate(model, epoch, step, Some(mean), log, &mut report)?;
        }
    }
    report.last = checkpoint_with_state(
        model,
        Some(&optim),
        &[("state.epoch", sched.epochs.to_string())],
    );
    if knn.is_none() {
        report.best =
            checkpoint_with_state(model, None, &[("state.epoch", sched.epochs.to_string())]);
        report.best_epoch = sched.epochs;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct FinetuneOptions {
    /// Train only the head; the encoder runs without gradients.
    pub freeze_encoder: bool,
    pub clip_norm: Option<f64>,
    /// Learning-rate multiplier for the freshly initialized head relative to
    /// the encoder.
    pub head_lr_scale: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            freeze_encoder: false,
            clip_norm: None,
            head_lr_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Accuracy and macro-F1 of the classification head on unaugmented views.
pub fn evaluate(
    model: &Model,
    vols: &[Volume4D],
    batch: usize,
) -> Result<(Evaluation, Vec<usize>)> {
    let k = model.config.n_classes;
    let truth = labels_of(vols, k)?;
    let h = encode_all(model, vols, batch)?;
    let logits = no_grad(|| model.classify(&Var::constant(h)))?;
    let pred = argmax_rows(logits.value());
    Ok((
        Evaluation {
            accuracy: accuracy(&pred, &truth)?,
            macro_f1: macro_f1(&pred, &truth, k)?,
        },
        pred,
    ))
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub epoch_losses: Vec<f64>,
    /// `(epoch, metrics)`; epoch 0 is the model before fine-tuning.
    pub history: Vec<(usize, Evaluation)>,
    pub best_epoch: usize,
    pub best_eval: Evaluation,
    pub best: Checkpoint,
    pub last: Checkpoint,
}

/// Supervised cross-entropy training of encoder and head.
pub fn finetune(
    model: &mut Model,
    train: &[Volume4D],
    val: &[Volume4D],
    aug: &AugmentationSpec,
    sched: &TrainSchedule,
    opts: &FinetuneOptions,
    log: &mut MetricLog,
) -> Result<FinetuneReport> {
    sched.validate()?;
    let k = model.config.n_classes;
    let labels = labels_of(train, k)?;
    labels_of(val, k)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid(
            "fine-tuning needs nonempty train and validation sets".into(),
        ));
    }
    let b = sched.batch_size;
    let per_epoch = batches(train.len(), b, 1);
    let total = per_epoch * sched.epochs;
    let warmup = per_epoch * sched.warmup_epochs;
    let mut optim = AdamW::new(
        &model.params,
        AdamWConfig {
            weight_decay: sched.weight_decay,
            ..AdamWConfig::default()
        },
    );
    if !(opts.head_lr_scale.is_finite() && opts.head_lr_scale > 0.0) {
        return Err(Error::Invalid(format!(
            "head_lr_scale must be positive, got {}",
            opts.head_lr_scale
        )));
    }
    let lr_scale: Vec<f64> = model
        .params
        .iter()
        .map(|(_, p)| {
            if p.name().starts_with("head.") {
                opts.head_lr_scale
            } else {
                1.0
            }
        })
        .collect();
    let trainable: Vec<bool> = model
        .params
        .iter()
        .map(|(_, p)| {
            let n = p.name();
            if opts.freeze_encoder {
                n.starts_with("head.")
            } else {
                !n.starts_with("projector.")
            }
        })
        .collect();
    log.record(
        &FINETUNE_HEADER
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>(),
    )?;

    let (init, _) = evaluate(model, val, b)?;
    let eval_row = |epoch: usize, step: usize, loss: Option<f64>, e: &Evaluation| -> Vec<String> {
        vec![
            "eval".into(),
            epoch.to_string(),
            step.to_string(),
            "-".into(),
            opt(loss),
            e.accuracy.to_string(),
            e.macro_f1.to_string(),
        ]
    };
    log.record(&eval_row(0, 0, None, &init))?;
    let mut report = FinetuneReport {
        epoch_losses: Vec::new(),
        history: vec![(0, init)],
        best_epoch: 0,
        best_eval: init,
        best: model.to_checkpoint(),
        last: model.to_checkpoint(),
    };

    let mut step = 0usize;
    let mut last_loss = None;
    for epoch in 1..=sched.epochs {
        let order = shuffled(train.len(), sched.seed, epoch);
        let mut sum = 0.0;
        for chunk in order.chunks(b) {
            let mut views = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng = ChaCha8Rng::seed_from_u64(view_seed(sched.seed, epoch, i));
                let v = augment_view(&train[i], aug, &mut rng)?;
                views.push(fit_frames(&v, model.config.frames)?);
            }
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x = Var::constant(batch_volumes(&views.iter().collect::<Vec<_>>())?);
            let lr = lr_at(step + 1, sched.base_lr, warmup, total);
            model.params.zero_grad();
            let h = if opts.freeze_encoder {
                no_grad(|| model.encode(&x)).map(|h| Var::constant(h.value().clone()))
            } else {
                model.encode(&x)
            };
            let loss = forward_guard(
                h.and_then(|h| model.classify(&h))
                    .and_then(|l| cross_entropy(&l, &y)),
                epoch,
                step,
                lr,
                last_loss,
            )?;
            let lv = loss.value().item();
            if !lv.is_finite() {
                return Err(diverged("loss", lv, epoch, step, lr, last_loss));
            }
            loss.backward()?;
            let mut grads: Vec<Option<Tensor>> = model
                .params
                .iter()
                .zip(&trainable)
                .map(|((_, p), &t)| if t { p.grad() } else { None })
                .collect();
            if let Some(c) = opts.clip_norm {
                let norm = clip_grad_norm(&mut grads, c);
                if !norm.is_finite() {
                    return Err(diverged("gradient norm", norm, epoch, step, lr, last_loss));
                }
            }
            optim.step_scaled(&mut model.params, &grads, lr, &lr_scale)?;
            step += 1;
            last_loss = Some(lv);
            sum += lv;
            log.record(&[
                "step".into(),
                epoch.to_string(),
                step.to_string(),
                lr.to_string(),
                lv.to_string(),
                "-".into(),
                "-".into(),
            ])?;
        }
        let mean = sum / per_epoch as f64;
        report.epoch_losses.push(mean);
        let (e, _) = evaluate(model, val, b)?;
        log::info!(
            "epoch {epoch}/{}: loss {mean:.5}, val acc {:.4}, macro-F1 {:.4}",
            sched.epochs,
            e.accuracy,
            e.macro_f1
        );
        log.record(&eval_row(epoch, step, Some(mean), &e))?;
        report.history.push((epoch, e));
        if e.accuracy > report.best_eval.accuracy {
            report.best_eval = e;
            report.best_epoch = epoch;
            report.best = checkpoint_with_state(
                model,
                None,
                &[
                    ("state.epoch", epoch.to_string()),
                    ("state.val_acc", e.accuracy.to_string()),
                ],
            );
        }
    }
    report.last = checkpoint_with_state(
        model,
        Some(&optim),
        &[("state.epoch", sched.epochs.to_string())],
    );
    Ok(report)
}
