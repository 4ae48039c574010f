use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stda_core::config::KvMap;
use stda_core::cost::{attention_cost, AttentionMode, CostReport};
use stda_core::encoder::{Checkpoint, LoadScope, Model, ModelConfig};
use stda_core::train::{
    evaluate, finetune, pretrain, FinetuneOptions, KnnSet, MetricLog, DEFAULT_CLIP_NORM,
};
use stda_core::volume::{
    generate_synthetic, parse_nifti, read_dataset, standardize, write_dataset, StandardizeOptions,
    Volume4D,
};
use stda_core::{Error, Result};

use crate::settings::{synth_from_kv, synth_to_kv, DataOptions, Phase, Settings};

pub const CONFIG_SNAPSHOT: &str = "config.cfg";
pub const METRICS: &str = "metrics.tsv";
pub const BEST: &str = "best.ckpt";
pub const LAST: &str = "last.ckpt";
pub const COST_TSV: &str = "cost_report.tsv";
pub const COST_TABLE: &str = "cost_report.txt";
pub const EVAL_LOG: &str = "eval.tsv";

fn run_dir(dir: Option<&Path>) -> Result<PathBuf> {
    let dir = dir.ok_or_else(|| Error::Config("--out-dir is required".into()))?;
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}

fn write_snapshot(dir: &Path, kv: &KvMap) -> Result<()> {
    fs::write(dir.join(CONFIG_SNAPSHOT), kv.to_text())?;
    Ok(())
}

pub fn gen_synth(kv: &KvMap, out: Option<&Path>) -> Result<()> {
    let spec = synth_from_kv(kv)?;
    kv.reject_unused()?;
    let dir = run_dir(out)?;
    let vols = generate_synthetic(&spec)?;
    write_dataset(&dir, &spec, &vols)?;
    write_snapshot(&dir, &synth_to_kv(&spec))?;
    println!(
        "wrote {} volumes ({} classes x {}, grid {:?}) to {}",
        vols.len(),
        spec.n_classes,
        spec.samples_per_class,
        spec.grid,
        dir.display()
    );
    Ok(())
}

/// Loaded volumes split per class: the last `holdout` of each class are
/// held out, in dataset order.
struct Split {
    train: Vec<Volume4D>,
    holdout: Vec<Volume4D>,
    n_classes: usize,
}

fn load_data(opts: &DataOptions, model: &ModelConfig, seed: u64) -> Result<Split> {
    let dir = opts
        .dir
        .as_ref()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.dir".into()))?;
    if !dir.is_dir() {
        return Err(Error::Invalid(format!(
            "dataset directory {} not found",
            dir.display()
        )));
    }
    let mut vols = read_dataset(dir)?;
    if vols.is_empty() {
        return Err(Error::Invalid(format!(
            "dataset {} is empty",
            dir.display()
        )));
    }
    if opts.standardize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        vols = vols
            .iter()
            .map(|v| {
                let target = StandardizeOptions {
                    target: [
                        opts.frames.unwrap_or(v.frames()),
                        model.extent,
                        model.extent,
                        model.extent,
                    ],
                    normalize: true,
                };
                standardize(v, &target, &mut rng)
            })
            .collect::<Result<_>>()?;
    }
    let n_classes = vols
        .iter()
        .filter_map(|v| v.label)
        .max()
        .map_or(0, |m| m + 1);
    let mut count = vec![0usize; n_classes];
    for v in &vols {
        let l = v
            .label
            .ok_or_else(|| Error::Invalid("dataset volume without label".into()))?;
        count[l] += 1;
    }
    let mut seen = vec![0usize; n_classes];
    let mut split = Split {
        train: Vec::new(),
        holdout: Vec::new(),
        n_classes,
    };
    for v in vols {
        let l = v.label.expect("checked above");
        if seen[l] + opts.holdout_per_class >= count[l] {
            split.holdout.push(v);
        } else {
            split.train.push(v);
        }
        seen[l] += 1;
    }
    Ok(split)
}

fn save_checkpoints(dir: &Path, best: &Checkpoint, last: &Checkpoint) -> Result<()> {
    best.save(&dir.join(BEST))?;
    last.save(&dir.join(LAST))?;
    Ok(())
}

pub fn run_pretrain(kv: &KvMap, out: Option<&Path>) -> Result<()> {
    let s = Settings::from_kv(kv, Phase::Pretrain)?;
    let dir = run_dir(out)?;
    let data = load_data(&s.data, &s.model, s.sched.seed)?;
    write_snapshot(&dir, &s.snapshot)?;
    let knn = (!data.holdout.is_empty()).then(|| KnnSet {
        train: data.train.clone(),
        val: data.holdout.clone(),
        n_classes: data.n_classes,
    });
    let mut model = Model::new(s.model.clone(), s.sched.seed)?;
    let mut log = MetricLog::to_file(&dir.join(METRICS))?;
    log::info!(
        "pretraining on {} sources ({} held out), {} epochs",
        data.train.len(),
        data.holdout.len(),
        s.sched.epochs
    );
    let report = pretrain(
        &mut model,
        &data.train,
        &s.aug,
        &s.sched,
        &s.pretrain,
        knn.as_ref(),
        &mut log,
    )?;
    save_checkpoints(&dir, &report.best, &report.last)?;
    match report.best_knn() {
        Some(acc) => println!(
            "best knn_acc {acc} at epoch {} (initial {})",
            report.best_epoch, report.knn[0].1
        ),
        None => println!("no held-out samples; kNN validation skipped"),
    }
    println!(
        "final loss {}; checkpoints in {}",
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
    Ok(())
}

pub fn run_finetune(kv: &KvMap, checkpoint: &Path, out: Option<&Path>) -> Result<()> {
    let s = Settings::from_kv(kv, Phase::Finetune)?;
    let dir = run_dir(out)?;
    let ck = Checkpoint::load(checkpoint)?;
    let mut cfg = ModelConfig::from_kv(
        kv,
        &ModelConfig::from_kv(&ck.meta, &ModelConfig::default())?,
    )?;
    let data = load_data(&s.data, &cfg, s.sched.seed)?;
    if !kv.contains("model.n_classes") {
        cfg.n_classes = data.n_classes;
    }
    let mut per_class = vec![0usize; data.n_classes];
    let labeled: Vec<Volume4D> = data
        .train
        .iter()
        .filter(|v| {
            let l = v.label.expect("labeled");
            per_class[l] += 1;
            s.data.train_per_class.is_none_or(|n| per_class[l] <= n)
        })
        .cloned()
        .collect();
    if data.holdout.is_empty() {
        return Err(Error::Config(
            "fine-tuning needs data.holdout_per_class >= 1".into(),
        ));
    }
    let mut model = Model::new(cfg, s.sched.seed)?;
    model.load_checkpoint(&ck, LoadScope::EncoderOnly)?;
    let mut snapshot = s.snapshot.clone();
    snapshot.merge(&model.config.to_kv());
    write_snapshot(&dir, &snapshot)?;
    let opts = FinetuneOptions {
        freeze_encoder: s.freeze_encoder,
        clip_norm: Some(DEFAULT_CLIP_NORM),
        head_lr_scale: s.head_lr_scale,
    };
    let mut log = MetricLog::to_file(&dir.join(METRICS))?;
    log::info!(
        "fine-tuning on {} labeled volumes, validating on {}",
        labeled.len(),
        data.holdout.len()
    );
    let report = finetune(
        &mut model,
        &labeled,
        &data.holdout,
        &s.aug,
        &s.sched,
        &opts,
        &mut log,
    )?;
    save_checkpoints(&dir, &report.best, &report.last)?;
    println!(
        "best val_acc {} macro_f1 {} at epoch {}; checkpoints in {}",
        report.best_eval.accuracy,
        report.best_eval.macro_f1,
        report.best_epoch,
        dir.display()
    );
    Ok(())
}

pub fn run_eval(kv: &KvMap, checkpoint: &Path, knn: bool, out: Option<&Path>) -> Result<()> {
    let s = Settings::from_kv(kv, Phase::Finetune)?;
    let model = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let data = load_data(&s.data, &model.config, s.sched.seed)?;
    if data.holdout.is_empty() {
        return Err(Error::Config(
            "evaluation needs data.holdout_per_class >= 1".into(),
        ));
    }
    let batch = s.sched.batch_size;
    let rows: Vec<(&str, f64)> = if knn {
        let set = KnnSet {
            train: data.train,
            val: data.holdout,
            n_classes: data.n_classes,
        };
        vec![("knn_acc", set.accuracy(&model, batch)?)]
    } else {
        let (e, _) = evaluate(&model, &data.holdout, batch)?;
        vec![("val_acc", e.accuracy), ("val_f1", e.macro_f1)]
    };
    let dir = match out {
        Some(d) => run_dir(Some(d))?,
        None => checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf(),
    };
    let path = dir.join(EVAL_LOG);
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)?;
    if fresh {
        writeln!(f, "metric\tvalue\tcheckpoint")?;
    }
    for (name, v) in &rows {
        println!("{name} {v}");
        writeln!(f, "{name}\t{v}\t{}", checkpoint.display())?;
    }
    Ok(())
}

pub struct BenchArgs {
    pub mode: String,
    pub window: Option<usize>,
    pub precision: usize,
    pub extent: Option<usize>,
    pub frames: Option<usize>,
    pub batch: usize,
}

pub fn bench_cost(kv: &KvMap, args: &BenchArgs, out: Option<&Path>) -> Result<()> {
    let s = Settings::from_kv(kv, Phase::Pretrain)?;
    let mut cfg = s.model;
    if let Some(w) = args.window {
        cfg.window = w;
    }
    if let Some(e) = args.extent {
        cfg.extent = e;
    }
    if let Some(t) = args.frames {
        cfg.frames = t;
    }
    let modes = match args.mode.as_str() {
        "both" => vec![AttentionMode::Joint4d, AttentionMode::Stda],
        m => vec![AttentionMode::parse(m)?],
    };
    let reports: Vec<CostReport> = modes
        .iter()
        .map(|&m| attention_cost(&cfg, m, args.precision, args.batch))
        .collect::<Result<_>>()?;
    let mut table = format!(
        "input (B={}, 1, {e}, {e}, {e}, T={}), patch {}, embed {}\n\n",
        args.batch,
        cfg.frames,
        cfg.patch_size,
        cfg.embed_dim,
        e = cfg.extent
    );
    let mut tsv = String::new();
    for (i, r) in reports.iter().enumerate() {
        table.push_str(&r.to_table());
        table.push('\n');
        let body = r.to_tsv();
        tsv.push_str(if i == 0 {
            &body
        } else {
            body.split_once('\n').map_or("", |(_, b)| b)
        });
    }
    if let [joint, stda] = &reports[..] {
        let (j, st) = (joint.stage_bytes(0), stda.stage_bytes(0));
        table.push_str(&format!(
            "stage-1 attention activations per block: joint4d {j} B vs stda {st} B ({})\n",
            if st < j {
                "stda lower"
            } else {
                "stda not lower"
            }
        ));
        table.push_str(&format!(
            "all blocks: joint4d {} B vs stda {} B\n",
            joint.total_activation_bytes(),
            stda.total_activation_bytes()
        ));
    }
    print!("{table}");
    if let Some(d) = out {
        let dir = run_dir(Some(d))?;
        fs::write(dir.join(COST_TSV), tsv)?;
        fs::write(dir.join(COST_TABLE), table)?;
    }
    Ok(())
}

pub fn inspect_nifti(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let (h, v) = parse_nifti(&bytes)?;
    let data = v.data();
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &x in data {
        lo = lo.min(x);
        hi = hi.max(x);
        sum += x;
    }
    println!("file        {}", path.display());
    println!("byte order  {:?}", h.endian);
    println!("dim         {:?}", h.dim);
    println!("datatype    {:?} (bitpix {})", h.datatype, h.bitpix);
    println!("pixdim      {:?}", h.pixdim);
    println!("vox_offset  {}", h.vox_offset);
    println!("scl         slope {} inter {}", h.scl_slope, h.scl_inter);
    println!("frames      {}", v.frames());
    println!("spatial     {:?}", v.spatial());
    println!("voxel mm    {:?}, TR {} s", v.voxel_size_mm, v.tr_seconds);
    println!(
        "values      min {lo} max {hi} mean {}",
        sum / data.len().max(1) as f64
    );
    Ok(())
}
