//! `stda`: synthetic data, contrastive pretraining, fine-tuning, evaluation
//! and attention cost reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stda_core::Error;

mod commands;
mod settings;

use commands::BenchArgs;
use settings::load_kv;

#[derive(Parser, Debug)]
#[command(
    name = "stda",
    version,
    about = "Spatiotemporal windowed-attention encoder for 4D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides `train.seed` (and `synth.seed` for gen-synth).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory for outputs.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Config override, repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a labeled synthetic dataset.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        extent: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Contrastive pretraining with kNN validation on held-out samples.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Supervised fine-tuning from a pretrained encoder.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Checkpoint whose encoder weights initialize the model.
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Train the classification head only.
        #[arg(long)]
        freeze_encoder: bool,
    },
    /// Evaluate a checkpoint on the held-out samples.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// kNN accuracy of encoder features instead of the classifier head.
        #[arg(long)]
        knn: bool,
    },
    /// Analytic attention memory and FLOP report.
    BenchCost {
        #[command(flatten)]
        common: Common,
        /// stda, joint or both.
        #[arg(long, default_value = "both")]
        mode: String,
        #[arg(long)]
        window: Option<usize>,
        /// Bytes per stored element: 2, 4 or 8.
        #[arg(long, default_value_t = 2)]
        precision: usize,
        #[arg(long)]
        extent: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 1)]
        batch: usize,
    },
    /// Print a NIfTI-1 header and value summary.
    InspectNifti { path: PathBuf },
}

fn push(set: &mut Vec<String>, key: &str, v: Option<impl ToString>) {
    if let Some(v) = v {
        set.push(format!("{key}={}", v.to_string()));
    }
}

fn run(cmd: Command) -> stda_core::Result<()> {
    match cmd {
        Command::GenSynth {
            mut common,
            classes,
            per_class,
            frames,
            extent,
            noise,
        } => {
            push(&mut common.set, "synth.seed", common.seed);
            push(&mut common.set, "synth.classes", classes);
            push(&mut common.set, "synth.per_class", per_class);
            push(&mut common.set, "synth.frames", frames);
            push(&mut common.set, "synth.extent", extent);
            push(&mut common.set, "synth.noise", noise);
            let kv = load_kv(common.config.as_deref(), &common.set)?;
            commands::gen_synth(&kv, common.out_dir.as_deref())
        }
        Command::Pretrain {
            mut common,
            data,
            epochs,
        } => {
            push(&mut common.set, "train.seed", common.seed);
            push(
                &mut common.set,
                "data.dir",
                data.map(|d| d.display().to_string()),
            );
            push(&mut common.set, "train.epochs", epochs);
            let kv = load_kv(common.config.as_deref(), &common.set)?;
            commands::run_pretrain(&kv, common.out_dir.as_deref())
        }
        Command::Finetune {
            mut common,
            data,
            checkpoint,
            epochs,
            freeze_encoder,
        } => {
            push(&mut common.set, "train.seed", common.seed);
            push(
                &mut common.set,
                "data.dir",
                data.map(|d| d.display().to_string()),
            );
            push(&mut common.set, "train.epochs", epochs);
            if freeze_encoder {
                common.set.push("train.freeze_encoder=true".into());
            }
            let kv = load_kv(common.config.as_deref(), &common.set)?;
            commands::run_finetune(&kv, &checkpoint, common.out_dir.as_deref())
        }
        Command::Eval {
            mut common,
            data,
            checkpoint,
            knn,
        } => {
            push(&mut common.set, "train.seed", common.seed);
            push(
                &mut common.set,
                "data.dir",
                data.map(|d| d.display().to_string()),
            );
            let kv = load_kv(common.config.as_deref(), &common.set)?;
            commands::run_eval(&kv, &checkpoint, knn, common.out_dir.as_deref())
        }
        Command::BenchCost {
            common,
            mode,
            window,
            precision,
            extent,
            frames,
            batch,
        } => {
            let kv = load_kv(common.config.as_deref(), &common.set)?;
            let args = BenchArgs {
                mode,
                window,
                precision,
                extent,
                frames,
                batch,
            };
            commands::bench_cost(&kv, &args, common.out_dir.as_deref())
        }
        Command::InspectNifti { path } => commands::inspect_nifti(&path),
    }
}

/// 1 for bad usage or configuration; everything else (unreadable or invalid
/// data, checkpoint mismatches, diverged runs) is 2.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
