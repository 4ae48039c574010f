use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "\
model.embed_dim = 8
model.patch_size = 2
model.window = 2
model.frames = 4
model.extent = 8
model.depths = 1,1,1,1
model.heads = 1,2,4,8
model.proj_dim = 16
model.n_classes = 3
train.epochs = 2
train.batch_size = 4
data.holdout_per_class = 1
";

fn stda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn stda")
}

fn ok(args: &[&str]) -> String {
    let out = stda(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str) {
    ok(&[
        "gen-synth",
        "--out-dir",
        p(dir),
        "--classes",
        "3",
        "--per-class",
        "4",
        "--frames",
        "16",
        "--extent",
        "8",
        "--seed",
        seed,
    ]);
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_synth_is_deterministic_per_seed() {
    let t = tempfile::tempdir().unwrap();
    gen(&t.path().join("a"), "3");
    gen(&t.path().join("b"), "3");
    gen(&t.path().join("c"), "4");
    let a = tree_bytes(&t.path().join("a"));
    assert_eq!(a.len(), 12 + 2, "12 volumes plus manifest and config");
    assert_eq!(a, tree_bytes(&t.path().join("b")));
    assert_ne!(a, tree_bytes(&t.path().join("c")));
}

#[test]
fn pretrain_then_knn_eval_and_finetune() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "1");
    let cfg = t.path().join("toy.cfg");
    fs::write(&cfg, TOY).unwrap();
    let run = t.path().join("run");
    ok(&[
        "pretrain",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out-dir",
        p(&run),
    ]);
    for f in ["config.cfg", "metrics.tsv", "best.ckpt", "last.ckpt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "kind\tepoch\tstep\tlr\tloss\tknn_acc");
    assert!(lines[1].starts_with("eval\t0\t0\t-\t-\t"));
    // 9 sources at batch 4: two full batches per epoch, the lone remainder dropped.
    assert_eq!(lines.iter().filter(|l| l.starts_with("step\t")).count(), 4);
    assert_eq!(lines.iter().filter(|l| l.starts_with("eval\t")).count(), 3);
    let snap = fs::read_to_string(run.join("config.cfg")).unwrap();
    assert!(snap.contains("model.embed_dim = 8"));

    let knn = ok(&[
        "eval",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--checkpoint",
        p(&run.join("best.ckpt")),
        "--knn",
    ]);
    let acc: f64 = knn
        .trim()
        .strip_prefix("knn_acc ")
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(fs::read_to_string(run.join("eval.tsv"))
        .unwrap()
        .starts_with("metric\tvalue\tcheckpoint\nknn_acc\t"));

    let ft = t.path().join("ft");
    ok(&[
        "finetune",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--checkpoint",
        p(&run.join("last.ckpt")),
        "--out-dir",
        p(&ft),
        "--epochs",
        "1",
        "--set",
        "train.batch_size=3",
    ]);
    let log = fs::read_to_string(ft.join("metrics.tsv")).unwrap();
    assert!(log.starts_with("kind\tepoch\tstep\tlr\tloss\tval_acc\tval_f1\n"));
    let ev = ok(&[
        "eval",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--checkpoint",
        p(&ft.join("best.ckpt")),
    ]);
    assert!(ev.contains("val_acc ") && ev.contains("val_f1 "));
}

#[test]
fn pretrain_runs_repeat_byte_for_byte() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    gen(&data, "2");
    let cfg = t.path().join("toy.cfg");
    fs::write(&cfg, TOY).unwrap();
    for r in ["r1", "r2"] {
        ok(&[
            "pretrain",
            "--config",
            p(&cfg),
            "--data",
            p(&data),
            "--out-dir",
            p(&t.path().join(r)),
            "--seed",
            "5",
        ]);
    }
    for f in ["metrics.tsv", "best.ckpt", "last.ckpt"] {
        assert_eq!(
            fs::read(t.path().join("r1").join(f)).unwrap(),
            fs::read(t.path().join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bench_cost_reports_both_modes() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(&["bench-cost", "--out-dir", p(t.path())]);
    assert!(out.contains("joint4d attention") && out.contains("stda attention"));
    assert!(out.contains("(stda lower)"));
    let tsv = fs::read_to_string(t.path().join("cost_report.tsv")).unwrap();
    assert_eq!(tsv.lines().filter(|l| l.starts_with("mode\t")).count(), 1);
    // joint: 4 stages + total; stda: 4 x (spatial, temporal) + total
    assert_eq!(tsv.lines().count(), 1 + 5 + 9);
    assert!(t.path().join("cost_report.txt").is_file());

    let single = ok(&[
        "bench-cost",
        "--mode",
        "stda",
        "--window",
        "4",
        "--extent",
        "48",
        "--frames",
        "8",
    ]);
    assert!(single.contains("stda attention, window 4") && !single.contains("joint4d"));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(stda(&["pretrain", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(stda(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stda(&["--help"]).status.code(), Some(0));
    assert_eq!(
        stda(&["bench-cost", "--mode", "sideways"]).status.code(),
        Some(1)
    );
    assert_eq!(
        stda(&["bench-cost", "--set", "no.such.key=1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        stda(&["bench-cost", "--set", "novalue"]).status.code(),
        Some(1)
    );

    let missing = t.path().join("missing");
    let out = stda(&[
        "pretrain",
        "--data",
        p(&missing),
        "--out-dir",
        p(&t.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    let bad = t.path().join("bad.nii");
    fs::write(&bad, b"definitely not a nifti header").unwrap();
    assert_eq!(stda(&["inspect-nifti", p(&bad)]).status.code(), Some(2));

    let ck = t.path().join("broken.ckpt");
    fs::write(&ck, b"stda-checkpoint 1\n[config]\n").unwrap();
    assert_eq!(
        stda(&["eval", "--checkpoint", p(&ck), "--data", p(t.path())])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn inspect_nifti_prints_header() {
    let t = tempfile::tempdir().unwrap();
    gen(&t.path().join("d"), "0");
    let out = ok(&[
        "inspect-nifti",
        p(&t.path().join("d/class_00/sample_000.nii")),
    ]);
    assert!(out.contains("dim         [4, 8, 8, 8, 16, 1, 1, 1]"));
    assert!(out.contains("frames      16"));
}
