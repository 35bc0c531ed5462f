use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
patients = 4
split_ratios = [0.5, 0.5]
seed = 3

[model]
encoder_widths = [4, 8, 8, 8]
decoder_channels = 8
head_channels = 4
embed_dim = 16

[embedding]
dim = 16

[train]
epochs = 2
lr_decay_epochs = [1]
batch_size = 4
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_implant-locator"));
    c.env_remove("IMPLANT_LOCATOR_DATA").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_idempotent() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&run(&["--config", cfg, "--seed", "9", "gen-data", "--out", a.to_str().unwrap()]));
    ok(&run(&["--config", cfg, "--seed", "9", "gen-data", "--out", b.to_str().unwrap()]));
    ok(&run(&["--config", cfg, "--seed", "9", "gen-data", "--out", b.to_str().unwrap()]));
    assert!(a.join("manifest.json").exists());
    assert_eq!(files(&a), files(&b));
}

#[test]
fn data_root_comes_from_the_environment() {
    let (dir, cfg) = setup();
    let root = dir.path().join("envdata");
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .env("IMPLANT_LOCATOR_DATA", &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("manifest.json").exists());
}

#[test]
fn full_workflow() {
    let (dir, cfg) = setup();
    let cfg = cfg.to_str().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    ok(&run(&["--config", cfg, "gen-data", "--out", &d("data")]));
    ok(&run(&["--config", cfg, "train", "--data", &d("data"), "--out", &d("run"), "--epochs", "1"]));
    assert!(dir.path().join("run/final.safetensors").exists());
    assert!(dir.path().join("run/config.toml").exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap().lines().count(), 1);

    let ckpt = d("run/final.safetensors");
    ok(&run(&["--config", cfg, "eval", "--data", &d("data"), "--checkpoint", &ckpt, "--out", &d("eval.json")]));
    ok(&run(&["--config", cfg, "plot", "--result", &d("eval.json"), "--out", &d("plots")]));
    let hist = std::fs::read_to_string(dir.path().join("plots/distance_histogram.csv")).unwrap();
    let mut rows = hist.lines().skip(1);
    if let Some(first) = rows.next() {
        assert!(first.starts_with("0,5,"), "{first}");
    }
    let pr = std::fs::read_to_string(dir.path().join("plots/pr_curve.csv")).unwrap();
    let recalls: Vec<f64> = pr.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(recalls.windows(2).all(|w| w[0] <= w[1]));

    let out = run(&[
        "--config", cfg, "predict", "--data", &d("data"), "--checkpoint", &ckpt,
        "--condition", "left", "--project-root", "27", "--out", &d("pred.csv"),
    ]);
    ok(&out);
    let pred = std::fs::read_to_string(dir.path().join("pred.csv")).unwrap();
    assert!(pred.lines().skip(1).all(|l| l.contains(",left,")));
    assert!(dir.path().join("pred_roots.csv").exists());
}

#[test]
fn empty_result_plots_empty_series() {
    let (dir, _) = setup();
    let result = dir.path().join("empty.json");
    std::fs::write(
        &result,
        r#"{"ap75":0.0,"precision":0.0,"recall":0.0,"f1":0.0,"tp":0,"fp":0,"fn_":0,
            "score_threshold":0.3,"histogram":{"bin_width":5.0,"counts":[]},"pr_curve":[],"frames":0}"#,
    )
    .unwrap();
    let plots = dir.path().join("plots");
    ok(&run(&["plot", "--result", result.to_str().unwrap(), "--out", plots.to_str().unwrap()]));
    let hist = std::fs::read_to_string(plots.join("distance_histogram.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1);
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let (dir, _) = setup();
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\ng = 3\n").unwrap();
    assert_eq!(run(&["--config", bad.to_str().unwrap(), "gen-data"]).status.code(), Some(3));

    let missing = dir.path().join("nope");
    let out = run(&["eval", "--data", missing.to_str().unwrap(), "--checkpoint", "x.safetensors"]);
    assert_eq!(out.status.code(), Some(4));

    let out = run(&[
        "predict", "--data", missing.to_str().unwrap(), "--checkpoint", "x", "--condition", "upper",
    ]);
    assert_eq!(out.status.code(), Some(3));
}
