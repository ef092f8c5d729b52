use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffews::data::io::{load_manifest, read_pgm};
use diffews::data::metrics::CSV_HEADER;

fn diffews(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffews"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

const SMALL: [&str; 10] = [
    "--set", "canvas=32", "--set", "num_classes=4", "--set", "num_folds=2", "--set", "iterations=3", "--set",
    "eval_episodes=4",
];

fn with_small<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(SMALL).collect()
}

#[test]
fn gen_data_writes_a_loadable_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = diffews(&with_small(&["gen-data", "--seed", "3"]), tmp.path());
    ok(&o);
    let ds = load_manifest(&tmp.path().join("manifest.jsonl")).unwrap();
    assert_eq!(ds.len(), 4 * 8);
    assert!(tmp.path().join("run.json").exists());
}

#[test]
fn train_eval_predict_round() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&diffews(&with_small(&["gen-data"]), &data));
    let manifest = data.join("manifest.jsonl");
    let set_data = format!("data={}", manifest.display());

    let config = tmp.path().join("run.cfg");
    fs::write(&config, "# toy run\nlr = 0.002\ncheckpoint_every = 3\n").unwrap();
    let train_dir = tmp.path().join("train");
    let mut args = with_small(&["train", "--config", config.to_str().unwrap(), "--set", &set_data]);
    args.extend(["--seed", "5"]);
    ok(&diffews(&args, &train_dir));
    for f in ["run.json", "metrics.csv", "final.ckpt", "checkpoint_000003.ckpt", "loss.csv"] {
        assert!(train_dir.join(f).exists(), "{f}");
    }
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(train_dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["lr"], 0.002);
    assert_eq!(run["seed"], 5);
    let metrics = fs::read_to_string(train_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(CSV_HEADER));
    assert!(metrics.lines().last().unwrap().starts_with("0,all,1,"));

    // evaluating the saved checkpoint with the same settings reproduces the metrics
    let eval_dir = tmp.path().join("eval");
    let ckpt = train_dir.join("final.ckpt");
    ok(&diffews(&["eval", "--checkpoint", ckpt.to_str().unwrap()], &eval_dir));
    assert_eq!(fs::read_to_string(eval_dir.join("metrics.csv")).unwrap(), metrics);

    let ds = load_manifest(&manifest).unwrap();
    let img = |i: usize| data.join(format!("images/{i:05}.ppm"));
    let class = *ds.records[0].masks.keys().next().unwrap();
    let mask = data.join(format!("masks/{:05}_c{class}.pgm", 0));
    let pred_dir = tmp.path().join("pred");
    let o = diffews(
        &[
            "predict",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--query",
            img(1).to_str().unwrap(),
            "--support",
            img(0).to_str().unwrap(),
            "--mask",
            mask.to_str().unwrap(),
        ],
        &pred_dir,
    );
    ok(&o);
    let m = read_pgm(&pred_dir.join("mask.pgm")).unwrap();
    assert_eq!((m.h, m.w), (32, 32));
    let scores = fs::read(pred_dir.join("scores.ppm")).unwrap();
    assert!(scores.starts_with(b"P6"));
}

#[test]
fn ablate_emits_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = with_small(&["ablate", "--grid", "multiplication_domain=rgb,latent;injection=multiplication"]);
    args.extend(["--set", "iterations=1", "--set", "grad_accum=1"]);
    ok(&diffews(&args, tmp.path()));
    let csv = fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,miou");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("\"multiplication_domain=rgb;injection=multiplication\","));
    assert!(tmp.path().join("cell_01.ckpt").exists());
}

#[test]
fn grad_check_reports_and_detects_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let parse = |o: &Output| -> f64 {
        let s = String::from_utf8_lossy(&o.stdout);
        s.trim().rsplit(' ').next().unwrap().parse().unwrap()
    };
    let o = diffews(&with_small(&["grad-check", "--num-params", "32"]), &tmp.path().join("a"));
    ok(&o);
    assert!(parse(&o) < 1e-4);
    let o = diffews(&with_small(&["grad-check", "--num-params", "32", "--corrupt"]), &tmp.path().join("b"));
    ok(&o);
    assert!(parse(&o) > 1e-2);
    let rows = fs::read_to_string(tmp.path().join("a/gradcheck.csv")).unwrap();
    assert_eq!(rows.lines().count(), 33);
}

#[test]
fn bad_input_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let o = diffews(&["train", "--set", "no_such_key=1"], tmp.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let missing = PathBuf::from("/nonexistent/ckpt");
    let o = diffews(&["eval", "--checkpoint", missing.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());

    let o = diffews(&["eval", "--checkpoint", "x", "--set", "fold=9"], tmp.path());
    assert!(!o.status.success());
}
