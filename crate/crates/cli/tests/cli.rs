use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn mtd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtd")).args(args).output().expect("spawn mtd")
}

fn ok(args: &[&str]) {
    let out = mtd(args);
    assert!(out.status.success(), "mtd {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic copies under `<tmp>/prep/seed_<s>`.
fn prepare_small(tmp: &TempDir, repeats: usize) -> Vec<PathBuf> {
    let out = tmp.path().join("prep");
    let reps = repeats.to_string();
    ok(&[
        "prepare", "--synthetic", "--n", "60", "--view-dims", "4,5", "--num-labels", "3", "--repeats", &reps,
        "--seed", "3", "--out", p(&out),
    ]);
    (0..repeats).map(|r| out.join(format!("seed_{}", 3 + r))).collect()
}

const SMALL: &[&str] = &["--epochs", "3", "--hidden", "8", "--embed-dim", "4", "--batch-size", "16"];

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&args);
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn prepare_writes_distinct_repeats() {
    let tmp = TempDir::new().unwrap();
    let dirs = prepare_small(&tmp, 2);
    assert!(tmp.path().join("prep/experiment.toml").is_file());
    for d in &dirs {
        for f in ["labels.csv", "labels_full.csv", "g.csv", "w.csv", "split.json", "view_0.mvf", "view_1.mvf"] {
            assert!(d.join(f).is_file(), "missing {}", d.join(f).display());
        }
    }
    let w0 = fs::read_to_string(dirs[0].join("w.csv")).unwrap();
    let w1 = fs::read_to_string(dirs[1].join("w.csv")).unwrap();
    assert_ne!(w0, w1);
}

#[test]
fn prepare_from_written_config_reproduces_directories() {
    let tmp = TempDir::new().unwrap();
    let dirs = prepare_small(&tmp, 1);
    let again = tmp.path().join("again");
    ok(&["prepare", "--config", p(&tmp.path().join("prep/experiment.toml")), "--out", p(&again)]);
    for f in ["w.csv", "labels.csv", "split.json"] {
        assert_eq!(
            fs::read(dirs[0].join(f)).unwrap(),
            fs::read(again.join("seed_3").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn train_outputs_are_complete_and_deterministic() {
    let tmp = TempDir::new().unwrap();
    let data = &prepare_small(&tmp, 1)[0];
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train(data, &a, &[]);
    train(data, &b, &[]);
    for f in ["model.ckpt", "run.json", "losses.csv", "metrics.csv"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let losses = csv_rows(&a.join("losses.csv"));
    assert_eq!(losses[0].join(","), "epoch,l_mc,l_gc,l_ccc,l_re,l_total");
    assert_eq!(losses.len(), 4);
    assert_eq!(fs::read(a.join("losses.csv")).unwrap(), fs::read(b.join("losses.csv")).unwrap());
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let run: serde_json::Value = serde_json::from_slice(&fs::read(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["per_epoch_losses"].as_array().unwrap().len(), 3);
}

#[test]
fn zero_weights_leave_only_classification_loss() {
    let tmp = TempDir::new().unwrap();
    let data = &prepare_small(&tmp, 1)[0];
    let out = tmp.path().join("run");
    train(data, &out, &["--alpha", "0", "--beta", "0", "--gamma", "0"]);
    for row in &csv_rows(&out.join("losses.csv"))[1..] {
        let v: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
        assert!(v[1] > 0.0);
        assert_eq!(v[5], v[1], "l_total must equal l_mc");
    }
}

#[test]
fn eval_reproduces_final_training_metrics() {
    let tmp = TempDir::new().unwrap();
    let data = &prepare_small(&tmp, 1)[0];
    let run = tmp.path().join("run");
    train(data, &run, &[]);
    let out = tmp.path().join("eval/metrics.json");
    ok(&["eval", "--checkpoint", p(&run.join("model.ckpt")), "--data", p(data), "--out", p(&out)]);
    assert!(out.is_file());
    assert_eq!(
        fs::read_to_string(out.with_extension("csv")).unwrap(),
        fs::read_to_string(run.join("metrics.csv")).unwrap()
    );
}

#[test]
fn ablate_summary_matches_per_run_means() {
    let tmp = TempDir::new().unwrap();
    let dirs = prepare_small(&tmp, 2);
    let out = tmp.path().join("ablate");
    let mut args = vec!["ablate", "--data", p(&dirs[0]), p(&dirs[1]), "--variants", "full,no_mask", "--out", p(&out)];
    args.extend_from_slice(SMALL);
    ok(&args);
    let summary = csv_rows(&out.join("summary.csv"));
    let runs = csv_rows(&out.join("runs.csv"));
    assert_eq!(summary.len(), 3);
    assert_eq!(runs.len(), 5);
    assert_eq!(summary[0][..4], ["variant", "runs", "AP_mean", "AP_std"]);
    for row in &summary[1..] {
        assert_eq!(row[1], "2");
        let per_run: Vec<&Vec<String>> = runs[1..].iter().filter(|r| r[0] == row[0]).collect();
        assert_eq!(per_run.len(), 2);
        for k in 0..6 {
            let mean = per_run.iter().map(|r| r[2 + k].parse::<f64>().unwrap()).sum::<f64>() / 2.0;
            let got: f64 = row[2 + 2 * k].parse().unwrap();
            assert!((got - mean).abs() < 1e-12, "{} metric {k}: {got} vs {mean}", row[0]);
        }
    }
}

#[test]
fn sweep_has_one_row_per_grid_point_and_seed() {
    let tmp = TempDir::new().unwrap();
    let data = &prepare_small(&tmp, 1)[0];
    let out = tmp.path().join("sweep");
    let mut args = vec![
        "sweep", "--data", p(data), "--alpha-grid", "0,0.4", "--mask-rate-grid", "0.1,0.25,0.5", "--seeds", "2",
        "--out", p(&out),
    ];
    args.extend_from_slice(&["--epochs", "1", "--hidden", "4", "--embed-dim", "4", "--batch-size", "32"]);
    ok(&args);
    let rows = csv_rows(&out.join("sweep.csv"));
    assert_eq!(rows[0][..5], ["alpha", "beta", "gamma", "mask_rate", "seed"]);
    assert_eq!(rows.len(), 1 + 2 * 3 * 2);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing");
    let out = mtd(&["train", "--data", p(&missing), "--out", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!mtd(&["prepare"]).status.success());
    let data = &prepare_small(&tmp, 1)[0];
    let bad_lr = mtd(&["train", "--data", p(data), "--out", p(&tmp.path().join("o")), "--learning-rate", "-1"]);
    assert!(!bad_lr.status.success());
    let bad_variant = mtd(&["ablate", "--data", p(data), "--variants", "bogus", "--out", p(&tmp.path().join("o"))]);
    assert!(!bad_variant.status.success());
}
