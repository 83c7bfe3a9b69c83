use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use liqss::metrics::evaluate_test;
use liqss::model::{build_seeded, LiqssConfig};
use liqss::telemetry::{gen_synthetic, prepare};
use liqss::train::{fit, TrainConfig};

fn liqss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liqss")).args(args).output().expect("spawn liqss")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Exit status and the `CODE:` prefix of a one-line error.
fn failure(o: &Output) -> (i32, String) {
    let err = stderr(o);
    let last = err.lines().last().unwrap_or("").to_string();
    let code = last.split(':').next().unwrap_or("").to_string();
    (o.status.code().unwrap_or(-1), code)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_data_writes_header_plus_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for f in [&a, &b] {
        let o = liqss(&["gen-data", "--t", "5000", "--k", "13", "--seed", "42", "--out", p(f)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 5001);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn gen_data_too_short() {
    let dir = tempfile::tempdir().unwrap();
    let o = liqss(&["gen-data", "--t", "1", "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(failure(&o), (3, "TooShort".to_string()));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn param_count_defaults_and_sweeps() {
    let o = liqss(&["param-count"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    assert_eq!(total.split_whitespace().nth(1), Some("44109"));

    let o = liqss(&["param-count", "--tt-rank", "16", "--ns", "64", "--cm", "2,4"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("tt_rank,16,46797\n"), "{out}");
    assert!(out.contains("ns,64,60493\n"), "{out}");
    assert!(out.contains("cm,2,44109\n") && out.contains("cm,4,60753\n"), "{out}");
}

#[test]
fn config_precedence_flags_over_file_over_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# sensitivity run\nstate_dim=64\nmixture_components=4\n").unwrap();
    let total = |args: &[&str]| -> String {
        let o = liqss(args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o).lines().find(|l| l.starts_with("total")).unwrap().split_whitespace().nth(1).unwrap().to_string()
    };
    assert_eq!(total(&["param-count"]), "44109");
    // file alone: N_s=64 with C_m=4
    let file_only = total(&["param-count", "--config", p(&cfg)]);
    assert_ne!(file_only, "44109");
    // flag restores C_m=2, file still supplies N_s=64
    assert_eq!(
        total(&["param-count", "--config", p(&cfg), "--set", "mixture_components=2"]),
        "60493"
    );
}

#[test]
fn invalid_ratio_is_config_error() {
    let o = liqss(&["train", "--set", "train_ratio=0.9", "--set", "val_ratio=0.1"]);
    assert_eq!(failure(&o), (2, "ConfigError".to_string()));
    let o = liqss(&["param-count", "--set", "no_such_key=1"]);
    assert_eq!(failure(&o), (2, "ConfigError".to_string()));
    let o = liqss(&["train", "--no-such-flag"]);
    assert_eq!(failure(&o), (2, "UsageError".to_string()));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = liqss(&["evaluate", "--out", p(dir.path())]);
    assert_eq!(failure(&o), (3, "IoError".to_string()));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn train_evaluate_predict_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    assert!(liqss(&["gen-data", "--t", "400", "--seed", "7", "--out", p(&data)]).status.success());
    let runs: Vec<_> = ["r1", "r2"].iter().map(|r| dir.path().join(r)).collect();
    for run in &runs {
        let o = liqss(&[
            "train", "--data", p(&data), "--epochs", "2", "--out", p(run), "--seed", "3",
            "--set", "lookback=8", "--set", "batch_size=64",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.contains("parameters 44,109"), "{out}");
        assert!(out.contains("best_val_loss"), "{out}");
    }
    let ck1 = fs::read(runs[0].join("model.ckpt")).unwrap();
    assert_eq!(ck1, fs::read(runs[1].join("model.ckpt")).unwrap());
    let hist = fs::read_to_string(runs[0].join("history.csv")).unwrap();
    assert!(hist.starts_with("epoch,train_loss,val_loss,lr,patience\n"));
    assert_eq!(hist.lines().count(), 3);

    let o = liqss(&["evaluate", "--out", p(&runs[0]), "--predictions"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(runs[0].join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("mse,rmse,mae,r2,skill_r,skill_m,n\n"));
    assert!(runs[0].join("metrics.txt").exists());
    let preds = fs::read_to_string(runs[0].join("predictions.csv")).unwrap();
    let n: usize = metrics.lines().nth(1).unwrap().split(',').last().unwrap().parse().unwrap();
    assert_eq!(preds.lines().count(), n + 1);

    // evaluation is repeatable
    let again = liqss(&["evaluate", "--out", p(&runs[0])]);
    assert_eq!(stdout(&again), stdout(&o));

    // one forecast per window plus the step past the end
    let o = liqss(&["predict", "--out", p(&runs[0])]);
    assert!(o.status.success(), "{}", stderr(&o));
    let preds = fs::read_to_string(runs[0].join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 400 - 8 + 1);
    assert!(preds.ends_with(",\n"));

    // K mismatch between checkpoint and data or config
    let narrow = dir.path().join("k5.csv");
    assert!(liqss(&["gen-data", "--t", "400", "--k", "5", "--out", p(&narrow)]).status.success());
    let o = liqss(&["evaluate", "--out", p(&runs[0]), "--data", p(&narrow)]);
    assert_eq!(failure(&o).1, "ShapeMismatch");
    let o = liqss(&["evaluate", "--out", p(&runs[0]), "--set", "num_kpis=5"]);
    assert_eq!(failure(&o).1, "ShapeMismatch");

    // damaged checkpoint
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &ck1[..ck1.len() / 2]).unwrap();
    let o = liqss(&["evaluate", "--checkpoint", p(&bad), "--out", p(&runs[0])]);
    assert_eq!(failure(&o), (3, "CorruptCheckpoint".to_string()));
}

#[test]
fn bench_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = liqss(&[
        "bench", "--out", p(dir.path()), "--lookbacks", "4,8,16", "--batch", "2", "--warmup", "1", "--reps", "3",
        "--set", "latent_width=8", "--set", "tt_in_out_modes=2,2,2", "--set", "tt_head_in_modes=2,2,2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert!(csv.starts_with("L,train_s_per_ex,train_std,infer_s_per_ex,infer_std,peak_mem_bytes\n"));
    assert_eq!(csv.lines().count(), 4);
    let mem: Vec<usize> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(mem.iter().all(|&m| m > 0), "{csv}");
}

/// Train and test on the same tiny set; a model that cannot memorize it is broken.
#[test]
fn overfit_sanity() {
    let series = gen_synthetic(48, 2, 5).unwrap();
    let cfg = LiqssConfig {
        num_kpis: 2,
        lookback: 8,
        latent_width: 16,
        num_blocks: 1,
        state_dim: 8,
        dropout: 0.0,
        tt_in_in_modes: vec![1, 1, 2],
        tt_in_out_modes: vec![2, 2, 4],
        tt_head_in_modes: vec![2, 2, 4],
        tt_head_out_modes: vec![1, 1, 1],
        ..LiqssConfig::default()
    };
    let data = prepare(&series, cfg.lookback, 0.5, 0.25, 1e-8).unwrap();
    let train = data.train();
    let tc = TrainConfig {
        learning_rate: 1e-2,
        weight_decay: 0.0,
        max_epochs: 800,
        patience: 800,
        plateau_patience: 20,
        batch_size: 64,
        ..TrainConfig::default()
    };
    let r = fit(build_seeded(&cfg).unwrap(), &train, &train, &tc).unwrap();
    let report = evaluate_test(&r.model, &train, &data.scaler, data.target_index, 64).unwrap();
    assert!(report.r2 > 0.99, "r2 {}", report.r2);
}
