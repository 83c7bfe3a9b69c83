use std::fs;
use std::path::{Path, PathBuf};

use liqss::bench::{run_bench, scaling_fits, BenchConfig, MemoryProbe};
use liqss::config::{DataSource, RunConfig};
use liqss::metrics::evaluate_test;
use liqss::model::{build_seeded, load_checkpoint, save_checkpoint, Checkpoint};
use liqss::telemetry::{
    apply_scaling, chrono_split, gen_synthetic, inverse_scale_target, load_csv, make_windows, prepare,
    scale_inputs, write_csv, KpiSeries,
};
use liqss::train::{fit_with, history_csv};
use liqss::{LiqssError, Result};
use ndarray::{s, Array3, Axis};

use crate::Common;

/// Run settings stored in checkpoint meta so evaluation sees the same split.
const RUN_META_KEYS: [&str; 6] = ["train_ratio", "val_ratio", "epsilon", "target", "data_csv", "synthetic_length"];

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| LiqssError::io(path, e))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| LiqssError::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.clone())
}

fn apply_common(cfg: &mut RunConfig, c: &Common) -> Result<()> {
    if let Some(p) = &c.config {
        cfg.apply_file(p)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| LiqssError::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &c.data {
        cfg.data = DataSource::Csv(d.clone());
    }
    if let Some(t) = c.synthetic {
        cfg.data = DataSource::Synthetic { length: t };
    }
    if let Some(t) = &c.target {
        cfg.target = t.clone();
    }
    if let Some(e) = c.epochs {
        cfg.train.max_epochs = e;
    }
    Ok(())
}

pub fn resolve(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    apply_common(&mut cfg, c)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_series(cfg: &RunConfig) -> Result<KpiSeries> {
    let series = match &cfg.data {
        DataSource::Csv(p) => load_csv(p, &cfg.target)?,
        DataSource::Synthetic { length } => gen_synthetic(*length, cfg.model.num_kpis, cfg.seed())?.with_target(&cfg.target)?,
    };
    Ok(series)
}

fn check_kpis(series: &KpiSeries, expected: usize) -> Result<()> {
    if series.num_kpis() != expected {
        return Err(LiqssError::ShapeMismatch(format!(
            "data has {} KPIs, model expects {expected}",
            series.num_kpis()
        )));
    }
    Ok(())
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn gen_data(t: usize, k: usize, seed: u64, out: &Path) -> Result<()> {
    let series = gen_synthetic(t, k, seed)?;
    write_csv(&series, out)?;
    eprintln!("wrote {t} rows x {k} KPIs to {}", out.display());
    Ok(())
}

pub fn train(c: &Common) -> Result<()> {
    let cfg = resolve(c)?;
    let series = load_series(&cfg)?;
    check_kpis(&series, cfg.model.num_kpis)?;
    let data = prepare(&series, cfg.model.lookback, cfg.train_ratio, cfg.val_ratio, cfg.epsilon)?;
    let model = build_seeded(&cfg.model)?;
    println!("parameters {}", thousands(model.num_params()));
    eprintln!(
        "windows train {} val {} test {}",
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len()
    );
    let result = fit_with(model, &data.train(), &data.val(), &cfg.train, &mut |r| {
        eprintln!(
            "epoch {:>3}  train {:.6}  val {:.6}  lr {:.2e}  patience {}",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.patience
        );
    })?;

    let mut meta: Vec<(String, String)> = cfg
        .to_pairs()
        .into_iter()
        .filter(|(k, _)| RUN_META_KEYS.contains(&k.as_str()))
        .collect();
    meta.push(("kpi_names".into(), series.kpi_names().join(",")));
    let ckpt = Checkpoint {
        model: result.model,
        scaler: data.scaler,
        best_val_loss: result.best_val_loss,
        meta,
    };
    let dir = out_dir(&cfg)?;
    save_checkpoint(&ckpt, dir.join("model.ckpt"))?;
    write(&dir.join("history.csv"), &history_csv(&result.history))?;
    write(&dir.join("config.txt"), &cfg.to_text())?;
    println!("best_val_loss {}", result.best_val_loss);
    Ok(())
}

/// Checkpoint plus the run config it was trained under, with command-line
/// layers on top. Model settings always come from the checkpoint.
fn with_checkpoint(c: &Common, path: Option<&Path>) -> Result<(Checkpoint, RunConfig)> {
    let mut base = RunConfig::default();
    if let Some(o) = &c.out {
        base.out_dir = o.clone();
    }
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| base.out_dir.join("model.ckpt"));
    let ckpt = load_checkpoint(&path)?;
    let mut cfg = RunConfig {
        model: ckpt.model.config.clone(),
        ..RunConfig::default()
    };
    for key in RUN_META_KEYS {
        if let Some(v) = ckpt.meta(key) {
            cfg.set(key, v)?;
        }
    }
    apply_common(&mut cfg, c)?;
    let k = ckpt.model.config.num_kpis;
    if cfg.model.num_kpis != k {
        return Err(LiqssError::ShapeMismatch(format!(
            "config num_kpis {} does not match checkpoint ({k})",
            cfg.model.num_kpis
        )));
    }
    cfg.validate()?;
    Ok((ckpt, cfg))
}

pub fn evaluate(c: &Common, checkpoint: Option<&Path>, predictions: bool) -> Result<()> {
    let (ckpt, cfg) = with_checkpoint(c, checkpoint)?;
    let series = load_series(&cfg)?;
    check_kpis(&series, ckpt.model.config.num_kpis)?;
    let windows = make_windows(&series, ckpt.model.config.lookback)?;
    let split = chrono_split(windows.len(), cfg.train_ratio, cfg.val_ratio)?;
    let ti = series.target_index();
    let test = apply_scaling(&windows, &ckpt.scaler, ti).slice(split.test);
    let report = evaluate_test(&ckpt.model, &test, &ckpt.scaler, ti, cfg.train.batch_size)?;
    let dir = out_dir(&cfg)?;
    write(&dir.join("metrics.csv"), &report.to_csv())?;
    write(&dir.join("metrics.txt"), &format!("{report}\n"))?;
    if predictions {
        write(&dir.join("predictions.csv"), &report.predictions_csv())?;
    }
    println!("{report}");
    Ok(())
}

pub fn predict(c: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let (ckpt, cfg) = with_checkpoint(c, checkpoint)?;
    let series = load_series(&cfg)?;
    check_kpis(&series, ckpt.model.config.num_kpis)?;
    let l = ckpt.model.config.lookback;
    let t = series.len();
    if t < l {
        return Err(LiqssError::TooShort { needed: l, got: t });
    }
    // every window, including the one ending at the last row
    let n = t - l + 1;
    let mut inputs = Array3::zeros((n, l, series.num_kpis()));
    for i in 0..n {
        inputs.index_axis_mut(Axis(0), i).assign(&series.values().slice(s![i..i + l, ..]));
    }
    let x = scale_inputs(&inputs, &ckpt.scaler);
    let pred = inverse_scale_target(ckpt.model.predict(x.view(), cfg.train.batch_size)?.view(), &ckpt.scaler);
    let ti = series.target_index();
    let mut text = String::from("step,y_pred,y_true\n");
    for (i, p) in pred.iter().enumerate() {
        let step = i + l;
        match series.values().get([step, ti]) {
            Some(y) => text.push_str(&format!("{step},{p},{y}\n")),
            None => text.push_str(&format!("{step},{p},\n")),
        }
    }
    let dir = out_dir(&cfg)?;
    write(&dir.join("predictions.csv"), &text)?;
    println!("next {} forecast {}", series.target_name(), pred[n - 1]);
    Ok(())
}

pub fn param_count(c: &Common, tt_rank: &[usize], cm: &[usize], ns: &[usize]) -> Result<()> {
    let cfg = resolve(c)?;
    if tt_rank.is_empty() && cm.is_empty() && ns.is_empty() {
        let model = build_seeded(&cfg.model)?;
        for (name, count) in model.count_params().rows() {
            println!("{name:<24}{count:>10}");
        }
        return Ok(());
    }
    println!("knob,value,params");
    let sweeps: [(&str, &[usize]); 3] = [("tt_rank", tt_rank), ("cm", cm), ("ns", ns)];
    for (knob, values) in sweeps {
        for &v in values {
            let mut m = cfg.model.clone();
            match knob {
                "tt_rank" => {
                    m.tt_in_rank = v;
                    m.tt_head_rank = v;
                }
                "cm" => m.mixture_components = v,
                _ => m.state_dim = v,
            }
            println!("{knob},{v},{}", build_seeded(&m)?.num_params());
        }
    }
    Ok(())
}

pub fn bench(
    c: &Common,
    lookbacks: Vec<usize>,
    batch: usize,
    warmup: usize,
    reps: usize,
    probe: &dyn MemoryProbe,
) -> Result<()> {
    let cfg = resolve(c)?;
    if lookbacks.is_empty() || batch == 0 || reps == 0 {
        return Err(LiqssError::Config("bench needs lookbacks, batch > 0 and reps > 0".into()));
    }
    let bc = BenchConfig {
        model: cfg.model.clone(),
        lookbacks,
        batch,
        warmup,
        reps,
    };
    let report = run_bench(&bc, Some(probe))?;
    let csv = report.to_csv();
    let dir = out_dir(&cfg)?;
    write(&dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    if report.rows.len() >= 3 {
        let (r_const, r_lin, r_quad) = scaling_fits(&report.lookbacks(), &report.train_times());
        eprintln!("fit r2 constant {r_const:.4} linear {r_lin:.4} quadratic {r_quad:.4}");
    }
    let times = report.train_times();
    eprintln!(
        "train time ratio L={} / L={}: {:.2}",
        bc.lookbacks[bc.lookbacks.len() - 1],
        bc.lookbacks[0],
        times[times.len() - 1] / times[0]
    );
    Ok(())
}
