//! End-to-end acceptance checks. Runs without the libtest harness so each
//! criterion prints exactly one PASS/FAIL line; the process fails if any
//! criterion fails.

use std::time::Instant;

use liqss::bench::{run_bench, scaling_fits, BenchConfig, PeakAlloc};
use liqss::blocks::{block_forward, init_block, Mode};
use liqss::metrics::evaluate_test;
use liqss::model::{build_seeded, decode_checkpoint, encode_checkpoint, Checkpoint, LiqssConfig, LiqssModel};
use liqss::ssm::{build_legs_generator, discretize_tustin, dt_from_log, mixture_kernel, KernelComponentParams};
use liqss::telemetry::{apply_scaling, chrono_split, fit_scalers, gen_synthetic, load_csv, make_windows, prepare, KpiSeries};
use liqss::train::{compute_loss_and_grads, evaluate_loss, fit, TrainConfig, MIN_DELTA};
use liqss::tt::{tt_init, tt_materialize_dense, TtModes};
use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc::new();

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn randn<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn param_counts() -> Outcome {
    let total = |f: &dyn Fn(&mut LiqssConfig)| -> Result<usize, String> {
        let mut c = LiqssConfig::default();
        f(&mut c);
        Ok(build_seeded(&c).map_err(|e| e.to_string())?.count_params().total())
    };
    let base = total(&|_| {})?;
    check(base == 44_109, format!("reference count {base} != 44109"))?;
    for (r, want) in [(2, 43_885), (4, 44_109), (8, 44_749), (16, 46_797)] {
        let got = total(&|c| {
            c.tt_in_rank = r;
            c.tt_head_rank = r;
        })?;
        check(got == want, format!("tt rank {r}: {got} != {want}"))?;
    }
    for (m, want) in [(2, 44_109), (4, 60_753), (6, 77_397), (8, 94_041)] {
        let got = total(&|c| c.mixture_components = m)?;
        check(got == want, format!("C_m {m}: {got} != {want}"))?;
    }
    for (n, want) in [(8, 31_821), (16, 35_917), (32, 44_109), (64, 60_493)] {
        let got = total(&|c| c.state_dim = n)?;
        check(got == want, format!("N_s {n}: {got} != {want}"))?;
    }
    Ok("44,109 plus all 12 sensitivity counts".into())
}

fn random_modes(rng: &mut ChaCha8Rng, d: usize) -> Vec<usize> {
    loop {
        let m: Vec<usize> = (0..d).map(|_| rng.random_range(1..=8)).collect();
        if m.iter().product::<usize>() <= 256 {
            return m;
        }
    }
}

fn tt_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..1000 {
        let d = rng.random_range(1..=4);
        let n = random_modes(&mut rng, d);
        let m = random_modes(&mut rng, d);
        let mut ranks = vec![1];
        ranks.extend((1..d).map(|_| rng.random_range(1..=8)));
        ranks.push(1);
        let modes = TtModes::new(n, m, ranks).map_err(|e| e.to_string())?;
        let mut tt = tt_init(&modes, true, &mut rng);
        let bias = Array1::from_shape_simple_fn(modes.out_dim(), || randn(&mut rng));
        tt.bias = Some(bias.clone());
        let x = Array2::from_shape_simple_fn((3, modes.in_dim()), || randn(&mut rng));
        let y = tt.forward(x.view()).map_err(|e| e.to_string())?;
        let dense = tt_materialize_dense(&tt);
        let expected = x.dot(&dense.t()) + &bias;
        let err = (&y - &expected).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(err);
        check(err <= 1e-10, format!("case {case}: max error {err:e}"))?;
    }
    Ok(format!("1000 instances, worst |err|_inf = {worst:.2e}"))
}

/// Step-by-step simulation of the discretized per-channel system with an
/// impulse input, using an independent dense inverse.
fn simulate_component(p: &KernelComponentParams, n_s: usize, len: usize) -> Array2<f64> {
    let g = build_legs_generator(n_s);
    let a = DMatrix::from_fn(n_s, n_s, |i, j| g.a_ct[[i, j]]);
    let dt = dt_from_log(p.log_dt);
    let eye = DMatrix::<f64>::identity(n_s, n_s);
    let inv = (&eye - &a * (dt / 2.0)).try_inverse().expect("invertible");
    let a_bar = &inv * (&eye + &a * (dt / 2.0));
    let channels = p.d_skip.len();
    let mut out = Array2::zeros((channels, len));
    for ch in 0..channels {
        let b = DVector::from_fn(n_s, |i, _| p.b[[ch, i]]);
        let c = DVector::from_fn(n_s, |i, _| p.c[[ch, i]]);
        let b_bar = &inv * b * dt;
        let mut s = DVector::<f64>::zeros(n_s);
        for l in 0..len {
            let u = if l == 0 { 1.0 } else { 0.0 };
            s = &a_bar * s + &b_bar * u;
            out[[ch, l]] = c.dot(&s) + p.d_skip[ch] * u;
        }
    }
    out
}

fn kernel_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for draw in 0..200 {
        let n_s = rng.random_range(1..=8);
        let d = rng.random_range(1..=4);
        let c_m = rng.random_range(1..=3);
        let len = rng.random_range(1..=32);
        let comps: Vec<KernelComponentParams> = (0..c_m)
            .map(|_| KernelComponentParams {
                b: Array2::from_shape_simple_fn((d, n_s), || randn(&mut rng)),
                c: Array2::from_shape_simple_fn((d, n_s), || randn(&mut rng)),
                d_skip: Array1::from_shape_simple_fn(d, || randn(&mut rng)),
                log_dt: rng.random_range(-4.0..1.0),
            })
            .collect();
        let gen = build_legs_generator(n_s);
        let taps = mixture_kernel(&comps, &gen, len).map_err(|e| e.to_string())?.taps;
        let mut expected = Array2::zeros((d, len));
        for p in &comps {
            expected += &simulate_component(p, n_s, len);
        }
        let err = (&taps - &expected).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(err);
        check(err <= 1e-10, format!("draw {draw}: max error {err:e}"))?;
    }
    Ok(format!("200 draws, worst |err|_inf = {worst:.2e}"))
}

fn stability() -> Outcome {
    let mut worst: f64 = 0.0;
    for n_s in 1..=64 {
        let g = build_legs_generator(n_s);
        let b = Array2::ones((1, n_s));
        for dt in [1e-4, 1e-2, 0.1, 1.0, 10.0] {
            let disc = discretize_tustin(&g, b.view(), dt).map_err(|e| e.to_string())?;
            for i in 0..n_s {
                let v = disc.a_bar[[i, i]].abs();
                worst = worst.max(v);
                check(v < 1.0, format!("N_s={n_s} dt={dt}: |diag|={v}"))?;
            }
        }
    }
    Ok(format!("max |diag(A_bar)| = {worst:.6}"))
}

fn tiny_config() -> LiqssConfig {
    LiqssConfig {
        num_kpis: 2,
        lookback: 4,
        latent_width: 4,
        num_blocks: 1,
        state_dim: 2,
        mixture_components: 1,
        dropout: 0.0,
        tt_in_in_modes: vec![1, 2],
        tt_in_out_modes: vec![2, 2],
        tt_in_rank: 2,
        tt_head_in_modes: vec![2, 2],
        tt_head_out_modes: vec![1, 1],
        tt_head_rank: 2,
        ..LiqssConfig::default()
    }
}

fn loss_of(model: &LiqssModel, x: &Array3<f64>, y: &Array1<f64>) -> f64 {
    let p = model.forward(x.view(), &mut Mode::Eval).expect("forward");
    p.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let model = build_seeded(&tiny_config()).map_err(|e| e.to_string())?;
    let x = Array3::from_shape_simple_fn((3, 4, 2), || randn(&mut rng));
    let y = Array1::from_shape_simple_fn(3, || randn(&mut rng));
    let (_, grads) =
        compute_loss_and_grads(&model, x.view(), y.view(), &mut Mode::Eval).map_err(|e| e.to_string())?;
    let mut names = Vec::new();
    let mut flat: Vec<ArrayD<f64>> = Vec::new();
    model.visit_params(&mut |n, p| {
        names.push(n);
        flat.push(p.to_owned());
    });
    let h = 1e-6;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (pi, name) in names.iter().enumerate() {
        for idx in 0..flat[pi].len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                let mut i = 0;
                m.visit_params_mut(&mut |_, mut p| {
                    if i == pi {
                        let v = p.iter_mut().nth(idx).expect("index");
                        *v += delta;
                    }
                    i += 1;
                });
                loss_of(&m, &x, &y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = *grads[pi].iter().nth(idx).expect("index");
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-5);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{idx}]"));
            }
            checked += 1;
        }
    }
    check(worst.0 <= 1e-4, format!("worst relative error {:.2e} at {}", worst.0, worst.1))?;
    Ok(format!("{checked} scalars over {} arrays, worst rel err {:.2e}", names.len(), worst.0))
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = LiqssConfig::default();
    let gen = build_legs_generator(cfg.state_dim);
    let mut block = init_block(&cfg.block_shape(), &mut rng).map_err(|e| e.to_string())?;
    block.se.b2.fill(100.0);
    let l = 16;
    let e = Array3::from_shape_simple_fn((2, l, cfg.latent_width), || randn(&mut rng));
    let base = block_forward(e.view(), &block, &gen, &mut Mode::Eval).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for pos in 0..l {
        let mut bumped = e.clone();
        bumped.slice_mut(s![.., pos, ..]).mapv_inplace(|v| v + 2.0 * v.signum() + 0.5);
        let out = block_forward(bumped.view(), &block, &gen, &mut Mode::Eval).map_err(|e| e.to_string())?;
        let d = (&out.slice(s![.., ..pos, ..]) - &base.slice(s![.., ..pos, ..]))
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        worst = worst.max(d);
        check(d <= 1e-12, format!("perturbing {pos} moved earlier outputs by {d:e}"))?;
    }

    // End to end: two series that differ only before a cut produce
    // identical windows (and predictions) after it.
    let a = gen_synthetic(200, 13, 5).map_err(|e| e.to_string())?;
    let mut vb = a.values().clone();
    let cut = 60;
    vb.slice_mut(s![..cut, ..]).mapv_inplace(|v| v * 1.7 - 3.0);
    let b = KpiSeries::new(vb, a.kpi_names().to_vec(), 0).map_err(|e| e.to_string())?;
    let wa = make_windows(&a, 32).map_err(|e| e.to_string())?;
    let wb = make_windows(&b, 32).map_err(|e| e.to_string())?;
    let split = chrono_split(wa.len(), 0.7, 0.15).map_err(|e| e.to_string())?;
    let scaler = fit_scalers(&wa, &split, 0, 1e-8).map_err(|e| e.to_string())?;
    let sa = apply_scaling(&wa, &scaler, 0);
    let sb = apply_scaling(&wb, &scaler, 0);
    let model = build_seeded(&cfg).map_err(|e| e.to_string())?;
    let pa = model.predict(sa.inputs.slice(s![cut.., .., ..]), 64).map_err(|e| e.to_string())?;
    let pb = model.predict(sb.inputs.slice(s![cut.., .., ..]), 64).map_err(|e| e.to_string())?;
    check(pa == pb, "predictions after the cut differ")?;
    let pa_all = model.predict(sa.inputs.view(), 64).map_err(|e| e.to_string())?;
    let pb_all = model.predict(sb.inputs.view(), 64).map_err(|e| e.to_string())?;
    check(pa_all.slice(s![cut..]) == pb_all.slice(s![cut..]), "batch context leaked into predictions")?;
    Ok(format!("block max earlier-output change {worst:e}; end-to-end predictions identical"))
}

fn linear_scaling() -> Outcome {
    let cfg = BenchConfig::default();
    let t0 = Instant::now();
    let report = run_bench(&cfg, Some(&ALLOC)).map_err(|e| e.to_string())?;
    print!("{}", report.to_csv());
    let ls = report.lookbacks();
    let ts = report.train_times();
    let (c, lin, quad) = scaling_fits(&ls, &ts);
    let ratio = ts[ts.len() - 1] / ts[0];
    check(lin > c, format!("linear R2 {lin:.4} <= constant R2 {c:.4}"))?;
    check(lin > quad, format!("linear R2 {lin:.4} <= quadratic R2 {quad:.4}"))?;
    check(ratio <= 10.0, format!("time(64)/time(8) = {ratio:.2}"))?;
    let mem: Vec<usize> = report.rows.iter().map(|r| r.peak_mem_bytes).collect();
    check(mem.windows(2).all(|w| w[0] <= w[1]), format!("peak memory not monotone: {mem:?}"))?;
    Ok(format!(
        "R2 const {c:.3} / lin {lin:.4} / quad {quad:.4}, ratio {ratio:.2}, {:.0}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn learnability() -> Outcome {
    let t0 = Instant::now();
    let series = gen_synthetic(5000, 13, 42).map_err(|e| e.to_string())?;
    let cfg = LiqssConfig::default();
    let data = prepare(&series, cfg.lookback, 0.70, 0.15, 1e-8).map_err(|e| e.to_string())?;
    let train_cfg = TrainConfig {
        max_epochs: 30,
        ..TrainConfig::default()
    };
    let model = build_seeded(&cfg).map_err(|e| e.to_string())?;
    let r = fit(model, &data.train(), &data.val(), &train_cfg).map_err(|e| e.to_string())?;
    let rep = evaluate_test(&r.model, &data.test(), &data.scaler, data.target_index, 256).map_err(|e| e.to_string())?;
    let summary = format!(
        "Skill(R) {:.4}, Skill(M) {:.4}, R2 {:.4}, RMSE {:.4}, {} epochs, {:.0}s",
        rep.skill_r,
        rep.skill_m,
        rep.r2,
        rep.rmse,
        r.history.len(),
        t0.elapsed().as_secs_f64()
    );
    check(rep.skill_r > 0.0 && rep.skill_m > 0.5 && rep.r2 > 0.9, summary.clone())?;
    Ok(summary)
}

/// Non-blocking: only runs when the released dataset is available locally.
fn optional_dataset_check() {
    let Ok(path) = std::env::var("LIQSS_ORAN_CSV") else {
        println!("[SKIP] optional: released dataset check (set LIQSS_ORAN_CSV to run)");
        return;
    };
    let run = || -> Result<String, String> {
        let target = std::env::var("LIQSS_ORAN_TARGET").unwrap_or_else(|_| "rsrp".into());
        let series = load_csv(&path, &target).map_err(|e| e.to_string())?;
        let cfg = LiqssConfig {
            num_kpis: series.num_kpis(),
            ..LiqssConfig::default()
        };
        let data = prepare(&series, cfg.lookback, 0.70, 0.15, 1e-8).map_err(|e| e.to_string())?;
        let r = fit(build_seeded(&cfg).map_err(|e| e.to_string())?, &data.train(), &data.val(), &TrainConfig::default())
            .map_err(|e| e.to_string())?;
        let rep = evaluate_test(&r.model, &data.test(), &data.scaler, data.target_index, 256).map_err(|e| e.to_string())?;
        let msg = format!("windows {}, RMSE {:.4} (reference 0.2866)", data.scaled.len(), rep.rmse);
        check((rep.rmse - 0.2866).abs() <= 0.15 * 0.2866, msg.clone())?;
        Ok(msg)
    };
    match run() {
        Ok(m) => println!("[PASS] optional: released dataset check: {m}"),
        Err(m) => println!("[WARN] optional (non-blocking): released dataset check: {m}"),
    }
}

fn pipeline_fidelity() -> Outcome {
    // leakage: rows that no training window touches may change freely
    let series = gen_synthetic(600, 13, 3).map_err(|e| e.to_string())?;
    let l = 32;
    let w = make_windows(&series, l).map_err(|e| e.to_string())?;
    let split = chrono_split(w.len(), 0.7, 0.15).map_err(|e| e.to_string())?;
    let s1 = fit_scalers(&w, &split, 0, 1e-8).map_err(|e| e.to_string())?;
    let first_free = split.train.end + l;
    let mut v = series.values().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 50.0).expect("std");
    v.slice_mut(s![first_free.., ..]).mapv_inplace(|x| x + noise.sample(&mut rng));
    let mutated = KpiSeries::new(v, series.kpi_names().to_vec(), 0).map_err(|e| e.to_string())?;
    let w2 = make_windows(&mutated, l).map_err(|e| e.to_string())?;
    let s2 = fit_scalers(&w2, &split, 0, 1e-8).map_err(|e| e.to_string())?;
    check(s1 == s2, "scaler changed after mutating val/test rows")?;

    // early stopping returns the best epoch's parameters
    let mut cfg = LiqssConfig::default();
    cfg.latent_width = 8;
    cfg.tt_in_out_modes = vec![2, 2, 2];
    cfg.tt_head_in_modes = vec![2, 2, 2];
    cfg.state_dim = 8;
    let data = prepare(&series, cfg.lookback, 0.7, 0.15, 1e-8).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        max_epochs: 12,
        patience: 3,
        batch_size: 32,
        learning_rate: 2e-2,
        ..TrainConfig::default()
    };
    let r = fit(build_seeded(&cfg).map_err(|e| e.to_string())?, &data.train(), &data.val(), &tc)
        .map_err(|e| e.to_string())?;
    let again = evaluate_loss(&r.model, &data.val(), tc.batch_size).map_err(|e| e.to_string())?;
    check(again == r.best_val_loss, format!("returned model val loss {again} != recorded {}", r.best_val_loss))?;
    check(
        r.history.iter().any(|h| h.val_loss == r.best_val_loss),
        "best loss not among recorded epochs",
    )?;
    let min = r.history.iter().map(|h| h.val_loss).fold(f64::INFINITY, f64::min);
    check(r.best_val_loss <= min + MIN_DELTA, format!("best {} vs min {min}", r.best_val_loss))?;

    // checkpoint round trip
    let ckpt = Checkpoint {
        model: r.model.clone(),
        scaler: data.scaler.clone(),
        best_val_loss: r.best_val_loss,
        meta: vec![("target".into(), "rsrp".into())],
    };
    let bytes = encode_checkpoint(&ckpt);
    let back = decode_checkpoint(&bytes).map_err(|e| e.to_string())?;
    check(encode_checkpoint(&back) == bytes, "save-load-save bytes differ")?;
    let test = data.test();
    let p1 = ckpt.model.predict(test.inputs.view(), 64).map_err(|e| e.to_string())?;
    let p2 = back.model.predict(test.inputs.view(), 64).map_err(|e| e.to_string())?;
    check(p1 == p2, "predictions differ after round trip")?;
    Ok(format!(
        "scalers unchanged, best epoch val {:.6} re-evaluates exactly over {} epochs, checkpoint bit-exact",
        r.best_val_loss,
        r.history.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 parameter counts", param_counts),
        ("2 TT dense-oracle equivalence", tt_oracle),
        ("3 kernel simulation equivalence", kernel_oracle),
        ("4 discretization stability", stability),
        ("5 gradient correctness", gradient_check),
        ("6 causality", causality),
        ("7 linear scaling", linear_scaling),
        ("8 learnability", learnability),
        ("9 pipeline fidelity", pipeline_fidelity),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("[PASS] criterion {name}: {msg} ({secs:.1}s)"),
            Err(msg) => {
                failed += 1;
                println!("[FAIL] criterion {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    if only.is_empty() || only.iter().any(|o| o == "optional") {
        optional_dataset_check();
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
