//! Per-example timing and peak-memory harness over a range of lookbacks.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::blocks::Mode;
use crate::error::Result;
use crate::model::{build_seeded, LiqssConfig};
use crate::train::{adamw_step, clip_grads, compute_loss_and_grads, AdamwState, TrainConfig};

/// Source of a high-water mark for heap usage.
pub trait MemoryProbe {
    fn reset(&self);
    fn peak(&self) -> usize;
}

/// Counting allocator. Install with `#[global_allocator]` to make
/// [`MemoryProbe`] readings meaningful.
pub struct PeakAlloc {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl PeakAlloc {
    pub const fn new() -> Self {
        Self {
            current: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn current(&self) -> usize {
        self.current.load(Ordering::Relaxed)
    }
}

impl Default for PeakAlloc {
    fn default() -> Self {
        Self::new()
    }
}

unsafe impl GlobalAlloc for PeakAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = self.current.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            self.peak.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        self.current.fetch_sub(layout.size(), Ordering::Relaxed);
    }
}

impl MemoryProbe for PeakAlloc {
    fn reset(&self) {
        self.peak.store(self.current.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    fn peak(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub model: LiqssConfig,
    pub lookbacks: Vec<usize>,
    pub batch: usize,
    pub warmup: usize,
    pub reps: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: LiqssConfig::default(),
            lookbacks: vec![8, 16, 32, 64],
            batch: 32,
            warmup: 20,
            reps: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub lookback: usize,
    pub train_s_per_ex: f64,
    pub train_std: f64,
    pub infer_s_per_ex: f64,
    pub infer_std: f64,
    /// Heap high-water mark during the measured region; 0 without a probe.
    pub peak_mem_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub warmup: usize,
    pub reps: usize,
    pub batch: usize,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "L,train_s_per_ex,train_std,infer_s_per_ex,infer_std,peak_mem_bytes";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.lookback, r.train_s_per_ex, r.train_std, r.infer_s_per_ex, r.infer_std, r.peak_mem_bytes
            ));
        }
        out
    }

    pub fn lookbacks(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.lookback as f64).collect()
    }

    pub fn train_times(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.train_s_per_ex).collect()
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Stops glibc from returning freed arenas to the OS between steps, which
/// otherwise shows up as page faults on every large tape allocation.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn keep_heap_resident() {
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn keep_heap_resident() {}

/// Times one training step (forward, loss, backward, clip, update) and one
/// inference pass per lookback, reported per example.
pub fn run_bench(cfg: &BenchConfig, probe: Option<&dyn MemoryProbe>) -> Result<BenchReport> {
    keep_heap_resident();
    let train_cfg = TrainConfig::default();
    let mut rows = Vec::with_capacity(cfg.lookbacks.len());
    for &l in &cfg.lookbacks {
        let mut mc = cfg.model.clone();
        mc.lookback = l;
        let mut model = build_seeded(&mc)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
        let x = Array3::from_shape_simple_fn((cfg.batch, l, mc.num_kpis), || StandardNormal.sample(&mut rng));
        let y = ndarray::Array1::from_shape_simple_fn(cfg.batch, || StandardNormal.sample(&mut rng));
        let mut opt = AdamwState::for_model(&model, train_cfg.learning_rate, train_cfg.weight_decay);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(mc.seed);

        let mut train_step = |model: &mut crate::model::LiqssModel| -> Result<()> {
            let (_, mut g) = compute_loss_and_grads(model, x.view(), y.view(), &mut Mode::Train(&mut drop_rng))?;
            clip_grads(&mut g, train_cfg.clip_norm);
            adamw_step(model, &g, &mut opt);
            Ok(())
        };
        for _ in 0..cfg.warmup {
            train_step(&mut model)?;
            model.forward(x.view(), &mut Mode::Eval)?;
        }
        if let Some(p) = probe {
            p.reset();
        }
        let per_ex = cfg.batch as f64;
        let mut train_t = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let t0 = Instant::now();
            train_step(&mut model)?;
            train_t.push(t0.elapsed().as_secs_f64() / per_ex);
        }
        let mut infer_t = Vec::with_capacity(cfg.reps);
        for _ in 0..cfg.reps {
            let t0 = Instant::now();
            std::hint::black_box(model.forward(x.view(), &mut Mode::Eval)?);
            infer_t.push(t0.elapsed().as_secs_f64() / per_ex);
        }
        let peak = probe.map(|p| p.peak()).unwrap_or(0);
        let (tm, ts) = mean_std(&train_t);
        let (im, is) = mean_std(&infer_t);
        rows.push(BenchRow {
            lookback: l,
            train_s_per_ex: tm,
            train_std: ts,
            infer_s_per_ex: im,
            infer_std: is,
            peak_mem_bytes: peak,
        });
    }
    Ok(BenchReport {
        rows,
        warmup: cfg.warmup,
        reps: cfg.reps,
        batch: cfg.batch,
    })
}

/// Least-squares fit of `y` on the given basis columns; returns R^2.
/// An empty basis is the intercept-only (constant) model.
pub fn fit_r2(x: &[f64], y: &[f64], basis: &[fn(f64) -> f64]) -> f64 {
    let n = y.len();
    let p = basis.len() + 1;
    let row = |i: usize| -> Vec<f64> {
        let mut r = vec![1.0];
        r.extend(basis.iter().map(|f| f(x[i])));
        r
    };
    let mut ata = ndarray::Array2::<f64>::zeros((p, p));
    let mut aty = ndarray::Array1::<f64>::zeros(p);
    for i in 0..n {
        let r = row(i);
        for a in 0..p {
            aty[a] += r[a] * y[i];
            for b in 0..p {
                ata[[a, b]] += r[a] * r[b];
            }
        }
    }
    let coef = solve_small(ata, aty);
    let mean = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let sse: f64 = (0..n)
        .map(|i| {
            let pred: f64 = row(i).iter().zip(coef.iter()).map(|(a, c)| a * c).sum();
            (y[i] - pred) * (y[i] - pred)
        })
        .sum();
    if sst == 0.0 {
        return 1.0;
    }
    1.0 - sse / sst
}

/// Gaussian elimination with partial pivoting for tiny dense systems.
fn solve_small(mut a: ndarray::Array2<f64>, mut b: ndarray::Array1<f64>) -> ndarray::Array1<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))
            .expect("non-empty");
        if piv != col {
            for k in 0..n {
                a.swap([col, k], [piv, k]);
            }
            b.swap(col, piv);
        }
        let d = a[[col, col]];
        if d == 0.0 {
            continue;
        }
        for r in col + 1..n {
            let f = a[[r, col]] / d;
            for k in col..n {
                a[[r, k]] -= f * a[[col, k]];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = ndarray::Array1::zeros(n);
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[[r, k]] * x[k]).sum();
        x[r] = if a[[r, r]] == 0.0 { 0.0 } else { (b[r] - s) / a[[r, r]] };
    }
    x
}

/// R^2 of the constant, linear (`a + bL`) and quadratic (`a + cL^2`) fits.
pub fn scaling_fits(lookbacks: &[f64], times: &[f64]) -> (f64, f64, f64) {
    (
        fit_r2(lookbacks, times, &[]),
        fit_r2(lookbacks, times, &[|l| l]),
        fit_r2(lookbacks, times, &[|l| l * l]),
    )
}
