//! KPI series ingestion, sliding windows, chronological splits and
//! train-only standardization.
//!
//! Windows are stride-1 and strictly one step ahead: window `n` covers rows
//! `n..n+L` and its label is row `n+L`. Splits are taken over window indices
//! in time order, and every statistic used for scaling comes from the
//! training slice alone.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{LiqssError, Result};

/// Default floor applied to every standard deviation.
pub const STD_EPSILON: f64 = 1e-8;

/// Multivariate KPI series, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct KpiSeries {
    values: Array2<f64>,
    kpi_names: Vec<String>,
    target_index: usize,
}

impl KpiSeries {
    pub fn new(values: Array2<f64>, kpi_names: Vec<String>, target_index: usize) -> Result<Self> {
        if kpi_names.len() != values.ncols() {
            return Err(LiqssError::DimensionMismatch {
                expected: values.ncols(),
                got: kpi_names.len(),
            });
        }
        if target_index >= kpi_names.len() {
            return Err(LiqssError::InvalidSize(format!(
                "target index {target_index} out of range for {} KPIs",
                kpi_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &kpi_names {
            if !seen.insert(name.as_str()) {
                return Err(LiqssError::DuplicateKpiName(name.clone()));
            }
        }
        for ((row, col), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(LiqssError::NonFiniteValue { row, col });
            }
        }
        Ok(Self {
            values,
            kpi_names,
            target_index,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn kpi_names(&self) -> &[String] {
        &self.kpi_names
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_name(&self) -> &str {
        &self.kpi_names[self.target_index]
    }

    /// Number of time steps.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn num_kpis(&self) -> usize {
        self.values.ncols()
    }

    /// Same data with a different target column.
    pub fn with_target(mut self, target_name: &str) -> Result<Self> {
        self.target_index = self
            .kpi_names
            .iter()
            .position(|n| n == target_name)
            .ok_or_else(|| LiqssError::TargetNotFound(target_name.to_string()))?;
        Ok(self)
    }
}

/// Reads a headered, comma-separated KPI file. Column order is feature order.
pub fn load_csv(path: impl AsRef<Path>, target_name: &str) -> Result<KpiSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| LiqssError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| LiqssError::Csv(e.to_string()))?
        .clone();
    if header.is_empty() || header.iter().all(|h| h.is_empty()) {
        return Err(LiqssError::MissingHeader);
    }
    let names: Vec<String> = header.iter().map(str::to_string).collect();
    let target_index = names
        .iter()
        .position(|n| n == target_name)
        .ok_or_else(|| LiqssError::TargetNotFound(target_name.to_string()))?;

    let k = names.len();
    let mut flat = Vec::new();
    let mut rows = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| LiqssError::Csv(e.to_string()))?;
        if record.len() != k {
            return Err(LiqssError::Csv(format!(
                "row {row} has {} cells, header has {k}",
                record.len()
            )));
        }
        for (col, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| LiqssError::NonNumeric {
                row,
                col,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(LiqssError::NonFiniteValue { row, col });
            }
            flat.push(v);
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, k), flat).expect("row-major buffer");
    KpiSeries::new(values, names, target_index)
}

/// Writes the series in the same format `load_csv` reads.
pub fn write_csv(series: &KpiSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => LiqssError::io(path, io),
        other => LiqssError::Csv(format!("{other:?}")),
    })?;
    let csv_err = |e: csv::Error| LiqssError::Csv(e.to_string());
    writer.write_record(series.kpi_names()).map_err(csv_err)?;
    for row in series.values().rows() {
        writer
            .write_record(row.iter().map(|v| v.to_string()))
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| LiqssError::io(path, e))
}

const SYNTH_BURN_IN: usize = 256;
const SYNTH_COUPLING: f64 = 0.2;

/// Deterministic multivariate test signal.
///
/// Each channel is a stable AR(2) process plus a sinusoidal trend, and also
/// receives `0.2` times the previous value of channel `k-1` (channel 0 reads
/// the last channel, so the coupling ring is closed). Channel 0 is the target.
pub fn gen_synthetic(t: usize, k: usize, seed: u64) -> Result<KpiSeries> {
    if t < 2 {
        return Err(LiqssError::TooShort { needed: 2, got: t });
    }
    if k == 0 {
        return Err(LiqssError::InvalidSize("need at least one KPI".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a1: Vec<f64> = (0..k).map(|c| 1.75 + 0.05 * (c % 3) as f64).collect();
    let a2 = -0.9;
    let amp: Vec<f64> = (0..k).map(|c| 4.0 + 0.5 * (c % 4) as f64).collect();
    let period: Vec<f64> = (0..k).map(|c| 48.0 + 11.0 * c as f64).collect();
    let phase: Vec<f64> = (0..k).map(|c| 0.7 * c as f64).collect();
    let level: Vec<f64> = (0..k)
        .map(|c| if c == 0 { -80.0 } else { 10.0 * c as f64 })
        .collect();

    let total = t + SYNTH_BURN_IN;
    let mut s_prev = vec![0.0; k];
    let mut s_prev2 = vec![0.0; k];
    let mut x_prev = vec![0.0; k];
    let mut out = Array2::zeros((t, k));
    for step in 0..total {
        let mut x_now = vec![0.0; k];
        for c in 0..k {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let s = a1[c] * s_prev[c] + a2 * s_prev2[c] + noise;
            s_prev2[c] = s_prev[c];
            s_prev[c] = s;
            let trend = amp[c] * (2.0 * PI * step as f64 / period[c] + phase[c]).sin();
            let upstream = x_prev[(c + k - 1) % k];
            x_now[c] = s + trend + SYNTH_COUPLING * upstream;
        }
        if step >= SYNTH_BURN_IN {
            for c in 0..k {
                out[[step - SYNTH_BURN_IN, c]] = x_now[c] + level[c];
            }
        }
        x_prev = x_now;
    }
    let names = (0..k)
        .map(|c| if c == 0 { "rsrp".to_string() } else { format!("kpi{c}") })
        .collect();
    KpiSeries::new(out, names, 0)
}

/// Stride-1 sliding windows with one-step-ahead labels (full KPI vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    /// `N x L x K`
    pub inputs: Array3<f64>,
    /// `N x K`, row `n` is the series at time `n + L`
    pub labels: Array2<f64>,
    pub lookback: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.inputs.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_windows(series: &KpiSeries, lookback: usize) -> Result<WindowSet> {
    if lookback == 0 {
        return Err(LiqssError::InvalidSize("lookback must be positive".into()));
    }
    let t = series.len();
    if t < lookback + 1 {
        return Err(LiqssError::TooShort {
            needed: lookback + 1,
            got: t,
        });
    }
    let n = t - lookback;
    let k = series.num_kpis();
    let values = series.values();
    let mut inputs = Array3::zeros((n, lookback, k));
    for w in 0..n {
        inputs
            .slice_mut(s![w, .., ..])
            .assign(&values.slice(s![w..w + lookback, ..]));
    }
    let labels = values.slice(s![lookback.., ..]).to_owned();
    Ok(WindowSet {
        inputs,
        labels,
        lookback,
    })
}

/// Contiguous, ordered train/val/test ranges over window indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn chrono_split(n: usize, train_ratio: f64, val_ratio: f64) -> Result<SplitIndices> {
    let ratios_ok = train_ratio > 0.0
        && val_ratio > 0.0
        && train_ratio < 1.0
        && val_ratio < 1.0
        && train_ratio + val_ratio < 1.0;
    if !ratios_ok {
        return Err(LiqssError::InvalidRatio {
            train: train_ratio,
            val: val_ratio,
        });
    }
    let n_tr = (train_ratio * n as f64).floor() as usize;
    let n_va = (val_ratio * n as f64).floor() as usize;
    if n < 3 || n_tr == 0 || n_va == 0 || n_tr + n_va >= n {
        return Err(LiqssError::EmptySplit { n });
    }
    Ok(SplitIndices {
        train: 0..n_tr,
        val: n_tr..n_tr + n_va,
        test: n_tr + n_va..n,
    })
}

/// Train-only standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mu_x: Array1<f64>,
    pub sigma_x: Array1<f64>,
    pub mu_y: f64,
    pub sigma_y: f64,
    pub epsilon: f64,
}

fn mean_and_pop_std<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    let mean = sum / count as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / count as f64).sqrt())
}

pub fn fit_scalers(
    windows: &WindowSet,
    split: &SplitIndices,
    target_index: usize,
    epsilon: f64,
) -> Result<Scaler> {
    if split.train.is_empty() || split.train.end > windows.len() {
        return Err(LiqssError::EmptySplit { n: windows.len() });
    }
    let k = windows.inputs.len_of(Axis(2));
    if target_index >= k {
        return Err(LiqssError::InvalidSize(format!(
            "target index {target_index} out of range for {k} KPIs"
        )));
    }
    let train_inputs = windows.inputs.slice(s![split.train.clone(), .., ..]);
    let mut mu_x = Array1::zeros(k);
    let mut sigma_x = Array1::zeros(k);
    for f in 0..k {
        let column = train_inputs.index_axis(Axis(2), f);
        let (m, sd) = mean_and_pop_std(column.iter());
        mu_x[f] = m;
        sigma_x[f] = sd.max(epsilon);
    }
    let train_targets = windows
        .labels
        .slice(s![split.train.clone(), target_index]);
    let (mu_y, sd_y) = mean_and_pop_std(train_targets.iter());
    Ok(Scaler {
        mu_x,
        sigma_x,
        mu_y,
        sigma_y: sd_y.max(epsilon),
        epsilon,
    })
}

/// Standardized inputs with the scalar target already selected.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledWindows {
    /// `N x L x K`
    pub inputs: Array3<f64>,
    /// `N`
    pub targets: Array1<f64>,
}

impl ScaledWindows {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Owned copy of the windows in `range`.
    pub fn slice(&self, range: Range<usize>) -> ScaledWindows {
        ScaledWindows {
            inputs: self.inputs.slice(s![range.clone(), .., ..]).to_owned(),
            targets: self.targets.slice(s![range]).to_owned(),
        }
    }

    /// Owned copy of the windows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ScaledWindows {
        ScaledWindows {
            inputs: self.inputs.select(Axis(0), indices),
            targets: self.targets.select(Axis(0), indices),
        }
    }
}

pub fn scale_inputs(inputs: &Array3<f64>, scaler: &Scaler) -> Array3<f64> {
    let mut out = inputs.clone();
    for mut row in out.lanes_mut(Axis(2)) {
        row -= &scaler.mu_x;
        row /= &scaler.sigma_x;
    }
    out
}

pub fn apply_scaling(windows: &WindowSet, scaler: &Scaler, target_index: usize) -> ScaledWindows {
    let targets = windows
        .labels
        .column(target_index)
        .mapv(|y| (y - scaler.mu_y) / scaler.sigma_y);
    ScaledWindows {
        inputs: scale_inputs(&windows.inputs, scaler),
        targets,
    }
}

pub fn inverse_scale_target(y_scaled: ArrayView1<f64>, scaler: &Scaler) -> Array1<f64> {
    y_scaled.mapv(|y| scaler.sigma_y * y + scaler.mu_y)
}

/// Everything the training loop needs: scaled windows, split and scalers.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub scaled: ScaledWindows,
    pub split: SplitIndices,
    pub scaler: Scaler,
    pub target_index: usize,
}

impl PreparedData {
    pub fn train(&self) -> ScaledWindows {
        self.scaled.slice(self.split.train.clone())
    }

    pub fn val(&self) -> ScaledWindows {
        self.scaled.slice(self.split.val.clone())
    }

    pub fn test(&self) -> ScaledWindows {
        self.scaled.slice(self.split.test.clone())
    }
}

/// Windows, splits, fits train-only scalers and applies them to every split.
pub fn prepare(
    series: &KpiSeries,
    lookback: usize,
    train_ratio: f64,
    val_ratio: f64,
    epsilon: f64,
) -> Result<PreparedData> {
    let windows = make_windows(series, lookback)?;
    let split = chrono_split(windows.len(), train_ratio, val_ratio)?;
    let scaler = fit_scalers(&windows, &split, series.target_index(), epsilon)?;
    let scaled = apply_scaling(&windows, &scaler, series.target_index());
    Ok(PreparedData {
        scaled,
        split,
        scaler,
        target_index: series.target_index(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn ramp(t: usize, k: usize) -> KpiSeries {
        let values = Array2::from_shape_fn((t, k), |(i, j)| (i * 10 + j) as f64);
        let names = (0..k).map(|j| format!("c{j}")).collect();
        KpiSeries::new(values, names, 0).unwrap()
    }

    #[test]
    fn csv_parses_small_file() {
        let f = write_tmp("a,b\n1,2\n3,4\n5,6\n");
        let s = load_csv(f.path(), "b").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.num_kpis(), 2);
        assert_eq!(s.target_index(), 1);
        assert_eq!(s.values()[[2, 0]], 5.0);
    }

    #[test]
    fn csv_error_paths() {
        let f = write_tmp("a,b\n1,2\n");
        assert!(matches!(load_csv(f.path(), "rsrp"), Err(LiqssError::TargetNotFound(_))));

        let f = write_tmp("a,b\n1,2\n3,NaN\n");
        assert!(matches!(
            load_csv(f.path(), "a"),
            Err(LiqssError::NonFiniteValue { row: 1, col: 1 })
        ));

        let f = write_tmp("a,b\n1,x\n");
        assert!(matches!(load_csv(f.path(), "a"), Err(LiqssError::NonNumeric { row: 0, col: 1, .. })));

        let f = write_tmp("");
        assert!(matches!(load_csv(f.path(), "a"), Err(LiqssError::MissingHeader)));

        assert!(matches!(load_csv("/nonexistent/x.csv", "a"), Err(LiqssError::Io { .. })));

        let f = write_tmp("a,a\n1,2\n");
        assert!(matches!(load_csv(f.path(), "a"), Err(LiqssError::DuplicateKpiName(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let s = gen_synthetic(50, 3, 9).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_csv(&s, f.path()).unwrap();
        let back = load_csv(f.path(), "rsrp").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic(100, 3, 42).unwrap();
        let b = gen_synthetic(100, 3, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic(100, 3, 43).unwrap());
        assert_eq!(a.target_index(), 0);
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(matches!(gen_synthetic(1, 3, 0), Err(LiqssError::TooShort { .. })));
        assert!(gen_synthetic(10, 0, 0).is_err());
    }

    #[test]
    fn synthetic_channels_have_positive_finite_variance() {
        let s = gen_synthetic(10_000, 4, 7).unwrap();
        for col in s.values().columns() {
            let (_, sd) = mean_and_pop_std(col.iter());
            assert!(sd.is_finite() && sd > 0.0, "std {sd}");
        }
    }

    #[test]
    fn window_counts_and_boundary() {
        let s = ramp(40, 2);
        assert_eq!(make_windows(&s, 32).unwrap().len(), 8);

        let s = ramp(33, 2);
        let w = make_windows(&s, 32).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w.inputs.slice(s![0, .., ..]), s.values().slice(s![0..32, ..]));
        assert_eq!(w.labels.row(0), s.values().row(32));

        assert!(matches!(make_windows(&ramp(32, 2), 32), Err(LiqssError::TooShort { .. })));
    }

    #[test]
    fn split_examples() {
        let sp = chrono_split(100, 0.70, 0.15).unwrap();
        assert_eq!((sp.train, sp.val, sp.test), (0..70, 70..85, 85..100));
        let sp = chrono_split(10, 0.70, 0.15).unwrap();
        assert_eq!((sp.train, sp.val, sp.test), (0..7, 7..8, 8..10));
        assert!(matches!(chrono_split(2, 0.70, 0.15), Err(LiqssError::EmptySplit { .. })));
        assert!(matches!(chrono_split(100, 0.9, 0.1), Err(LiqssError::InvalidRatio { .. })));
        assert!(matches!(chrono_split(100, 0.0, 0.1), Err(LiqssError::InvalidRatio { .. })));
    }

    fn windows_from(values: Array2<f64>, lookback: usize) -> WindowSet {
        let names = (0..values.ncols()).map(|j| format!("c{j}")).collect();
        make_windows(&KpiSeries::new(values, names, 0).unwrap(), lookback).unwrap()
    }

    #[test]
    fn constant_inputs_clamp_to_epsilon() {
        let w = windows_from(Array2::from_elem((20, 3), 4.0), 4);
        let sp = chrono_split(w.len(), 0.7, 0.15).unwrap();
        let sc = fit_scalers(&w, &sp, 0, STD_EPSILON).unwrap();
        assert!(sc.sigma_x.iter().all(|&s| s == STD_EPSILON));
        assert_eq!(sc.sigma_y, STD_EPSILON);
    }

    #[test]
    fn population_std_by_hand() {
        // One-row windows, training slice holds the values {1, 3}.
        let w = windows_from(array![[1.0], [3.0], [5.0], [7.0], [9.0]], 1);
        let sp = SplitIndices { train: 0..2, val: 2..3, test: 3..4 };
        let sc = fit_scalers(&w, &sp, 0, STD_EPSILON).unwrap();
        assert_eq!(sc.mu_x[0], 2.0);
        assert_eq!(sc.sigma_x[0], 1.0);
    }

    #[test]
    fn scalers_ignore_shifted_validation_data() {
        // Second half of the series shifts upward; scalers fitted on
        // train+val see the shift, train-only scalers do not.
        let values = Array2::from_shape_fn((200, 2), |(i, j)| {
            let base = ((i * 7 + j * 3) % 11) as f64;
            if i >= 120 { base + 50.0 } else { base }
        });
        let w = windows_from(values, 8);
        let sp = chrono_split(w.len(), 0.5, 0.3).unwrap();
        let train_only = fit_scalers(&w, &sp, 0, STD_EPSILON).unwrap();
        let widened = SplitIndices { train: 0..sp.val.end, val: sp.test.clone(), test: sp.test.clone() };
        let leaky = fit_scalers(&w, &widened, 0, STD_EPSILON).unwrap();
        assert!(leaky.mu_x[0] - train_only.mu_x[0] > 5.0);
        assert!(leaky.mu_y - train_only.mu_y > 5.0);
    }

    #[test]
    fn scaling_identities() {
        let w = windows_from(Array2::from_shape_fn((30, 2), |(i, j)| (i as f64).sin() * 3.0 + j as f64), 5);
        let sp = chrono_split(w.len(), 0.6, 0.2).unwrap();
        let sc = fit_scalers(&w, &sp, 1, STD_EPSILON).unwrap();

        let mut centered = w.clone();
        for mut row in centered.inputs.lanes_mut(Axis(2)) {
            row.assign(&sc.mu_x);
        }
        centered.labels.column_mut(1).fill(sc.mu_y + sc.sigma_y);
        let out = apply_scaling(&centered, &sc, 1);
        assert!(out.inputs.iter().all(|&v| v == 0.0));
        assert!(out.targets.iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let scaled = apply_scaling(&w, &sc, 1);
        let back = inverse_scale_target(scaled.targets.view(), &sc);
        for (b, y) in back.iter().zip(w.labels.column(1)) {
            assert!((b - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn inverse_scaling_examples() {
        let sc = |mu_y, sigma_y| Scaler {
            mu_x: Array1::zeros(1),
            sigma_x: Array1::ones(1),
            mu_y,
            sigma_y,
            epsilon: STD_EPSILON,
        };
        let y = array![0.0, 1.0];
        assert_eq!(inverse_scale_target(y.view(), &sc(-80.0, 5.0)), array![-80.0, -75.0]);
        assert_eq!(inverse_scale_target(array![-2.0].view(), &sc(0.0, 0.5)), array![-1.0]);
    }
}
