//! Test-set evaluation in original units, baselines and skill scores.

use std::fmt;

use ndarray::{Array1, ArrayView1, Axis};

use crate::error::{LiqssError, Result};
use crate::model::LiqssModel;
use crate::telemetry::{inverse_scale_target, ScaledWindows, Scaler};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    pub r2: f64,
    pub skill_r: f64,
    pub skill_m: f64,
    pub n: usize,
    pub y_true: Array1<f64>,
    pub y_pred: Array1<f64>,
}

pub fn mse(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> f64 {
    let sse: f64 = y_true.iter().zip(y_pred.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    sse / y_true.len() as f64
}

pub fn mae(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> f64 {
    let sae: f64 = y_true.iter().zip(y_pred.iter()).map(|(a, b)| (a - b).abs()).sum();
    sae / y_true.len() as f64
}

/// `1 - SSE/SST` with SST taken around the mean of `y_true`. A constant
/// `y_true` gives 1 for a perfect fit and negative infinity otherwise.
pub fn r2_score(y_true: ArrayView1<f64>, y_pred: ArrayView1<f64>) -> f64 {
    let mean = y_true.mean().unwrap_or(0.0);
    let sst: f64 = y_true.iter().map(|y| (y - mean) * (y - mean)).sum();
    let sse: f64 = y_true.iter().zip(y_pred.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    if sst == 0.0 {
        return if sse == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - sse / sst
}

/// Last in-window value of the target KPI, un-standardized with the target
/// column's input statistics.
pub fn persistence_baseline(windows: &ScaledWindows, scaler: &Scaler, target_index: usize) -> Array1<f64> {
    let l = windows.inputs.len_of(Axis(1));
    let last = windows.inputs.index_axis(Axis(1), l - 1);
    let (mu, sigma) = (scaler.mu_x[target_index], scaler.sigma_x[target_index]);
    last.column(target_index).mapv(|v| v * sigma + mu)
}

/// Constant training-target mean.
pub fn mean_baseline(scaler: &Scaler, n: usize) -> Array1<f64> {
    Array1::from_elem(n, scaler.mu_y)
}

pub fn skill_scores(model_mse: f64, persistence_mse: f64, mean_mse: f64) -> Result<(f64, f64)> {
    if persistence_mse <= 0.0 {
        return Err(LiqssError::ZeroBaseline("persistence"));
    }
    if mean_mse <= 0.0 {
        return Err(LiqssError::ZeroBaseline("mean"));
    }
    Ok((1.0 - model_mse / persistence_mse, 1.0 - model_mse / mean_mse))
}

/// Report from predictions already in original units.
pub fn report_from_predictions(
    y_true: Array1<f64>,
    y_pred: Array1<f64>,
    persistence: ArrayView1<f64>,
    mean_pred: ArrayView1<f64>,
) -> Result<EvalReport> {
    if y_true.is_empty() {
        return Err(LiqssError::EmptyTestSet);
    }
    let m = mse(y_true.view(), y_pred.view());
    let (skill_r, skill_m) = skill_scores(m, mse(y_true.view(), persistence), mse(y_true.view(), mean_pred))?;
    Ok(EvalReport {
        mse: m,
        rmse: m.sqrt(),
        mae: mae(y_true.view(), y_pred.view()),
        r2: r2_score(y_true.view(), y_pred.view()),
        skill_r,
        skill_m,
        n: y_true.len(),
        y_true,
        y_pred,
    })
}

pub fn evaluate_test(
    model: &LiqssModel,
    test: &ScaledWindows,
    scaler: &Scaler,
    target_index: usize,
    batch: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(LiqssError::EmptyTestSet);
    }
    let pred = model.predict(test.inputs.view(), batch)?;
    let y_pred = inverse_scale_target(pred.view(), scaler);
    let y_true = inverse_scale_target(test.targets.view(), scaler);
    let persistence = persistence_baseline(test, scaler, target_index);
    let mean_pred = mean_baseline(scaler, test.len());
    report_from_predictions(y_true, y_pred, persistence.view(), mean_pred.view())
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "mse,rmse,mae,r2,skill_r,skill_m,n";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.mse, self.rmse, self.mae, self.r2, self.skill_r, self.skill_m, self.n
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn predictions_csv(&self) -> String {
        let mut out = String::from("index,y_true,y_pred\n");
        for (i, (t, p)) in self.y_true.iter().zip(self.y_pred.iter()).enumerate() {
            out.push_str(&format!("{i},{t},{p}\n"));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples   {}", self.n)?;
        writeln!(f, "mse       {:.6}", self.mse)?;
        writeln!(f, "rmse      {:.6}", self.rmse)?;
        writeln!(f, "mae       {:.6}", self.mae)?;
        writeln!(f, "r2        {:.6}", self.r2)?;
        writeln!(f, "skill_r   {:.6}", self.skill_r)?;
        write!(f, "skill_m   {:.6}", self.skill_m)
    }
}
