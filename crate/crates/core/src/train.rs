//! Training: loss and gradients through the tape, global-norm clipping,
//! AdamW, reduce-on-plateau learning rate and early stopping.

use ndarray::{ArrayD, ArrayView1, ArrayView3, ArrayViewMutD, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::Mode;
use crate::config::parse_num;
use crate::error::{LiqssError, Result};
use crate::model::LiqssModel;
use crate::tape::Tape;
use crate::telemetry::ScaledWindows;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            max_epochs: 120,
            patience: 30,
            batch_size: 256,
            seed: 42,
            plateau_factor: 0.5,
            plateau_patience: 2,
            min_lr: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "clip_norm" => self.clip_norm = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "plateau_factor" => self.plateau_factor = parse_num(key, value)?,
            "plateau_patience" => self.plateau_patience = parse_num(key, value)?,
            "min_lr" => self.min_lr = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("plateau_factor", self.plateau_factor.to_string()),
            ("plateau_patience", self.plateau_patience.to_string()),
            ("min_lr", self.min_lr.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LiqssError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return bad("max_epochs, patience and batch_size must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Batch MSE and its gradient for every trainable array, in the model's
/// canonical parameter order.
pub fn compute_loss_and_grads(
    model: &LiqssModel,
    x: ArrayView3<f64>,
    y: ArrayView1<f64>,
    mode: &mut Mode<'_>,
) -> Result<(f64, Vec<ArrayD<f64>>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.to_owned().into_dyn());
    let pred = model.forward_tape(&mut tape, xv, mode)?;
    let loss = tape.mse(pred, y.to_owned());
    let grads = tape.backward(loss)?;
    let mut out = Vec::new();
    let mut missing = None;
    model.visit_params(&mut |name, p| match grads.get(&name) {
        Some(g) => out.push(g.clone()),
        None => {
            missing.get_or_insert(name);
            out.push(ArrayD::zeros(p.raw_dim()));
        }
    });
    if let Some(name) = missing {
        return Err(LiqssError::ShapeMismatch(format!("no gradient recorded for {name}")));
    }
    Ok((tape.scalar(loss), out))
}

pub fn global_norm(grads: &[ArrayD<f64>]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `c_max`.
/// Returns the norm before clipping.
pub fn clip_grads(grads: &mut [ArrayD<f64>], c_max: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > c_max {
        let scale = c_max / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamwState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamwState {
    pub fn new(shapes: impl IntoIterator<Item = Vec<usize>>, lr: f64, weight_decay: f64) -> Self {
        let m: Vec<ArrayD<f64>> = shapes.into_iter().map(ArrayD::zeros).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &LiqssModel, lr: f64, weight_decay: f64) -> Self {
        let mut shapes = Vec::new();
        model.visit_params(&mut |_, p| shapes.push(p.shape().to_vec()));
        Self::new(shapes, lr, weight_decay)
    }

    fn update(&mut self, i: usize, mut p: ArrayViewMutD<f64>, g: &ArrayD<f64>) {
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        Zip::from(&mut p)
            .and(&mut self.m[i])
            .and(&mut self.v[i])
            .and(g)
            .for_each(|p, m, v, &g| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
    }

    /// One step over plain arrays.
    pub fn step_arrays(&mut self, params: &mut [ArrayD<f64>], grads: &[ArrayD<f64>]) {
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p.view_mut(), g);
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam step.
pub fn adamw_step(model: &mut LiqssModel, grads: &[ArrayD<f64>], state: &mut AdamwState) {
    state.step += 1;
    let mut i = 0;
    model.visit_params_mut(&mut |_, p| {
        state.update(i, p, &grads[i]);
        i += 1;
    });
}

/// Halves the learning rate once validation loss has failed to strictly
/// improve for more than `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct LrPlateau {
    pub best: f64,
    pub bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
}

impl LrPlateau {
    pub fn new(patience: usize, factor: f64, min_lr: f64) -> Self {
        Self {
            best: f64::INFINITY,
            bad_epochs: 0,
            patience,
            factor,
            min_lr,
        }
    }

    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

/// Improvement margin for accepting a new best validation loss.
pub const MIN_DELTA: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub patience: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Parameters from the best validation epoch.
    pub model: LiqssModel,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

/// Size-weighted mean squared error in evaluation mode.
pub fn evaluate_loss(model: &LiqssModel, data: &ScaledWindows, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(LiqssError::EmptyTestSet);
    }
    let pred = model.predict(data.inputs.view(), batch)?;
    let sse: f64 = pred.iter().zip(data.targets.iter()).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(sse / data.len() as f64)
}

pub fn fit(model: LiqssModel, train: &ScaledWindows, val: &ScaledWindows, cfg: &TrainConfig) -> Result<FitResult> {
    fit_with(model, train, val, cfg, &mut |_| {})
}

/// [`fit`] with a callback after every epoch.
pub fn fit_with(
    mut model: LiqssModel,
    train: &ScaledWindows,
    val: &ScaledWindows,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<FitResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(LiqssError::EmptySplit {
            n: train.len() + val.len(),
        });
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);

    let mut opt = AdamwState::for_model(&model, cfg.learning_rate, cfg.weight_decay);
    let mut plateau = LrPlateau::new(cfg.plateau_patience, cfg.plateau_factor, cfg.min_lr);
    let mut best = (model.clone(), f64::INFINITY);
    let mut patience = cfg.patience;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = train.select(idx);
            let mut mode = Mode::Train(&mut dropout_rng);
            let (loss, mut grads) = compute_loss_and_grads(&model, batch.inputs.view(), batch.targets.view(), &mut mode)?;
            if !loss.is_finite() {
                return Err(LiqssError::NonFiniteLoss { epoch, batch: bi });
            }
            clip_grads(&mut grads, cfg.clip_norm);
            adamw_step(&mut model, &grads, &mut opt);
            weighted += loss * idx.len() as f64;
        }
        let train_loss = weighted / train.len() as f64;
        let val_loss = evaluate_loss(&model, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(LiqssError::NonFiniteLoss { epoch, batch: 0 });
        }
        let lr_used = opt.lr;
        opt.lr = plateau.step(val_loss, opt.lr);
        if val_loss < best.1 - MIN_DELTA {
            best = (model.clone(), val_loss);
            patience = cfg.patience;
        } else {
            patience -= 1;
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: lr_used,
            patience,
        };
        on_epoch(&rec);
        history.push(rec);
        if patience == 0 {
            break;
        }
    }
    Ok(FitResult {
        model: best.0,
        best_val_loss: best.1,
        history,
    })
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,lr,patience\n");
    for r in history {
        out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr, r.patience));
    }
    out
}
