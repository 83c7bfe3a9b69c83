//! Full forecaster: TT input embedding, stacked state-space blocks, last-step
//! readout and TT head; parameter registry, counting and checkpoints.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, ArrayView3, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    block_tape, dropout, init_block, layer_norm_tape, visit_block, visit_block_mut, BlockParams,
    BlockShape, LayerNormParams, Mode,
};
use crate::config::{parse_kv_text, parse_list, parse_num};
use crate::error::{LiqssError, Result};
use crate::ssm::{build_legs_generator, HippoGenerator};
use crate::tape::{Tape, Var};
use crate::telemetry::Scaler;
use crate::tt::{tt_init, TtCores, TtModes};

/// Architecture hyperparameters. `Default` is the reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LiqssConfig {
    pub num_kpis: usize,
    pub lookback: usize,
    pub latent_width: usize,
    pub num_blocks: usize,
    pub state_dim: usize,
    pub mixture_components: usize,
    /// ChannelMix hidden width is `expansion * latent_width`.
    pub expansion: f64,
    pub dropout: f64,
    pub dt0: f64,
    pub dt_growth: f64,
    pub se_reduction: usize,
    pub tt_in_in_modes: Vec<usize>,
    pub tt_in_out_modes: Vec<usize>,
    pub tt_in_rank: usize,
    pub tt_head_in_modes: Vec<usize>,
    pub tt_head_out_modes: Vec<usize>,
    pub tt_head_rank: usize,
    pub seed: u64,
}

impl Default for LiqssConfig {
    fn default() -> Self {
        Self {
            num_kpis: 13,
            lookback: 32,
            latent_width: 64,
            num_blocks: 2,
            state_dim: 32,
            mixture_components: 2,
            expansion: 1.0,
            dropout: 0.1,
            dt0: 0.1,
            dt_growth: 1.5,
            se_reduction: 16,
            tt_in_in_modes: vec![1, 1, 13],
            tt_in_out_modes: vec![4, 4, 4],
            tt_in_rank: 4,
            tt_head_in_modes: vec![4, 4, 4],
            tt_head_out_modes: vec![1, 1, 1],
            tt_head_rank: 4,
            seed: 42,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl LiqssConfig {
    pub fn mix_hidden(&self) -> usize {
        (self.expansion * self.latent_width as f64).round() as usize
    }

    pub fn tt_in_modes(&self) -> Result<TtModes> {
        TtModes::uniform(self.tt_in_in_modes.clone(), self.tt_in_out_modes.clone(), self.tt_in_rank)
    }

    pub fn tt_head_modes(&self) -> Result<TtModes> {
        TtModes::uniform(self.tt_head_in_modes.clone(), self.tt_head_out_modes.clone(), self.tt_head_rank)
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            channels: self.latent_width,
            state_dim: self.state_dim,
            components: self.mixture_components,
            mix_hidden: self.mix_hidden(),
            se_reduction: self.se_reduction,
            dropout: self.dropout,
            dt0: self.dt0,
            dt_growth: self.dt_growth,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_kpis", self.num_kpis),
            ("lookback", self.lookback),
            ("latent_width", self.latent_width),
            ("num_blocks", self.num_blocks),
            ("state_dim", self.state_dim),
            ("mixture_components", self.mixture_components),
            ("se_reduction", self.se_reduction),
        ] {
            if v == 0 {
                return Err(LiqssError::Config(format!("{name} must be positive")));
            }
        }
        let hidden = self.expansion * self.latent_width as f64;
        if !(hidden >= 1.0 && (hidden - hidden.round()).abs() < 1e-9) {
            return Err(LiqssError::Config(format!(
                "expansion {} times latent width {} is not a positive integer",
                self.expansion, self.latent_width
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LiqssError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.dt0 > 0.0 && self.dt_growth > 0.0 && self.dt0.is_finite() && self.dt_growth.is_finite()) {
            return Err(LiqssError::Config("dt0 and dt_growth must be positive".into()));
        }
        let tin = self.tt_in_modes()?;
        let thd = self.tt_head_modes()?;
        let checks = [
            ("input TT in-mode product", tin.in_dim(), self.num_kpis),
            ("input TT out-mode product", tin.out_dim(), self.latent_width),
            ("head TT in-mode product", thd.in_dim(), self.latent_width),
            ("head TT out-mode product", thd.out_dim(), 1),
        ];
        for (what, got, expected) in checks {
            if got != expected {
                return Err(LiqssError::ModeMismatch(format!("{what} is {got}, expected {expected}")));
            }
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; inverse of [`LiqssConfig::set`].
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_kpis", self.num_kpis.to_string()),
            ("lookback", self.lookback.to_string()),
            ("latent_width", self.latent_width.to_string()),
            ("num_blocks", self.num_blocks.to_string()),
            ("state_dim", self.state_dim.to_string()),
            ("mixture_components", self.mixture_components.to_string()),
            ("expansion", self.expansion.to_string()),
            ("dropout", self.dropout.to_string()),
            ("dt0", self.dt0.to_string()),
            ("dt_growth", self.dt_growth.to_string()),
            ("se_reduction", self.se_reduction.to_string()),
            ("tt_in_in_modes", join(&self.tt_in_in_modes)),
            ("tt_in_out_modes", join(&self.tt_in_out_modes)),
            ("tt_in_rank", self.tt_in_rank.to_string()),
            ("tt_head_in_modes", join(&self.tt_head_in_modes)),
            ("tt_head_out_modes", join(&self.tt_head_out_modes)),
            ("tt_head_rank", self.tt_head_rank.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field by key. Returns `Ok(false)` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "num_kpis" => self.num_kpis = parse_num(key, value)?,
            "lookback" => self.lookback = parse_num(key, value)?,
            "latent_width" => self.latent_width = parse_num(key, value)?,
            "num_blocks" => self.num_blocks = parse_num(key, value)?,
            "state_dim" => self.state_dim = parse_num(key, value)?,
            "mixture_components" => self.mixture_components = parse_num(key, value)?,
            "expansion" => self.expansion = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "dt0" => self.dt0 = parse_num(key, value)?,
            "dt_growth" => self.dt_growth = parse_num(key, value)?,
            "se_reduction" => self.se_reduction = parse_num(key, value)?,
            "tt_in_in_modes" => self.tt_in_in_modes = parse_list(key, value)?,
            "tt_in_out_modes" => self.tt_in_out_modes = parse_list(key, value)?,
            "tt_in_rank" => self.tt_in_rank = parse_num(key, value)?,
            "tt_head_in_modes" => self.tt_head_in_modes = parse_list(key, value)?,
            "tt_head_out_modes" => self.tt_head_out_modes = parse_list(key, value)?,
            "tt_head_rank" => self.tt_head_rank = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiqssModel {
    pub config: LiqssConfig,
    pub tt_in: TtCores,
    pub blocks: Vec<BlockParams>,
    pub head_ln: LayerNormParams,
    pub head_tt: TtCores,
    /// Fixed generator buffer shared by every kernel component.
    pub generator: HippoGenerator,
}

pub fn build_model(config: &LiqssConfig, rng: &mut ChaCha8Rng) -> Result<LiqssModel> {
    config.validate()?;
    let tt_in = tt_init(&config.tt_in_modes()?, true, rng);
    let shape = config.block_shape();
    let blocks = (0..config.num_blocks)
        .map(|_| init_block(&shape, rng))
        .collect::<Result<Vec<_>>>()?;
    let head_tt = tt_init(&config.tt_head_modes()?, true, rng);
    Ok(LiqssModel {
        config: config.clone(),
        tt_in,
        blocks,
        head_ln: LayerNormParams::new(config.latent_width),
        head_tt,
        generator: build_legs_generator(config.state_dim),
    })
}

/// Builds with a generator seeded from `config.seed`.
pub fn build_seeded(config: &LiqssConfig) -> Result<LiqssModel> {
    build_model(config, &mut ChaCha8Rng::seed_from_u64(config.seed))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCount {
    pub mixture: usize,
    pub se: usize,
    pub ln1: usize,
    pub channel_mix: usize,
    pub ln2: usize,
}

impl BlockCount {
    pub fn total(&self) -> usize {
        self.mixture + self.se + self.ln1 + self.channel_mix + self.ln2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub tt_in: usize,
    pub blocks: Vec<BlockCount>,
    pub head_ln: usize,
    pub head_tt: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.tt_in + self.blocks.iter().map(BlockCount::total).sum::<usize>() + self.head_ln + self.head_tt
    }

    /// Rows of `(module, count)` for display.
    pub fn rows(&self) -> Vec<(String, usize)> {
        let mut rows = vec![("tt_in".to_string(), self.tt_in)];
        for (i, b) in self.blocks.iter().enumerate() {
            rows.push((format!("blocks.{i}.mixture"), b.mixture));
            rows.push((format!("blocks.{i}.se"), b.se));
            rows.push((format!("blocks.{i}.ln1"), b.ln1));
            rows.push((format!("blocks.{i}.channel_mix"), b.channel_mix));
            rows.push((format!("blocks.{i}.ln2"), b.ln2));
        }
        rows.push(("head_ln".to_string(), self.head_ln));
        rows.push(("head_tt".to_string(), self.head_tt));
        rows.push(("total".to_string(), self.total()));
        rows
    }
}

fn ln_count(p: &LayerNormParams) -> usize {
    p.gain.len() + p.bias.len()
}

impl LiqssModel {
    pub fn count_params(&self) -> ParamBreakdown {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockCount {
                mixture: b.components.iter().map(|c| c.param_count()).sum(),
                se: b.se.w1.len() + b.se.b1.len() + b.se.w2.len() + b.se.b2.len(),
                ln1: ln_count(&b.ln1),
                channel_mix: b.mix.w_up.len() + b.mix.b_up.len() + b.mix.w_down.len() + b.mix.b_down.len() + ln_count(&b.mix.ln),
                ln2: ln_count(&b.ln2),
            })
            .collect();
        ParamBreakdown {
            tt_in: self.tt_in.param_count(),
            blocks,
            head_ln: ln_count(&self.head_ln),
            head_tt: self.head_tt.param_count(),
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, a| n += a.len());
        n
    }

    /// Visits every trainable array in canonical order.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, ArrayViewD<f64>)) {
        visit_tt(&self.tt_in, "tt_in", f);
        for (i, b) in self.blocks.iter().enumerate() {
            visit_block(b, &format!("blocks.{i}"), f);
        }
        f("head_ln.gain".into(), self.head_ln.gain.view().into_dyn());
        f("head_ln.bias".into(), self.head_ln.bias.view().into_dyn());
        visit_tt(&self.head_tt, "head_tt", f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, ArrayViewMutD<f64>)) {
        visit_tt_mut(&mut self.tt_in, "tt_in", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_block_mut(b, &format!("blocks.{i}"), f);
        }
        f("head_ln.gain".into(), self.head_ln.gain.view_mut().into_dyn());
        f("head_ln.bias".into(), self.head_ln.bias.view_mut().into_dyn());
        visit_tt_mut(&mut self.head_tt, "head_tt", f);
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let (k, l) = (self.config.num_kpis, self.config.lookback);
        if dims.len() != 3 || dims[1] != l || dims[2] != k || dims[0] == 0 {
            return Err(LiqssError::ShapeMismatch(format!(
                "input windows {dims:?} do not match batch x {l} x {k}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass for windows `x: B x L x K`; the result has shape `[B]`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let dims = tape.value(x).shape().to_vec();
        self.check_input(&dims)?;
        let (b, l, k) = (dims[0], dims[1], dims[2]);
        let d = self.config.latent_width;
        let rows = tape.reshape(x, &[b * l, k]);
        let e = tape.tt("tt_in", &self.tt_in, rows)?;
        let mut e = tape.reshape(e, &[b, l, d]);
        let gen = Rc::new(self.generator.clone());
        for (i, block) in self.blocks.iter().enumerate() {
            e = block_tape(tape, &format!("blocks.{i}"), e, block, &gen, mode)?;
        }
        let h = tape.last_step(e);
        let h = layer_norm_tape(tape, "head_ln", h, &self.head_ln);
        let h = dropout(tape, h, self.config.dropout, mode);
        let y = tape.tt("head_tt", &self.head_tt, h)?;
        Ok(tape.reshape(y, &[b]))
    }

    /// Scaled-space predictions for `x: B x L x K`.
    pub fn forward(&self, x: ArrayView3<f64>, mode: &mut Mode<'_>) -> Result<Array1<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.to_owned().into_dyn());
        let y = self.forward_tape(&mut tape, xv, mode)?;
        Ok(tape.value(y).clone().into_dimensionality().expect("vector output"))
    }

    /// Evaluation-mode predictions computed in chunks of `batch` windows.
    pub fn predict(&self, x: ArrayView3<f64>, batch: usize) -> Result<Array1<f64>> {
        let n = x.shape()[0];
        let batch = batch.max(1);
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let y = self.forward(x.slice(ndarray::s![start..end, .., ..]), &mut Mode::Eval)?;
            out.extend(y.iter().copied());
            start = end;
        }
        Ok(Array1::from(out))
    }
}

fn visit_tt(tt: &TtCores, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<f64>)) {
    for (q, c) in tt.cores.iter().enumerate() {
        f(format!("{prefix}.core{q}"), c.view().into_dyn());
    }
    if let Some(b) = &tt.bias {
        f(format!("{prefix}.bias"), b.view().into_dyn());
    }
}

fn visit_tt_mut(tt: &mut TtCores, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<f64>)) {
    for (q, c) in tt.cores.iter_mut().enumerate() {
        f(format!("{prefix}.core{q}"), c.view_mut().into_dyn());
    }
    if let Some(b) = &mut tt.bias {
        f(format!("{prefix}.bias"), b.view_mut().into_dyn());
    }
}

const MAGIC: &[u8; 6] = b"LIQSS1";
const DTYPE_F64: u8 = 0;
pub const CHECKSUM: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// Everything persisted by a checkpoint. `meta` carries caller-defined
/// key/value pairs (run settings, KPI names) alongside the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: LiqssModel,
    pub scaler: Scaler,
    pub best_val_loss: f64,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn put_array(buf: &mut Vec<u8>, name: &str, a: ArrayViewD<f64>) {
    buf.extend((name.len() as u32).to_le_bytes());
    buf.extend(name.as_bytes());
    buf.push(DTYPE_F64);
    buf.extend((a.ndim() as u32).to_le_bytes());
    for &d in a.shape() {
        buf.extend((d as u64).to_le_bytes());
    }
    for &v in a.iter() {
        buf.extend(v.to_le_bytes());
    }
}

/// Serializes to the checkpoint byte layout.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut text = String::new();
    for (k, v) in ckpt.model.config.to_pairs() {
        let _ = writeln!(text, "{k}={v}");
    }
    let _ = writeln!(text, "best_val_loss={}", ckpt.best_val_loss);
    for (k, v) in &ckpt.meta {
        let _ = writeln!(text, "meta.{k}={v}");
    }

    let mut arrays: Vec<(String, ArrayD<f64>)> = Vec::new();
    ckpt.model.visit_params(&mut |name, a| arrays.push((name, a.to_owned())));
    let g = &ckpt.model.generator;
    arrays.push(("buffer.a_ct".into(), g.a_ct.clone().into_dyn()));
    arrays.push(("buffer.b_ref".into(), g.b_ref.clone().into_dyn()));
    let s = &ckpt.scaler;
    arrays.push(("scaler.mu_x".into(), s.mu_x.clone().into_dyn()));
    arrays.push(("scaler.sigma_x".into(), s.sigma_x.clone().into_dyn()));
    for (name, v) in [("scaler.mu_y", s.mu_y), ("scaler.sigma_y", s.sigma_y), ("scaler.epsilon", s.epsilon)] {
        arrays.push((name.into(), ArrayD::from_elem(IxDyn(&[1]), v)));
    }

    let mut buf = Vec::new();
    buf.extend(MAGIC);
    buf.extend((text.len() as u32).to_le_bytes());
    buf.extend(text.as_bytes());
    buf.extend((arrays.len() as u32).to_le_bytes());
    for (name, a) in &arrays {
        put_array(&mut buf, name, a.view());
    }
    let sum = CHECKSUM.checksum(&buf);
    buf.extend(sum.to_le_bytes());
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(LiqssError::CorruptCheckpoint(format!("truncated at byte {}", self.pos)));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn corrupt(msg: impl Into<String>) -> LiqssError {
    LiqssError::CorruptCheckpoint(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(MAGIC.len())?;
    if magic != MAGIC {
        if magic.starts_with(b"LIQSS") {
            return Err(LiqssError::VersionMismatch(String::from_utf8_lossy(magic).into_owned()));
        }
        return Err(corrupt("bad magic"));
    }
    let text_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| corrupt("config text is not UTF-8"))?;
    let count = r.u32()? as usize;
    let mut arrays: HashMap<String, ArrayD<f64>> = HashMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| corrupt("array name is not UTF-8"))?
            .to_string();
        if r.u8()? != DTYPE_F64 {
            return Err(corrupt(format!("unsupported dtype for {name}")));
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| corrupt("array size overflow"))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| corrupt("array size overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let a = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|_| corrupt("bad array shape"))?;
        if arrays.insert(name.clone(), a).is_some() {
            return Err(corrupt(format!("duplicate array {name}")));
        }
    }
    let body_end = r.pos;
    let stored = r.u64()?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after checksum"));
    }
    let computed = CHECKSUM.checksum(&bytes[..body_end]);
    if stored != computed {
        return Err(LiqssError::ChecksumMismatch { stored, computed });
    }

    let mut config = LiqssConfig::default();
    let mut best_val_loss = None;
    let mut meta = Vec::new();
    for (k, v) in parse_kv_text(text)? {
        if k == "best_val_loss" {
            best_val_loss = Some(parse_num::<f64>(&k, &v)?);
        } else if let Some(mk) = k.strip_prefix("meta.") {
            meta.push((mk.to_string(), v));
        } else if !config.set(&k, &v)? {
            return Err(corrupt(format!("unknown config key {k}")));
        }
    }
    let best_val_loss = best_val_loss.ok_or_else(|| corrupt("missing best_val_loss"))?;
    let mut model = build_model(&config, &mut ChaCha8Rng::seed_from_u64(0))?;

    let mut missing = None;
    model.visit_params_mut(&mut |name, mut dst| match arrays.remove(&name) {
        Some(src) if src.shape() == dst.shape() => dst.assign(&src),
        _ => {
            missing.get_or_insert(name);
        }
    });
    if let Some(name) = missing {
        return Err(corrupt(format!("array {name} missing or misshapen")));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<ArrayD<f64>> {
        match arrays.remove(name) {
            Some(a) if a.shape() == shape => Ok(a),
            _ => Err(corrupt(format!("array {name} missing or misshapen"))),
        }
    };
    let (n, k) = (config.state_dim, config.num_kpis);
    let a_ct: Array2<f64> = take("buffer.a_ct", &[n, n])?.into_dimensionality().expect("rank 2");
    let b_ref: Array1<f64> = take("buffer.b_ref", &[n])?.into_dimensionality().expect("rank 1");
    model.generator = HippoGenerator { a_ct, b_ref };
    let scaler = Scaler {
        mu_x: take("scaler.mu_x", &[k])?.into_dimensionality().expect("rank 1"),
        sigma_x: take("scaler.sigma_x", &[k])?.into_dimensionality().expect("rank 1"),
        mu_y: take("scaler.mu_y", &[1])?[0],
        sigma_y: take("scaler.sigma_y", &[1])?[0],
        epsilon: take("scaler.epsilon", &[1])?[0],
    };
    if let Some(extra) = arrays.keys().next() {
        return Err(corrupt(format!("unexpected array {extra}")));
    }
    Ok(Checkpoint {
        model,
        scaler,
        best_val_loss,
        meta,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)).map_err(|e| LiqssError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| LiqssError::io(path, e))?;
    decode_checkpoint(&bytes)
}
