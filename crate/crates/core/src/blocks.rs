//! State-space block: depthwise causal convolution with the mixture kernel,
//! squeeze-excitation gating, dropout, layer norms and gated channel mixing.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, ArrayViewD, ArrayViewMut1, ArrayViewMutD, IxDyn};
use rand::{Rng, RngCore};
use rand_distr::{Bernoulli, Distribution, Uniform};

use crate::error::{LiqssError, Result};
use crate::ssm::{init_component, HippoGenerator, KernelComponentParams};
use crate::tape::{Tape, Unary, Var};

pub const LN_EPS: f64 = 1e-5;

/// Depthwise causal convolution: `Y[b, l, d] = sum_{t<=l} taps[d][t] E[b, l-t, d]`.
pub fn depthwise_causal_conv(e: ArrayView3<f64>, taps: ArrayView2<f64>) -> Result<Array3<f64>> {
    let (batch, len, ch) = e.dim();
    if taps.dim() != (ch, len) {
        return Err(LiqssError::ShapeMismatch(format!(
            "taps {:?} do not match input channels x length {:?}",
            taps.dim(),
            (ch, len)
        )));
    }
    let mut out = Array3::zeros((batch, len, ch));
    let mut t = Array2::zeros((len, len));
    for c in 0..ch {
        toeplitz_into(&mut t, taps.row(c));
        general_mat_mul(1.0, &e.slice(s![.., .., c]), &t, 0.0, &mut out.slice_mut(s![.., .., c]));
    }
    Ok(out)
}

/// `t[j, l] = k[l - j]` for `l >= j`, zero below. With a row of inputs `u`,
/// `u . t` is the causal convolution of `u` with `k`.
fn toeplitz_into(t: &mut Array2<f64>, k: ArrayView1<f64>) {
    let len = k.len();
    for j in 0..len {
        for l in j..len {
            t[[j, l]] = k[l - j];
        }
    }
}

/// Adjoint of [`depthwise_causal_conv`]: gradients for the input and the taps.
pub fn causal_conv_backward(
    e: ArrayView3<f64>,
    taps: ArrayView2<f64>,
    g: ArrayView3<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let (batch, len, ch) = e.dim();
    let mut ge = Array3::zeros((batch, len, ch));
    let mut gk = Array2::zeros((ch, len));
    let mut t = Array2::zeros((len, len));
    let mut m = Array2::zeros((len, len));
    for c in 0..ch {
        toeplitz_into(&mut t, taps.row(c));
        let gc = g.slice(s![.., .., c]);
        general_mat_mul(1.0, &gc, &t.t(), 0.0, &mut ge.slice_mut(s![.., .., c]));
        // m[l, j] = sum_b g[b, l] e[b, j]; tap tau collects the diagonal l - j = tau
        general_mat_mul(1.0, &gc.t(), &e.slice(s![.., .., c]), 0.0, &mut m);
        for tau in 0..len {
            gk[[c, tau]] = (tau..len).map(|l| m[[l, l - tau]]).sum();
        }
    }
    (ge, gk)
}

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn rows_view(x: &ArrayD<f64>) -> (ndarray::CowArray<'_, f64, IxDyn>, usize, usize) {
    let d = *x.shape().last().expect("at least one axis");
    let rows = x.len() / d.max(1);
    (x.as_standard_layout(), rows, d)
}

/// Layer norm over the last axis with population variance and `LN_EPS`.
pub fn layer_norm_rows(x: &ArrayD<f64>, gain: &ArrayD<f64>, bias: &ArrayD<f64>) -> ArrayD<f64> {
    let (xs, rows, d) = rows_view(x);
    let xs = xs.as_slice().expect("standard layout");
    let gain = gain.as_standard_layout();
    let gain = gain.as_slice().expect("gain vector");
    let bias = bias.as_standard_layout();
    let bias = bias.as_slice().expect("bias vector");
    let mut out = vec![0.0; xs.len()];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * rstd * gain[c] + bias[c];
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).expect("same shape")
}

/// Returns `(g_x, g_gain, g_bias)`.
pub fn layer_norm_backward(
    x: &ArrayD<f64>,
    gain: &ArrayD<f64>,
    g: &ArrayD<f64>,
) -> (ArrayD<f64>, Array1<f64>, Array1<f64>) {
    let (xs, rows, d) = rows_view(x);
    let xs = xs.as_slice().expect("standard layout");
    let gs = g.as_standard_layout();
    let gs = gs.as_slice().expect("standard layout");
    let gain = gain.as_standard_layout();
    let gain = gain.as_slice().expect("gain vector");
    let mut gx = vec![0.0; xs.len()];
    let mut g_gain = Array1::zeros(d);
    let mut g_bias = Array1::zeros(d);
    let mut xhat = vec![0.0; d];
    let mut gxhat = vec![0.0; d];
    for r in 0..rows {
        let row = &xs[r * d..(r + 1) * d];
        let grow = &gs[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let (mut m1, mut m2) = (0.0, 0.0);
        for c in 0..d {
            xhat[c] = (row[c] - mean) * rstd;
            gxhat[c] = grow[c] * gain[c];
            g_gain[c] += grow[c] * xhat[c];
            g_bias[c] += grow[c];
            m1 += gxhat[c];
            m2 += gxhat[c] * xhat[c];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for c in 0..d {
            gx[r * d + c] = rstd * (gxhat[c] - m1 - xhat[c] * m2);
        }
    }
    (
        ArrayD::from_shape_vec(x.raw_dim(), gx).expect("same shape"),
        g_gain,
        g_bias,
    )
}

/// Gain and bias of a layer norm over `D` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gain: Array1::ones(channels),
            bias: Array1::zeros(channels),
        }
    }
}

pub fn layer_norm(x: ArrayViewD<f64>, params: &LayerNormParams) -> ArrayD<f64> {
    layer_norm_rows(
        &x.to_owned(),
        &params.gain.clone().into_dyn(),
        &params.bias.clone().into_dyn(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeGateParams {
    /// `D x D_r`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `D_r x D`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

pub fn se_hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMixParams {
    /// `D x 2 D_m`; columns `[0, D_m)` are content, `[D_m, 2 D_m)` the gate
    pub w_up: Array2<f64>,
    pub b_up: Array1<f64>,
    /// `D_m x D`
    pub w_down: Array2<f64>,
    pub b_down: Array1<f64>,
    pub ln: LayerNormParams,
}

impl ChannelMixParams {
    pub fn hidden_width(&self) -> usize {
        self.w_down.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub components: Vec<KernelComponentParams>,
    pub se: SeGateParams,
    pub ln1: LayerNormParams,
    pub mix: ChannelMixParams,
    pub ln2: LayerNormParams,
    pub dropout: f64,
}

/// Shape-defining hyperparameters of one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockShape {
    pub channels: usize,
    pub state_dim: usize,
    pub components: usize,
    pub mix_hidden: usize,
    pub se_reduction: usize,
    pub dropout: f64,
    pub dt0: f64,
    pub dt_growth: f64,
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for both weight and bias.
fn init_linear<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> (Array2<f64>, Array1<f64>) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let w = Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng));
    let b = Array1::from_shape_simple_fn(fan_out, || dist.sample(rng));
    (w, b)
}

pub fn init_block<R: Rng + ?Sized>(shape: &BlockShape, rng: &mut R) -> Result<BlockParams> {
    let d = shape.channels;
    let components = (1..=shape.components)
        .map(|m| init_component(d, shape.state_dim, m, shape.dt0, shape.dt_growth, rng))
        .collect::<Result<Vec<_>>>()?;
    let dr = se_hidden_width(d, shape.se_reduction);
    let (w1, b1) = init_linear(d, dr, rng);
    let (w2, b2) = init_linear(dr, d, rng);
    let (w_up, b_up) = init_linear(d, 2 * shape.mix_hidden, rng);
    let (w_down, b_down) = init_linear(shape.mix_hidden, d, rng);
    Ok(BlockParams {
        components,
        se: SeGateParams { w1, b1, w2, b2 },
        ln1: LayerNormParams::new(d),
        mix: ChannelMixParams {
            w_up,
            b_up,
            w_down,
            b_down,
            ln: LayerNormParams::new(d),
        },
        ln2: LayerNormParams::new(d),
        dropout: shape.dropout,
    })
}

/// Training mode carries the dropout random stream; evaluation has none.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 - p;
            let bern = Bernoulli::new(keep).expect("probability in [0, 1]");
            let shape = tape.value(x).raw_dim();
            let mask = ArrayD::from_shape_simple_fn(shape, || if bern.sample(rng) { 1.0 / keep } else { 0.0 });
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

fn vec_param(tape: &mut Tape, name: String, v: &Array1<f64>) -> Var {
    tape.param(name, v.clone().into_dyn())
}

fn mat_param(tape: &mut Tape, name: String, m: &Array2<f64>) -> Var {
    tape.param(name, m.clone().into_dyn())
}

pub fn layer_norm_tape(tape: &mut Tape, prefix: &str, x: Var, p: &LayerNormParams) -> Var {
    let gain = vec_param(tape, format!("{prefix}.gain"), &p.gain);
    let bias = vec_param(tape, format!("{prefix}.bias"), &p.bias);
    tape.layer_norm(x, gain, bias)
}

/// `Y * sigmoid(relu(mean_t(Y) W1 + b1) W2 + b2)`, gains broadcast over time.
pub fn se_gate_tape(tape: &mut Tape, prefix: &str, y: Var, p: &SeGateParams) -> Var {
    let w1 = mat_param(tape, format!("{prefix}.w1"), &p.w1);
    let b1 = vec_param(tape, format!("{prefix}.b1"), &p.b1);
    let w2 = mat_param(tape, format!("{prefix}.w2"), &p.w2);
    let b2 = vec_param(tape, format!("{prefix}.b2"), &p.b2);
    let s = tape.mean_time(y);
    let h = tape.linear(s, w1, Some(b1));
    let h = tape.unary(h, Unary::Relu);
    let g = tape.linear(h, w2, Some(b2));
    let g = tape.unary(g, Unary::Sigmoid);
    tape.gate_time(y, g)
}

/// Per-step gated mixing with its own residual and layer norm:
/// `LN_m(Y1 + Drop((GELU(a) * sigmoid(q)) W_down + b_down))`.
pub fn channel_mix_tape(tape: &mut Tape, prefix: &str, y1: Var, p: &ChannelMixParams, dropout_p: f64, mode: &mut Mode<'_>) -> Var {
    let w_up = mat_param(tape, format!("{prefix}.w_up"), &p.w_up);
    let b_up = vec_param(tape, format!("{prefix}.b_up"), &p.b_up);
    let w_down = mat_param(tape, format!("{prefix}.w_down"), &p.w_down);
    let b_down = vec_param(tape, format!("{prefix}.b_down"), &p.b_down);
    let up = tape.linear(y1, w_up, Some(b_up));
    let gated = tape.gated_gelu(up);
    let mlp = tape.linear(gated, w_down, Some(b_down));
    let mlp = dropout(tape, mlp, dropout_p, mode);
    let sum = tape.add(y1, mlp);
    layer_norm_tape(tape, &format!("{prefix}.ln"), sum, &p.ln)
}

/// Full block on the tape; returns `E+` with the input's shape.
pub fn block_tape(
    tape: &mut Tape,
    prefix: &str,
    e: Var,
    p: &BlockParams,
    gen: &Rc<HippoGenerator>,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let len = tape.value(e).shape()[1];
    let mut taps: Option<Var> = None;
    for (m, comp) in p.components.iter().enumerate() {
        let t = tape.ssm_taps(&format!("{prefix}.kernel{m}"), comp, gen, len)?;
        taps = Some(match taps {
            Some(acc) => tape.add(acc, t),
            None => t,
        });
    }
    let taps = taps.ok_or_else(|| LiqssError::InvalidSize("block has no kernel components".into()))?;
    let y = tape.causal_conv(e, taps)?;
    let y = se_gate_tape(tape, &format!("{prefix}.se"), y, &p.se);
    let y = dropout(tape, y, p.dropout, mode);
    let res = tape.add(e, y);
    let y1 = layer_norm_tape(tape, &format!("{prefix}.ln1"), res, &p.ln1);
    let z = channel_mix_tape(tape, &format!("{prefix}.mix"), y1, &p.mix, p.dropout, mode);
    let res = tape.add(y1, z);
    Ok(layer_norm_tape(tape, &format!("{prefix}.ln2"), res, &p.ln2))
}

pub fn se_gate(y: ArrayView3<f64>, params: &SeGateParams) -> Array3<f64> {
    let mut tape = Tape::new();
    let yv = tape.constant(y.to_owned().into_dyn());
    let out = se_gate_tape(&mut tape, "se", yv, params);
    into3(tape.value(out))
}

pub fn channel_mix(y1: ArrayView3<f64>, params: &ChannelMixParams, dropout_p: f64, mode: &mut Mode<'_>) -> Array3<f64> {
    let mut tape = Tape::new();
    let yv = tape.constant(y1.to_owned().into_dyn());
    let out = channel_mix_tape(&mut tape, "mix", yv, params, dropout_p, mode);
    into3(tape.value(out))
}

pub fn block_forward(
    e: ArrayView3<f64>,
    params: &BlockParams,
    gen: &HippoGenerator,
    mode: &mut Mode<'_>,
) -> Result<Array3<f64>> {
    let mut tape = Tape::new();
    let ev = tape.constant(e.to_owned().into_dyn());
    let gen = Rc::new(gen.clone());
    let out = block_tape(&mut tape, "block", ev, params, &gen, mode)?;
    Ok(into3(tape.value(out)))
}

fn into3(a: &ArrayD<f64>) -> Array3<f64> {
    a.clone().into_dimensionality().expect("rank-3 output")
}

/// Visits every learned array of a block in canonical order.
pub fn visit_block(p: &BlockParams, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<f64>)) {
    for (m, comp) in p.components.iter().enumerate() {
        let k = format!("{prefix}.kernel{m}");
        f(format!("{k}.b"), comp.b.view().into_dyn());
        f(format!("{k}.c"), comp.c.view().into_dyn());
        f(format!("{k}.d_skip"), comp.d_skip.view().into_dyn());
        f(format!("{k}.log_dt"), ndarray::aview1(std::slice::from_ref(&comp.log_dt)).into_dyn());
    }
    f(format!("{prefix}.se.w1"), p.se.w1.view().into_dyn());
    f(format!("{prefix}.se.b1"), p.se.b1.view().into_dyn());
    f(format!("{prefix}.se.w2"), p.se.w2.view().into_dyn());
    f(format!("{prefix}.se.b2"), p.se.b2.view().into_dyn());
    f(format!("{prefix}.ln1.gain"), p.ln1.gain.view().into_dyn());
    f(format!("{prefix}.ln1.bias"), p.ln1.bias.view().into_dyn());
    f(format!("{prefix}.mix.w_up"), p.mix.w_up.view().into_dyn());
    f(format!("{prefix}.mix.b_up"), p.mix.b_up.view().into_dyn());
    f(format!("{prefix}.mix.w_down"), p.mix.w_down.view().into_dyn());
    f(format!("{prefix}.mix.b_down"), p.mix.b_down.view().into_dyn());
    f(format!("{prefix}.mix.ln.gain"), p.mix.ln.gain.view().into_dyn());
    f(format!("{prefix}.mix.ln.bias"), p.mix.ln.bias.view().into_dyn());
    f(format!("{prefix}.ln2.gain"), p.ln2.gain.view().into_dyn());
    f(format!("{prefix}.ln2.bias"), p.ln2.bias.view().into_dyn());
}

pub fn visit_block_mut(p: &mut BlockParams, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<f64>)) {
    for (m, comp) in p.components.iter_mut().enumerate() {
        let k = format!("{prefix}.kernel{m}");
        f(format!("{k}.b"), comp.b.view_mut().into_dyn());
        f(format!("{k}.c"), comp.c.view_mut().into_dyn());
        f(format!("{k}.d_skip"), comp.d_skip.view_mut().into_dyn());
        f(format!("{k}.log_dt"), ArrayViewMut1::from(std::slice::from_mut(&mut comp.log_dt)).into_dyn());
    }
    f(format!("{prefix}.se.w1"), p.se.w1.view_mut().into_dyn());
    f(format!("{prefix}.se.b1"), p.se.b1.view_mut().into_dyn());
    f(format!("{prefix}.se.w2"), p.se.w2.view_mut().into_dyn());
    f(format!("{prefix}.se.b2"), p.se.b2.view_mut().into_dyn());
    f(format!("{prefix}.ln1.gain"), p.ln1.gain.view_mut().into_dyn());
    f(format!("{prefix}.ln1.bias"), p.ln1.bias.view_mut().into_dyn());
    f(format!("{prefix}.mix.w_up"), p.mix.w_up.view_mut().into_dyn());
    f(format!("{prefix}.mix.b_up"), p.mix.b_up.view_mut().into_dyn());
    f(format!("{prefix}.mix.w_down"), p.mix.w_down.view_mut().into_dyn());
    f(format!("{prefix}.mix.b_down"), p.mix.b_down.view_mut().into_dyn());
    f(format!("{prefix}.mix.ln.gain"), p.mix.ln.gain.view_mut().into_dyn());
    f(format!("{prefix}.mix.ln.bias"), p.mix.ln.bias.view_mut().into_dyn());
    f(format!("{prefix}.ln2.gain"), p.ln2.gain.view_mut().into_dyn());
    f(format!("{prefix}.ln2.bias"), p.ln2.bias.view_mut().into_dyn());
}
