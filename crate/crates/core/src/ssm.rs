//! HiPPO-LegS state-space kernels.
//!
//! Each mixture component owns per-channel `B`, `C`, a skip term and a
//! learned log time step. The continuous generator is fixed; it is
//! discretized with the bilinear transform and unrolled into `L` causal
//! convolution taps per channel.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LiqssError, Result};

/// Added to `softplus(log_dt)` so the step stays strictly positive.
pub const DT_FLOOR: f64 = 1e-6;

/// Negated LegS generator and its reference input vector (fixed buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct HippoGenerator {
    pub a_ct: Array2<f64>,
    pub b_ref: Array1<f64>,
}

impl HippoGenerator {
    pub fn state_dim(&self) -> usize {
        self.b_ref.len()
    }
}

pub fn build_legs_generator(state_dim: usize) -> HippoGenerator {
    let a_ct = Array2::from_shape_fn((state_dim, state_dim), |(n, k)| {
        if n > k {
            -((2 * n + 1) as f64).sqrt() * ((2 * k + 1) as f64).sqrt()
        } else if n == k {
            -((n + 1) as f64)
        } else {
            0.0
        }
    });
    let b_ref = Array1::from_shape_fn(state_dim, |n| ((2 * n + 1) as f64).sqrt());
    HippoGenerator { a_ct, b_ref }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dt_from_log(log_dt: f64) -> f64 {
    softplus(log_dt) + DT_FLOOR
}

/// Log-step whose [`dt_from_log`] equals `dt0 * growth^(component - 1)`
/// (`component` is 1-based).
pub fn init_log_dt(component: usize, dt0: f64, growth: f64) -> Result<f64> {
    let exponent = component.saturating_sub(1) as i32;
    let target = dt0 * growth.powi(exponent);
    if !(target > DT_FLOOR) || !target.is_finite() {
        return Err(LiqssError::BelowFloor(target));
    }
    Ok((target - DT_FLOOR).exp_m1().ln())
}

/// Solves `lhs * X = rhs` for lower-triangular `lhs`.
pub fn solve_lower(lhs: ArrayView2<f64>, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = lhs.nrows();
    let mut x = rhs.to_owned();
    for i in 0..n {
        let pivot = lhs[[i, i]];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(LiqssError::SingularMatrix(i));
        }
        for k in 0..i {
            let l = lhs[[i, k]];
            if l != 0.0 {
                let (done, mut rest) = x.view_mut().split_at(Axis(0), i);
                rest.row_mut(0).scaled_add(-l, &done.row(k));
            }
        }
        x.row_mut(i).mapv_inplace(|v| v / pivot);
    }
    Ok(x)
}

/// Solves `lhs^T * X = rhs` for lower-triangular `lhs` (back substitution).
pub fn solve_lower_transposed(lhs: ArrayView2<f64>, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = lhs.nrows();
    let mut x = rhs.to_owned();
    for i in (0..n).rev() {
        let pivot = lhs[[i, i]];
        if pivot == 0.0 || !pivot.is_finite() {
            return Err(LiqssError::SingularMatrix(i));
        }
        for k in i + 1..n {
            let l = lhs[[k, i]];
            if l != 0.0 {
                let (mut head, tail) = x.view_mut().split_at(Axis(0), i + 1);
                head.row_mut(i).scaled_add(-l, &tail.row(k - i - 1));
            }
        }
        x.row_mut(i).mapv_inplace(|v| v / pivot);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discretized {
    pub a_bar: Array2<f64>,
    /// `D x N_s`
    pub b_bar: Array2<f64>,
    pub lhs: Array2<f64>,
}

/// Bilinear transform: `A = (I - dt/2 A_ct)^{-1} (I + dt/2 A_ct)` and
/// `B = solve(lhs, dt B^T)^T`.
pub fn discretize_tustin(gen: &HippoGenerator, b: ArrayView2<f64>, dt: f64) -> Result<Discretized> {
    let n = gen.state_dim();
    if b.ncols() != n {
        return Err(LiqssError::DimensionMismatch {
            expected: n,
            got: b.ncols(),
        });
    }
    let eye = Array2::<f64>::eye(n);
    let half = 0.5 * dt;
    let lhs = &eye - &(&gen.a_ct * half);
    let rhs = &eye + &(&gen.a_ct * half);
    let a_bar = solve_lower(lhs.view(), rhs.view())?;
    let b_bar = solve_lower(lhs.view(), (&b.t() * dt).view())?.reversed_axes();
    Ok(Discretized { a_bar, b_bar, lhs })
}

/// Learned parameters of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelComponentParams {
    /// `D x N_s`
    pub b: Array2<f64>,
    /// `D x N_s`
    pub c: Array2<f64>,
    /// `D`
    pub d_skip: Array1<f64>,
    pub log_dt: f64,
}

/// `B`, `C` drawn from `N(0, 1/N_s)`, skip set to one, step from the
/// geometric schedule.
pub fn init_component<R: Rng + ?Sized>(
    channels: usize,
    state_dim: usize,
    component: usize,
    dt0: f64,
    growth: f64,
    rng: &mut R,
) -> Result<KernelComponentParams> {
    let normal = Normal::new(0.0, 1.0 / (state_dim as f64).sqrt()).expect("finite std");
    let b = Array2::from_shape_simple_fn((channels, state_dim), || normal.sample(rng));
    let c = Array2::from_shape_simple_fn((channels, state_dim), || normal.sample(rng));
    Ok(KernelComponentParams {
        b,
        c,
        d_skip: Array1::ones(channels),
        log_dt: init_log_dt(component, dt0, growth)?,
    })
}

impl KernelComponentParams {
    pub fn channels(&self) -> usize {
        self.d_skip.len()
    }

    pub fn param_count(&self) -> usize {
        self.b.len() + self.c.len() + self.d_skip.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelComponentGrads {
    pub b: Array2<f64>,
    pub c: Array2<f64>,
    pub d_skip: Array1<f64>,
    pub log_dt: f64,
}

/// Intermediate values of a tap computation, kept for the reverse pass.
struct TapTrace {
    dt: f64,
    disc: Discretized,
    /// state before each tap, `L` entries of `D x N_s`
    states: Vec<Array2<f64>>,
}

fn taps_with_trace(
    params: &KernelComponentParams,
    gen: &HippoGenerator,
    len: usize,
) -> Result<(Array2<f64>, TapTrace)> {
    check_component(params, gen)?;
    let dt = dt_from_log(params.log_dt);
    let disc = discretize_tustin(gen, params.b.view(), dt)?;
    let channels = params.channels();
    let mut taps = Array2::zeros((channels, len));
    let mut states = Vec::with_capacity(len);
    let a_t = disc.a_bar.t();
    let mut x = disc.b_bar.clone();
    for tau in 0..len {
        let k = (&params.c * &x).sum_axis(Axis(1));
        taps.column_mut(tau).assign(&k);
        let next = x.dot(&a_t);
        states.push(std::mem::replace(&mut x, next));
    }
    if len > 0 {
        let mut first = taps.column_mut(0);
        first += &params.d_skip;
    }
    Ok((taps, TapTrace { dt, disc, states }))
}

fn check_component(params: &KernelComponentParams, gen: &HippoGenerator) -> Result<()> {
    let (d, n) = (params.channels(), gen.state_dim());
    for m in [&params.b, &params.c] {
        if m.dim() != (d, n) {
            return Err(LiqssError::ShapeMismatch(format!(
                "component matrix is {:?}, expected {:?}",
                m.dim(),
                (d, n)
            )));
        }
    }
    Ok(())
}

/// `D x L` taps of one component: `k[d][t] = c_d . (A^t b_d)`, with the
/// skip term added at lag 0.
pub fn kernel_taps(params: &KernelComponentParams, gen: &HippoGenerator, len: usize) -> Result<Array2<f64>> {
    Ok(taps_with_trace(params, gen, len)?.0)
}

/// Reverse pass of [`kernel_taps`] for upstream gradient `g_taps` (`D x L`).
pub fn kernel_taps_backward(
    params: &KernelComponentParams,
    gen: &HippoGenerator,
    g_taps: ArrayView2<f64>,
) -> Result<KernelComponentGrads> {
    let len = g_taps.ncols();
    let (_, trace) = taps_with_trace(params, gen, len)?;
    let TapTrace { dt, disc, states } = trace;
    let (channels, n) = params.c.dim();

    let mut g_c = Array2::zeros((channels, n));
    let mut g_a_bar = Array2::<f64>::zeros((n, n));
    // gradient w.r.t. the state feeding tap `tau`
    let mut g_x = Array2::<f64>::zeros((channels, n));
    for tau in (0..len).rev() {
        let g_k = g_taps.column(tau);
        let g_k_col = g_k.insert_axis(Axis(1));
        Zip::from(&mut g_c)
            .and(&states[tau])
            .and_broadcast(&g_k_col)
            .for_each(|gc, &x, &g| *gc += g * x);
        Zip::from(&mut g_x)
            .and(&params.c)
            .and_broadcast(&g_k_col)
            .for_each(|gx, &c, &g| *gx += g * c);
        if tau > 0 {
            // states[tau] = states[tau-1] * A^T
            g_a_bar += &g_x.t().dot(&states[tau - 1]);
            g_x = g_x.dot(&disc.a_bar);
        }
    }
    let g_b_bar = g_x;

    // B_bar^T = lhs^{-1} (dt B^T)
    let g_y = g_b_bar.t();
    let g_r = solve_lower_transposed(disc.lhs.view(), g_y)?;
    let y = disc.b_bar.t();
    let mut g_lhs = -g_r.dot(&y.t());
    let g_b = g_r.t().mapv(|v| v * dt);
    let mut g_dt = (&g_r.t() * &params.b).sum();

    // A_bar = lhs^{-1} rhs
    let g_rhs = solve_lower_transposed(disc.lhs.view(), g_a_bar.view())?;
    g_lhs -= &g_rhs.dot(&disc.a_bar.t());
    g_dt += -0.5 * (&g_lhs * &gen.a_ct).sum() + 0.5 * (&g_rhs * &gen.a_ct).sum();

    Ok(KernelComponentGrads {
        b: g_b,
        c: g_c,
        d_skip: g_taps.column(0).to_owned(),
        log_dt: g_dt * sigmoid(params.log_dt),
    })
}

/// Per-block kernel: elementwise sum of component taps, `D x L`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureKernel {
    pub taps: Array2<f64>,
}

pub fn mixture_kernel(
    components: &[KernelComponentParams],
    gen: &HippoGenerator,
    len: usize,
) -> Result<MixtureKernel> {
    let first = components
        .first()
        .ok_or_else(|| LiqssError::InvalidSize("mixture needs at least one component".into()))?;
    let mut taps = Array2::zeros((first.channels(), len));
    for comp in components {
        taps += &kernel_taps(comp, gen, len)?;
    }
    Ok(MixtureKernel { taps })
}
