//! Tensor-train (MPO) parameterized linear maps.
//!
//! A map `R^{prod n_q} -> R^{prod m_q}` is stored as a chain of cores
//! `G_q` of shape `(r_{q-1}, n_q, m_q, r_q)` with `r_0 = r_d = 1`. Input and
//! output indices are flattened row-major with core 1 as the most
//! significant digit; `forward` and `materialize_dense` share that
//! convention.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LiqssError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TtModes {
    in_modes: Vec<usize>,
    out_modes: Vec<usize>,
    ranks: Vec<usize>,
}

impl TtModes {
    pub fn new(in_modes: Vec<usize>, out_modes: Vec<usize>, ranks: Vec<usize>) -> Result<Self> {
        let d = in_modes.len();
        if d == 0 {
            return Err(LiqssError::InvalidModes("need at least one core".into()));
        }
        if out_modes.len() != d {
            return Err(LiqssError::InvalidModes(format!(
                "{d} input modes but {} output modes",
                out_modes.len()
            )));
        }
        if ranks.len() != d + 1 {
            return Err(LiqssError::InvalidModes(format!(
                "expected {} ranks, got {}",
                d + 1,
                ranks.len()
            )));
        }
        if ranks[0] != 1 || ranks[d] != 1 {
            return Err(LiqssError::InvalidModes("boundary ranks must be 1".into()));
        }
        if in_modes.iter().chain(&out_modes).chain(&ranks).any(|&v| v == 0) {
            return Err(LiqssError::InvalidModes("modes and ranks must be positive".into()));
        }
        Ok(Self {
            in_modes,
            out_modes,
            ranks,
        })
    }

    /// All interior bonds set to `rank`.
    pub fn uniform(in_modes: Vec<usize>, out_modes: Vec<usize>, rank: usize) -> Result<Self> {
        let d = in_modes.len();
        let mut ranks = vec![rank; d + 1];
        ranks[0] = 1;
        ranks[d] = 1;
        Self::new(in_modes, out_modes, ranks)
    }

    pub fn in_modes(&self) -> &[usize] {
        &self.in_modes
    }

    pub fn out_modes(&self) -> &[usize] {
        &self.out_modes
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn num_cores(&self) -> usize {
        self.in_modes.len()
    }

    pub fn in_dim(&self) -> usize {
        self.in_modes.iter().product()
    }

    pub fn out_dim(&self) -> usize {
        self.out_modes.iter().product()
    }

    pub fn core_shape(&self, q: usize) -> (usize, usize, usize, usize) {
        (
            self.ranks[q],
            self.in_modes[q],
            self.out_modes[q],
            self.ranks[q + 1],
        )
    }
}

/// Exact trainable-scalar count: `sum_q r_{q-1} n_q m_q r_q` plus the bias.
pub fn tt_param_count(modes: &TtModes, bias: bool) -> usize {
    let cores: usize = (0..modes.num_cores())
        .map(|q| {
            let (a, b, c, d) = modes.core_shape(q);
            a * b * c * d
        })
        .sum();
    cores + if bias { modes.out_dim() } else { 0 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtCores {
    pub modes: TtModes,
    pub cores: Vec<Array4<f64>>,
    pub bias: Option<Array1<f64>>,
}

/// Gradients of a TT map with respect to its cores, bias and input.
#[derive(Debug, Clone)]
pub struct TtGrads {
    pub cores: Vec<Array4<f64>>,
    pub bias: Option<Array1<f64>>,
    pub input: Array2<f64>,
}

/// Gaussian cores scaled so each entry of the dense operator has variance
/// `1 / in_dim`. Bias starts at zero.
pub fn tt_init<R: Rng + ?Sized>(modes: &TtModes, bias: bool, rng: &mut R) -> TtCores {
    let d = modes.num_cores() as f64;
    let in_dim = modes.in_dim() as f64;
    let cores = (0..modes.num_cores())
        .map(|q| {
            let shape = modes.core_shape(q);
            let bond = (shape.0 * shape.3) as f64;
            let std = in_dim.powf(-0.5 / d) * bond.powf(-0.25);
            let normal = Normal::new(0.0, std).expect("finite std");
            Array4::from_shape_simple_fn(shape, || normal.sample(rng))
        })
        .collect();
    TtCores {
        cores,
        bias: bias.then(|| Array1::zeros(modes.out_dim())),
        modes: modes.clone(),
    }
}

impl TtCores {
    pub fn zeros(modes: &TtModes, bias: bool) -> Self {
        Self {
            cores: (0..modes.num_cores())
                .map(|q| Array4::zeros(modes.core_shape(q)))
                .collect(),
            bias: bias.then(|| Array1::zeros(modes.out_dim())),
            modes: modes.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        tt_param_count(&self.modes, self.bias.is_some())
    }

    /// `y = W x + b` for every row of `x` (`rows x in_dim`).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (y, _) = self.forward_with_states(x)?;
        Ok(y)
    }

    /// Forward pass that also returns the intermediate contraction states
    /// needed by [`TtCores::backward`].
    pub fn forward_with_states(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Vec<Vec<f64>>)> {
        let in_dim = self.modes.in_dim();
        if x.ncols() != in_dim {
            return Err(LiqssError::DimensionMismatch {
                expected: in_dim,
                got: x.ncols(),
            });
        }
        let (mut y, states) = if self.sweep_reversed() {
            let (modes, cores) = self.reversed();
            let x_rev = x.select(Axis(1), &inverse(&digit_reversal(self.modes.in_modes())));
            let (y_rev, states) = chain_forward(&modes, &cores, x_rev.view());
            (y_rev.select(Axis(1), &digit_reversal(self.modes.out_modes())), states)
        } else {
            chain_forward(&self.modes, &self.cores, x)
        };
        if let Some(b) = &self.bias {
            y += b;
        }
        Ok((y, states))
    }

    /// Reverse pass given the states from `forward_with_states` and the
    /// upstream gradient `g_out` (`rows x out_dim`).
    pub fn backward(&self, states: &[Vec<f64>], g_out: ArrayView2<f64>) -> TtGrads {
        let (cores, input) = if self.sweep_reversed() {
            let (modes, rcores) = self.reversed();
            let g_rev = g_out.select(Axis(1), &inverse(&digit_reversal(self.modes.out_modes())));
            let (g_rcores, g_in) = chain_backward(&modes, &rcores, states, g_rev.view());
            let cores = g_rcores
                .into_iter()
                .rev()
                .map(|g| g.permuted_axes([3, 1, 2, 0]).as_standard_layout().into_owned())
                .collect();
            (cores, g_in.select(Axis(1), &digit_reversal(self.modes.in_modes())))
        } else {
            chain_backward(&self.modes, &self.cores, states, g_out)
        };
        TtGrads {
            cores,
            bias: self.bias.as_ref().map(|_| g_out.sum_axis(Axis(0))),
            input,
        }
    }

    /// Sweeping from the last core keeps smaller intermediates when the
    /// large input modes sit at the end of the chain.
    fn sweep_reversed(&self) -> bool {
        let rev = reverse_modes(&self.modes);
        state_size(&rev) < state_size(&self.modes)
    }

    /// The same map with core order and index digits reversed.
    fn reversed(&self) -> (TtModes, Vec<Array4<f64>>) {
        let cores = self
            .cores
            .iter()
            .rev()
            .map(|c| c.view().permuted_axes([3, 1, 2, 0]).as_standard_layout().into_owned())
            .collect();
        (reverse_modes(&self.modes), cores)
    }
}

fn reverse_modes(m: &TtModes) -> TtModes {
    let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
    TtModes {
        in_modes: rev(&m.in_modes),
        out_modes: rev(&m.out_modes),
        ranks: rev(&m.ranks),
    }
}

/// Intermediate values kept per row by a left-to-right sweep.
fn state_size(m: &TtModes) -> usize {
    let mut outer = 1;
    let mut rest = m.in_dim();
    let mut total = 0;
    for q in 0..m.num_cores() {
        let (_, n, mq, r1) = m.core_shape(q);
        rest /= n;
        outer *= mq;
        total += outer * r1 * rest;
    }
    total
}

/// `rev[i]` is the index whose digits (over `radices`, row-major) are
/// those of `i` in reverse order.
fn digit_reversal(radices: &[usize]) -> Vec<usize> {
    let total: usize = radices.iter().product();
    let mut digits = vec![0; radices.len()];
    (0..total)
        .map(|i| {
            unravel(i, radices, &mut digits);
            digits.iter().rev().zip(radices.iter().rev()).fold(0, |acc, (&dg, &r)| acc * r + dg)
        })
        .collect()
}

fn inverse(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Left-to-right sweep without bias. `states[q]` is the input to core `q`.
fn chain_forward(modes: &TtModes, cores: &[Array4<f64>], x: ArrayView2<f64>) -> (Array2<f64>, Vec<Vec<f64>>) {
    let rows = x.nrows();
    let mut states = Vec::with_capacity(cores.len() + 1);
    states.push(x.iter().copied().collect::<Vec<f64>>());
    let mut outer = rows;
    let mut rest = modes.in_dim();
    for (q, core) in cores.iter().enumerate() {
        let (r0, n, m, r1) = modes.core_shape(q);
        rest /= n;
        let next = contract_core(states.last().unwrap(), core, outer, (r0, n, m, r1), rest);
        states.push(next);
        outer *= m;
    }
    let y = Array2::from_shape_vec((rows, modes.out_dim()), states.pop().unwrap())
        .expect("final state is rows x out_dim");
    (y, states)
}

fn chain_backward(
    modes: &TtModes,
    cores: &[Array4<f64>],
    states: &[Vec<f64>],
    g_out: ArrayView2<f64>,
) -> (Vec<Array4<f64>>, Array2<f64>) {
    let rows = g_out.nrows();
    let d = cores.len();
    let mut g_cores: Vec<Array4<f64>> = cores.iter().map(|c| Array4::zeros(c.dim())).collect();
    let mut g_state: Vec<f64> = g_out.iter().copied().collect();

    // outer sizes and trailing input sizes seen by each core
    let mut outers = Vec::with_capacity(d);
    let mut rests = Vec::with_capacity(d);
    let mut outer = rows;
    let mut rest = modes.in_dim();
    for q in 0..d {
        let (_, n, m, _) = modes.core_shape(q);
        rest /= n;
        outers.push(outer);
        rests.push(rest);
        outer *= m;
    }
    for q in (0..d).rev() {
        g_state = contract_core_adjoint(
            &states[q],
            &cores[q],
            &g_state,
            &mut g_cores[q],
            outers[q],
            modes.core_shape(q),
            rests[q],
        );
    }
    let input = Array2::from_shape_vec((rows, modes.in_dim()), g_state).expect("input gradient shape");
    (g_cores, input)
}

/// One step of the chain: `(P, r0, n, R) x (r0, n, m, r1) -> (P, m, r1, R)`.
fn contract_core(
    input: &[f64],
    core: &Array4<f64>,
    outer: usize,
    (r0, n, m, r1): (usize, usize, usize, usize),
    rest: usize,
) -> Vec<f64> {
    let (k, j) = (r0 * n, m * r1);
    let g = core.view().into_shape_with_order((k, j)).expect("standard layout core");
    let mut out = vec![0.0; outer * j * rest];
    if rest == 1 {
        // one (P x k) . (k x j) product
        let a = ArrayView2::from_shape((outer, k), input).expect("state shape");
        let mut c = ArrayViewMut2::from_shape((outer, j), &mut out).expect("state shape");
        general_mat_mul(1.0, &a, &g, 0.0, &mut c);
        return out;
    }
    let gt = g.t();
    for (in_p, out_p) in input.chunks_exact(k * rest).zip(out.chunks_exact_mut(j * rest)) {
        let a = ArrayView2::from_shape((k, rest), in_p).expect("state shape");
        let mut c = ArrayViewMut2::from_shape((j, rest), out_p).expect("state shape");
        general_mat_mul(1.0, &gt, &a, 0.0, &mut c);
    }
    out
}

fn contract_core_adjoint(
    input: &[f64],
    core: &Array4<f64>,
    g_out: &[f64],
    g_core: &mut Array4<f64>,
    outer: usize,
    (r0, n, m, r1): (usize, usize, usize, usize),
    rest: usize,
) -> Vec<f64> {
    let (k, j) = (r0 * n, m * r1);
    let g = core.view().into_shape_with_order((k, j)).expect("standard layout core");
    let mut gg = g_core.view_mut().into_shape_with_order((k, j)).expect("standard layout core");
    let mut g_in = vec![0.0; outer * k * rest];
    if rest == 1 {
        let a = ArrayView2::from_shape((outer, k), input).expect("state shape");
        let go = ArrayView2::from_shape((outer, j), g_out).expect("state shape");
        general_mat_mul(1.0, &a.t(), &go, 1.0, &mut gg);
        let mut gi = ArrayViewMut2::from_shape((outer, k), &mut g_in).expect("state shape");
        general_mat_mul(1.0, &go, &g.t(), 0.0, &mut gi);
        return g_in;
    }
    for ((in_p, go_p), gin_p) in input
        .chunks_exact(k * rest)
        .zip(g_out.chunks_exact(j * rest))
        .zip(g_in.chunks_exact_mut(k * rest))
    {
        let a = ArrayView2::from_shape((k, rest), in_p).expect("state shape");
        let go = ArrayView2::from_shape((j, rest), go_p).expect("state shape");
        general_mat_mul(1.0, &a, &go.t(), 1.0, &mut gg);
        let mut gi = ArrayViewMut2::from_shape((k, rest), gin_p).expect("state shape");
        general_mat_mul(1.0, &g, &go, 0.0, &mut gi);
    }
    g_in
}

fn unravel(mut index: usize, radices: &[usize], digits: &mut [usize]) {
    for (digit, &radix) in digits.iter_mut().zip(radices).rev() {
        *digit = index % radix;
        index /= radix;
    }
}

/// Explicit `out_dim x in_dim` matrix of the operator (bias excluded).
/// Each entry is evaluated as the product of the core slices it selects;
/// meant for tests and debugging.
pub fn tt_materialize_dense(tt: &TtCores) -> Array2<f64> {
    let modes = &tt.modes;
    let d = modes.num_cores();
    let (in_dim, out_dim) = (modes.in_dim(), modes.out_dim());
    let mut w = Array2::zeros((out_dim, in_dim));
    let mut i_digits = vec![0; d];
    let mut j_digits = vec![0; d];
    for j in 0..out_dim {
        unravel(j, modes.out_modes(), &mut j_digits);
        for i in 0..in_dim {
            unravel(i, modes.in_modes(), &mut i_digits);
            // row vector carried along the bond index
            let mut acc = vec![1.0];
            for q in 0..d {
                let (r0, _, _, r1) = modes.core_shape(q);
                let mut next = vec![0.0; r1];
                for a in 0..r0 {
                    for (b, nb) in next.iter_mut().enumerate() {
                        *nb += acc[a] * tt.cores[q][[a, i_digits[q], j_digits[q], b]];
                    }
                }
                acc = next;
            }
            w[[j, i]] = acc[0];
        }
    }
    w
}
