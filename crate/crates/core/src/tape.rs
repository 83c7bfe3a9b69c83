//! Reverse-mode gradient tape over the model's fixed operator set.
//!
//! Every node stores its forward value; `backward` walks the nodes in
//! reverse and applies each operator's adjoint. Leaves are either named
//! parameters (which receive gradients) or constants.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, CowArray, Ix2, Ix3, IxDyn, Zip};

use crate::blocks::{
    causal_conv_backward, depthwise_causal_conv, gelu, gelu_grad, layer_norm_backward, layer_norm_rows,
};
use crate::error::{LiqssError, Result};
use crate::ssm::{kernel_taps, kernel_taps_backward, sigmoid, HippoGenerator, KernelComponentParams};
use crate::tt::{TtCores, TtModes};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub enum Unary {
    Relu,
    Sigmoid,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    MulConst(Var, ArrayD<f64>),
    Unary(Var, Unary),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Reshape(Var),
    GatedGelu(Var),
    MeanTime(Var),
    LastStep(Var),
    GateTime {
        y: Var,
        g: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    CausalConv {
        e: Var,
        taps: Var,
    },
    Tt {
        x: Var,
        cores: Vec<Var>,
        bias: Option<Var>,
        modes: TtModes,
        states: Vec<Vec<f64>>,
    },
    SsmTaps {
        b: Var,
        c: Var,
        d_skip: Var,
        log_dt: Var,
        gen: Rc<HippoGenerator>,
    },
    Mse {
        pred: Var,
        target: Array1<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: HashMap<String, ArrayD<f64>>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.by_name.get(name)
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }
}

fn to2(a: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("rank-2 tensor")
}

/// All leading axes flattened into rows; the last axis stays as columns.
fn rows_view(a: &ArrayD<f64>) -> CowArray<'_, f64, Ix2> {
    let cols = *a.shape().last().expect("rank >= 1");
    let rows = a.len() / cols.max(1);
    match a.view().into_shape_with_order((rows, cols)) {
        Ok(v) => v.into(),
        Err(_) => a.as_standard_layout().into_owned().into_shape_with_order((rows, cols)).expect("standard layout").into(),
    }
}

/// Row-major reshape of a matrix result, copying only if it is not contiguous.
fn reshape_rows(a: Array2<f64>, shape: IxDyn) -> ArrayD<f64> {
    let a = if a.is_standard_layout() { a } else { a.as_standard_layout().into_owned() };
    a.into_shape_with_order(shape).expect("same element count")
}

fn to3(a: &ArrayD<f64>) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("rank-3 tensor")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0].value.iter().next().expect("non-empty value")
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    /// Bytes held by node values; a proxy for activation memory.
    pub fn activation_bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * std::mem::size_of::<f64>()).sum()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a fixed tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: ArrayD<f64>) -> Var {
        let value = self.value(a) * &mask;
        let ng = self.needs(&[a]);
        self.push(value, Op::MulConst(a, mask), ng)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let x = self.value(a);
        let value = match f {
            Unary::Relu => x.mapv(|v| v.max(0.0)),
            Unary::Sigmoid => x.mapv(sigmoid),
        };
        let ng = self.needs(&[a]);
        self.push(value, Op::Unary(a, f), ng)
    }

    /// `x W + b` over the last axis of `x` (`... x in`), `W: in x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        let mut y = rows_view(xv).dot(&to2(self.value(w)));
        if let Some(b) = b {
            y += &self.value(b).view().into_dimensionality::<ndarray::Ix1>().expect("bias vector");
        }
        *shape.last_mut().expect("rank >= 1") = y.ncols();
        let y = reshape_rows(y, IxDyn(&shape));
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let ng = self.needs(&inputs);
        self.push(y, Op::Linear { x, w, b }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .to_shape(IxDyn(shape))
            .expect("reshape preserves element count")
            .into_owned();
        let ng = self.needs(&[x]);
        self.push(value, Op::Reshape(x), ng)
    }

    /// `gelu(a) * sigmoid(q)` where `a` and `q` are the two halves of the
    /// last axis of `x`.
    pub fn gated_gelu(&mut self, x: Var) -> Var {
        let xv = rows_view(self.value(x));
        let half = xv.ncols() / 2;
        let mut out = Array2::zeros((xv.nrows(), half));
        Zip::from(&mut out)
            .and(xv.slice(ndarray::s![.., ..half]))
            .and(xv.slice(ndarray::s![.., half..]))
            .for_each(|o, &a, &q| *o = gelu(a) * sigmoid(q));
        let mut shape = self.value(x).shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = half;
        let value = reshape_rows(out, IxDyn(&shape));
        let ng = self.needs(&[x]);
        self.push(value, Op::GatedGelu(x), ng)
    }

    /// `B x L x D -> B x D`, mean over the time axis.
    pub fn mean_time(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_axis(Axis(1)).expect("non-empty time axis");
        let ng = self.needs(&[x]);
        self.push(value, Op::MeanTime(x), ng)
    }

    /// `B x L x D -> B x D`, the final time index.
    pub fn last_step(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let l = xv.shape()[1];
        let value = xv.index_axis(Axis(1), l - 1).to_owned();
        let ng = self.needs(&[x]);
        self.push(value, Op::LastStep(x), ng)
    }

    /// `y[b, l, d] * g[b, d]`, gains broadcast over time.
    pub fn gate_time(&mut self, y: Var, g: Var) -> Var {
        let gv = to2(self.value(g)).insert_axis(Axis(1));
        let value = &to3(self.value(y)) * &gv;
        let ng = self.needs(&[y, g]);
        self.push(value.into_dyn(), Op::GateTime { y, g }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let value = layer_norm_rows(self.value(x), self.value(gain), self.value(bias));
        let ng = self.needs(&[x, gain, bias]);
        self.push(value, Op::LayerNorm { x, gain, bias }, ng)
    }

    /// Depthwise causal convolution of `e: B x L x D` with `taps: D x L`.
    pub fn causal_conv(&mut self, e: Var, taps: Var) -> Result<Var> {
        let value = depthwise_causal_conv(to3(self.value(e)), to2(self.value(taps)))?;
        let ng = self.needs(&[e, taps]);
        Ok(self.push(value.into_dyn(), Op::CausalConv { e, taps }, ng))
    }

    /// Applies a TT operator row-wise to `x: rows x in_dim`. Cores and bias
    /// are registered as parameters under `prefix`.
    pub fn tt(&mut self, prefix: &str, tt: &TtCores, x: Var) -> Result<Var> {
        let cores: Vec<Var> = tt
            .cores
            .iter()
            .enumerate()
            .map(|(q, c)| self.param(format!("{prefix}.core{q}"), c.clone().into_dyn()))
            .collect();
        let bias = tt
            .bias
            .as_ref()
            .map(|b| self.param(format!("{prefix}.bias"), b.clone().into_dyn()));
        let (y, states) = tt.forward_with_states(to2(self.value(x)))?;
        let mut inputs = cores.clone();
        inputs.push(x);
        inputs.extend(bias);
        let ng = self.needs(&inputs);
        Ok(self.push(
            y.into_dyn(),
            Op::Tt {
                x,
                cores,
                bias,
                modes: tt.modes.clone(),
                states,
            },
            ng,
        ))
    }

    /// Taps (`D x L`) of one kernel component, parameters registered under
    /// `prefix`.
    pub fn ssm_taps(
        &mut self,
        prefix: &str,
        params: &KernelComponentParams,
        gen: &Rc<HippoGenerator>,
        len: usize,
    ) -> Result<Var> {
        let b = self.param(format!("{prefix}.b"), params.b.clone().into_dyn());
        let c = self.param(format!("{prefix}.c"), params.c.clone().into_dyn());
        let d_skip = self.param(format!("{prefix}.d_skip"), params.d_skip.clone().into_dyn());
        let log_dt = self.param(format!("{prefix}.log_dt"), ArrayD::from_elem(IxDyn(&[1]), params.log_dt));
        let taps = kernel_taps(params, gen, len)?;
        Ok(self.push(
            taps.into_dyn(),
            Op::SsmTaps {
                b,
                c,
                d_skip,
                log_dt,
                gen: Rc::clone(gen),
            },
            true,
        ))
    }

    /// Mean squared error between `pred` (any shape with `n` elements) and
    /// a fixed target vector.
    pub fn mse(&mut self, pred: Var, target: Array1<f64>) -> Var {
        let p = self.value(pred);
        let n = target.len() as f64;
        let loss = p.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        let ng = self.needs(&[pred]);
        self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::Mse { pred, target }, ng)
    }

    /// Gradients of the scalar `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(ArrayD::ones(self.value(output).raw_dim()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    self.accumulate(&mut grads, *a, ga);
                    self.accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, mask) => {
                    self.accumulate(&mut grads, *a, g * mask);
                }
                Op::Unary(a, f) => {
                    let x = self.value(*a);
                    let mut ga = g;
                    match f {
                        Unary::Relu => Zip::from(&mut ga).and(x).for_each(|g, &x| {
                            if x <= 0.0 {
                                *g = 0.0
                            }
                        }),
                        Unary::Sigmoid => Zip::from(&mut ga).and(&node.value).for_each(|g, &s| *g *= s * (1.0 - s)),
                    }
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Linear { x, w, b } => {
                    let g2 = rows_view(&g);
                    let xv = self.value(*x);
                    if self.nodes[x.0].needs_grad {
                        let gx = g2.dot(&to2(self.value(*w)).t());
                        let gx = reshape_rows(gx, xv.raw_dim());
                        self.accumulate(&mut grads, *x, gx);
                    }
                    let gw = rows_view(xv).t().dot(&g2);
                    self.accumulate(&mut grads, *w, gw.into_dyn());
                    if let Some(b) = b {
                        self.accumulate(&mut grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).raw_dim();
                    let gx = g.to_shape(shape).expect("reshape adjoint").into_owned();
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::GatedGelu(x) => {
                    let xv = rows_view(self.value(*x));
                    let half = xv.ncols() / 2;
                    let g2 = rows_view(&g);
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let (mut ga, mut gq) = gx.multi_slice_mut((ndarray::s![.., ..half], ndarray::s![.., half..]));
                    Zip::from(&mut ga)
                        .and(&mut gq)
                        .and(&g2)
                        .and(xv.slice(ndarray::s![.., ..half]))
                        .and(xv.slice(ndarray::s![.., half..]))
                        .for_each(|ga, gq, &gv, &a, &q| {
                            let sq = sigmoid(q);
                            *ga = gv * sq * gelu_grad(a);
                            *gq = gv * gelu(a) * sq * (1.0 - sq);
                        });
                    let gx = reshape_rows(gx, self.value(*x).raw_dim());
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::MeanTime(x) => {
                    let xv = self.value(*x);
                    let l = xv.shape()[1];
                    let g2 = to2(&g).insert_axis(Axis(1));
                    let gx = g2.broadcast(to3(xv).raw_dim()).unwrap().mapv(|v| v / l as f64);
                    self.accumulate(&mut grads, *x, gx.into_dyn());
                }
                Op::LastStep(x) => {
                    let xv = self.value(*x);
                    let l = xv.shape()[1];
                    let mut gx = ArrayD::zeros(xv.raw_dim());
                    gx.index_axis_mut(Axis(1), l - 1).assign(&g);
                    self.accumulate(&mut grads, *x, gx);
                }
                Op::GateTime { y, g: gate } => {
                    let g3 = to3(&g);
                    let yv = to3(self.value(*y));
                    let gv = to2(self.value(*gate));
                    let gy = &g3 * &gv.insert_axis(Axis(1));
                    let gg = (&g3 * &yv).sum_axis(Axis(1));
                    self.accumulate(&mut grads, *y, gy.into_dyn());
                    self.accumulate(&mut grads, *gate, gg.into_dyn());
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (gx, ggain, gbias) = layer_norm_backward(self.value(*x), self.value(*gain), &g);
                    self.accumulate(&mut grads, *x, gx);
                    self.accumulate(&mut grads, *gain, ggain.into_dyn());
                    self.accumulate(&mut grads, *bias, gbias.into_dyn());
                }
                Op::CausalConv { e, taps } => {
                    let (ge, gt) = causal_conv_backward(to3(self.value(*e)), to2(self.value(*taps)), to3(&g));
                    self.accumulate(&mut grads, *e, ge.into_dyn());
                    self.accumulate(&mut grads, *taps, gt.into_dyn());
                }
                Op::Tt {
                    x,
                    cores,
                    bias,
                    modes,
                    states,
                } => {
                    let tt = TtCores {
                        modes: modes.clone(),
                        cores: cores
                            .iter()
                            .map(|c| {
                                self.value(*c)
                                    .clone()
                                    .into_dimensionality::<ndarray::Ix4>()
                                    .expect("rank-4 core")
                            })
                            .collect(),
                        bias: bias.map(|b| {
                            self.value(b)
                                .clone()
                                .into_dimensionality::<ndarray::Ix1>()
                                .expect("bias vector")
                        }),
                    };
                    let tg = tt.backward(states, to2(&g));
                    for (c, gc) in cores.iter().zip(tg.cores) {
                        self.accumulate(&mut grads, *c, gc.into_dyn());
                    }
                    if let (Some(b), Some(gb)) = (bias, tg.bias) {
                        self.accumulate(&mut grads, *b, gb.into_dyn());
                    }
                    self.accumulate(&mut grads, *x, tg.input.into_dyn());
                }
                Op::SsmTaps {
                    b,
                    c,
                    d_skip,
                    log_dt,
                    gen,
                } => {
                    let params = KernelComponentParams {
                        b: to2(self.value(*b)).to_owned(),
                        c: to2(self.value(*c)).to_owned(),
                        d_skip: self.value(*d_skip).clone().into_dimensionality().expect("vector"),
                        log_dt: self.scalar(*log_dt),
                    };
                    let kg = kernel_taps_backward(&params, gen, to2(&g))?;
                    self.accumulate(&mut grads, *b, kg.b.into_dyn());
                    self.accumulate(&mut grads, *c, kg.c.into_dyn());
                    self.accumulate(&mut grads, *d_skip, kg.d_skip.into_dyn());
                    self.accumulate(&mut grads, *log_dt, ArrayD::from_elem(IxDyn(&[1]), kg.log_dt));
                }
                Op::Mse { pred, target } => {
                    let scale = 2.0 * g.iter().next().copied().unwrap_or(0.0) / target.len() as f64;
                    let p = self.value(*pred);
                    let flat: Vec<f64> = p
                        .iter()
                        .zip(target.iter())
                        .map(|(a, b)| scale * (a - b))
                        .collect();
                    let gp = ArrayD::from_shape_vec(p.raw_dim(), flat).expect("same element count");
                    self.accumulate(&mut grads, *pred, gp);
                }
            }
        }

        let mut by_name = HashMap::with_capacity(self.params.len());
        for (name, v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| ArrayD::zeros(self.value(*v).raw_dim()));
            if by_name.insert(name.clone(), g).is_some() {
                return Err(LiqssError::ShapeMismatch(format!("parameter {name} registered twice")));
            }
        }
        Ok(Gradients { by_name })
    }

    fn accumulate(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// Convenience for building a `B x L x D` constant from an owned array.
pub fn constant3(tape: &mut Tape, a: Array3<f64>) -> Var {
    tape.constant(a.into_dyn())
}

/// Convenience for building a 2-D constant.
pub fn constant2(tape: &mut Tape, a: Array2<f64>) -> Var {
    tape.constant(a.into_dyn())
}
