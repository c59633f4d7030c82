//! Reverse-mode tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs to run its backward rule. [`Graph::backward`] walks the nodes in
//! reverse recording order and leaves one gradient per `requires_grad` leaf.

use super::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use super::ops::{
    bilinear_resize, bilinear_resize_backward, broadcast_index, channel_broadcast_shape,
    global_avg_pool_values, global_max_pool_values,
};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait Backward {
    /// Gradient for each input (in the order they were recorded), or `None`
    /// where the input is not differentiable.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

/// Batch-norm running estimates, updated in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Concat(Vec<usize>),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Resize(usize),
    AvgPool(usize),
    MaxPool(usize, Vec<usize>),
    ChannelMean(usize),
    ChannelMax(usize, Vec<usize>),
    Custom(Vec<usize>, Box<dyn Backward>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Values closer than this to a kink count as sitting on it, so roundoff
/// between exactly tied candidates does not register as a branch change.
pub const TIE: f64 = 1e-10;

/// 0 or 1 for the side of zero, 2 within [`TIE`] of it.
pub fn sign_branch(v: f64) -> u64 {
    if v.abs() <= TIE {
        2
    } else {
        u64::from(v > 0.0)
    }
}

/// Winner of a max: the first candidate within [`TIE`] of the maximum,
/// together with how many candidates are that close. Also returns the gap to
/// the best candidate outside that group.
fn max_branch(vals: impl Iterator<Item = f64> + Clone) -> (u64, f64) {
    let best = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    let mut first = None;
    let mut tied = 0u64;
    let mut gap = f64::INFINITY;
    for (i, v) in vals.enumerate() {
        if best - v <= TIE {
            first.get_or_insert(i as u64);
            tied += 1;
        } else {
            gap = gap.min(best - v);
        }
    }
    ((first.unwrap_or(0) << 20) | tied, gap)
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    branches: u64,
    margin: Option<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise choice made so far (relu signs, pool
    /// winners, clamps). Two evaluations with equal signatures ran through
    /// the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    /// Smallest distance of any relu input or max runner-up from its kink,
    /// ignoring values inside the tie band. Infinite if there were none.
    pub fn kink_margin(&self) -> f64 {
        self.margin.unwrap_or(f64::INFINITY)
    }

    fn note_max_choices(&mut self, choices: &[(u64, f64)]) {
        self.note_branches(choices.iter().map(|c| c.0));
        self.note_margin(choices.iter().map(|c| c.1).fold(f64::INFINITY, f64::min));
    }

    /// Records a distance from a kink for [`Graph::kink_margin`].
    pub fn note_margin(&mut self, d: f64) {
        self.margin = Some(self.margin.map_or(d, |m| m.min(d)));
    }

    /// Folds branch choices of a non-smooth op into the signature.
    pub fn note_branches(&mut self, choices: impl IntoIterator<Item = u64>) {
        for c in choices {
            self.branches = (self.branches ^ c.wrapping_add(1)).wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].requires_grad)
    }

    /// Leaf value. Gradients are kept for it after [`Graph::backward`] iff
    /// `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass, present for `requires_grad` leaves.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            spec,
        )?;
        let mut deps = vec![x.0, w.0];
        deps.extend(b.map(|b| b.0));
        let rg = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                spec: *spec,
            },
            rg,
        ))
    }

    /// Per-channel batch normalisation. Training mode normalises with batch
    /// statistics and folds them into `stats`; eval mode uses `stats`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let s = self.shape(x);
        if s.n == 0 {
            return Err(Error::input("batch norm on an empty batch"));
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        if gv.len() != s.c || bv.len() != s.c || stats.mean.len() != s.c {
            return Err(Error::config(format!(
                "batch norm expects {} channels, gamma has {}, beta {}, stats {}",
                s.c,
                gv.len(),
                bv.len(),
                stats.mean.len()
            )));
        }
        let count = s.n * s.plane();
        let xv = self.value(x).data();
        let mut mean = vec![0.0; s.c];
        let mut var = vec![0.0; s.c];
        if training {
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * s.plane();
                    mean[c] += xv[off..off + s.plane()].iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * s.plane();
                    var[c] += xv[off..off + s.plane()]
                        .iter()
                        .map(|v| (v - mean[c]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
        } else {
            mean.copy_from_slice(&stats.mean);
            var.copy_from_slice(&stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for n in 0..s.n {
            for c in 0..s.c {
                let off = (n * s.c + c) * s.plane();
                for i in off..off + s.plane() {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        if training {
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            for c in 0..s.c {
                stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean[c];
                stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * var[c] * unbias;
            }
        }
        let rg = self.needs(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::from_vec(s, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                training,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let signs: Vec<u64> = self.value(x).data().iter().map(|&v| sign_branch(v)).collect();
        let margin = self.value(x).data().iter().map(|v| v.abs()).filter(|&d| d > TIE).fold(f64::INFINITY, f64::min);
        self.note_branches(signs);
        self.note_margin(margin);
        let rg = self.needs(&[x.0]);
        self.push(out, Op::Relu(x.0), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.needs(&[x.0]);
        self.push(out, Op::Sigmoid(x.0), rg)
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .map(|&v| self.shape(v))
            .ok_or_else(|| Error::input("concat of an empty list"))?;
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::input(format!("cannot concat {s} with {first}")));
            }
            c += s.c;
        }
        let shape = Shape::new(first.n, c, first.h, first.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..first.n {
            for &v in xs {
                let t = self.value(v);
                let per = t.shape().c * t.shape().plane();
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Concat(ids), rg))
    }

    fn ordered(&self, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if channel_broadcast_shape(sa, sb).is_ok() {
            Ok((a, b))
        } else {
            channel_broadcast_shape(sb, sa).map(|_| (b, a))
        }
    }

    /// Elementwise sum; one operand may broadcast along size-1 dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.ordered(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(broadcast_index(ta.shape(), tb.shape()))
            .map(|(&x, j)| x + tb.data()[j])
            .collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    /// Elementwise product; one operand may broadcast along size-1 dimensions.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = self.ordered(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(broadcast_index(ta.shape(), tb.shape()))
            .map(|(&x, j)| x * tb.data()[j])
            .collect();
        let out = Tensor::from_vec(ta.shape(), data)?;
        let rg = self.needs(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.needs(&[x.0]);
        self.push(out, Op::Scale(x.0, s), rg)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.needs(&[x.0]);
        self.push(Tensor::scalar(total), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        let rg = self.needs(&[x.0]);
        Ok(self.push(out, Op::Resize(x.0), rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = global_avg_pool_values(self.value(x));
        let rg = self.needs(&[x.0]);
        self.push(out, Op::AvgPool(x.0), rg)
    }

    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let (out, arg) = global_max_pool_values(self.value(x));
        let plane = self.shape(x).plane();
        let choices: Vec<(u64, f64)> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|chunk| max_branch(chunk.iter().copied()))
            .collect();
        self.note_max_choices(&choices);
        let rg = self.needs(&[x.0]);
        self.push(out, Op::MaxPool(x.0, arg), rg)
    }

    /// Mean over channels at every pixel, `(N, 1, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let out = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, h, w| {
            (0..s.c).map(|c| t.at(n, c, h, w)).sum::<f64>() / s.c as f64
        });
        let rg = self.needs(&[x.0]);
        self.push(out, Op::ChannelMean(x.0), rg)
    }

    /// Max over channels at every pixel, `(N, 1, H, W)`.
    pub fn channel_max(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let mut arg = Vec::with_capacity(s.n * s.plane());
        let out = Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, h, w| {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..s.c {
                let v = t.at(n, c, h, w);
                if v > best.1 {
                    best = (c, v);
                }
            }
            arg.push(s.index(n, best.0, h, w));
            best.1
        });
        let choices: Vec<(u64, f64)> = (0..s.n * s.plane())
            .map(|p| {
                let (n, hw) = (p / s.plane(), p % s.plane());
                max_branch((0..s.c).map(|c| t.data()[(n * s.c + c) * s.plane() + hw]))
            })
            .collect();
        self.note_max_choices(&choices);
        let rg = self.needs(&[x.0]);
        self.push(out, Op::ChannelMax(x.0, arg), rg)
    }

    /// Records an operation whose value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        let ids: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let rg = self.needs(&ids);
        self.push(value, Op::Custom(ids, rule), rg)
    }

    /// Reverse sweep from a scalar `loss`. Replaces the gradients of any
    /// previous sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != Shape::scalar() {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::usage(
                "backward called on a value that does not depend on any requires_grad leaf",
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(i, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(gi.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match node.op {
                Op::Leaf if node.requires_grad => {
                    Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())))
                }
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let rg = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { x, w, b, spec } => {
                let grads = conv2d_backward(val(*x), val(*w), spec, g, [rg(*x), rg(*w), b.is_some_and(rg)]);
                let mut out = Vec::new();
                if let Some(gx) = grads.input {
                    out.push((*x, gx));
                }
                if let Some(gw) = grads.weight {
                    out.push((*w, gw));
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    let shape = val(*b).shape();
                    out.push((*b, gb.reshape(shape).expect("bias shape")));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let s = g.shape();
                let count = (s.n * s.plane()) as f64;
                let gv = val(*gamma).data();
                let mut sum_g = vec![0.0; s.c];
                let mut sum_gx = vec![0.0; s.c];
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * s.plane();
                        for j in off..off + s.plane() {
                            sum_g[c] += g.data()[j];
                            sum_gx[c] += g.data()[j] * xhat[j];
                        }
                    }
                }
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    for c in 0..s.c {
                        let off = (n * s.c + c) * s.plane();
                        let k = gv[c] * inv_std[c];
                        for j in off..off + s.plane() {
                            gx.data_mut()[j] = if *training {
                                k * (g.data()[j] - sum_g[c] / count - xhat[j] * sum_gx[c] / count)
                            } else {
                                k * g.data()[j]
                            };
                        }
                    }
                }
                let gs = val(*gamma).shape();
                vec![
                    (*x, gx),
                    (*gamma, Tensor::from_vec(gs, sum_gx).expect("gamma shape")),
                    (*beta, Tensor::from_vec(val(*beta).shape(), sum_g).expect("beta shape")),
                ]
            }
            Op::Relu(x) => {
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), data).expect("relu"))]
            }
            Op::Sigmoid(x) => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| gv * y * (1.0 - y))
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), data).expect("sigmoid"))]
            }
            Op::Concat(ids) => {
                let s = g.shape();
                let mut out: Vec<(usize, Tensor)> =
                    ids.iter().map(|&j| (j, Tensor::zeros(val(j).shape()))).collect();
                let mut off = 0;
                for n in 0..s.n {
                    for (_, t) in out.iter_mut() {
                        let per = t.shape().c * t.shape().plane();
                        t.data_mut()[n * per..(n + 1) * per].copy_from_slice(&g.data()[off..off + per]);
                        off += per;
                    }
                }
                out
            }
            Op::Add(a, b) => {
                let sb = val(*b).shape();
                let mut gb = Tensor::zeros(sb);
                for (&gv, j) in g.data().iter().zip(broadcast_index(g.shape(), sb)) {
                    gb.data_mut()[j] += gv;
                }
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let sb = tb.shape();
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(sb);
                for (i, j) in broadcast_index(ta.shape(), sb).enumerate() {
                    let gv = g.data()[i];
                    ga.data_mut()[i] = gv * tb.data()[j];
                    gb.data_mut()[j] += gv * ta.data()[i];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * s))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Resize(x) => vec![(*x, bilinear_resize_backward(g, val(*x).shape()))],
            Op::AvgPool(x) => {
                let s = val(*x).shape();
                let plane = s.plane() as f64;
                let gx = Tensor::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) / plane);
                vec![(*x, gx)]
            }
            Op::MaxPool(x, arg) | Op::ChannelMax(x, arg) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&j, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[j] += gv;
                }
                vec![(*x, gx)]
            }
            Op::ChannelMean(x) => {
                let s = val(*x).shape();
                let gx = Tensor::from_fn(s, |n, _, h, w| g.at(n, 0, h, w) / s.c as f64);
                vec![(*x, gx)]
            }
            Op::Custom(ids, rule) => {
                let inputs: Vec<&Tensor> = ids.iter().map(|&j| val(j)).collect();
                ids.iter()
                    .zip(rule.backward(&inputs, &node.value, g))
                    .filter_map(|(&j, gi)| gi.map(|t| (j, t)))
                    .collect()
            }
        }
    }
}

/// Overflow-free logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
