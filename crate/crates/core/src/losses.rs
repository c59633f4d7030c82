//! Supervision: BCE, soft IoU, edge loss, the per-output composites and the
//! weighted total.
//!
//! Each loss is recorded on the tape as a single node with a closed-form
//! backward rule. Targets are constants.

use crate::error::{Error, Result};
use crate::nn::GdnetOutputs;
use crate::tensor::{sign_branch, Backward, Graph, Shape, Tensor, Var, TIE};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_h: f64,
    pub w_l: f64,
    pub w_f: f64,
    pub w_h_b: f64,
    pub w_l_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_h: 1.0,
            w_l: 1.0,
            w_f: 1.0,
            w_h_b: 10.0,
            w_l_b: 50.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.as_array().iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.w_h, self.w_l, self.w_f, self.w_h_b, self.w_l_b]
    }

    /// Weighted sum of `[l_h, l_l, l_f, l_h_b, l_l_b]`, accumulated left to
    /// right (the same order the tape uses).
    pub fn combine(&self, components: [f64; 5]) -> f64 {
        self.as_array()
            .iter()
            .zip(components)
            .fold(0.0, |acc, (w, l)| acc + w * l)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_h: f64,
    pub l_l: f64,
    pub l_f: f64,
    pub l_h_b: f64,
    pub l_l_b: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> [f64; 5] {
        [self.l_h, self.l_l, self.l_f, self.l_h_b, self.l_l_b]
    }
}

fn check_pair(p: Shape, g: Shape, what: &str) -> Result<()> {
    if p != g {
        return Err(Error::input(format!("{what}: prediction {p} and target {g} differ in shape")));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy with the prediction clamped to `[eps, 1 - eps]`.
pub fn bce_value(p: &[f64], g: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(g)
        .map(|(&p, &g)| {
            let p = clamp_prob(p);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    sum / p.len() as f64
}

fn clamp_branch(p: f64) -> u64 {
    u64::from(p < PROB_EPS) + 2 * u64::from(p > 1.0 - PROB_EPS)
}

/// Distance from the nearer clamp edge. Exact zeros are a stable branch.
fn clamp_margin(p: f64) -> f64 {
    if p.abs() <= TIE {
        return f64::INFINITY;
    }
    (p - PROB_EPS).abs().min((p - (1.0 - PROB_EPS)).abs())
}

fn bce_grad(p: &[f64], g: &[f64], scale: f64) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter()
        .zip(g)
        .map(|(&p, &g)| {
            if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                0.0
            } else {
                scale * (p - g) / (p * (1.0 - p)) / n
            }
        })
        .collect()
}

struct BceRule {
    target: Tensor,
}

impl Backward for BceRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let g = bce_grad(p.data(), self.target.data(), grad_out.item());
        vec![Some(Tensor::from_vec(p.shape(), g).expect("bce grad"))]
    }
}

pub fn bce(graph: &mut Graph, p: Var, target: &Tensor) -> Result<Var> {
    check_pair(graph.shape(p), target.shape(), "bce")?;
    let v = bce_value(graph.value(p).data(), target.data());
    let branches: Vec<u64> = graph.value(p).data().iter().map(|&x| clamp_branch(x)).collect();
    let margin = graph.value(p).data().iter().map(|&x| clamp_margin(x)).fold(f64::INFINITY, f64::min);
    graph.note_branches(branches);
    graph.note_margin(margin);
    Ok(graph.custom(
        &[p],
        Tensor::scalar(v),
        Box::new(BceRule {
            target: target.clone(),
        }),
    ))
}

/// Per-image `1 - sum(P G) / sum(P + G - P G)`, averaged over the batch.
/// An empty union counts as a perfect match.
pub fn soft_iou_value(p: &Tensor, g: &Tensor) -> f64 {
    let per = p.shape().c * p.shape().plane();
    let n = p.shape().n;
    let mut total = 0.0;
    for (pi, gi) in p.data().chunks(per).zip(g.data().chunks(per)) {
        let (inter, union) = iou_terms(pi, gi);
        if union > 0.0 {
            total += 1.0 - inter / union;
        }
    }
    total / n as f64
}

fn iou_terms(p: &[f64], g: &[f64]) -> (f64, f64) {
    p.iter().zip(g).fold((0.0, 0.0), |(i, u), (&p, &g)| (i + p * g, u + p + g - p * g))
}

struct SoftIouRule {
    target: Tensor,
}

impl Backward for SoftIouRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let per = p.shape().c * p.shape().plane();
        let scale = grad_out.item() / p.shape().n as f64;
        let mut grad = Vec::with_capacity(p.len());
        for (pi, gi) in p.data().chunks(per).zip(self.target.data().chunks(per)) {
            let (inter, union) = iou_terms(pi, gi);
            for &g in gi {
                grad.push(if union > 0.0 {
                    -scale * (g * union - inter * (1.0 - g)) / (union * union)
                } else {
                    0.0
                });
            }
        }
        vec![Some(Tensor::from_vec(p.shape(), grad).expect("iou grad"))]
    }
}

pub fn iou_loss(graph: &mut Graph, p: Var, target: &Tensor) -> Result<Var> {
    check_pair(graph.shape(p), target.shape(), "iou_loss")?;
    let v = soft_iou_value(graph.value(p), target);
    Ok(graph.custom(
        &[p],
        Tensor::scalar(v),
        Box::new(SoftIouRule {
            target: target.clone(),
        }),
    ))
}

/// `min(1, |dx| + |dy|)` with forward differences; the last column has no
/// horizontal term and the last row no vertical term.
pub fn edge_map(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(s, |n, c, h, w| {
        let v = x.at(n, c, h, w);
        let dx = if w + 1 < s.w { x.at(n, c, h, w + 1) - v } else { 0.0 };
        let dy = if h + 1 < s.h { x.at(n, c, h + 1, w) - v } else { 0.0 };
        (dx.abs() + dy.abs()).min(1.0)
    })
}

/// Binary edge target: 1 wherever the target changes to a neighbour.
pub fn edge_target(g: &Tensor) -> Tensor {
    edge_map(g).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

pub fn edge_loss_value(p: &Tensor, g: &Tensor) -> f64 {
    bce_value(edge_map(p).data(), edge_target(g).data())
}

struct EdgeRule {
    target: Tensor,
}

impl Backward for EdgeRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let p = inputs[0];
        let s = p.shape();
        let e = edge_map(p);
        let ge = bce_grad(e.data(), self.target.data(), grad_out.item());
        let mut grad = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let v = p.at(n, c, h, w);
                        let dx = if w + 1 < s.w { p.at(n, c, h, w + 1) - v } else { 0.0 };
                        let dy = if h + 1 < s.h { p.at(n, c, h + 1, w) - v } else { 0.0 };
                        if dx.abs() + dy.abs() >= 1.0 {
                            continue;
                        }
                        let up = ge[s.index(n, c, h, w)];
                        let (sx, sy) = (sign(dx), sign(dy));
                        let d = grad.data_mut();
                        if w + 1 < s.w {
                            d[s.index(n, c, h, w + 1)] += up * sx;
                            d[s.index(n, c, h, w)] -= up * sx;
                        }
                        if h + 1 < s.h {
                            d[s.index(n, c, h + 1, w)] += up * sy;
                            d[s.index(n, c, h, w)] -= up * sy;
                        }
                    }
                }
            }
        }
        vec![Some(grad)]
    }
}

/// Subgradient of `|x|`, zero at the kink.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Sign of each difference, saturation of `min(1, .)` and the clamp of the
/// edge value, per pixel, plus the smallest distance from any of those kinks.
fn edge_branches(x: &Tensor) -> (Vec<u64>, f64) {
    let s = x.shape();
    let e = edge_map(x);
    let mut out = Vec::with_capacity(x.len());
    let mut margin = f64::INFINITY;
    for n in 0..s.n {
        for c in 0..s.c {
            for h in 0..s.h {
                for w in 0..s.w {
                    let v = x.at(n, c, h, w);
                    let dx = if w + 1 < s.w { x.at(n, c, h, w + 1) - v } else { 0.0 };
                    let dy = if h + 1 < s.h { x.at(n, c, h + 1, w) - v } else { 0.0 };
                    let sat = dx.abs() + dy.abs() >= 1.0;
                    for d in [dx.abs(), dy.abs(), (dx.abs() + dy.abs() - 1.0).abs()] {
                        if d > TIE {
                            margin = margin.min(d);
                        }
                    }
                    margin = margin.min(clamp_margin(e.at(n, c, h, w)));
                    let code = sign_branch(dx) + 3 * sign_branch(dy);
                    out.push(code + 9 * u64::from(sat) + 18 * clamp_branch(e.at(n, c, h, w)));
                }
            }
        }
    }
    (out, margin)
}

pub fn edge_loss(graph: &mut Graph, p: Var, target: &Tensor) -> Result<Var> {
    check_pair(graph.shape(p), target.shape(), "edge_loss")?;
    let v = edge_loss_value(graph.value(p), target);
    let (branches, margin) = edge_branches(graph.value(p));
    graph.note_branches(branches);
    graph.note_margin(margin);
    Ok(graph.custom(
        &[p],
        Tensor::scalar(v),
        Box::new(EdgeRule {
            target: edge_target(target),
        }),
    ))
}

fn sum_all(graph: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = graph.add(acc, t)?;
    }
    Ok(acc)
}

/// `w_h * l_h + w_l * l_l + w_f * l_f [+ w_h_b * l_h_b + w_l_b * l_l_b]`,
/// summed left to right. `components` holds three or five scalars.
pub fn weighted_total(graph: &mut Graph, components: &[Var], w: &LossWeights) -> Result<Var> {
    if components.len() != 3 && components.len() != 5 {
        return Err(Error::usage(format!("expected 3 or 5 loss components, got {}", components.len())));
    }
    let weighted: Vec<Var> = components.iter().zip(w.as_array()).map(|(&v, wt)| graph.scale(v, wt)).collect();
    sum_all(graph, &weighted)
}

/// Composite supervision of all network outputs against mask `g` and
/// boundary target `b`. Boundary terms are zero when the network has no
/// boundary outputs.
pub fn composite(
    graph: &mut Graph,
    out: &GdnetOutputs,
    g: &Tensor,
    b: &Tensor,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    w.validate()?;
    let h = [bce(graph, out.high_map, g)?, iou_loss(graph, out.high_map, g)?];
    let l = [bce(graph, out.low_map, g)?, edge_loss(graph, out.low_map, g)?];
    let f = [
        bce(graph, out.final_map, g)?,
        iou_loss(graph, out.final_map, g)?,
        edge_loss(graph, out.final_map, g)?,
    ];
    let l_h = sum_all(graph, &h)?;
    let l_l = sum_all(graph, &l)?;
    let l_f = sum_all(graph, &f)?;
    let mut terms = vec![l_h, l_l, l_f];
    if let Some(bh) = out.boundary_high {
        terms.push(bce(graph, bh, b)?);
    }
    if let Some(bl) = out.boundary_low {
        terms.push(bce(graph, bl, b)?);
    }
    let total = weighted_total(graph, &terms, w)?;

    let val = |v: Option<&Var>| v.map_or(0.0, |&v| graph.value(v).item());
    let report = LossReport {
        l_h: val(Some(&l_h)),
        l_l: val(Some(&l_l)),
        l_f: val(Some(&l_f)),
        l_h_b: val(terms.get(3)),
        l_l_b: val(terms.get(4)),
        total: graph.value(total).item(),
    };
    Ok((total, report))
}

/// Boundary target from a binary mask: 3x3-cross dilation minus erosion,
/// with replicated borders.
pub fn boundary_gt(mask: &Tensor) -> Tensor {
    let s = mask.shape();
    let at = |n: usize, c: usize, h: isize, w: isize| {
        let h = h.clamp(0, s.h as isize - 1) as usize;
        let w = w.clamp(0, s.w as isize - 1) as usize;
        mask.at(n, c, h, w)
    };
    const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];
    Tensor::from_fn(s, |n, c, h, w| {
        let vals = CROSS.iter().map(|(dy, dx)| at(n, c, h as isize + dy, w as isize + dx));
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        (hi - lo).clamp(0.0, 1.0)
    })
}
