//! Five-point central finite-difference checks of tape gradients.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{AttentionFuse, Bfe, BfeConfig, Gdnet, GdnetConfig, LcfiBlock, LcfiBlockConfig, LcfiModule, LcfiModuleConfig, ParamStore, Session};
use crate::tensor::{ConvSpec, Graph, RunningStats, Shape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Offsets of the fourth-order central difference, in units of [`FD_STEP`].
const STENCIL: [f64; 4] = [1.0, -1.0, 2.0, -2.0];
pub const TOLERANCE: f64 = 1e-4;
/// A check fails outright if more than one coordinate in this many straddles
/// a kink.
pub const MAX_KINK_SHARE: usize = 4;

/// Roundoff in a central difference is about `|f| * 2.2e-16 / FD_STEP`.
/// Whole-network probes are scaled down so that this stays below
/// `1e-8 * TOLERANCE`, where parameters with vanishing gradients are judged
/// by the absolute floor of [`rel_err`].
pub const NETWORK_PROBE_SCALE: f64 = 1e-2;
pub const LOSS_PROBE_SCALE: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub checked: usize,
    /// Coordinates left out because the perturbation moved some relu, pool
    /// or clamp onto another piece, where a central difference says nothing
    /// about the derivative.
    pub kinks: usize,
    pub max_rel_err: f64,
    /// Coordinate with the largest error: tensor label, flat index, analytic
    /// and numeric values.
    pub worst: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE && self.checked > 0 && self.kinks * MAX_KINK_SHARE <= self.checked + self.kinks
    }
}

/// Which coordinates of a tensor to perturb: all of them, or at most `n`
/// spread evenly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coverage {
    All,
    AtMost(usize),
}

impl Coverage {
    fn indices(self, len: usize) -> Vec<usize> {
        match self {
            Coverage::AtMost(n) if n < len => (0..n).map(|i| i * len / n + (len / n) / 2).collect(),
            _ => (0..len).collect(),
        }
    }
}

/// Checks the gradient of a scalar built by `f` with respect to every input
/// tensor and every parameter of `store`. `f` receives a training session
/// and graph leaves for `inputs`.
pub fn check<F>(name: &str, store: &mut ParamStore, inputs: &[Tensor], coverage: Coverage, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    type Run = (f64, u64, Vec<Tensor>, Vec<Tensor>);
    let run = |store: &mut ParamStore, inputs: &[Tensor], grads: bool| -> Result<Run> {
        let mut s = Session::new(store, true);
        let leaves: Vec<Var> = inputs.iter().map(|t| s.graph.leaf(t.clone(), true)).collect();
        let out = f(&mut s, &leaves)?;
        if s.graph.shape(out).numel() != 1 {
            return Err(Error::usage(format!("gradient check {name} needs a scalar, got {}", s.graph.shape(out))));
        }
        let value = s.graph.value(out).item();
        let branches = s.graph.branch_signature();
        if !grads {
            return Ok((value, branches, Vec::new(), Vec::new()));
        }
        s.graph.backward(out)?;
        let input_grads = leaves
            .iter()
            .zip(inputs)
            .map(|(&v, t)| s.graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, branches, input_grads, s.param_grads()))
    };

    let (_, base, input_grads, param_grads) = run(store, inputs, true)?;
    let mut result = CheckResult {
        name: name.to_string(),
        checked: 0,
        kinks: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    let mut record = |label: &str, i: usize, a: f64, evals: [(f64, u64); 4]| {
        if evals.iter().any(|e| e.1 != base) {
            result.kinks += 1;
            return;
        }
        let [p1, m1, p2, m2] = evals.map(|e| e.0);
        let n = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
        let e = rel_err(a, n);
        result.checked += 1;
        if e > result.max_rel_err || !e.is_finite() || result.worst.is_empty() {
            result.max_rel_err = if e.is_finite() { e } else { f64::INFINITY };
            result.worst = format!("{label}[{i}] analytic {a:.6e} numeric {n:.6e}");
        }
    };

    let mut work = inputs.to_vec();
    for (ti, g) in input_grads.iter().enumerate() {
        for i in coverage.indices(work[ti].len()) {
            let x0 = work[ti].data()[i];
            let mut evals = [(0.0, 0); 4];
            for (k, d) in STENCIL.iter().enumerate() {
                work[ti].data_mut()[i] = x0 + d * FD_STEP;
                let r = run(store, &work, false)?;
                evals[k] = (r.0, r.1);
            }
            work[ti].data_mut()[i] = x0;
            record(&format!("input{ti}"), i, g.data()[i], evals);
        }
    }
    for (pi, g) in param_grads.iter().enumerate() {
        let label = store.params()[pi].name.clone();
        for i in coverage.indices(g.len()) {
            let x0 = store.params()[pi].value.data()[i];
            let mut evals = [(0.0, 0); 4];
            for (k, d) in STENCIL.iter().enumerate() {
                store.params_mut()[pi].value.data_mut()[i] = x0 + d * FD_STEP;
                let r = run(store, inputs, false)?;
                evals[k] = (r.0, r.1);
            }
            store.params_mut()[pi].value.data_mut()[i] = x0;
            record(&label, i, g.data()[i], evals);
        }
    }
    Ok(result)
}

/// Checks a scalar function of plain graph inputs, with no parameters.
pub fn check_graph<F>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check(name, &mut ParamStore::new(), inputs, Coverage::All, |s, v| f(&mut s.graph, v))
}

pub fn random_tensor(rng: &mut impl Rng, shape: Shape, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values in `[lo, hi]` whose magnitude stays above `gap`, so that
/// kinks at zero are never within a step.
fn away_from_zero(rng: &mut impl Rng, shape: Shape, gap: f64) -> Tensor {
    let data = (0..shape.numel())
        .map(|_| {
            let m = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// `sum(x * r) / numel` for a fixed random `r`: every element of `x`
/// contributes with its own weight.
pub fn probe(graph: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = graph.shape(x);
    let r = random_tensor(&mut rng, shape, -1.0, 1.0).map(|v| v / shape.numel() as f64);
    let r = graph.constant(r);
    let p = graph.mul(x, r)?;
    Ok(graph.sum(p))
}

/// Every primitive op, each loss and each module, on small random inputs.
/// `size` is the spatial size of the full-network case.
pub fn suite(seed: u64, size: (usize, usize)) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let sh = Shape::new;

    // primitives
    for (label, x_shape, spec) in [
        ("conv2d 3x3", sh(2, 2, 5, 4), ConvSpec::square(2, 3, 3, 1)?),
        ("conv2d stride 2", sh(1, 2, 6, 5), ConvSpec::square(2, 2, 3, 2)?),
        ("conv2d dilated 1x5", sh(1, 2, 6, 7), ConvSpec::same(2, 2, 1, 5, 2)?),
        ("conv2d dilated 5x1", sh(1, 1, 7, 3), ConvSpec::same(1, 2, 5, 1, 3)?),
        ("conv2d 1x1", sh(2, 3, 3, 3), ConvSpec::square(3, 2, 1, 1)?),
        ("conv2d C=1 H=W=1", sh(1, 1, 1, 1), ConvSpec::square(1, 1, 3, 1)?),
    ] {
        let x = random_tensor(&mut rng, x_shape, -1.0, 1.0);
        let w = random_tensor(&mut rng, spec.weight_shape(), -1.0, 1.0);
        let b = random_tensor(&mut rng, sh(1, spec.out_channels, 1, 1), -1.0, 1.0);
        out.push(check_graph(label, &[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), &spec)?;
            probe(g, y, 1)
        })?);
    }
    for training in [true, false] {
        let x = random_tensor(&mut rng, sh(2, 3, 3, 2), -2.0, 2.0);
        let gamma = random_tensor(&mut rng, sh(1, 3, 1, 1), 0.5, 1.5);
        let beta = random_tensor(&mut rng, sh(1, 3, 1, 1), -0.5, 0.5);
        let mut stats = RunningStats::new(3);
        stats.mean = vec![0.1, -0.2, 0.3];
        stats.var = vec![0.5, 1.5, 2.0];
        let label = if training { "batch_norm train" } else { "batch_norm eval" };
        out.push(check_graph(label, &[x, gamma, beta], |g, v| {
            let mut st = stats.clone();
            let y = g.batch_norm(v[0], v[1], v[2], &mut st, training)?;
            // squared so the train-mode probe is not trivially constant
            let y2 = g.mul(y, y)?;
            let y = g.add(y, y2)?;
            probe(g, y, 2)
        })?);
    }
    let x = away_from_zero(&mut rng, sh(2, 2, 3, 3), 1e-3);
    out.push(check_graph("relu", &[x], |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 3)
    })?);
    let x = random_tensor(&mut rng, sh(1, 2, 3, 3), -4.0, 4.0);
    out.push(check_graph("sigmoid", &[x], |g, v| {
        let y = g.sigmoid(v[0]);
        probe(g, y, 4)
    })?);
    let xs = [sh(2, 1, 2, 3), sh(2, 3, 2, 3), sh(2, 2, 2, 3)].map(|s| random_tensor(&mut rng, s, -1.0, 1.0));
    out.push(check_graph("concat_channels", &xs, |g, v| {
        let y = g.concat_channels(v)?;
        probe(g, y, 5)
    })?);
    for (label, a, b) in [
        ("add same shape", sh(2, 2, 3, 3), sh(2, 2, 3, 3)),
        ("add channel broadcast", sh(2, 3, 2, 2), sh(1, 3, 1, 1)),
        ("mul map broadcast", sh(1, 4, 2, 2), sh(1, 1, 2, 2)),
        ("mul channel broadcast", sh(2, 3, 3, 2), sh(2, 3, 1, 1)),
    ] {
        let ta = random_tensor(&mut rng, a, -1.0, 1.0);
        let tb = random_tensor(&mut rng, b, -1.0, 1.0);
        let is_add = label.starts_with("add");
        out.push(check_graph(label, &[ta, tb], |g, v| {
            let y = if is_add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
            probe(g, y, 6)
        })?);
    }
    let x = random_tensor(&mut rng, sh(2, 2, 3, 3), -1.0, 1.0);
    out.push(check_graph("scale, sum, mean", &[x], |g, v| {
        let a = g.scale(v[0], -1.7);
        let a2 = g.mul(a, v[0])?;
        let s = g.sum(a2);
        let m = g.mean(v[0]);
        g.add(s, m)
    })?);
    for (label, from, to) in [
        ("resize up", (3, 2), (7, 5)),
        ("resize down", (8, 6), (3, 4)),
        ("resize H=W=1", (1, 1), (3, 2)),
    ] {
        let x = random_tensor(&mut rng, sh(2, 2, from.0, from.1), -1.0, 1.0);
        out.push(check_graph(label, &[x], |g, v| {
            let y = g.resize_bilinear(v[0], to.0, to.1)?;
            probe(g, y, 7)
        })?);
    }
    let x = random_tensor(&mut rng, sh(2, 3, 3, 4), -1.0, 1.0);
    out.push(check_graph("pools", &[x], |g, v| {
        let a = g.global_avg_pool(v[0]);
        let m = g.global_max_pool(v[0]);
        let cm = g.channel_mean(v[0]);
        let cx = g.channel_max(v[0]);
        let p = [probe(g, a, 8)?, probe(g, m, 9)?, probe(g, cm, 10)?, probe(g, cx, 11)?];
        let s = g.add(p[0], p[1])?;
        let s = g.add(s, p[2])?;
        g.add(s, p[3])
    })?);

    // losses, predictions kept inside the clamp range
    let shape = sh(2, 1, 4, 5);
    let p = random_tensor(&mut rng, shape, 0.05, 0.95);
    let target = Tensor::from_vec(shape, (0..shape.numel()).map(|_| f64::from(rng.gen_bool(0.4) as u8)).collect())?;
    for name in ["bce loss", "soft iou loss", "edge loss"] {
        let t = target.clone();
        out.push(check_graph(name, std::slice::from_ref(&p), move |g, v| match name {
            "bce loss" => losses::bce(g, v[0], &t),
            "soft iou loss" => losses::iou_loss(g, v[0], &t),
            _ => losses::edge_loss(g, v[0], &t),
        })?);
    }

    // modules
    let mut mrng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = random_tensor(&mut rng, sh(2, 3, 6, 6), -1.0, 1.0);
    let mut store = ParamStore::new();
    let att = AttentionFuse::new(&mut store, &mut mrng, "att", 3, 3)?;
    out.push(check("attention_fuse", &mut store, &[x], Coverage::All, |s, v| {
        let o = att.forward(s, v[0])?.output;
        probe(&mut s.graph, o, 12)
    })?);

    let x = random_tensor(&mut rng, sh(2, 2, 6, 6), -1.0, 1.0);
    let prev = random_tensor(&mut rng, sh(2, 2, 6, 6), -1.0, 1.0);
    let mut store = ParamStore::new();
    let block = LcfiBlock::new(&mut store, &mut mrng, "blk", 2, LcfiBlockConfig { k: 5, dr: 2, channels: 2 })?;
    out.push(check("lcfi_block", &mut store, &[x.clone(), prev], Coverage::All, |s, v| {
        let o = block.forward(s, v[0], Some(v[1]))?;
        probe(&mut s.graph, o, 13)
    })?);

    let mut store = ParamStore::new();
    let module = LcfiModule::new(&mut store, &mut mrng, "lcfi", 2, LcfiModuleConfig::standard(2, 2, 2))?;
    out.push(check("lcfi_module", &mut store, std::slice::from_ref(&x), Coverage::All, |s, v| {
        let o = module.forward(s, v[0])?;
        probe(&mut s.graph, o, 14)
    })?);

    let mut store = ParamStore::new();
    let bfe = Bfe::new(&mut store, &mut mrng, "bfe", BfeConfig::new(2))?;
    out.push(check("bfe", &mut store, &[x], Coverage::All, |s, v| {
        let o = bfe.forward(s, v[0])?;
        let a = probe(&mut s.graph, o.enhanced, 15)?;
        let b = probe(&mut s.graph, o.boundary_map, 16)?;
        s.graph.add(a, b)
    })?);

    let case = network_case(&mut rng, seed, size)?;
    let mut store = case.store.clone();
    let image = [case.image.clone()];
    out.push(check("gdnet maps", &mut store, &image, Coverage::All, |s, v| network_probe(&case.net, s, v[0]))?);
    out.push(check("gdnet composite loss", &mut store, &image, Coverage::All, |s, v| case.loss(s, v[0]))?);
    Ok(out)
}

/// Candidate images drawn per network case.
const NETWORK_CANDIDATES: usize = 8;

/// Width-2 network, a `1 x 3 x H x W` image and the mask and boundary
/// targets for the composite loss.
pub struct NetworkCase {
    pub net: Gdnet,
    pub store: ParamStore,
    pub image: Tensor,
    pub mask: Tensor,
    pub boundary: Tensor,
}

impl NetworkCase {
    pub fn loss(&self, s: &mut Session, image: Var) -> Result<Var> {
        let o = self.net.forward_normalized(s, image)?;
        let w = losses::LossWeights::default();
        let (total, _) = losses::composite(&mut s.graph, &o, &self.mask, &self.boundary, &w)?;
        Ok(s.graph.scale(total, LOSS_PROBE_SCALE))
    }
}

/// Builds the network case. Of several random images the one whose
/// composite-loss forward pass stays farthest from any kink is kept.
pub fn network_case(rng: &mut impl Rng, seed: u64, size: (usize, usize)) -> Result<NetworkCase> {
    let mut cfg = GdnetConfig::with_width(2, 16);
    cfg.input_size = size;
    let (net, store) = Gdnet::new(&cfg, seed)?;
    let (mask, boundary) = network_targets(rng, size);
    let mut case = NetworkCase { net, store, image: Tensor::zeros(Shape::new(1, 3, size.0, size.1)), mask, boundary };
    let mut best = f64::NEG_INFINITY;
    for _ in 0..NETWORK_CANDIDATES {
        let image = random_tensor(rng, Shape::new(1, 3, size.0, size.1), 0.0, 1.0);
        let mut scratch = case.store.clone();
        let mut s = Session::new(&mut scratch, true);
        let x = s.graph.leaf(image.clone(), true);
        case.loss(&mut s, x)?;
        let margin = s.graph.kink_margin();
        if margin > best {
            best = margin;
            case.image = image;
        }
    }
    Ok(case)
}

fn network_targets(rng: &mut impl Rng, size: (usize, usize)) -> (Tensor, Tensor) {
    let (h, w) = size;
    let (y0, x0) = (rng.gen_range(0..h / 2), rng.gen_range(0..w / 2));
    let g = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
        f64::from((y >= y0 && y < y0 + h / 2 && x >= x0 && x < x0 + w / 2) as u8)
    });
    let b = losses::boundary_gt(&g);
    (g, b)
}

/// Probe over all five output maps of the network.
pub fn network_probe(net: &Gdnet, s: &mut Session, image: Var) -> Result<Var> {
    let o = net.forward_normalized(s, image)?;
    let mut acc: Option<Var> = None;
    for (i, (_, m)) in o.named().into_iter().enumerate() {
        let p = probe(&mut s.graph, m, 20 + i as u64)?;
        acc = Some(match acc {
            Some(a) => s.graph.add(a, p)?,
            None => p,
        });
    }
    Ok(s.graph.scale(acc.expect("network has outputs"), NETWORK_PROBE_SCALE))
}

pub fn table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28}{:>9}{:>7}{:>14}  status", "check", "coords", "kinks", "max_rel_err");
    for r in results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(s, "{:<28}{:>9}{:>7}{:>14.3e}  {status}", r.name, r.checked, r.kinks, r.max_rel_err);
        if !r.passed() {
            let _ = writeln!(s, "    worst: {}", r.worst);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(1e-10, 0.0), 1e-2);
        assert_eq!(rel_err(1.0, 3.0), 0.5);
    }

    #[test]
    fn coverage_spreads_indices() {
        assert_eq!(Coverage::All.indices(3), vec![0, 1, 2]);
        assert_eq!(Coverage::AtMost(2).indices(10), vec![2, 7]);
        assert_eq!(Coverage::AtMost(5).indices(3), vec![0, 1, 2]);
    }

    #[test]
    fn kinks_are_excluded_and_capped() {
        let mut v: Vec<f64> = (0..20).map(|i| 0.1 + 0.05 * i as f64).collect();
        v[3] = 1.5e-5;
        let x = Tensor::from_vec(Shape::new(1, 1, 4, 5), v).unwrap();
        let relu_sum = |g: &mut Graph, v: &[Var]| {
            let r = g.relu(v[0]);
            let r2 = g.mul(r, r)?;
            Ok(g.sum(r2))
        };
        let r = check_graph("relu", std::slice::from_ref(&x), relu_sum).unwrap();
        assert_eq!((r.checked, r.kinks), (19, 1));
        assert!(r.passed(), "{r:?}");
        let crowded = x.map(|v| if v < 0.4 { 1e-5 } else { v });
        let r = check_graph("relu", &[crowded], relu_sum).unwrap();
        assert!(r.kinks > 1 && !r.passed());
    }

    #[test]
    fn catches_a_wrong_rule() {
        struct Wrong;
        impl crate::tensor::Backward for Wrong {
            fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
                vec![Some(inputs[0].map(|v| 3.0 * v * g.item()))]
            }
        }
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.5, -1.0]).unwrap();
        let r = check_graph("x^2 with 3x rule", &[x], |g, v| {
            let val = g.value(v[0]).data().iter().map(|a| a * a).sum();
            Ok(g.custom(&[v[0]], Tensor::scalar(val), Box::new(Wrong)))
        })
        .unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_err - 0.2).abs() < 1e-6);
    }
}
