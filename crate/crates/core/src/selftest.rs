//! Executable example suite behind `gdnet selftest`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{self, generate, hflip, pnm, resize_sample, SyntheticSceneSpec};
use crate::error::Error;
use crate::gradcheck::{self, random_tensor};
use crate::losses::{self, LossWeights};
use crate::mask::Mask;
use crate::metrics::{self, EvalSample};
use crate::nn::{AttentionFuse, Bfe, BfeConfig, Checkpoint, Gdnet, GdnetConfig, LcfiModule, LcfiModuleConfig, ParamKind, ParamStore, Session};
use crate::tensor::{bilinear_resize, conv2d_forward, ConvSpec, Graph, RunningStats, Shape, Tensor};
use crate::trainer::{poly_lr, sgd_step, OptimConfig, OptimState};

type Outcome = std::result::Result<(), String>;
type Case = (&'static str, fn() -> Outcome);

pub struct CaseResult {
    pub name: &'static str,
    pub outcome: Outcome,
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e(err: Error) -> String {
    err.to_string()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape() && a.max_abs_diff(b) <= tol
}

fn conv_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&mut rng, Shape::new(1, 2, 5, 5), -1.0, 1.0);
    let spec = ConvSpec::square(2, 2, 3, 1).map_err(e)?;
    let w = Tensor::from_fn(spec.weight_shape(), |o, i, h, w| f64::from(o == i && h == 1 && w == 1));
    ensure!(conv2d_forward(&x, &w, None, &spec).map_err(e)? == x, "identity kernel changed the input");
    Ok(())
}

fn conv_separable() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (k, d) in [(3, 1), (5, 2), (7, 3), (9, 4)] {
        let x = random_tensor(&mut rng, Shape::new(1, 2, 11, 9), -1.0, 1.0);
        let u = random_tensor(&mut rng, Shape::new(1, 1, 1, k), -1.0, 1.0);
        let v = random_tensor(&mut rng, Shape::new(1, 1, k, 1), -1.0, 1.0);
        let vert = ConvSpec::same(2, 2, k, 1, d).map_err(e)?;
        let horiz = ConvSpec::same(2, 2, 1, k, d).map_err(e)?;
        let dense = ConvSpec::same(2, 2, k, k, d).map_err(e)?;
        // per-channel kernels: out o reads only input o
        let wv = Tensor::from_fn(vert.weight_shape(), |o, i, h, _| if o == i { v.data()[h] } else { 0.0 });
        let wh = Tensor::from_fn(horiz.weight_shape(), |o, i, _, w| if o == i { u.data()[w] } else { 0.0 });
        let wd = Tensor::from_fn(dense.weight_shape(), |o, i, h, w| if o == i { v.data()[h] * u.data()[w] } else { 0.0 });
        let sep = conv2d_forward(&conv2d_forward(&x, &wv, None, &vert).map_err(e)?, &wh, None, &horiz).map_err(e)?;
        let full = conv2d_forward(&x, &wd, None, &dense).map_err(e)?;
        ensure!(close(&sep, &full, 1e-10), "k={k} d={d}: diff {}", sep.max_abs_diff(&full));
    }
    Ok(())
}

fn batch_norm_statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, Shape::new(3, 2, 4, 4), -3.0, 5.0);
    let mut g = Graph::new();
    let xv = g.leaf(x, false);
    let gamma = g.constant(Tensor::full(Shape::new(1, 2, 1, 1), 1.0));
    let beta = g.constant(Tensor::zeros(Shape::new(1, 2, 1, 1)));
    let y = g.batch_norm(xv, gamma, beta, &mut RunningStats::new(2), true).map_err(e)?;
    let y = g.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3).flat_map(|n| (0..16).map(move |i| (n, i))).map(|(n, i)| y.at(n, c, i / 4, i % 4)).collect();
        let mean = vals.iter().sum::<f64>() / 48.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 48.0;
        ensure!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3, "channel {c}: mean {mean} var {var}");
    }
    Ok(())
}

fn sigmoid_gradient() -> Outcome {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0), true);
    let y = g.sigmoid(x);
    g.backward(y).map_err(e)?;
    let a = g.grad(x).expect("leaf grad").item();
    let h = gradcheck::FD_STEP;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let n = (sig(h) - sig(-h)) / (2.0 * h);
    ensure!((a - 0.25).abs() < 1e-15 && (a - n).abs() < 1e-6, "analytic {a} numeric {n}");
    Ok(())
}

fn bilinear_cases() -> Outcome {
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).map_err(e)?;
    ensure!(bilinear_resize(&x, 2, 2).map_err(e)? == x, "same-size resize is not identity");
    let up = bilinear_resize(&x, 4, 4).map_err(e)?;
    let row = [1.0, 1.25, 1.75, 2.0];
    for (i, &dy) in [0.0, 0.5, 1.5, 2.0].iter().enumerate() {
        for j in 0..4 {
            let want = row[j] + dy;
            ensure!((up.at(0, 0, i, j) - want).abs() < 1e-12, "({i},{j}) = {} want {want}", up.at(0, 0, i, j));
        }
    }
    Ok(())
}

fn pools() -> Outcome {
    let mut x = Tensor::zeros(Shape::new(1, 2, 3, 3));
    x.set(0, 1, 2, 1, 4.5);
    let mut g = Graph::new();
    let v = g.leaf(x, false);
    let avg = g.global_avg_pool(v);
    let max = g.global_max_pool(v);
    ensure!(g.value(avg).data() == [0.0, 0.5], "avg {:?}", g.value(avg).data());
    ensure!(g.value(max).data() == [0.0, 4.5], "max {:?}", g.value(max).data());
    Ok(())
}

fn backward_basics() -> Outcome {
    let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -2.0, 3.0]).map_err(e)?;
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let sq = g.mul(v, v).map_err(e)?;
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    g.backward(half).map_err(e)?;
    ensure!(g.grad(v) == Some(&x), "grad of half square is not x");
    let c = g.constant(Tensor::scalar(1.0));
    ensure!(matches!(g.backward(c), Err(Error::Usage(_))), "backward on a detached value must fail");
    Ok(())
}

fn modules_keep_size() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let lcfi = LcfiModule::new(&mut store, &mut rng, "l", 3, LcfiModuleConfig::standard(4, 4, 4)).map_err(e)?;
    let att = AttentionFuse::new(&mut store, &mut rng, "a", 4, 2).map_err(e)?;
    let bfe = Bfe::new(&mut store, &mut rng, "b", BfeConfig::new(4)).map_err(e)?;
    let x = random_tensor(&mut rng, Shape::new(2, 3, 9, 7), -1.0, 1.0);
    let mut s = Session::new(&mut store, true);
    let xv = s.graph.constant(x);
    let y = lcfi.forward(&mut s, xv).map_err(e)?;
    let a = att.forward(&mut s, y).map_err(e)?;
    let b = bfe.forward(&mut s, a.output).map_err(e)?;
    let want = Shape::new(2, 4, 9, 7);
    for (label, v) in [("lcfi", y), ("attention", a.output), ("bfe", b.enhanced)] {
        ensure!(s.graph.shape(v) == want, "{label} shape {}", s.graph.shape(v));
    }
    let gate = s.graph.value(a.channel_gate);
    ensure!(gate.data().iter().all(|&v| v > 0.0 && v < 1.0), "channel gate outside (0, 1)");
    Ok(())
}

fn network_shapes() -> Outcome {
    let cfg = GdnetConfig::with_width(4, 32);
    let (net, mut store) = Gdnet::new(&cfg, 5).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image = random_tensor(&mut rng, Shape::new(2, 3, 32, 32), 0.0, 1.0);
    let mut s = Session::new(&mut store, true);
    let out = net.forward(&mut s, &image).map_err(e)?;
    for (name, v) in out.named() {
        let t = s.graph.value(v);
        ensure!(t.shape() == Shape::new(2, 1, 32, 32), "{name} shape {}", t.shape());
        ensure!(t.data().iter().all(|&p| p > 0.0 && p < 1.0), "{name} outside (0, 1)");
    }
    let bad = random_tensor(&mut rng, Shape::new(1, 3, 24, 32), 0.0, 1.0);
    ensure!(matches!(net.forward(&mut s, &bad), Err(Error::Config(_))), "24x32 input must be rejected");
    Ok(())
}

fn loss_values() -> Outcome {
    let g = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 1.0, 0.0, 0.0]).map_err(e)?;
    let half = Tensor::full(g.shape(), 0.5);
    ensure!((losses::bce_value(half.data(), g.data()) - std::f64::consts::LN_2).abs() < 1e-15, "bce(0.5) != ln 2");
    ensure!(losses::soft_iou_value(&g, &g) == 0.0, "soft iou of perfect prediction");
    ensure!(losses::soft_iou_value(&g.map(|v| 1.0 - v), &g) == 1.0, "soft iou of inverted prediction");
    let w = LossWeights::default();
    ensure!(w.combine([1.0, 2.0, 3.0, 4.0, 5.0]) == 1.0 + 2.0 + 3.0 + 40.0 + 250.0, "weighted total");
    Ok(())
}

fn boundary_ring() -> Outcome {
    let m = Tensor::from_fn(Shape::new(1, 1, 6, 6), |_, _, y, x| f64::from((2..4).contains(&y) && (2..4).contains(&x)));
    let b = losses::boundary_gt(&m);
    let ones = b.data().iter().filter(|&&v| v == 1.0).count();
    ensure!(ones == 12, "boundary of a 2x2 square has {ones} pixels");
    Ok(())
}

fn metric_cases() -> Outcome {
    let gt = Mask::new(2, 2, vec![1, 1, 0, 0]).map_err(e)?;
    let s = EvalSample::new(vec![1.0, 0.0, 0.0, 0.0], gt.clone()).map_err(e)?;
    ensure!(metrics::iou(&s, 0.5) == 0.5, "iou");
    ensure!(metrics::pixel_accuracy(&s, 0.5) == 0.75, "pa");
    ensure!(metrics::ber(&s, 0.5) == Some(25.0), "ber");
    let perfect = EvalSample::new(vec![1.0, 1.0, 0.0, 0.0], gt).map_err(e)?;
    let r = metrics::evaluate(&[perfect]).map_err(e)?;
    ensure!(r.iou == 1.0 && r.pa == 1.0 && r.mae == 0.0 && r.ber == Some(0.0), "perfect report {r:?}");
    let one_class = EvalSample::new(vec![0.9; 4], Mask::new(2, 2, vec![1; 4]).map_err(e)?).map_err(e)?;
    ensure!(metrics::ber(&one_class, 0.5).is_none(), "ber must be undefined without negatives");
    Ok(())
}

fn data_contracts() -> Outcome {
    let spec = SyntheticSceneSpec::default();
    let a = generate(&spec, 9).map_err(e)?;
    ensure!(a == generate(&spec, 9).map_err(e)?, "generation is not deterministic");
    ensure!(hflip(&hflip(&a)) == a, "hflip twice is not identity");
    ensure!(resize_sample(&a, 64, 64).map_err(e)? == a, "same-size resize is not identity");
    let r = resize_sample(&a, 48, 80).map_err(e)?;
    ensure!(r.mask.data().iter().all(|&v| v <= 1), "resized mask not binary");
    let bytes = pnm::encode(&pnm::Raster {
        width: 2,
        height: 1,
        channels: 1,
        data: vec![0, 128],
        payload_offset: 0,
    });
    let back = pnm::decode(&bytes, Path::new("mem")).map_err(e)?;
    ensure!(back.data == vec![0, 128], "graymap round trip");
    let m = a.mask.clone();
    let map = data::location_probability_map(&[m.clone(), m.complement()], 64, 64).map_err(e)?;
    ensure!(map.data().iter().all(|&v| v == 0.5), "mask plus complement is not uniform 0.5");
    Ok(())
}

fn optimiser() -> Outcome {
    ensure!(poly_lr(0, 10, 1e-3, 0.9) == 1e-3 && poly_lr(10, 10, 1e-3, 0.9) == 0.0, "poly endpoints");
    let mut store = ParamStore::new();
    store.add("w", ParamKind::ConvWeight, Tensor::scalar(2.0));
    let mut st = OptimState::new(&store, OptimConfig::default(), 10).map_err(e)?;
    sgd_step(&mut store, &[Tensor::scalar(0.5)], &mut st, 0.1).map_err(e)?;
    let want = 2.0 - 0.1 * (0.5 + 5e-4 * 2.0);
    ensure!(store.params()[0].value.item() == want, "one sgd step gives {}", store.params()[0].value.item());
    Ok(())
}

fn checkpoint_round_trip() -> Outcome {
    let cfg = GdnetConfig::with_width(4, 32);
    let (_, store) = Gdnet::new(&cfg, 6).map_err(e)?;
    let bytes = Checkpoint::capture(&cfg, &store).to_bytes();
    let (_, fresh) = Checkpoint::from_bytes(&bytes, Path::new("mem")).map_err(e)?.into_model().map_err(e)?;
    ensure!(Checkpoint::capture(&cfg, &fresh).to_bytes() == bytes, "save-load-save changed bytes");
    Ok(())
}

fn gradient_spot_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random_tensor(&mut rng, Shape::new(1, 2, 4, 4), -1.0, 1.0);
    let spec = ConvSpec::same(2, 2, 3, 3, 2).map_err(e)?;
    let w = random_tensor(&mut rng, spec.weight_shape(), -1.0, 1.0);
    let r = gradcheck::check_graph("conv", &[x, w], |g, v| {
        let y = g.conv2d(v[0], v[1], None, &spec)?;
        let y = g.sigmoid(y);
        gradcheck::probe(g, y, 0)
    })
    .map_err(e)?;
    ensure!(r.passed(), "max rel err {} at {}", r.max_rel_err, r.worst);
    Ok(())
}

pub fn cases() -> Vec<Case> {
    vec![
        ("conv2d identity kernel", conv_identity),
        ("separable pair equals rank-1 dense kernel", conv_separable),
        ("batch norm normalises each channel", batch_norm_statistics),
        ("sigmoid gradient at 0", sigmoid_gradient),
        ("bilinear 2x2 to 4x4", bilinear_cases),
        ("global pools", pools),
        ("backward basics", backward_basics),
        ("modules preserve spatial size", modules_keep_size),
        ("network output shapes and ranges", network_shapes),
        ("loss closed forms and weights", loss_values),
        ("boundary of a 2x2 square", boundary_ring),
        ("metric closed forms", metric_cases),
        ("data generation and augmentation", data_contracts),
        ("poly schedule and sgd step", optimiser),
        ("checkpoint round trip", checkpoint_round_trip),
        ("finite-difference spot check", gradient_spot_checks),
    ]
}

pub fn run_all() -> Vec<CaseResult> {
    cases()
        .into_iter()
        .map(|(name, f)| CaseResult { name, outcome: f() })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_cases_pass() {
        for r in super::run_all() {
            assert!(r.outcome.is_ok(), "{}: {:?}", r.name, r.outcome);
        }
    }
}
