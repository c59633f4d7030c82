//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::ops::ControlFlow;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gdnet::data::{generate, Sample, SyntheticSceneSpec};
use gdnet::gradcheck::{self, random_tensor};
use gdnet::losses::{weighted_total, LossWeights};
use gdnet::mask::Mask;
use gdnet::metrics::{
    ber, confusion, evaluate, f_measure_curve, iou, mae, pixel_accuracy, EvalSample, CURVE_POINTS,
    DEFAULT_THRESHOLD,
};
use gdnet::nn::{Gdnet, GdnetConfig, ParamStore};
use gdnet::tensor::{conv2d_forward, ConvSpec, Graph, Shape, Tensor};
use gdnet::trainer::{poly_lr, train, training_set_iou, OptimConfig, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

/// Nested-loop cross-correlation with zero padding, stride 1.
fn dense_oracle(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, spec.out_channels, s.h, s.w), |n, o, y, xx| {
        let mut acc = 0.0;
        for i in 0..spec.in_channels {
            for ky in 0..spec.kernel_h {
                for kx in 0..spec.kernel_w {
                    let iy = (y + ky * spec.dilation) as isize - spec.padding_h as isize;
                    let ix = (xx + kx * spec.dilation) as isize - spec.padding_w as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += x.at(n, i, iy as usize, ix as usize) * w.at(o, i, ky, kx);
                    }
                }
            }
        }
        acc
    })
}

fn separable_equivalence() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = [3, 5, 7, 9][rng.gen_range(0..4)];
        let dr = rng.gen_range(1..=4);
        let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=24), rng.gen_range(1..=24));
        let x = random_tensor(&mut rng, Shape::new(n, c, h, w), -1.0, 1.0);
        let v = random_tensor(&mut rng, Shape::new(c, c, k, 1), -1.0, 1.0);
        let u = random_tensor(&mut rng, Shape::new(c, c, 1, k), -1.0, 1.0);
        let kv = ConvSpec::same(c, c, k, 1, dr).unwrap();
        let kh = ConvSpec::same(c, c, 1, k, dr).unwrap();
        let dense = ConvSpec::same(c, c, k, k, dr).unwrap();
        let wd = Tensor::from_fn(dense.weight_shape(), |o, i, a, b| {
            (0..c).map(|m| u.at(o, m, 0, b) * v.at(m, i, a, 0)).sum()
        });
        let pair = conv2d_forward(&conv2d_forward(&x, &v, None, &kv).unwrap(), &u, None, &kh).unwrap();
        worst = worst.max(pair.max_abs_diff(&dense_oracle(&x, &wd, &dense)));
    }
    let t = start.elapsed();
    verdict(
        worst < 1e-10 && t < Duration::from_secs(10),
        format!("100 cases, max abs diff {worst:.3e} (< 1e-10), {} (< 10s)", secs(t)),
    )
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let results = gradcheck::suite(0, (32, 32)).unwrap();
    let t = start.elapsed();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let kinks: usize = results.iter().map(|r| r.kinks).sum();
    let checked: usize = results.iter().map(|r| r.checked).sum();
    verdict(
        failed.is_empty() && t < Duration::from_secs(300),
        format!(
            "{} checks, {checked} coordinates ({kinks} at kinks), max rel err {worst:.3e} (< 1e-4), {} (< 300s){}",
            results.len(),
            secs(t),
            if failed.is_empty() { String::new() } else { format!(", failed: {}", failed.join(", ")) }
        ),
    )
}

fn random_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let density = rng.gen_range(0.0..1.0);
    let gt: Vec<u8> = (0..64).map(|_| u8::from(rng.gen_bool(density))).collect();
    let pred = (0..64)
        .map(|_| match rng.gen_range(0..4) {
            0 => rng.gen_range(0..=255) as f64 / 255.0,
            1 => f64::from(rng.gen_range(0..=1u8)),
            _ => rng.gen_range(0.0..=1.0),
        })
        .collect();
    (pred, gt)
}

fn metric_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0usize;
    let mut worst: f64 = 0.0;
    let mut real = |a: f64, b: f64, bad: &mut usize| {
        let d = (a - b).abs();
        worst = worst.max(d);
        if d > 1e-12 {
            *bad += 1;
        }
    };
    for _ in 0..1000 {
        let (pred, gt) = random_pair(&mut rng);
        let s = EvalSample::new(pred.clone(), Mask::new(8, 8, gt.clone()).unwrap()).unwrap();
        let c = confusion(&s, DEFAULT_THRESHOLD);
        let o = common::counts(&pred, &gt, 0.5);
        if (c.tp, c.tn, c.fp, c.fn_) != (o.tp, o.tn, o.fp, o.fn_) {
            mismatches += 1;
        }
        real(iou(&s, 0.5), common::iou(&pred, &gt), &mut mismatches);
        real(pixel_accuracy(&s, 0.5), common::pa(&pred, &gt), &mut mismatches);
        real(mae(&s), common::mae(&pred, &gt), &mut mismatches);
        match (ber(&s, 0.5), common::ber(&pred, &gt)) {
            (Some(a), Some(b)) => real(a, b, &mut mismatches),
            (None, None) => {}
            _ => mismatches += 1,
        }
        let curve = f_measure_curve(std::slice::from_ref(&s)).unwrap();
        let oracle = common::curve(&[(pred, gt)]);
        for i in 0..CURVE_POINTS {
            real(curve.precision[i], oracle[i].0, &mut mismatches);
            real(curve.recall[i], oracle[i].1, &mut mismatches);
            real(curve.f_beta[i], oracle[i].2, &mut mismatches);
        }
    }
    let t = start.elapsed();
    verdict(
        mismatches == 0 && t < Duration::from_secs(30),
        format!("1000 pairs, {mismatches} mismatches, max real diff {worst:.3e} (<= 1e-12), {} (< 30s)", secs(t)),
    )
}

fn loss_weights() -> Verdict {
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bad = 0;
    for _ in 0..200 {
        let c: [f64; 5] = std::array::from_fn(|_| rng.gen_range(0.0..10.0));
        let expected = c[0] + c[1] + c[2] + 10.0 * c[3] + 50.0 * c[4];
        let mut g = Graph::new();
        let leaves: Vec<_> = c.iter().map(|&v| g.leaf(Tensor::scalar(v), true)).collect();
        let total = weighted_total(&mut g, &leaves, &w).unwrap();
        g.backward(total).unwrap();
        let grads: Vec<f64> = leaves.iter().map(|&l| g.grad(l).unwrap().item()).collect();
        if g.value(total).item() != expected || w.combine(c) != expected || grads != [1.0, 1.0, 1.0, 10.0, 50.0] {
            bad += 1;
        }
    }
    verdict(
        bad == 0 && w.as_array() == [1.0, 1.0, 1.0, 10.0, 50.0],
        format!("weights {:?}, 200 stubbed totals, {bad} inexact", w.as_array()),
    )
}

fn poly_schedule() -> Verdict {
    let o = OptimConfig::default();
    let max_iter = 1200;
    let lrs: Vec<f64> = (0..=max_iter).map(|i| poly_lr(i, max_iter, o.base_lr, o.power)).collect();
    let decreasing = lrs.windows(2).all(|w| w[1] < w[0]);
    verdict(
        lrs[0] == 0.001 && lrs[max_iter] == 0.0 && decreasing && o.power == 0.9,
        format!(
            "lr(0) = {}, lr({max_iter}) = {}, power {}, strictly decreasing: {decreasing}",
            lrs[0], lrs[max_iter], o.power
        ),
    )
}

fn smoke_data() -> Vec<(String, Sample)> {
    (0..8)
        .map(|i| {
            let spec = SyntheticSceneSpec::sampled((64, 64), 7, i);
            (format!("scene{i}"), generate(&spec, i as u64).unwrap())
        })
        .collect()
}

struct SmokeRun {
    outcome: TrainOutcome,
    iou: f64,
    windows: Vec<f64>,
    time: Duration,
}

const SMOKE_EPOCHS: usize = 300;
const WINDOW: usize = 20;

/// Trains until the training-set IoU exceeds 0.9 at the end of a 20-epoch
/// window (at least two windows), or for the full schedule.
fn smoke_run(use_bfe: bool, data: &[(String, Sample)]) -> SmokeRun {
    let start = Instant::now();
    let mut net_cfg = GdnetConfig::with_width(16, 64);
    net_cfg.use_bfe = use_bfe;
    let cfg = TrainConfig {
        net: net_cfg,
        batch_size: 2,
        epochs: SMOKE_EPOCHS,
        seed: 1,
        ..TrainConfig::default()
    };
    let samples: Vec<Sample> = data.iter().map(|(_, s)| s.clone()).collect();
    let (net, mut store) = Gdnet::new(&cfg.net, cfg.seed).unwrap();
    let mut iou = 0.0;
    let outcome = train(&net, &mut store, data, &cfg, |e, st: &ParamStore| {
        let done = e.epoch + 1;
        if done % WINDOW != 0 || done < 2 * WINDOW {
            return ControlFlow::Continue(());
        }
        let mut probe = st.clone();
        iou = training_set_iou(&net, &mut probe, &samples).unwrap();
        if iou > 0.9 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap();
    if outcome.epochs.len() % WINDOW != 0 {
        iou = training_set_iou(&net, &mut store, &samples).unwrap();
    }
    let windows = outcome
        .epochs
        .chunks(WINDOW)
        .filter(|w| w.len() == WINDOW)
        .map(|w| w.iter().map(|e| e.mean_total).sum::<f64>() / WINDOW as f64)
        .collect();
    SmokeRun {
        outcome,
        iou,
        windows,
        time: start.elapsed(),
    }
}

fn overfit(full: &SmokeRun, data: &[(String, Sample)]) -> Verdict {
    let decreasing = full.windows.len() >= 2 && full.windows.windows(2).all(|w| w[1] < w[0]);
    let again = smoke_run(true, data);
    let same = again.outcome.checkpoint.to_bytes() == full.outcome.checkpoint.to_bytes();
    let windows: Vec<String> = full.windows.iter().map(|w| format!("{w:.4}")).collect();
    verdict(
        full.iou > 0.9 && decreasing && same && full.time < Duration::from_secs(600),
        format!(
            "IoU {:.4} (> 0.90) after {} epochs, window means [{}], rerun identical: {same}, {} (< 600s)",
            full.iou,
            full.outcome.epochs.len(),
            windows.join(", "),
            secs(full.time)
        ),
    )
}

fn ablation(full: &SmokeRun, data: &[(String, Sample)]) -> Verdict {
    let run = smoke_run(false, data);
    let finite = run.outcome.epochs.iter().all(|e| e.mean_total.is_finite());
    verdict(
        finite,
        format!(
            "without boundary enhancement: IoU {:.4} after {} epochs; full model: IoU {:.4} after {} epochs",
            run.iou,
            run.outcome.epochs.len(),
            full.iou,
            full.outcome.epochs.len()
        ),
    )
}

fn golden_report() -> Verdict {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden");
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let out = Command::new(env!("CARGO_BIN_EXE_gdnet"))
        .arg("eval")
        .arg("--pred")
        .arg(fixture.join("pred"))
        .arg("--gt")
        .arg(fixture.join("gt"))
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    if !out.status.success() {
        return verdict(false, format!("eval failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let mut differing = Vec::new();
    for name in ["report.txt", "report.csv", "report_curve.csv"] {
        let got = std::fs::read(dir.path().join(name)).unwrap_or_default();
        let want = std::fs::read(fixture.join(name)).unwrap();
        if got != want {
            differing.push(name);
        }
    }
    // the library agrees with the loop oracle on the same images
    let ids = ["a_blob", "b_empty", "c_diagonal"];
    let mut images = Vec::new();
    let mut samples = Vec::new();
    for id in ids {
        let p = gdnet::data::pnm::read_gray(&fixture.join(format!("pred/{id}.pgm"))).unwrap();
        let g = gdnet::data::pnm::read_mask(&fixture.join(format!("gt/{id}.pgm"))).unwrap();
        images.push((p.data().to_vec(), g.data().to_vec()));
        samples.push(EvalSample::new(p.into_data(), g).unwrap());
    }
    let r = evaluate(&samples).unwrap();
    let o = common::report(&images);
    let agree = (r.iou - o.iou).abs() < 1e-12 && (r.mae - o.mae).abs() < 1e-12 && r.ber_images == o.ber_images;
    verdict(
        differing.is_empty() && agree,
        if differing.is_empty() {
            "3 images, report, csv and curve byte-identical to the checked-in files".to_string()
        } else {
            format!("differs: {}", differing.join(", "))
        },
    )
}

fn main() {
    let mut all = true;
    let mut line = |n: usize, name: &str, v: Verdict| {
        all &= v.pass;
        println!("{} criterion {n} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    line(1, "separable convolution equivalence", separable_equivalence());
    line(2, "gradient checks", gradient_checks());
    line(3, "metric oracle equivalence", metric_oracle());
    line(4, "loss weights", loss_weights());
    line(5, "poly schedule", poly_schedule());
    let data = smoke_data();
    let full = smoke_run(true, &data);
    line(6, "overfit smoke test", overfit(&full, &data));
    line(7, "ablation without boundary enhancement", ablation(&full, &data));
    line(8, "golden evaluation report", golden_report());
    if !all {
        std::process::exit(1);
    }
}
