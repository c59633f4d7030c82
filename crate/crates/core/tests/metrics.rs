mod common;

use gdnet::mask::Mask;
use gdnet::metrics::{
    aggregate, ber, binarize, confusion, curve_threshold, evaluate, f_beta, f_measure_curve, image_metrics, iou, mae,
    pixel_accuracy, EvalSample, CURVE_POINTS, DEFAULT_THRESHOLD,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample(pred: &[f64], gt: &[u8], w: usize) -> EvalSample {
    EvalSample::new(pred.to_vec(), Mask::new(gt.len() / w, w, gt.to_vec()).unwrap()).unwrap()
}

fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<f64>, Vec<u8>) {
    let density = rng.gen_range(0.0..1.0);
    let gt: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect();
    // some values land on exact thresholds to exercise the tie rule
    let pred = (0..h * w)
        .map(|_| match rng.gen_range(0..4) {
            0 => rng.gen_range(0..=255) as f64 / 255.0,
            1 => f64::from(rng.gen_range(0..=1u8)),
            _ => rng.gen_range(0.0..=1.0),
        })
        .collect();
    (pred, gt)
}

#[test]
fn binarize_tie_rule() {
    assert_eq!(binarize(&[0.4, 0.5, 0.6], 0.5), vec![0, 0, 1]);
    assert_eq!(binarize(&[0.01, 0.3, 1.0], 0.0), vec![1, 1, 1]);
    assert_eq!(binarize(&[0.0, 1.0], 1.0), vec![0, 0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (pred, _) = random_pair(&mut rng, 9, 7);
    let t = rng.gen_range(0.0..1.0);
    let oracle: Vec<u8> = pred.iter().map(|&p| if p > t { 1 } else { 0 }).collect();
    assert_eq!(binarize(&pred, t), oracle);
}

#[test]
fn two_by_two_counts() {
    let s = sample(&[0.9, 0.2, 0.1, 0.4], &[1, 1, 0, 0], 2);
    assert_eq!(iou(&s, 0.5), 0.5);
    assert_eq!(pixel_accuracy(&s, 0.5), 0.75);
    assert_eq!(ber(&s, 0.5), Some(25.0));
    let c = confusion(&s, 0.5);
    assert_eq!((c.tp, c.tn, c.fp, c.fn_, c.np(), c.nn()), (1, 2, 0, 1, 2, 2));
}

#[test]
fn perfect_inverse_and_disjoint() {
    let gt = [1, 1, 0, 0, 1, 0];
    let exact: Vec<f64> = gt.iter().map(|&g| f64::from(g)).collect();
    let inverse: Vec<f64> = exact.iter().map(|v| 1.0 - v).collect();
    let s = sample(&exact, &gt, 3);
    assert_eq!((iou(&s, 0.5), pixel_accuracy(&s, 0.5), mae(&s), ber(&s, 0.5)), (1.0, 1.0, 0.0, Some(0.0)));
    let s = sample(&inverse, &gt, 3);
    assert_eq!((iou(&s, 0.5), pixel_accuracy(&s, 0.5), mae(&s), ber(&s, 0.5)), (0.0, 0.0, 1.0, Some(100.0)));
    let s = sample(&[0.5; 6], &gt, 3);
    assert_eq!(mae(&s), 0.5);
    let empty = sample(&[0.1; 4], &[0; 4], 2);
    assert_eq!(iou(&empty, 0.5), 1.0);
    assert_eq!(ber(&empty, 0.5), None);
    assert_eq!(ber(&sample(&[0.9; 4], &[1; 4], 2), 0.5), None);
}

#[test]
fn sample_validation() {
    assert!(EvalSample::new(vec![0.5; 3], Mask::zeros(2, 2)).is_err());
    assert!(EvalSample::new(vec![0.5, 0.5, 1.5, 0.0], Mask::zeros(2, 2)).is_err());
    assert!(EvalSample::new(vec![0.5, f64::NAN, 0.0, 0.0], Mask::zeros(2, 2)).is_err());
    assert!(Mask::new(1, 2, vec![0, 2]).is_err());
}

#[test]
fn curve_for_perfect_single_image() {
    let gt = [1, 0, 0, 1, 1, 0, 1, 0, 0];
    let pred: Vec<f64> = gt.iter().map(|&g| f64::from(g)).collect();
    let c = f_measure_curve(&[sample(&pred, &gt, 3)]).unwrap();
    assert_eq!(c.f_beta.len(), CURVE_POINTS);
    for i in 0..CURVE_POINTS - 1 {
        assert_eq!((c.precision[i], c.recall[i], c.f_beta[i]), (1.0, 1.0, 1.0), "{i}");
    }
    // nothing exceeds t = 1
    assert_eq!((c.precision[255], c.recall[255], c.f_beta[255]), (0.0, 0.0, 0.0));
    assert_eq!(c.max_f_beta(), 1.0);
}

#[test]
fn f_beta_of_equal_precision_and_recall() {
    for r in [0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
        assert!((f_beta(r, r) - r).abs() < 1e-15);
    }
    assert!((f_beta(1.0, 0.5) - 1.3 * 0.5 / 0.8).abs() < 1e-15);
}

#[test]
fn two_image_curve_matches_threshold_loop() {
    let a_pred = [0.0, 0.5, 1.0, 128.0 / 255.0, 0.2, 0.9, 1.0 / 255.0, 0.75, 0.3];
    let a_gt = [0, 1, 1, 1, 0, 1, 0, 0, 0];
    let b_pred = [0.6, 0.6, 0.1, 0.0, 254.0 / 255.0, 0.45, 0.5, 0.05, 0.8];
    let b_gt = [1, 0, 0, 0, 1, 1, 0, 0, 1];
    let images = vec![(a_pred.to_vec(), a_gt.to_vec()), (b_pred.to_vec(), b_gt.to_vec())];
    let oracle = common::curve(&images);
    let c = f_measure_curve(&[sample(&a_pred, &a_gt, 3), sample(&b_pred, &b_gt, 3)]).unwrap();
    for (i, &(p, r, f)) in oracle.iter().enumerate() {
        assert_eq!((c.precision[i], c.recall[i], c.f_beta[i]), (p, r, f), "threshold {i}");
    }
    // image b has no positive prediction past 254/255
    assert_eq!(c.precision[255], 0.0);
}

#[test]
fn curve_rejects_empty_dataset() {
    assert!(matches!(f_measure_curve(&[]), Err(gdnet::Error::Usage(_))));
    assert!(evaluate(&[]).is_err());
}

#[test]
fn curve_thresholds() {
    assert_eq!(curve_threshold(0), 0.0);
    assert_eq!(curve_threshold(255), 1.0);
    assert_eq!(curve_threshold(51), 0.2);
}

#[test]
fn aggregation_conventions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let one = random_pair(&mut rng, 4, 4);
    let single = sample(&one.0, &one.1, 4);
    let m = image_metrics(&single);
    let r = evaluate(std::slice::from_ref(&single)).unwrap();
    assert_eq!((r.iou, r.pa, r.mae, r.ber), (m.iou, m.pa, m.mae, m.ber));
    let twice = evaluate(&[single.clone(), single.clone()]).unwrap();
    assert_eq!((twice.iou, twice.pa, twice.mae, twice.ber, twice.f_curve.clone()), (r.iou, r.pa, r.mae, r.ber, r.f_curve.clone()));

    // the middle image has no glass, so its BER is left out
    let images = vec![random_pair(&mut rng, 5, 4), (vec![0.7; 20], vec![0; 20]), random_pair(&mut rng, 5, 4)];
    let samples: Vec<EvalSample> = images.iter().map(|(p, g)| sample(p, g, 4)).collect();
    let r = evaluate(&samples).unwrap();
    let o = common::report(&images);
    assert_eq!(r.images, 3);
    assert_eq!(r.ber_images, o.ber_images);
    assert!((r.iou - o.iou).abs() < 1e-15 && (r.pa - o.pa).abs() < 1e-15 && (r.mae - o.mae).abs() < 1e-15);
    assert!((r.ber.unwrap() - o.ber.unwrap()).abs() < 1e-12);
    assert_eq!(r.f_beta_max, o.f_beta_max);

    let all_empty = [sample(&[0.1; 4], &[0; 4], 2)];
    assert_eq!(evaluate(&all_empty).unwrap().ber, None);
    assert!(aggregate(&[], f_measure_curve(&all_empty).unwrap()).is_err());
}

#[test]
fn report_text_forms() {
    let s = sample(&[0.9, 0.2, 0.1, 0.4], &[1, 1, 0, 0], 2);
    let r = evaluate(&[s]).unwrap();
    let csv = r.to_csv();
    assert!(csv.starts_with("metric,value\niou,0.500000\npa,0.750000\n"), "{csv}");
    assert!(csv.contains("ber,25.000000\n"));
    let curve = r.curve_csv();
    assert_eq!(curve.lines().count(), CURVE_POINTS + 1);
    assert!(curve.ends_with("1.000000,0.000000,0.000000,0.000000\n"), "{curve}");
    assert!(r.to_table().contains("BER"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn metrics_match_loop_oracle(seed in any::<u64>(), h in 1usize..=8, w in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pred, gt) = random_pair(&mut rng, h, w);
        let s = sample(&pred, &gt, w);
        let c = confusion(&s, DEFAULT_THRESHOLD);
        let o = common::counts(&pred, &gt, 0.5);
        prop_assert_eq!((c.tp, c.tn, c.fp, c.fn_), (o.tp, o.tn, o.fp, o.fn_));
        prop_assert_eq!(iou(&s, 0.5), common::iou(&pred, &gt));
        prop_assert_eq!(pixel_accuracy(&s, 0.5), common::pa(&pred, &gt));
        prop_assert!((mae(&s) - common::mae(&pred, &gt)).abs() < 1e-12);
        prop_assert_eq!(ber(&s, 0.5), common::ber(&pred, &gt));
    }

    #[test]
    fn metric_invariants(seed in any::<u64>(), h in 1usize..=8, w in 1usize..=8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<u8> = (0..h * w).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        // continuous values avoid exact ties at 0.5, so 1 - P binarises to 1 - P_b
        let pred: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).map(|p| if p == 0.5 { 0.25 } else { p }).collect();
        let s = sample(&pred, &gt, w);
        let inv_pred: Vec<f64> = pred.iter().map(|p| 1.0 - p).collect();
        let inv_gt: Vec<u8> = gt.iter().map(|g| 1 - g).collect();
        let inv = sample(&inv_pred, &inv_gt, w);
        match (ber(&s, 0.5), ber(&inv, 0.5)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
        prop_assert!((mae(&s) - mae(&inv)).abs() < 1e-12);
        let c = confusion(&s, 0.5);
        if c.tp + c.fp + c.fn_ > 0 {
            prop_assert!(iou(&s, 0.5) <= pixel_accuracy(&s, 0.5));
        }
        let curve = f_measure_curve(&[s]).unwrap();
        prop_assert!(curve.f_beta.iter().all(|f| (0.0..=1.0).contains(f)));
        prop_assert!(curve.max_f_beta() >= curve.f_beta[128]);
    }

    #[test]
    fn dataset_curve_matches_loop_oracle(seed in any::<u64>(), n in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images: Vec<(Vec<f64>, Vec<u8>)> = (0..n).map(|_| random_pair(&mut rng, 6, 5)).collect();
        let samples: Vec<EvalSample> = images.iter().map(|(p, g)| sample(p, g, 5)).collect();
        let c = f_measure_curve(&samples).unwrap();
        for (i, &(p, r, f)) in common::curve(&images).iter().enumerate() {
            prop_assert!((c.precision[i] - p).abs() < 1e-12 && (c.recall[i] - r).abs() < 1e-12 && (c.f_beta[i] - f).abs() < 1e-12);
        }
    }
}
