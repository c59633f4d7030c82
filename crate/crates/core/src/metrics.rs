//! Evaluation protocol: IoU, pixel accuracy, max F-beta over 256 thresholds,
//! MAE and balance error rate, with dataset aggregation and report output.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::Mask;

pub const BETA_SQ: f64 = 0.3;
pub const CURVE_POINTS: usize = 256;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A prediction map in `[0, 1]` paired with its binary ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pred: Vec<f64>,
    gt: Mask,
}

impl EvalSample {
    pub fn new(pred: Vec<f64>, gt: Mask) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::input(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(v) = pred.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("prediction value {v} outside [0, 1]")));
        }
        Ok(EvalSample { pred, gt })
    }

    pub fn pred(&self) -> &[f64] {
        &self.pred
    }

    pub fn gt(&self) -> &Mask {
        &self.gt
    }
}

/// `P_b = 1` iff `P > threshold`.
pub fn binarize(pred: &[f64], threshold: f64) -> Vec<u8> {
    pred.iter().map(|&p| (p > threshold) as u8).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Ground-truth positives.
    pub fn np(&self) -> usize {
        self.tp + self.fn_
    }

    /// Ground-truth negatives.
    pub fn nn(&self) -> usize {
        self.tn + self.fp
    }

    pub fn total(&self) -> usize {
        self.np() + self.nn()
    }
}

pub fn confusion(sample: &EvalSample, threshold: f64) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in sample.pred.iter().zip(sample.gt.data()) {
        match (p > threshold, g == 1) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

/// Intersection over union of the binarised prediction; 1 when both are empty.
pub fn iou(sample: &EvalSample, threshold: f64) -> f64 {
    let c = confusion(sample, threshold);
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

pub fn pixel_accuracy(sample: &EvalSample, threshold: f64) -> f64 {
    let c = confusion(sample, threshold);
    (c.tp + c.tn) as f64 / c.total() as f64
}

pub fn mae(sample: &EvalSample) -> f64 {
    let sum: f64 = sample
        .pred
        .iter()
        .zip(sample.gt.data())
        .map(|(&p, &g)| (p - f64::from(g)).abs())
        .sum();
    sum / sample.pred.len() as f64
}

/// Balance error rate in percent; `None` when either class is absent.
pub fn ber(sample: &EvalSample, threshold: f64) -> Option<f64> {
    let c = confusion(sample, threshold);
    if c.np() == 0 || c.nn() == 0 {
        return None;
    }
    let tpr = c.tp as f64 / c.np() as f64;
    let tnr = c.tn as f64 / c.nn() as f64;
    Some((1.0 - 0.5 * (tpr + tnr)) * 100.0)
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let den = BETA_SQ * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA_SQ) * precision * recall / den
    }
}

/// Threshold `i` of the curve, `i / 255`.
pub fn curve_threshold(i: usize) -> f64 {
    i as f64 / (CURVE_POINTS - 1) as f64
}

/// Number of curve thresholds a value exceeds: the `m` with `p > t_i`
/// exactly for `i < m`.
fn thresholds_exceeded(p: f64) -> usize {
    let mut m = ((p * 255.0).ceil().max(0.0) as usize).min(CURVE_POINTS);
    while m > 0 && !(p > curve_threshold(m - 1)) {
        m -= 1;
    }
    while m < CURVE_POINTS && p > curve_threshold(m) {
        m += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
pub struct FCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f_beta: Vec<f64>,
}

impl FCurve {
    pub fn max_f_beta(&self) -> f64 {
        self.f_beta.iter().copied().fold(0.0, f64::max)
    }
}

/// Precision and recall at all 256 thresholds for one image.
fn image_pr(sample: &EvalSample) -> (Vec<f64>, Vec<f64>) {
    let mut pos = [0usize; CURVE_POINTS + 1];
    let mut neg = [0usize; CURVE_POINTS + 1];
    for (&p, &g) in sample.pred.iter().zip(sample.gt.data()) {
        let m = thresholds_exceeded(p);
        if g == 1 {
            pos[m] += 1;
        } else {
            neg[m] += 1;
        }
    }
    let np: usize = pos.iter().sum();
    // predicted positives at threshold i are the pixels with m > i
    let (mut tp, mut fp) = (0, 0);
    let mut precision = vec![0.0; CURVE_POINTS];
    let mut recall = vec![0.0; CURVE_POINTS];
    for i in (0..CURVE_POINTS).rev() {
        tp += pos[i + 1];
        fp += neg[i + 1];
        precision[i] = if tp + fp == 0 {
            if np == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            tp as f64 / (tp + fp) as f64
        };
        recall[i] = if np == 0 { 1.0 } else { tp as f64 / np as f64 };
    }
    (precision, recall)
}

/// Dataset-level curve: precision and recall averaged over images at every
/// threshold, then combined into F-beta.
pub fn f_measure_curve(samples: &[EvalSample]) -> Result<FCurve> {
    if samples.is_empty() {
        return Err(Error::usage("F-measure curve over an empty dataset"));
    }
    let mut precision = vec![0.0; CURVE_POINTS];
    let mut recall = vec![0.0; CURVE_POINTS];
    for s in samples {
        let (p, r) = image_pr(s);
        for i in 0..CURVE_POINTS {
            precision[i] += p[i];
            recall[i] += r[i];
        }
    }
    let n = samples.len() as f64;
    precision.iter_mut().for_each(|v| *v /= n);
    recall.iter_mut().for_each(|v| *v /= n);
    let f_beta = precision.iter().zip(&recall).map(|(&p, &r)| f_beta(p, r)).collect();
    Ok(FCurve {
        precision,
        recall,
        f_beta,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageMetrics {
    pub iou: f64,
    pub pa: f64,
    pub mae: f64,
    pub ber: Option<f64>,
}

pub fn image_metrics(sample: &EvalSample) -> ImageMetrics {
    ImageMetrics {
        iou: iou(sample, DEFAULT_THRESHOLD),
        pa: pixel_accuracy(sample, DEFAULT_THRESHOLD),
        mae: mae(sample),
        ber: ber(sample, DEFAULT_THRESHOLD),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub images: usize,
    pub iou: f64,
    pub pa: f64,
    pub f_beta_max: f64,
    pub mae: f64,
    /// Mean over images where BER is defined; `None` if there are none.
    pub ber: Option<f64>,
    pub ber_images: usize,
    pub pr_curve: Vec<(f64, f64)>,
    pub f_curve: Vec<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-image means for IoU, PA, MAE and BER; F-beta from the dataset curve.
pub fn aggregate(per_image: &[ImageMetrics], curve: FCurve) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::usage("cannot aggregate an empty dataset"));
    }
    let ber_values: Vec<f64> = per_image.iter().filter_map(|m| m.ber).collect();
    Ok(MetricReport {
        images: per_image.len(),
        iou: mean(per_image.iter().map(|m| m.iou)).unwrap_or(0.0),
        pa: mean(per_image.iter().map(|m| m.pa)).unwrap_or(0.0),
        f_beta_max: curve.max_f_beta(),
        mae: mean(per_image.iter().map(|m| m.mae)).unwrap_or(0.0),
        ber: mean(ber_values.iter().copied()),
        ber_images: ber_values.len(),
        pr_curve: curve.precision.iter().copied().zip(curve.recall.iter().copied()).collect(),
        f_curve: curve.f_beta,
    })
}

pub fn evaluate(samples: &[EvalSample]) -> Result<MetricReport> {
    let per: Vec<ImageMetrics> = samples.iter().map(image_metrics).collect();
    aggregate(&per, f_measure_curve(samples)?)
}

impl MetricReport {
    fn ber_text(&self) -> String {
        self.ber.map_or_else(|| "undefined".to_string(), |b| format!("{b:.6}"))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<12}{:>12.6}", "IoU", self.iou);
        let _ = writeln!(s, "{:<12}{:>12.6}", "PA", self.pa);
        let _ = writeln!(s, "{:<12}{:>12.6}", "F_beta_max", self.f_beta_max);
        let _ = writeln!(s, "{:<12}{:>12.6}", "MAE", self.mae);
        let _ = writeln!(s, "{:<12}{:>12}", "BER", self.ber_text());
        let _ = writeln!(s, "{:<12}{:>12}", "images", self.images);
        let _ = writeln!(s, "{:<12}{:>12}", "ber_images", self.ber_images);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "iou,{:.6}", self.iou);
        let _ = writeln!(s, "pa,{:.6}", self.pa);
        let _ = writeln!(s, "f_beta_max,{:.6}", self.f_beta_max);
        let _ = writeln!(s, "mae,{:.6}", self.mae);
        let _ = writeln!(s, "ber,{}", self.ber_text());
        let _ = writeln!(s, "images,{}", self.images);
        let _ = writeln!(s, "ber_images,{}", self.ber_images);
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall,f_beta\n");
        for (i, (&(p, r), f)) in self.pr_curve.iter().zip(&self.f_curve).enumerate() {
            let _ = writeln!(s, "{:.6},{p:.6},{r:.6},{f:.6}", curve_threshold(i));
        }
        s
    }
}
