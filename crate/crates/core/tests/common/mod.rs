#![allow(dead_code)]

//! Nested-loop reference implementations of the evaluation metrics. They
//! share no code with the library: every count is a fresh pass over pixels at
//! the threshold in question.

pub const BETA_SQ: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn counts(pred: &[f64], gt: &[u8], threshold: f64) -> Counts {
    let mut c = Counts { tp: 0, tn: 0, fp: 0, fn_: 0 };
    for i in 0..pred.len() {
        let p = pred[i] > threshold;
        let g = gt[i] == 1;
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    c
}

pub fn iou(pred: &[f64], gt: &[u8]) -> f64 {
    let c = counts(pred, gt, 0.5);
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

pub fn pa(pred: &[f64], gt: &[u8]) -> f64 {
    let c = counts(pred, gt, 0.5);
    (c.tp + c.tn) as f64 / pred.len() as f64
}

pub fn mae(pred: &[f64], gt: &[u8]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i] as f64).abs();
    }
    s / pred.len() as f64
}

pub fn ber(pred: &[f64], gt: &[u8]) -> Option<f64> {
    let c = counts(pred, gt, 0.5);
    let (np, nn) = (c.tp + c.fn_, c.tn + c.fp);
    if np == 0 || nn == 0 {
        return None;
    }
    Some((1.0 - 0.5 * (c.tp as f64 / np as f64 + c.tn as f64 / nn as f64)) * 100.0)
}

/// `(precision, recall, f_beta)` at each of the 256 thresholds `i / 255`,
/// precision and recall averaged over images first.
pub fn curve(images: &[(Vec<f64>, Vec<u8>)]) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for i in 0..256 {
        let t = i as f64 / 255.0;
        let (mut ps, mut rs) = (0.0, 0.0);
        for (pred, gt) in images {
            let c = counts(pred, gt, t);
            let np = c.tp + c.fn_;
            let predicted = c.tp + c.fp;
            ps += match (predicted, np) {
                (0, 0) => 1.0,
                (0, _) => 0.0,
                _ => c.tp as f64 / predicted as f64,
            };
            rs += if np == 0 { 1.0 } else { c.tp as f64 / np as f64 };
        }
        let (p, r) = (ps / images.len() as f64, rs / images.len() as f64);
        let f = if BETA_SQ * p + r == 0.0 { 0.0 } else { (1.0 + BETA_SQ) * p * r / (BETA_SQ * p + r) };
        out.push((p, r, f));
    }
    out
}

pub struct Report {
    pub iou: f64,
    pub pa: f64,
    pub mae: f64,
    pub ber: Option<f64>,
    pub ber_images: usize,
    pub f_beta_max: f64,
    pub curve: Vec<(f64, f64, f64)>,
}

pub fn report(images: &[(Vec<f64>, Vec<u8>)]) -> Report {
    let n = images.len() as f64;
    let bers: Vec<f64> = images.iter().filter_map(|(p, g)| ber(p, g)).collect();
    let curve = curve(images);
    Report {
        iou: images.iter().map(|(p, g)| iou(p, g)).sum::<f64>() / n,
        pa: images.iter().map(|(p, g)| pa(p, g)).sum::<f64>() / n,
        mae: images.iter().map(|(p, g)| mae(p, g)).sum::<f64>() / n,
        ber: (!bers.is_empty()).then(|| bers.iter().sum::<f64>() / bers.len() as f64),
        ber_images: bers.len(),
        f_beta_max: curve.iter().map(|c| c.2).fold(0.0, f64::max),
        curve,
    }
}
