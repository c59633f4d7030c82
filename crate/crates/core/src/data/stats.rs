use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::tensor::{Shape, Tensor};

/// Per-pixel fraction of masks marking the pixel as glass, after resizing
/// every mask (nearest-neighbour) to `(h, w)`.
pub fn location_probability_map(masks: &[Mask], h: usize, w: usize) -> Result<Tensor> {
    if masks.is_empty() {
        return Err(Error::usage("location map of an empty mask set"));
    }
    let mut acc = Tensor::zeros(Shape::new(1, 1, h, w));
    for m in masks {
        let r = m.resize_nearest(h, w);
        for (a, &v) in acc.data_mut().iter_mut().zip(r.data()) {
            *a += f64::from(v);
        }
    }
    let n = masks.len() as f64;
    Ok(acc.map(|v| v / n))
}

/// Counts of mask area fractions in `n` equal bins over `[0, 1]`; the last
/// bin is closed on the right.
#[derive(Clone, Debug, PartialEq)]
pub struct AreaHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn area_histogram(masks: &[Mask], n_bins: usize) -> Result<AreaHistogram> {
    if n_bins == 0 {
        return Err(Error::usage("histogram needs at least one bin"));
    }
    let mut counts = vec![0; n_bins];
    for m in masks {
        let bin = ((m.area_fraction() * n_bins as f64) as usize).min(n_bins - 1);
        counts[bin] += 1;
    }
    let edges = (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect();
    Ok(AreaHistogram { edges, counts })
}

impl AreaHistogram {
    pub fn to_csv(&self) -> String {
        let total: usize = self.counts.iter().sum();
        let mut s = String::from("bin_lo,bin_hi,count,proportion\n");
        for (i, &c) in self.counts.iter().enumerate() {
            let p = if total == 0 { 0.0 } else { c as f64 / total as f64 };
            let _ = writeln!(s, "{:.4},{:.4},{c},{p:.6}", self.edges[i], self.edges[i + 1]);
        }
        s
    }
}
