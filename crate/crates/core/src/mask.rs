use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Binary `H x W` map with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::input(format!("mask {h}x{w} needs {} values, got {}", h * w, data.len())));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::input(format!("mask value {} at index {i} is not binary", data[i])));
        }
        Ok(Mask { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..h * w).map(|i| f(i / w, i % w) as u8).collect();
        Mask { h, w, data }
    }

    /// Thresholds a `(1, 1, H, W)` tensor at `> 0.5`.
    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        Mask {
            h: s.h,
            w: s.w,
            data: t.data().iter().map(|&v| (v > 0.5) as u8).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    /// Fraction of pixels set.
    pub fn area_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.h, self.w),
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("mask shape")
    }

    pub fn complement(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn hflip(&self) -> Mask {
        Mask::from_fn(self.h, self.w, |y, x| self.get(y, self.w - 1 - x))
    }

    /// Nearest-neighbour resize (source pixel `floor(dst * in / out)`).
    pub fn resize_nearest(&self, h: usize, w: usize) -> Mask {
        Mask::from_fn(h, w, |y, x| self.get(y * self.h / h, x * self.w / w))
    }
}
