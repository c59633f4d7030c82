//! Graph-free kernels shared by the tape and by data preprocessing.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Source taps for one output coordinate along one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Half-pixel-centred (align-corners = false) sampling positions.
pub(crate) fn bilinear_taps(in_size: usize, out_size: usize) -> Vec<Tap> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::input(format!("resize target {out_h}x{out_w} is empty")));
    }
    if s.h == 0 || s.w == 0 {
        return Err(Error::input("cannot resize an empty map"));
    }
    if (s.h, s.w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(s.h, out_h);
    let tx = bilinear_taps(s.w, out_w);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let src = input.data();
    let dst = out.data_mut();
    for p in 0..s.n * s.c {
        let plane = &src[p * s.plane()..(p + 1) * s.plane()];
        let o = &mut dst[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (y, a) in ty.iter().enumerate() {
            let r0 = &plane[a.lo * s.w..(a.lo + 1) * s.w];
            let r1 = &plane[a.hi * s.w..(a.hi + 1) * s.w];
            for (x, b) in tx.iter().enumerate() {
                let top = r0[b.lo] * (1.0 - b.frac) + r0[b.hi] * b.frac;
                let bot = r1[b.lo] * (1.0 - b.frac) + r1[b.hi] * b.frac;
                o[y * out_w + x] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_resize`].
pub(crate) fn bilinear_resize_backward(grad_out: &Tensor, in_shape: Shape) -> Tensor {
    let os = grad_out.shape();
    let ty = bilinear_taps(in_shape.h, os.h);
    let tx = bilinear_taps(in_shape.w, os.w);
    let mut g = Tensor::zeros(in_shape);
    let w = in_shape.w;
    for p in 0..os.n * os.c {
        let go = &grad_out.data()[p * os.plane()..(p + 1) * os.plane()];
        let gi = &mut g.data_mut()[p * in_shape.plane()..(p + 1) * in_shape.plane()];
        for (y, a) in ty.iter().enumerate() {
            for (x, b) in tx.iter().enumerate() {
                let v = go[y * os.w + x];
                let top = v * (1.0 - a.frac);
                let bot = v * a.frac;
                gi[a.lo * w + b.lo] += top * (1.0 - b.frac);
                gi[a.lo * w + b.hi] += top * b.frac;
                gi[a.hi * w + b.lo] += bot * (1.0 - b.frac);
                gi[a.hi * w + b.hi] += bot * b.frac;
            }
        }
    }
    g
}

pub fn global_avg_pool_values(input: &Tensor) -> Tensor {
    let s = input.shape();
    let plane = s.plane();
    let data = input
        .data()
        .chunks(plane)
        .map(|c| c.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape")
}

/// Max per `(n, c)` plane plus the flat index of the first maximum.
pub fn global_max_pool_values(input: &Tensor) -> (Tensor, Vec<usize>) {
    let s = input.shape();
    let plane = s.plane();
    let mut values = Vec::with_capacity(s.n * s.c);
    let mut argmax = Vec::with_capacity(s.n * s.c);
    for (p, chunk) in input.data().chunks(plane).enumerate() {
        let (i, v) = chunk
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        values.push(v);
        argmax.push(p * plane + i);
    }
    (
        Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), values).expect("pool shape"),
        argmax,
    )
}

/// Output shape when `b` is broadcast against `a`: every dimension of `b`
/// must equal the one in `a` or be 1.
pub fn channel_broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let ok = a
        .dims()
        .iter()
        .zip(b.dims())
        .all(|(&da, db)| db == da || db == 1);
    if ok {
        Ok(a)
    } else {
        Err(Error::input(format!("shapes {a} and {b} are not broadcast-compatible")))
    }
}

/// Flat index into `b` for every element of `a` under broadcasting.
pub(crate) fn broadcast_index(a: Shape, b: Shape) -> impl Iterator<Item = usize> {
    let strides = [
        if b.n == 1 { 0 } else { b.c * b.h * b.w },
        if b.c == 1 { 0 } else { b.h * b.w },
        if b.h == 1 { 0 } else { b.w },
        if b.w == 1 { 0 } else { 1 },
    ];
    (0..a.n).flat_map(move |n| {
        (0..a.c).flat_map(move |c| {
            (0..a.h).flat_map(move |h| {
                (0..a.w).map(move |w| n * strides[0] + c * strides[1] + h * strides[2] + w * strides[3])
            })
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact() {
        let t = Tensor::from_fn(Shape::new(1, 2, 3, 5), |_, c, h, w| (c * 100 + h * 10 + w) as f64);
        assert_eq!(bilinear_resize(&t, 3, 5).unwrap(), t);
    }

    #[test]
    fn broadcast_rules() {
        let a = Shape::new(2, 4, 3, 3);
        assert!(channel_broadcast_shape(a, Shape::new(2, 1, 3, 3)).is_ok());
        assert!(channel_broadcast_shape(a, Shape::new(2, 4, 1, 1)).is_ok());
        assert!(channel_broadcast_shape(a, Shape::new(2, 2, 3, 3)).is_err());
        let idx: Vec<usize> = broadcast_index(Shape::new(1, 2, 1, 2), Shape::new(1, 1, 1, 2)).collect();
        assert_eq!(idx, vec![0, 1, 0, 1]);
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 3.0, 3.0, 0.0]).unwrap();
        let (v, arg) = global_max_pool_values(&t);
        assert_eq!(v.item(), 3.0);
        assert_eq!(arg, vec![1]);
    }
}
