//! Dilated, strided 2-D cross-correlation lowered to GEMM through im2col.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding_h: usize,
    pub padding_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    /// Stride-1 convolution whose padding keeps the spatial size unchanged.
    pub fn same(
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
            return Err(Error::config(format!(
                "same padding needs odd kernels, got {kernel_h}x{kernel_w}"
            )));
        }
        let spec = ConvSpec {
            kernel_h,
            kernel_w,
            dilation,
            stride: 1,
            padding_h: dilation * (kernel_h - 1) / 2,
            padding_w: dilation * (kernel_w - 1) / 2,
            in_channels,
            out_channels,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `k x k` "same"-padded convolution with the given stride.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Result<Self> {
        let mut spec = ConvSpec::same(in_channels, out_channels, k, k, 1)?;
        spec.stride = stride;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("kernel_h", self.kernel_h),
            ("kernel_w", self.kernel_w),
            ("dilation", self.dilation),
            ("stride", self.stride),
            ("in_channels", self.in_channels),
            ("out_channels", self.out_channels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("conv {name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().numel()
    }

    /// Output spatial size, or a configuration error when it would be empty.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |name: &str, size: usize, k: usize, pad: usize| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = size + 2 * pad;
            if padded < span {
                return Err(Error::config(format!(
                    "conv output {name} would be < 1 (input {size}, padding {pad}, effective kernel {span})"
                )));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((
            axis("height", h, self.kernel_h, self.padding_h)?,
            axis("width", w, self.kernel_w, self.padding_w)?,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1
            && self.kernel_w == 1
            && self.stride == 1
            && self.padding_h == 0
            && self.padding_w == 0
    }

    pub(crate) fn check_operands(&self, input: Shape, weight: Shape, bias: Option<Shape>) -> Result<()> {
        self.validate()?;
        if input.c != self.in_channels {
            return Err(Error::config(format!(
                "conv input has {} channels, spec expects in_channels = {}",
                input.c, self.in_channels
            )));
        }
        let want = self.weight_shape();
        let names = ["out_channels", "in_channels", "kernel_h", "kernel_w"];
        for ((name, got), exp) in names.iter().zip(weight.dims()).zip(want.dims()) {
            if got != exp {
                return Err(Error::config(format!(
                    "conv weight dimension {name} is {got}, spec expects {exp}"
                )));
            }
        }
        if let Some(b) = bias {
            if b.numel() != self.out_channels {
                return Err(Error::config(format!(
                    "conv bias has {} values, spec expects out_channels = {}",
                    b.numel(),
                    self.out_channels
                )));
            }
        }
        self.output_size(input.h, input.w)?;
        Ok(())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major blocks whose bounds were asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `(C, H, W)` image into a `(C*kh*kw, oh*ow)` column matrix.
fn im2col(img: &[f64], g: &Geometry, s: &ConvSpec, col: &mut [f64]) {
    let n = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..s.kernel_h {
            for kj in 0..s.kernel_w {
                let dst = &mut col[row * n..(row + 1) * n];
                let off_h = (ki * s.dilation) as isize - s.padding_h as isize;
                let off_w = (kj * s.dilation) as isize - s.padding_w as isize;
                for oy in 0..g.oh {
                    let y = (oy * s.stride) as isize + off_h;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let x = (ox * s.stride) as isize + off_w;
                        *o = if x < 0 || x >= g.w as isize { 0.0 } else { src[x as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, accumulating.
fn col2im(col: &[f64], g: &Geometry, s: &ConvSpec, img: &mut [f64]) {
    let n = g.cols();
    let mut row = 0;
    for c in 0..g.c {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..s.kernel_h {
            for kj in 0..s.kernel_w {
                let src = &col[row * n..(row + 1) * n];
                let off_h = (ki * s.dilation) as isize - s.padding_h as isize;
                let off_w = (kj * s.dilation) as isize - s.padding_w as isize;
                for oy in 0..g.oh {
                    let y = (oy * s.stride) as isize + off_h;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let x = (ox * s.stride) as isize + off_w;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Forward cross-correlation. Operands must already be validated.
pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.check_operands(input.shape(), weight.shape(), bias.map(Tensor::shape))?;
    let is = input.shape();
    let (oh, ow) = spec.output_size(is.h, is.w)?;
    let g = Geometry {
        c: is.c,
        h: is.h,
        w: is.w,
        oh,
        ow,
    };
    let out_shape = Shape::new(is.n, spec.out_channels, oh, ow);
    let mut out = Tensor::zeros(out_shape);
    let k = is.c * spec.kernel_h * spec.kernel_w;
    let cols = g.cols();
    let in_per = is.c * is.plane();
    let out_per = spec.out_channels * cols;
    let mut col = if spec.is_pointwise() { Vec::new() } else { vec![0.0; k * cols] };
    for n in 0..is.n {
        let img = &input.data()[n * in_per..(n + 1) * in_per];
        let dst = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (oc, chunk) in dst.chunks_mut(cols).enumerate() {
                chunk.fill(b.data()[oc]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        let src: &[f64] = if spec.is_pointwise() {
            img
        } else {
            im2col(img, &g, spec, &mut col);
            &col
        };
        gemm(spec.out_channels, k, cols, weight.data(), false, src, false, beta, dst);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub(crate) struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need: [bool; 3],
) -> ConvGrads {
    let is = input.shape();
    let os = grad_out.shape();
    let g = Geometry {
        c: is.c,
        h: is.h,
        w: is.w,
        oh: os.h,
        ow: os.w,
    };
    let k = is.c * spec.kernel_h * spec.kernel_w;
    let cols = g.cols();
    let in_per = is.c * is.plane();
    let out_per = spec.out_channels * cols;
    let pointwise = spec.is_pointwise();

    let mut grad_in = need[0].then(|| Tensor::zeros(is));
    let mut grad_w = need[1].then(|| Tensor::zeros(weight.shape()));
    let mut grad_b = need[2].then(|| Tensor::zeros(Shape::new(1, spec.out_channels, 1, 1)));
    let mut col = if pointwise { Vec::new() } else { vec![0.0; k * cols] };

    for n in 0..is.n {
        let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
        if let Some(gb) = grad_b.as_mut() {
            for (oc, chunk) in go.chunks(cols).enumerate() {
                gb.data_mut()[oc] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gw) = grad_w.as_mut() {
            let img = &input.data()[n * in_per..(n + 1) * in_per];
            let src: &[f64] = if pointwise {
                img
            } else {
                im2col(img, &g, spec, &mut col);
                &col
            };
            gemm(spec.out_channels, cols, k, go, false, src, true, 1.0, gw.data_mut());
        }
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi.data_mut()[n * in_per..(n + 1) * in_per];
            if pointwise {
                gemm(k, spec.out_channels, cols, weight.data(), true, go, false, 1.0, dst);
            } else {
                gemm(k, spec.out_channels, cols, weight.data(), true, go, false, 0.0, &mut col);
                col2im(&col, &g, spec, dst);
            }
        }
    }
    ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    }
}
