//! 2-D convolution lowered to GEMM through im2col.

use rand::Rng;

use super::scalar::{gemm, Op, Scalar};
use super::tensor::Tensor;
use super::NetworkError;

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `[out][in][kh][kw]`
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub grad_weight: Vec<T>,
    pub grad_bias: Option<Vec<T>>,
    /// When false, `backward` skips the input gradient.
    pub propagate: bool,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2d<T> {
    /// Weights uniform in `±sqrt(2 / fan_in)`, bias zero.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (2.0 / fan_in).sqrt();
        let n = out_channels * in_channels * kernel * kernel;
        let weight = (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias: bias.then(|| vec![T::zero(); out_channels]),
            grad_weight: vec![T::zero(); n],
            grad_bias: bias.then(|| vec![T::zero(); out_channels]),
            propagate: true,
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NetworkError> {
        if x.c != self.in_channels {
            return Err(NetworkError::Shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, x.c
            )));
        }
        if x.h + 2 * self.pad < self.kernel || x.w + 2 * self.pad < self.kernel {
            return Err(NetworkError::Shape(format!("input {}x{} smaller than kernel", x.h, x.w)));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check_input(x)?;
        let (oh, ow) = self.output_size(x.h, x.w);
        let ohw = oh * ow;
        let mut y = Tensor::zeros(x.n, self.out_channels, oh, ow);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); self.col_rows() * ohw] };
        for i in 0..x.n {
            let src: &[T] = if self.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), x.c, x.h, x.w, self.kernel, self.stride, self.pad, oh, ow, &mut cols);
                &cols
            };
            let out = y.item_mut(i);
            gemm(self.out_channels, self.col_rows(), ohw, T::one(), &self.weight, Op::N, src, Op::N, T::zero(), out);
            if let Some(b) = &self.bias {
                for (o, bo) in b.iter().enumerate() {
                    for v in &mut out[o * ohw..(o + 1) * ohw] {
                        *v = *v + *bo;
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, x: Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let y = self.infer(&x)?;
        self.input = Some(x);
        Ok(y)
    }

    /// Accumulates parameter gradients; returns the input gradient when
    /// `propagate` is set.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Option<Tensor<T>>, NetworkError> {
        let x = self
            .input
            .take()
            .ok_or_else(|| NetworkError::State("conv backward called without a training forward pass".into()))?;
        let (oh, ow) = self.output_size(x.h, x.w);
        if dy.shape() != [x.n, self.out_channels, oh, ow] {
            return Err(NetworkError::Shape(format!("conv upstream gradient shape {:?}", dy.shape())));
        }
        let ohw = oh * ow;
        let rows = self.col_rows();
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); rows * ohw] };
        let mut dcols = if pointwise || !self.propagate { Vec::new() } else { vec![T::zero(); rows * ohw] };
        let mut dx = self.propagate.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));

        for i in 0..x.n {
            let g = dy.item(i);
            let src: &[T] = if pointwise {
                x.item(i)
            } else {
                im2col(x.item(i), x.c, x.h, x.w, self.kernel, self.stride, self.pad, oh, ow, &mut cols);
                &cols
            };
            gemm(self.out_channels, ohw, rows, T::one(), g, Op::N, src, Op::T, T::one(), &mut self.grad_weight);
            if let Some(gb) = &mut self.grad_bias {
                for (o, b) in gb.iter_mut().enumerate() {
                    let s: f64 = g[o * ohw..(o + 1) * ohw].iter().map(|v| v.to_f64().unwrap()).sum();
                    *b = *b + T::from_f64_lossy(s);
                }
            }
            if let Some(dx) = &mut dx {
                if pointwise {
                    gemm(rows, self.out_channels, ohw, T::one(), &self.weight, Op::T, g, Op::N, T::zero(), dx.item_mut(i));
                } else {
                    gemm(rows, self.out_channels, ohw, T::one(), &self.weight, Op::T, g, Op::N, T::zero(), &mut dcols);
                    col2im(&dcols, x.c, x.h, x.w, self.kernel, self.stride, self.pad, oh, ow, dx.item_mut(i));
                }
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.iter_mut().for_each(|v| *v = T::zero());
        if let Some(g) = &mut self.grad_bias {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Unfolds one `c x h x w` image into a `(c*k*k) x (oh*ow)` matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        // valid ox satisfy 0 <= ox + kj - pad < w
                        let lo = pad.saturating_sub(kj).min(ow);
                        let hi = (w + pad).saturating_sub(kj).min(ow).max(lo);
                        out_row[..lo].iter_mut().for_each(|v| *v = T::zero());
                        out_row[hi..].iter_mut().for_each(|v| *v = T::zero());
                        if hi > lo {
                            let s0 = lo + kj - pad;
                            out_row[lo..hi].copy_from_slice(&src_row[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters and sums columns back into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let ohw = oh * ow;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    for (ox, v) in src_row.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dst_row[ix as usize] = dst_row[ix as usize] + *v;
                        }
                    }
                }
            }
        }
    }
}
