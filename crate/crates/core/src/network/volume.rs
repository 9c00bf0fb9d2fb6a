//! Raw head outputs arranged per grid cell and anchor.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NetworkError;

pub const TX: usize = 0;
pub const TY: usize = 1;
pub const TW: usize = 2;
pub const TH: usize = 3;
pub const TO: usize = 4;
/// First class logit channel.
pub const TC: usize = 5;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Head outputs for one image, indexed `[row i][col j][anchor k][channel]`
/// with channels `t_x, t_y, t_w, t_h, t_o` followed by `C` class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionVolume {
    pub grid: usize,
    pub anchors: usize,
    pub classes: usize,
    pub input_size: usize,
    pub data: Vec<f64>,
}

impl PredictionVolume {
    pub fn zeros(grid: usize, anchors: usize, classes: usize, input_size: usize) -> Self {
        Self { grid, anchors, classes, input_size, data: vec![0.0; grid * grid * anchors * (5 + classes)] }
    }

    #[inline]
    pub fn stride(&self) -> usize {
        5 + self.classes
    }

    /// Offset of the first channel of anchor `k` in cell `(i, j)`.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        ((i * self.grid + j) * self.anchors + k) * self.stride()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, ch: usize) -> f64 {
        self.data[self.offset(i, j, k) + ch]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, ch: usize, v: f64) {
        let o = self.offset(i, j, k) + ch;
        self.data[o] = v;
    }

    /// Splits a batched head output `(N, B*(5+C), S, S)` into per-image volumes.
    pub fn from_head_output<T: Scalar>(
        out: &Tensor<T>,
        anchors: usize,
        classes: usize,
        input_size: usize,
    ) -> Result<Vec<PredictionVolume>, NetworkError> {
        let stride = 5 + classes;
        if out.c != anchors * stride || out.h != out.w {
            return Err(NetworkError::Shape(format!(
                "head output {:?} inconsistent with {anchors} anchors and {classes} classes",
                out.shape()
            )));
        }
        let s = out.h;
        let plane = s * s;
        let mut vols = Vec::with_capacity(out.n);
        for n in 0..out.n {
            let item = out.item(n);
            let mut v = PredictionVolume::zeros(s, anchors, classes, input_size);
            for k in 0..anchors {
                for ch in 0..stride {
                    let src = &item[(k * stride + ch) * plane..(k * stride + ch + 1) * plane];
                    for (p, val) in src.iter().enumerate() {
                        let (i, j) = (p / s, p % s);
                        let o = v.offset(i, j, k) + ch;
                        v.data[o] = val.to_f64().unwrap();
                    }
                }
            }
            vols.push(v);
        }
        Ok(vols)
    }

    /// Inverse of [`from_head_output`](Self::from_head_output): packs gradients
    /// laid out like volumes back into head-output layout, scaled by `scale`.
    pub fn to_head_gradient<T: Scalar>(grads: &[PredictionVolume], scale: f64) -> Tensor<T> {
        let first = &grads[0];
        let (s, a, stride) = (first.grid, first.anchors, first.stride());
        let plane = s * s;
        let mut t = Tensor::zeros(grads.len(), a * stride, s, s);
        for (n, g) in grads.iter().enumerate() {
            let item = t.item_mut(n);
            for k in 0..a {
                for ch in 0..stride {
                    let dst = &mut item[(k * stride + ch) * plane..(k * stride + ch + 1) * plane];
                    for (p, d) in dst.iter_mut().enumerate() {
                        *d = T::from_f64_lossy(g.data[g.offset(p / s, p % s, k) + ch] * scale);
                    }
                }
            }
        }
        t
    }

    /// Decoded box `(x, y, w, h)` in the unit frame of the network input:
    /// `x = (sigmoid(t_x) + j) / S`, `w = p_w * exp(t_w)`, likewise for y, h.
    pub fn decode_box(&self, i: usize, j: usize, k: usize, prior: (f64, f64)) -> (f64, f64, f64, f64) {
        let o = self.offset(i, j, k);
        let s = self.grid as f64;
        (
            (sigmoid(self.data[o + TX]) + j as f64) / s,
            (sigmoid(self.data[o + TY]) + i as f64) / s,
            prior.0 * self.data[o + TW].exp(),
            prior.1 * self.data[o + TH].exp(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
