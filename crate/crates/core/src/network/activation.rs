//! Leaky ReLU and max pooling.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NetworkError;

#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f64,
    mask: Option<(Vec<bool>, [usize; 4])>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self { slope, mask: None }
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        let s = T::from_f64_lossy(self.slope);
        y.data.iter_mut().for_each(|v| {
            if *v <= T::zero() {
                *v = *v * s;
            }
        });
        y
    }

    pub fn forward_train<T: Scalar>(&mut self, mut x: Tensor<T>) -> Tensor<T> {
        let s = T::from_f64_lossy(self.slope);
        let mask: Vec<bool> = x.data.iter().map(|v| *v > T::zero()).collect();
        for v in &mut x.data {
            if *v <= T::zero() {
                *v = *v * s;
            }
        }
        self.mask = Some((mask, x.shape()));
        x
    }

    pub fn backward<T: Scalar>(&mut self, mut dy: Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let (mask, shape) = self
            .mask
            .take()
            .ok_or_else(|| NetworkError::State("leaky relu backward called without a training forward pass".into()))?;
        if dy.shape() != shape {
            return Err(NetworkError::Shape(format!("leaky relu upstream gradient shape {:?}", dy.shape())));
        }
        let s = T::from_f64_lossy(self.slope);
        for (g, pos) in dy.data.iter_mut().zip(&mask) {
            if !pos {
                *g = *g * s;
            }
        }
        Ok(dy)
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool {
    pub size: usize,
    pub stride: usize,
    /// Flat input index of each output's maximum, plus the input shape.
    argmax: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool {
    pub fn new(size: usize, stride: usize) -> Self {
        Self { size, stride, argmax: None }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.size) / self.stride + 1, (w - self.size) / self.stride + 1)
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>, mut record: Option<&mut Vec<u32>>) -> Result<Tensor<T>, NetworkError> {
        if x.h < self.size || x.w < self.size {
            return Err(NetworkError::Shape(format!("pool window {} larger than input {}x{}", self.size, x.h, x.w)));
        }
        let (oh, ow) = self.output_size(x.h, x.w);
        let mut y = Vec::with_capacity(x.n * x.c * oh * ow);
        if let Some(r) = record.as_deref_mut() {
            r.reserve(x.n * x.c * oh * ow);
        }
        let (size, stride) = (self.size, self.stride);
        for nc in 0..x.n * x.c {
            let base = nc * x.h * x.w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + oy * stride * x.w + ox * stride;
                    let mut best = x.data[best_idx];
                    for dy in 0..size {
                        let row = base + (oy * stride + dy) * x.w + ox * stride;
                        for (dx, &v) in x.data[row..row + size].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_idx = row + dx;
                            }
                        }
                    }
                    y.push(best);
                    if let Some(r) = record.as_deref_mut() {
                        r.push(best_idx as u32);
                    }
                }
            }
        }
        Ok(Tensor::from_vec(x.n, x.c, oh, ow, y))
    }

    pub fn infer<T: Scalar>(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.run(x, None)
    }

    pub fn forward_train<T: Scalar>(&mut self, x: Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let mut idx = Vec::new();
        let y = self.run(&x, Some(&mut idx))?;
        self.argmax = Some((idx, x.shape()));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let (idx, [n, c, h, w]) = self
            .argmax
            .take()
            .ok_or_else(|| NetworkError::State("max pool backward called without a training forward pass".into()))?;
        if dy.data.len() != idx.len() {
            return Err(NetworkError::Shape(format!("max pool upstream gradient shape {:?}", dy.shape())));
        }
        let mut dx = Tensor::zeros(n, c, h, w);
        for (g, &i) in dy.data.iter().zip(&idx) {
            dx.data[i as usize] = dx.data[i as usize] + *g;
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.argmax = None;
    }
}
