//! Per-channel batch normalization over the batch and spatial axes.

use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NetworkError;

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: f64,
    /// Weight of the old running statistic in the moving average.
    pub momentum: f64,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(), NetworkError> {
        if x.c != self.channels {
            return Err(NetworkError::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels, x.c
            )));
        }
        Ok(())
    }

    /// Inference: a fixed per-channel affine map from the running statistics.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check(x)?;
        let mut y = x.clone();
        let plane = x.plane();
        for c in 0..self.channels {
            let inv = 1.0 / (self.running_var[c].to_f64().unwrap() + self.epsilon).sqrt();
            let scale = self.gamma[c].to_f64().unwrap() * inv;
            let shift = self.beta[c].to_f64().unwrap() - self.running_mean[c].to_f64().unwrap() * scale;
            let (scale, shift) = (T::from_f64_lossy(scale), T::from_f64_lossy(shift));
            for n in 0..x.n {
                let off = (n * self.channels + c) * plane;
                for v in &mut y.data[off..off + plane] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(y)
    }

    /// Training: normalizes with batch statistics and updates the running
    /// mean and (unbiased) variance.
    pub fn forward_train(&mut self, mut x: Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check(&x)?;
        let plane = x.plane();
        let count = (x.n * plane) as f64;
        if count < 2.0 {
            return Err(NetworkError::Shape("batch norm needs at least two values per channel".into()));
        }
        let mut inv_std = vec![0.0; self.channels];
        let mut affine = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let (items, chans) = (x.n, self.channels);
            let planes = move || (0..items).map(move |n| (n * chans + c) * plane);
            let sum: f64 = planes().map(|off| sum_f64(&x.data[off..off + plane], |v| v)).sum();
            let mean = sum / count;
            let tm = T::from_f64_lossy(mean);
            let sq: f64 = planes()
                .map(|off| {
                    sum_f64(&x.data[off..off + plane], |v| {
                        let d = v - tm;
                        d * d
                    })
                })
                .sum();
            let var = sq / count;
            let inv = 1.0 / (var + self.epsilon).sqrt();
            inv_std[c] = inv;
            let ti = T::from_f64_lossy(inv);
            for off in planes() {
                for v in &mut x.data[off..off + plane] {
                    *v = (*v - tm) * ti;
                }
            }
            affine.push((self.gamma[c], self.beta[c]));
            let m = self.momentum;
            let unbiased = sq / (count - 1.0);
            self.running_mean[c] = T::from_f64_lossy(m * self.running_mean[c].to_f64().unwrap() + (1.0 - m) * mean);
            self.running_var[c] = T::from_f64_lossy(m * self.running_var[c].to_f64().unwrap() + (1.0 - m) * unbiased);
        }
        let mut y = x.clone();
        for (ci, chunk) in y.data.chunks_exact_mut(plane).enumerate() {
            let (g, b) = affine[ci % self.channels];
            for v in chunk {
                *v = g * *v + b;
            }
        }
        self.cache = Some(BnCache { xhat: x, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .ok_or_else(|| NetworkError::State("batch norm backward called without a training forward pass".into()))?;
        if dy.shape() != xhat.shape() {
            return Err(NetworkError::Shape(format!("batch norm upstream gradient shape {:?}", dy.shape())));
        }
        let plane = xhat.plane();
        let count = (xhat.n * plane) as f64;
        // reuse the cache allocation for dx
        let mut dx = xhat;
        for c in 0..self.channels {
            let (items, chans) = (dx.n, self.channels);
            let planes = move || (0..items).map(move |n| (n * chans + c) * plane);
            let sum_dy: f64 = planes().map(|off| sum_f64(&dy.data[off..off + plane], |v| v)).sum();
            let sum_dy_xhat: f64 = planes().map(|off| dot_f64(&dy.data[off..off + plane], &dx.data[off..off + plane])).sum();
            self.grad_gamma[c] = self.grad_gamma[c] + T::from_f64_lossy(sum_dy_xhat);
            self.grad_beta[c] = self.grad_beta[c] + T::from_f64_lossy(sum_dy);
            // dx = gamma * inv_std * (dy - mean(dy) - xhat * mean(dy * xhat))
            let gamma = self.gamma[c].to_f64().unwrap();
            let k = T::from_f64_lossy(gamma * inv_std[c]);
            let m_dy = T::from_f64_lossy(sum_dy / count);
            let m_dyx = T::from_f64_lossy(sum_dy_xhat / count);
            for off in planes() {
                for (d, g) in dx.data[off..off + plane].iter_mut().zip(&dy.data[off..off + plane]) {
                    *d = k * (*g - m_dy - *d * m_dyx);
                }
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.grad_gamma.iter_mut().for_each(|v| *v = T::zero());
        self.grad_beta.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Sum of `f(v)` over a slice: eight native-precision lanes per block of
/// 256 values, blocks accumulated in f64.
fn sum_f64<T: Scalar>(xs: &[T], f: impl Fn(T) -> T) -> f64 {
    let mut total = 0.0;
    for block in xs.chunks(256) {
        let mut lanes = [T::zero(); 8];
        let mut it = block.chunks_exact(8);
        for c in &mut it {
            for l in 0..8 {
                lanes[l] = lanes[l] + f(c[l]);
            }
        }
        let mut s: f64 = lanes.iter().map(|v| v.to_f64().unwrap()).sum();
        s += it.remainder().iter().map(|v| f(*v).to_f64().unwrap()).sum::<f64>();
        total += s;
    }
    total
}

fn dot_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut total = 0.0;
    for (ba, bb) in a.chunks(256).zip(b.chunks(256)) {
        let mut lanes = [T::zero(); 8];
        let (mut ia, mut ib) = (ba.chunks_exact(8), bb.chunks_exact(8));
        for (ca, cb) in (&mut ia).zip(&mut ib) {
            for l in 0..8 {
                lanes[l] = lanes[l] + ca[l] * cb[l];
            }
        }
        let mut s: f64 = lanes.iter().map(|v| v.to_f64().unwrap()).sum();
        s += ia.remainder().iter().zip(ib.remainder()).map(|(x, y)| (*x * *y).to_f64().unwrap()).sum::<f64>();
        total += s;
    }
    total
}
