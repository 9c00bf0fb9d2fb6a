//! Convolutional backbone, detection head, target assignment and loss.
//!
//! Layers cache what they need during a training forward pass; `backward`
//! consumes those caches, so every training step is one `forward` in
//! [`Mode::Train`] followed by one `backward`. Inference goes through
//! [`Network::infer`], which takes `&self` and can run concurrently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub mod activation;
pub mod batchnorm;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod loss;
pub mod scalar;
pub mod targets;
pub mod tensor;
pub mod volume;

pub use activation::{LeakyRelu, MaxPool};
pub use batchnorm::BatchNorm;
pub use config::{LayerSpec, NetworkConfig, DOWNSAMPLE};
pub use conv::Conv2d;
pub use loss::{detection_loss, LossConfig, LossOutput};
pub use scalar::Scalar;
pub use targets::{assign_targets, CellTarget, TargetVolume};
pub use tensor::Tensor;
pub use volume::PredictionVolume;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches activations for `backward`, updates running stats.
    Train,
    /// Running statistics, no caching.
    Infer,
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Leaky(LeakyRelu),
    MaxPool(MaxPool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    Gamma,
    Beta,
}

/// A trainable parameter block with its accumulated gradient.
pub struct ParamSlot<'a, T> {
    pub kind: ParamKind,
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    config: NetworkConfig,
    layers: Vec<Layer<T>>,
    input_size: usize,
    pending_backward: bool,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with freshly initialized weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetworkError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.layers.len());
        let mut channels = 3;
        for spec in &config.layers {
            let layer = match *spec {
                LayerSpec::Conv { filters, size, stride, pad } => {
                    let c = Conv2d::new(channels, filters, size, stride, pad, false, &mut rng);
                    channels = filters;
                    Layer::Conv(c)
                }
                LayerSpec::Head => {
                    let c = Conv2d::new(channels, config.head_channels(), 1, 1, 0, true, &mut rng);
                    channels = config.head_channels();
                    Layer::Conv(c)
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(channels)),
                LayerSpec::Leaky { slope } => Layer::Leaky(LeakyRelu::new(slope)),
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool(MaxPool::new(size, stride)),
            };
            layers.push(layer);
        }
        // the image gradient is never needed during training
        if let Some(Layer::Conv(c)) = layers.first_mut() {
            c.propagate = false;
        }
        let input_size = config.input_size;
        Ok(Self { config, layers, input_size, pending_backward: false })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / DOWNSAMPLE
    }

    /// Changes the expected input side length (multiscale training).
    pub fn set_input_size(&mut self, size: usize) -> Result<(), NetworkError> {
        if size == 0 || size % DOWNSAMPLE != 0 {
            return Err(NetworkError::Config(format!("input size {size} is not a positive multiple of {DOWNSAMPLE}")));
        }
        self.input_size = size;
        Ok(())
    }

    /// Makes `backward` return the gradient with respect to the input image.
    pub fn set_input_gradient(&mut self, enabled: bool) {
        if let Some(Layer::Conv(c)) = self.layers.first_mut() {
            c.propagate = enabled;
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), NetworkError> {
        if x.c != 3 || x.h != self.input_size || x.w != self.input_size {
            return Err(NetworkError::Config(format!(
                "input batch is {}x{}x{}, network expects 3x{}x{}",
                x.c, x.h, x.w, self.input_size, self.input_size
            )));
        }
        if x.n == 0 {
            return Err(NetworkError::Shape("empty batch".into()));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NetworkError> {
        match mode {
            Mode::Infer => self.infer(x),
            Mode::Train => self.forward_train(x.clone()),
        }
    }

    pub fn forward_train(&mut self, x: Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check_input(&x)?;
        let mut h = x;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Conv(c) => c.forward_train(h)?,
                Layer::BatchNorm(b) => b.forward_train(h)?,
                Layer::Leaky(l) => l.forward_train(h),
                Layer::MaxPool(p) => p.forward_train(h)?,
            };
        }
        self.pending_backward = true;
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, NetworkError> {
        self.check_input(x)?;
        let mut h: Option<Tensor<T>> = None;
        for layer in &self.layers {
            let src = h.as_ref().unwrap_or(x);
            h = Some(match layer {
                Layer::Conv(c) => c.infer(src)?,
                Layer::BatchNorm(b) => b.infer(src)?,
                Layer::Leaky(l) => l.infer(src),
                Layer::MaxPool(p) => p.infer(src)?,
            });
        }
        Ok(h.expect("network has layers"))
    }

    /// Inference that returns per-image prediction volumes.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<PredictionVolume>, NetworkError> {
        let out = self.infer(x)?;
        PredictionVolume::from_head_output(&out, self.config.num_anchors(), self.config.num_classes(), self.input_size)
    }

    /// Backpropagates `dy` (gradient w.r.t. the head output), accumulating
    /// parameter gradients. Returns the input gradient if enabled.
    pub fn backward(&mut self, dy: Tensor<T>) -> Result<Option<Tensor<T>>, NetworkError> {
        if !self.pending_backward {
            return Err(NetworkError::State("backward called without a preceding training forward pass".into()));
        }
        self.pending_backward = false;
        let mut g = Some(dy);
        for layer in self.layers.iter_mut().rev() {
            let cur = g.take().expect("gradient flows through inner layers");
            g = match layer {
                Layer::Conv(c) => c.backward(&cur)?,
                Layer::BatchNorm(b) => Some(b.backward(&cur)?),
                Layer::Leaky(l) => Some(l.backward(cur)?),
                Layer::MaxPool(p) => Some(p.backward(&cur)?),
            };
            if g.is_none() {
                break;
            }
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => c.zero_grad(),
                Layer::BatchNorm(b) => b.zero_grad(),
                _ => {}
            }
        }
    }

    /// Drops cached activations (e.g. after an aborted step).
    pub fn clear_cache(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => c.clear_cache(),
                Layer::BatchNorm(b) => b.clear_cache(),
                Layer::Leaky(l) => l.clear_cache(),
                Layer::MaxPool(p) => p.clear_cache(),
            }
        }
        self.pending_backward = false;
    }

    /// Trainable parameters in layer order.
    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_, T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(ParamSlot { kind: ParamKind::ConvWeight, value: &mut c.weight, grad: &c.grad_weight });
                    if let (Some(b), Some(gb)) = (&mut c.bias, &c.grad_bias) {
                        out.push(ParamSlot { kind: ParamKind::ConvBias, value: b, grad: gb });
                    }
                }
                Layer::BatchNorm(b) => {
                    out.push(ParamSlot { kind: ParamKind::Gamma, value: &mut b.gamma, grad: &b.grad_gamma });
                    out.push(ParamSlot { kind: ParamKind::Beta, value: &mut b.beta, grad: &b.grad_beta });
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.state_blocks().iter().map(|b| b.len()).sum()
    }

    /// All persistent state (parameters and batch-norm running statistics)
    /// in checkpoint order.
    pub fn state_blocks(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&c.weight);
                    if let Some(b) = &c.bias {
                        out.push(b);
                    }
                }
                Layer::BatchNorm(b) => {
                    out.push(&b.gamma);
                    out.push(&b.beta);
                    out.push(&b.running_mean);
                    out.push(&b.running_var);
                }
                _ => {}
            }
        }
        out
    }

    pub fn state_blocks_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out: Vec<&mut Vec<T>> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    if let Some(b) = &mut c.bias {
                        out.push(b);
                    }
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                    out.push(&mut b.running_mean);
                    out.push(&mut b.running_var);
                }
                _ => {}
            }
        }
        out
    }

    /// Copies all state into a network of another element type.
    pub fn convert<U: Scalar>(&self) -> Network<U> {
        let mut other = Network::<U>::new(self.config.clone(), 0).expect("config already validated");
        other.input_size = self.input_size;
        for (dst, src) in other.state_blocks_mut().into_iter().zip(self.state_blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64_lossy(s.to_f64().unwrap());
            }
        }
        other
    }
}
