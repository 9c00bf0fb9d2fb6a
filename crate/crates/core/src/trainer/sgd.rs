//! Momentum SGD with decoupled-from-bias weight decay.

use crate::network::{ParamKind, ParamSlot, Scalar};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One update over every parameter block:
///
/// ```text
/// v <- momentum * v - lr * (g + decay * p)
/// p <- p + v
/// ```
///
/// Decay applies to conv weights only. `velocity` holds one buffer per
/// block and is (re)initialized to zeros when its shape does not match.
/// A non-finite gradient anywhere aborts the whole step before any value
/// changes.
pub fn sgd_step<T: Scalar>(
    params: &mut [ParamSlot<'_, T>],
    velocity: &mut Vec<Vec<T>>,
    cfg: &SgdConfig,
) -> Result<(), TrainError> {
    for (i, p) in params.iter().enumerate() {
        if let Some(j) = p.grad.iter().position(|g| !g.is_finite()) {
            return Err(TrainError::NonFiniteGradient { block: i, index: j });
        }
    }
    let shapes_match = velocity.len() == params.len() && velocity.iter().zip(params.iter()).all(|(v, p)| v.len() == p.value.len());
    if !shapes_match {
        *velocity = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
    }
    let m = T::from_f64_lossy(cfg.momentum);
    let lr = T::from_f64_lossy(cfg.learning_rate);
    for (p, v) in params.iter_mut().zip(velocity.iter_mut()) {
        let decay = if p.kind == ParamKind::ConvWeight { cfg.weight_decay } else { 0.0 };
        let wd = T::from_f64_lossy(decay);
        for ((x, g), vel) in p.value.iter_mut().zip(p.grad).zip(v.iter_mut()) {
            *vel = m * *vel - lr * (*g + wd * *x);
            *x = *x + *vel;
        }
    }
    Ok(())
}
