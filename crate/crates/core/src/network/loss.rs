//! Sum-squared detection loss with its analytic gradient.
//!
//! For a responsible slot with target `t`:
//!
//! ```text
//! coord  = l_coord * [ (s(tx) - s(tx*))^2 + (s(ty) - s(ty*))^2
//!                    + (sqrt(b_w) - sqrt(w*))^2 + (sqrt(b_h) - sqrt(h*))^2 ]
//! obj    = (s(to) - target_obj)^2          target_obj = IoU(pred, truth) or 1
//! class  = sum_c (p_c - onehot_c)^2        p = softmax, or sigmoid when C = 1
//! ```
//!
//! and every other slot contributes `l_noobj * s(to)^2`.
//!
//! The objectness target is treated as a constant: no gradient flows
//! through the IoU into the box terms.

use crate::geometry::CornerBox;

use super::targets::TargetVolume;
use super::volume::{sigmoid, PredictionVolume, TC, TH, TO, TW, TX, TY};
use super::NetworkError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    /// Train objectness toward the predicted box's IoU with the truth
    /// instead of toward 1.
    pub rescore: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_coord: 5.0, lambda_noobj: 0.5, rescore: true }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub coord: f64,
    pub objectness: f64,
    pub no_object: f64,
    pub class: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub terms: LossTerms,
    /// Gradient with respect to every raw prediction value.
    pub grad: PredictionVolume,
}

fn check_shapes(pred: &PredictionVolume, targets: &TargetVolume) -> Result<(), NetworkError> {
    if pred.grid != targets.grid || pred.anchors != targets.priors.len() || pred.classes != targets.classes {
        return Err(NetworkError::Shape(format!(
            "prediction {}x{}x{}x{} vs targets grid {} anchors {} classes {}",
            pred.grid,
            pred.grid,
            pred.anchors,
            pred.stride(),
            targets.grid,
            targets.priors.len(),
            targets.classes
        )));
    }
    if !pred.all_finite() {
        return Err(NetworkError::Numeric("non-finite value in predictions".into()));
    }
    Ok(())
}

fn unit_box(x: f64, y: f64, w: f64, h: f64) -> CornerBox {
    CornerBox { x_min: x - w / 2.0, y_min: y - h / 2.0, x_max: x + w / 2.0, y_max: y + h / 2.0 }
}

/// Objectness targets per slot (zero where no object is assigned).
pub fn objectness_targets(pred: &PredictionVolume, targets: &TargetVolume, cfg: &LossConfig) -> Vec<f64> {
    let b = pred.anchors;
    let mut out = vec![0.0; targets.cells.len()];
    for (slot, cell) in targets.cells.iter().enumerate() {
        let Some(t) = cell else { continue };
        out[slot] = if cfg.rescore {
            let k = slot % b;
            let ij = slot / b;
            let (i, j) = (ij / pred.grid, ij % pred.grid);
            let (x, y, w, h) = pred.decode_box(i, j, k, targets.priors[k]);
            let truth = t.truth;
            let v = unit_box(x, y, w, h).iou(&unit_box(truth.x, truth.y, truth.w, truth.h));
            if v.is_finite() {
                v
            } else {
                0.0
            }
        } else {
            1.0
        };
    }
    out
}

/// Loss and gradient for one image.
pub fn detection_loss(
    pred: &PredictionVolume,
    targets: &TargetVolume,
    cfg: &LossConfig,
) -> Result<LossOutput, NetworkError> {
    check_shapes(pred, targets)?;
    let obj = objectness_targets(pred, targets, cfg);
    detection_loss_with_objectness(pred, targets, &obj, cfg)
}

/// Same as [`detection_loss`] with caller-supplied objectness targets.
pub fn detection_loss_with_objectness(
    pred: &PredictionVolume,
    targets: &TargetVolume,
    obj_targets: &[f64],
    cfg: &LossConfig,
) -> Result<LossOutput, NetworkError> {
    check_shapes(pred, targets)?;
    if obj_targets.len() != targets.cells.len() {
        return Err(NetworkError::Shape("objectness target count".into()));
    }
    let mut grad = PredictionVolume::zeros(pred.grid, pred.anchors, pred.classes, pred.input_size);
    let mut terms = LossTerms::default();
    let b = pred.anchors;
    let c = pred.classes;
    let lc = cfg.lambda_coord;

    for (slot, cell) in targets.cells.iter().enumerate() {
        let o = slot * pred.stride();
        let p = &pred.data[o..o + pred.stride()];
        let g = &mut grad.data[o..o + pred.stride()];
        let so = sigmoid(p[TO]);
        let Some(t) = cell else {
            terms.no_object += cfg.lambda_noobj * so * so;
            g[TO] = cfg.lambda_noobj * 2.0 * so * so * (1.0 - so);
            continue;
        };
        let prior = targets.priors[slot % b];

        for (ch, target_t) in [(TX, t.tx), (TY, t.ty)] {
            let s = sigmoid(p[ch]);
            let d = s - sigmoid(target_t);
            terms.coord += lc * d * d;
            g[ch] = lc * 2.0 * d * s * (1.0 - s);
        }
        for (ch, pr, truth) in [(TW, prior.0, t.truth.w), (TH, prior.1, t.truth.h)] {
            // sqrt(p * exp(t)) = sqrt(p) * exp(t / 2)
            let a = pr.sqrt() * (p[ch] / 2.0).exp();
            let d = a - truth.sqrt();
            terms.coord += lc * d * d;
            g[ch] = lc * 2.0 * d * a / 2.0;
        }

        let d = so - obj_targets[slot];
        terms.objectness += d * d;
        g[TO] = 2.0 * d * so * (1.0 - so);

        if c == 1 {
            let s = sigmoid(p[TC]);
            let d = s - 1.0;
            terms.class += d * d;
            g[TC] = 2.0 * d * s * (1.0 - s);
        } else {
            let logits = &p[TC..TC + c];
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
            let resid: Vec<f64> = probs
                .iter()
                .enumerate()
                .map(|(ci, pc)| pc - if ci == t.class_id { 1.0 } else { 0.0 })
                .collect();
            terms.class += resid.iter().map(|r| r * r).sum::<f64>();
            // dL/dz_j = p_j * (2 r_j - sum_c 2 r_c p_c)
            let dot: f64 = resid.iter().zip(&probs).map(|(r, pc)| 2.0 * r * pc).sum();
            for ci in 0..c {
                g[TC + ci] = probs[ci] * (2.0 * resid[ci] - dot);
            }
        }
    }

    let loss = terms.coord + terms.objectness + terms.no_object + terms.class;
    if !loss.is_finite() {
        return Err(NetworkError::Numeric(format!("loss is {loss}")));
    }
    Ok(LossOutput { loss, terms, grad })
}
