//! Prediction decoding, non-maximum suppression and tiled detection.

use std::cmp::Ordering;
use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::geometry::{CenterBox, CornerBox};
use crate::network::volume::{sigmoid, TC, TO};
use crate::network::{NetworkError, PredictionVolume};

pub mod output;
pub mod tiles;

pub use output::{format_detections, parse_detections, render_detections, DetectionRecord};
pub use tiles::{detect_image, detect_tiled, plan_tiles, TileOptions, TilePlan};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.45;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("{0}")]
    Config(String),
    #[error("tile at ({x}, {y}): {source}")]
    Tile { x: usize, y: usize, source: NetworkError },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("detections line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    /// Objectness times class probability.
    pub score: f64,
    /// Normalized to the frame the detection lives in (tile or source image).
    pub bbox: CenterBox,
}

/// Class probabilities for one slot: a sigmoid when there is a single
/// class, a softmax otherwise.
fn class_probs(pred: &PredictionVolume, o: usize) -> Vec<f64> {
    let logits = &pred.data[o + TC..o + TC + pred.classes];
    if pred.classes == 1 {
        return vec![sigmoid(logits[0])];
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Decodes every `(cell, anchor)` slot into at most one detection (its best
/// class), clipped to the unit frame, keeping scores `>= conf_threshold`.
pub fn decode(
    pred: &PredictionVolume,
    anchors: &[(f64, f64)],
    conf_threshold: f64,
) -> Result<Vec<Detection>, InferenceError> {
    if anchors.len() != pred.anchors {
        return Err(InferenceError::Config(format!(
            "{} anchors given for a volume with {} per cell",
            anchors.len(),
            pred.anchors
        )));
    }
    let mut out = Vec::new();
    for i in 0..pred.grid {
        for j in 0..pred.grid {
            for (k, &prior) in anchors.iter().enumerate() {
                let o = pred.offset(i, j, k);
                let obj = sigmoid(pred.data[o + TO]);
                if obj < conf_threshold {
                    continue;
                }
                let probs = class_probs(pred, o);
                let (class_id, p) = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
                let score = obj * p;
                if !(score >= conf_threshold) {
                    continue;
                }
                let (x, y, w, h) = pred.decode_box(i, j, k, prior);
                let corners = CornerBox { x_min: x - w / 2.0, y_min: y - h / 2.0, x_max: x + w / 2.0, y_max: y + h / 2.0 };
                if let Ok(bbox) = CenterBox::from_unit_corners_clipped(&corners) {
                    out.push(Detection { class_id, score, bbox });
                }
            }
        }
    }
    Ok(out)
}

/// Score descending, then box x, then y (and the remaining fields, so the
/// order is total).
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class suppression: walking in [`detection_order`], a
/// detection is dropped if its IoU with an already kept detection of the
/// same class exceeds `iou_threshold`. Output keeps that order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept.iter().any(|k| k.class_id == d.class_id && k.bbox.iou(&d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::volume::{TH, TW, TX, TY};

    fn det(class_id: usize, score: f64, x: f64, y: f64, w: f64, h: f64) -> Detection {
        Detection { class_id, score, bbox: CenterBox::new(x, y, w, h).unwrap() }
    }

    #[test]
    fn decode_reference_values() {
        let mut p = PredictionVolume::zeros(26, 1, 1, 416);
        p.data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..26 {
            for j in 0..26 {
                p.set(i, j, 0, TO, if (i, j) == (0, 0) { 10.0 } else { -1000.0 });
                p.set(i, j, 0, TC, 10.0);
            }
        }
        let d = decode(&p, &[(0.02, 0.01)], 0.25).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].bbox.x - 0.5 / 26.0).abs() < 1e-12);
        assert!((d[0].bbox.y - 0.019231).abs() < 1e-6);
        assert!((d[0].bbox.w - 0.02).abs() < 1e-12);
        assert!((d[0].bbox.h - 0.01).abs() < 1e-12);
        assert_eq!(p.get(0, 0, 0, TX) + p.get(0, 0, 0, TY) + p.get(0, 0, 0, TW) + p.get(0, 0, 0, TH), 0.0);
    }

    #[test]
    fn very_negative_objectness_gives_nothing() {
        let mut p = PredictionVolume::zeros(4, 2, 1, 64);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..2 {
                    p.set(i, j, k, TO, -1000.0);
                }
            }
        }
        for t in [1e-9, 0.01, 0.25, 0.9] {
            assert!(decode(&p, &[(0.1, 0.1), (0.2, 0.2)], t).unwrap().is_empty());
        }
        assert!(decode(&p, &[(0.1, 0.1)], 0.5).is_err());
    }

    #[test]
    fn decode_clips_and_uses_softmax() {
        let mut p = PredictionVolume::zeros(2, 1, 3, 32);
        p.set(0, 0, 0, TO, 20.0);
        p.set(0, 0, 0, TW, 3.0); // much wider than the frame
        p.set(0, 0, 0, TC + 2, 5.0);
        for (i, j) in [(0, 1), (1, 0), (1, 1)] {
            p.set(i, j, 0, TO, -50.0);
        }
        let d = decode(&p, &[(0.5, 0.1)], 0.1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_id, 2);
        let c = d[0].bbox.unit_corners();
        assert!(c.x_min >= 0.0 && c.x_max <= 1.0);
        let e = [1.0f64, 1.0, 5.0f64.exp()];
        assert!((d[0].score - sigmoid(20.0) * e[2] / e.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn nms_hand_case() {
        // 0.1 x 0.1 boxes offset by 0.025 in x: IoU = 0.075 / 0.125 = 0.6
        let a = det(0, 0.9, 0.5, 0.5, 0.1, 0.1);
        let b = det(0, 0.8, 0.525, 0.5, 0.1, 0.1);
        assert!((a.bbox.iou(&b.bbox) - 0.6).abs() < 1e-9);
        assert_eq!(nms(&[b, a], 0.45), vec![a]);
        // another class is untouched
        let c = Detection { class_id: 1, ..b };
        assert_eq!(nms(&[b, a, c], 0.45), vec![a, c]);
    }

    #[test]
    fn nms_keeps_disjoint_and_is_idempotent() {
        let d = vec![det(0, 0.3, 0.1, 0.1, 0.05, 0.05), det(0, 0.7, 0.5, 0.5, 0.05, 0.05), det(0, 0.7, 0.2, 0.9, 0.05, 0.05)];
        let once = nms(&d, 0.45);
        assert_eq!(once.len(), 3);
        assert_eq!(once[0].bbox.x, 0.2); // tie on score broken by x
        assert_eq!(nms(&once, 0.45), once);
    }
}
