//! Matching detections to ground truth, detection metrics and throughput.
//!
//! "Accuracy" here is `tp / (tp + fp + fn)`: there are no true negatives in
//! detection, so this is the fraction of all decisions that were right.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::CornerBox;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no images to evaluate")]
    NoImages,
    #[error("no timing samples")]
    NoTiming,
    #[error("non-positive inference time {0}")]
    BadTiming(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthBox {
    pub class_id: usize,
    pub bbox: CornerBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub class_id: usize,
    pub score: f64,
    pub bbox: CornerBox,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub detection: usize,
    pub truth: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub counts: Counts,
    /// Indices refer to the caller's slices.
    pub matches: Vec<Match>,
}

/// Greedy one-to-one matching. In descending score order each detection
/// takes the unmatched same-class truth with the highest IoU, if that IoU
/// is at least `iou_threshold`.
pub fn match_detections(dets: &[ScoredBox], truths: &[TruthBox], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.bbox.x_min.total_cmp(&db.bbox.x_min))
            .then(da.bbox.y_min.total_cmp(&db.bbox.y_min))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; truths.len()];
    let mut matches = Vec::new();
    for di in order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (ti, t) in truths.iter().enumerate() {
            if taken[ti] || t.class_id != d.class_id {
                continue;
            }
            let iou = d.bbox.iou(&t.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((ti, iou));
            }
        }
        if let Some((ti, iou)) = best {
            taken[ti] = true;
            matches.push(Match { detection: di, truth: ti, iou });
        }
    }
    let tp = matches.len();
    MatchResult { counts: Counts { tp, fp: dets.len() - tp, fn_: truths.len() - tp }, matches }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub name: String,
    pub detections: Vec<ScoredBox>,
    pub truths: Vec<TruthBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageCounts {
    pub name: String,
    pub counts: Counts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Images per second of inference, when timing was measured.
    pub fps: Option<f64>,
    pub images: usize,
    pub iou_threshold: f64,
    pub per_image: Vec<ImageCounts>,
}

fn ratio(num: usize, den: usize, vacuous: bool) -> f64 {
    if den == 0 {
        if vacuous {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// Median of a non-empty sample (mean of the middle two for even sizes).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Metrics from aggregate counts. Precision with no detections is 1 only if
/// nothing was missed (recall likewise with no truths and no false
/// positives); otherwise 0. `timing` holds inference-only wall-clock seconds
/// per run over all `images`; fps is the median over runs.
pub fn compute_report(counts: Counts, images: usize, timing: &[f64]) -> Result<EvalReport, EvalError> {
    if images == 0 {
        return Err(EvalError::NoImages);
    }
    if let Some(&t) = timing.iter().find(|t| !(**t > 0.0)) {
        return Err(EvalError::BadTiming(t));
    }
    let Counts { tp, fp, fn_ } = counts;
    let precision = ratio(tp, tp + fp, fn_ == 0);
    let recall = ratio(tp, tp + fn_, fp == 0);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    let accuracy = ratio(tp, tp + fp + fn_, true);
    let fps = if timing.is_empty() {
        None
    } else {
        Some(median(&timing.iter().map(|t| images as f64 / t).collect::<Vec<_>>()))
    };
    Ok(EvalReport {
        counts,
        precision,
        recall,
        f1,
        accuracy,
        fps,
        images,
        iou_threshold: DEFAULT_MATCH_IOU,
        per_image: Vec::new(),
    })
}

/// Matches every image (in parallel) and aggregates.
pub fn evaluate(images: &[ImageEval], iou_threshold: f64, timing: &[f64]) -> Result<EvalReport, EvalError> {
    let per_image: Vec<ImageCounts> = images
        .par_iter()
        .map(|im| ImageCounts {
            name: im.name.clone(),
            counts: match_detections(&im.detections, &im.truths, iou_threshold).counts,
        })
        .collect();
    let total = per_image.iter().fold(Counts::default(), |a, b| a + b.counts);
    let mut report = compute_report(total, images.len(), timing)?;
    report.iou_threshold = iou_threshold;
    report.per_image = per_image;
    Ok(report)
}

/// Runs `infer` (which should process all images once, with inputs already
/// in memory) `runs` times and returns the wall-clock seconds of each run.
pub fn time_runs<E>(runs: usize, mut infer: impl FnMut() -> Result<(), E>) -> Result<Vec<f64>, E> {
    let mut out = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        infer()?;
        out.push(start.elapsed().as_secs_f64().max(1e-9));
    }
    Ok(out)
}

impl EvalReport {
    /// Accuracy / precision / recall / F1 / fps table.
    pub fn table(&self) -> String {
        let fps = self.fps.map_or("-".to_string(), |f| format!("{f:.1}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>10} {:>10} {:>8}", "", "accuracy", "precision", "recall", "F1-score", "fps");
        let _ = writeln!(
            s,
            "{:<10} {:>9.2}% {:>9.2}% {:>9.2}% {:>9.2}% {:>8}",
            "gridspot",
            100.0 * self.accuracy,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1,
            fps
        );
        let _ = writeln!(
            s,
            "images={} truths={} detections={} tp={} fp={} fn={} iou>={}",
            self.images,
            self.counts.tp + self.counts.fn_,
            self.counts.tp + self.counts.fp,
            self.counts.tp,
            self.counts.fp,
            self.counts.fn_,
            self.iou_threshold
        );
        s
    }

    pub fn key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images={}", self.images);
        let _ = writeln!(s, "iou_threshold={}", self.iou_threshold);
        let _ = writeln!(s, "tp={}", self.counts.tp);
        let _ = writeln!(s, "fp={}", self.counts.fp);
        let _ = writeln!(s, "fn={}", self.counts.fn_);
        let _ = writeln!(s, "precision={:.6}", self.precision);
        let _ = writeln!(s, "recall={:.6}", self.recall);
        let _ = writeln!(s, "f1={:.6}", self.f1);
        let _ = writeln!(s, "accuracy={:.6}", self.accuracy);
        match self.fps {
            Some(f) => {
                let _ = writeln!(s, "fps={f:.3}");
            }
            None => {
                let _ = writeln!(s, "fps=none");
            }
        }
        for im in &self.per_image {
            let _ = writeln!(s, "image.{}={},{},{}", im.name, im.counts.tp, im.counts.fp, im.counts.fn_);
        }
        s
    }
}
