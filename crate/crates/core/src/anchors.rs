//! Anchor priors from ground-truth shapes by k-means under the `1 - IoU`
//! distance, with boxes compared as if they shared a center.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::centered_iou;

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_ANCHOR_COUNT: usize = 5;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("need at least {k} boxes to fit {k} anchors, got {n}")]
    TooFewBoxes { n: usize, k: usize },
    #[error("anchor count must be at least 1")]
    ZeroAnchors,
    #[error("invalid shape ({0}, {1}): sizes must be in (0, 1]")]
    InvalidShape(f64, f64),
    #[error("anchors file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// Normalized `(w, h)` prior shapes, sorted by area ascending.
    pub priors: Vec<(f64, f64)>,
    /// Mean over all boxes of the best centered IoU against any prior.
    pub mean_iou: f64,
    /// Mean best IoU after seeding and after every update step.
    pub history: Vec<f64>,
}

impl AnchorSet {
    pub fn from_priors(mut priors: Vec<(f64, f64)>) -> Result<AnchorSet, AnchorError> {
        if priors.is_empty() {
            return Err(AnchorError::ZeroAnchors);
        }
        for &(w, h) in &priors {
            check_shape(w, h)?;
        }
        sort_by_area(&mut priors);
        Ok(AnchorSet { priors, mean_iou: f64::NAN, history: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// One `p_w p_h` pair per line, six decimals.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (w, h) in &self.priors {
            let _ = writeln!(s, "{w:.6} {h:.6}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<AnchorSet, AnchorError> {
        let mut priors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| AnchorError::Parse { line: i + 1, reason };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 {
                return Err(err(format!("expected 2 fields, found {}", f.len())));
            }
            let w: f64 = f[0].parse().map_err(|_| err(format!("bad width '{}'", f[0])))?;
            let h: f64 = f[1].parse().map_err(|_| err(format!("bad height '{}'", f[1])))?;
            check_shape(w, h).map_err(|e| err(e.to_string()))?;
            priors.push((w, h));
        }
        AnchorSet::from_priors(priors)
    }

    pub fn load(path: &Path) -> Result<AnchorSet, AnchorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AnchorError::Io { path: path.to_path_buf(), source: e })?;
        AnchorSet::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), AnchorError> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| AnchorError::Io { path: path.to_path_buf(), source: e })
    }
}

fn check_shape(w: f64, h: f64) -> Result<(), AnchorError> {
    if w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0 {
        Ok(())
    } else {
        Err(AnchorError::InvalidShape(w, h))
    }
}

fn sort_by_area(p: &mut [(f64, f64)]) {
    p.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)).then(a.0.total_cmp(&b.0)));
}

/// Index and IoU of the best prior for `b`; ties go to the lower index.
fn best_prior(b: (f64, f64), priors: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, &p) in priors.iter().enumerate() {
        let v = centered_iou(b, p);
        if v > best.1 {
            best = (k, v);
        }
    }
    best
}

fn mean_best_iou(boxes: &[(f64, f64)], priors: &[(f64, f64)]) -> f64 {
    boxes.iter().map(|&b| best_prior(b, priors).1).sum::<f64>() / boxes.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn member_median(boxes: &[(f64, f64)], members: &[usize]) -> (f64, f64) {
    let mut ws: Vec<f64> = members.iter().map(|&i| boxes[i].0).collect();
    let mut hs: Vec<f64> = members.iter().map(|&i| boxes[i].1).collect();
    (median(&mut ws), median(&mut hs))
}

fn seed_priors(boxes: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut priors = vec![boxes[rng.gen_range(0..boxes.len())]];
    while priors.len() < k {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|&b| {
                let d = 1.0 - best_prior(b, &priors).1;
                d * d
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..boxes.len())
        } else {
            let mut r = rng.gen_range(0.0..total);
            let mut chosen = boxes.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if r < *w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        };
        priors.push(boxes[pick]);
    }
    priors
}

/// Clusters `(w, h)` shapes into `k` priors.
///
/// Seeding is k-means++ on the `1 - IoU` metric. Each update moves a prior to
/// the component-wise median of its members; an update that would lower the
/// cluster's summed IoU is skipped, so the mean best IoU never decreases.
/// An empty cluster is reseeded from the box farthest from its prior.
/// Stops when assignments stabilize or after [`MAX_ITERATIONS`].
pub fn kmeans_anchors(boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet, AnchorError> {
    if k == 0 {
        return Err(AnchorError::ZeroAnchors);
    }
    if boxes.len() < k {
        return Err(AnchorError::TooFewBoxes { n: boxes.len(), k });
    }
    for &(w, h) in boxes {
        check_shape(w, h)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut priors = seed_priors(boxes, k, &mut rng);
    let mut history = vec![mean_best_iou(boxes, &priors)];
    let mut assignment: Vec<usize> = vec![usize::MAX; boxes.len()];

    for _ in 0..MAX_ITERATIONS {
        let mut changed = false;
        for (i, &b) in boxes.iter().enumerate() {
            let (best, _) = best_prior(b, &priors);
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &a) in assignment.iter().enumerate() {
            members[a].push(i);
        }

        let mut moved = false;
        for c in 0..k {
            if members[c].is_empty() {
                // farthest box from its own prior
                let far = (0..boxes.len())
                    .map(|i| (i, 1.0 - centered_iou(boxes[i], priors[assignment[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                // only take it if that does not lower the score
                let mut trial = priors.clone();
                trial[c] = boxes[far];
                if mean_best_iou(boxes, &trial) >= mean_best_iou(boxes, &priors) && trial[c] != priors[c] {
                    priors = trial;
                    moved = true;
                }
                continue;
            }
            let candidate = member_median(boxes, &members[c]);
            if candidate == priors[c] {
                continue;
            }
            let old: f64 = members[c].iter().map(|&i| centered_iou(boxes[i], priors[c])).sum();
            let new: f64 = members[c].iter().map(|&i| centered_iou(boxes[i], candidate)).sum();
            if new >= old {
                priors[c] = candidate;
                moved = true;
            }
        }
        history.push(mean_best_iou(boxes, &priors));
        if !changed && !moved {
            break;
        }
    }

    sort_by_area(&mut priors);
    let mean_iou = mean_best_iou(boxes, &priors);
    Ok(AnchorSet { priors, mean_iou, history })
}
