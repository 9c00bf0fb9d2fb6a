//! Assignment of ground-truth boxes to grid cells and anchors.

use log::warn;

use crate::dataset::Annotation;
use crate::geometry::{centered_iou, CenterBox};

use super::volume::logit;
use super::NetworkError;

/// Cell offsets are clamped into `[EDGE, 1 - EDGE]` before the logit.
const EDGE: f64 = 1e-6;

/// Regression target for one responsible `(cell, anchor)` slot. The `t`
/// values invert the decode mapping, so decoding them reproduces `truth`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellTarget {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub class_id: usize,
    pub truth: CenterBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetVolume {
    pub grid: usize,
    pub priors: Vec<(f64, f64)>,
    pub classes: usize,
    /// Indexed `(i * S + j) * B + k`; `Some` marks a responsible slot.
    pub cells: Vec<Option<CellTarget>>,
    /// Objects that found no free anchor in their cell.
    pub dropped: usize,
}

impl TargetVolume {
    pub fn get(&self, i: usize, j: usize, k: usize) -> Option<&CellTarget> {
        self.cells[(i * self.grid + j) * self.priors.len() + k].as_ref()
    }

    pub fn positives(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Responsibility mask in cell/anchor order.
    pub fn mask(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }
}

/// Responsible cell for a normalized center: `(floor(y*S), floor(x*S))`
/// clamped to the grid.
pub fn responsible_cell(x: f64, y: f64, grid: usize) -> (usize, usize) {
    let clamp = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    (clamp(y), clamp(x))
}

/// Builds the target volume for one image. Within the responsible cell the
/// anchor with the best centered IoU takes the object; if it is already
/// taken the next best free anchor is used, and if none is free the object
/// is dropped and counted.
pub fn assign_targets(
    annotations: &[Annotation],
    priors: &[(f64, f64)],
    classes: usize,
    grid: usize,
) -> Result<TargetVolume, NetworkError> {
    if grid == 0 {
        return Err(NetworkError::Config("grid size must be at least 1".into()));
    }
    if priors.is_empty() {
        return Err(NetworkError::Config("no anchors".into()));
    }
    let b = priors.len();
    let mut cells: Vec<Option<CellTarget>> = vec![None; grid * grid * b];
    let mut dropped = 0;
    for a in annotations {
        if a.class_id >= classes {
            return Err(NetworkError::Config(format!("class id {} >= class count {classes}", a.class_id)));
        }
        let t = a.bbox;
        let (i, j) = responsible_cell(t.x, t.y, grid);
        let mut order: Vec<(usize, f64)> =
            priors.iter().enumerate().map(|(k, &p)| (k, centered_iou((t.w, t.h), p))).collect();
        order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let slot = order.iter().map(|&(k, _)| (i * grid + j) * b + k).find(|&s| cells[s].is_none());
        let Some(slot) = slot else {
            dropped += 1;
            continue;
        };
        let k = slot % b;
        let ox = (t.x * grid as f64 - j as f64).clamp(EDGE, 1.0 - EDGE);
        let oy = (t.y * grid as f64 - i as f64).clamp(EDGE, 1.0 - EDGE);
        cells[slot] = Some(CellTarget {
            tx: logit(ox),
            ty: logit(oy),
            tw: (t.w / priors[k].0).ln(),
            th: (t.h / priors[k].1).ln(),
            class_id: a.class_id,
            truth: t,
        });
    }
    if dropped > 0 {
        warn!("{dropped} object(s) dropped: no free anchor in their grid cell");
    }
    Ok(TargetVolume { grid, priors: priors.to_vec(), classes, cells, dropped })
}
