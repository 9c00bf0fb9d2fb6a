//! Label file format: one `<class_id> <x> <y> <w> <h>` record per line,
//! normalized center-form boxes.

use std::fmt::Write as _;

use crate::geometry::{CenterBox, CornerBox};

use super::DatasetError;

/// Coordinates may overshoot the unit frame by this much before being
/// rejected; anything inside the slack is clipped.
pub const CLIP_TOLERANCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: CenterBox,
}

/// Parses the contents of one label file. An empty file is a background image.
pub fn parse_label_file(content: &str, class_count: usize) -> Result<Vec<Annotation>, DatasetError> {
    let mut out = Vec::new();
    for (idx, raw) in content.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| DatasetError::Parse { line: line_no, reason };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("invalid class id '{}'", fields[0])))?;
        if class_id >= class_count {
            return Err(err(format!("class id {class_id} out of range (classes: {class_count})")));
        }
        let mut v = [0.0f64; 4];
        for (slot, (name, text)) in v.iter_mut().zip(["x", "y", "w", "h"].iter().zip(&fields[1..])) {
            let value: f64 = text
                .parse()
                .map_err(|_| err(format!("{name} is not a number: '{text}'")))?;
            if !value.is_finite() || !(-CLIP_TOLERANCE..=1.0 + CLIP_TOLERANCE).contains(&value) {
                return Err(err(format!("{name} out of range: {value}")));
            }
            *slot = value;
        }
        let [x, y, w, h] = v;
        if w <= 0.0 || h <= 0.0 {
            return Err(err(format!("degenerate size w={w} h={h}")));
        }
        let corners = CornerBox {
            x_min: x - w / 2.0,
            y_min: y - h / 2.0,
            x_max: x + w / 2.0,
            y_max: y + h / 2.0,
        };
        let bbox = CenterBox::from_unit_corners_clipped(&corners)
            .map_err(|e| err(format!("box outside image after clipping: {e}")))?;
        out.push(Annotation { class_id, bbox });
    }
    Ok(out)
}

/// Formats one record with six decimals.
pub fn format_annotation(a: &Annotation) -> String {
    format!(
        "{} {:.6} {:.6} {:.6} {:.6}",
        a.class_id, a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h
    )
}

/// Formats a whole label file, newline-terminated.
pub fn format_label_file(annotations: &[Annotation]) -> String {
    let mut s = String::new();
    for a in annotations {
        let _ = writeln!(s, "{}", format_annotation(a));
    }
    s
}
