//! Detection text output, parsing and rendering.
//!
//! One line per detection:
//! `<image> <class_name> <score> <x_min> <y_min> <x_max> <y_max>` in source
//! pixels.

use crate::dataset::image_io::draw_rect;
use crate::dataset::PlanarImage;
use crate::geometry::CornerBox;

use super::{Detection, InferenceError};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image: String,
    pub class_name: String,
    pub score: f64,
    pub bbox: CornerBox,
}

fn pixel_box(d: &Detection, w: usize, h: usize) -> CornerBox {
    let (w, h) = (w as f64, h as f64);
    let b = d.bbox;
    CornerBox {
        x_min: (b.x - b.w / 2.0) * w,
        y_min: (b.y - b.h / 2.0) * h,
        x_max: (b.x + b.w / 2.0) * w,
        y_max: (b.y + b.h / 2.0) * h,
    }
}

/// Lines for one image of `width x height` pixels. `image` must not contain
/// whitespace.
pub fn format_detections(image: &str, dets: &[Detection], class_names: &[String], width: usize, height: usize) -> String {
    let mut out = String::new();
    for d in dets {
        let b = pixel_box(d, width, height);
        let name = class_names.get(d.class_id).map(String::as_str).unwrap_or("unknown");
        out.push_str(&format!(
            "{image} {name} {:.6} {:.2} {:.2} {:.2} {:.2}\n",
            d.score, b.x_min, b.y_min, b.x_max, b.y_max
        ));
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<DetectionRecord>, InferenceError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: String| InferenceError::Parse { line: idx + 1, reason };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let mut v = [0.0f64; 5];
        for (slot, text) in v.iter_mut().zip(&f[2..]) {
            *slot = text.parse().ok().filter(|x: &f64| x.is_finite()).ok_or_else(|| err(format!("not a number: '{text}'")))?;
        }
        let [score, x_min, y_min, x_max, y_max] = v;
        let bbox = CornerBox::new(x_min, y_min, x_max, y_max).map_err(|e| err(e.to_string()))?;
        out.push(DetectionRecord { image: f[0].to_string(), class_name: f[1].to_string(), score, bbox });
    }
    Ok(out)
}

/// Copy of `img` with a rectangle around every detection.
pub fn render_detections(img: &PlanarImage, dets: &[Detection]) -> PlanarImage {
    let mut out = img.clone();
    for d in dets {
        let b = pixel_box(d, img.width, img.height);
        let r = |v: f64| v.round() as i64;
        draw_rect(&mut out, r(b.x_min), r(b.y_min), r(b.x_max) - 1, r(b.y_max) - 1, [1.0, 0.1, 0.1]);
    }
    out
}
