//! Aspect-preserving resize onto a square canvas padded with neutral gray.

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};

use crate::dataset::{Annotation, PlanarImage};
use crate::geometry::CenterBox;

pub const PAD_VALUE: f32 = 0.5;

/// Placement of a resized source image inside the square canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub size: usize,
    pub src_w: usize,
    pub src_h: usize,
    pub new_w: usize,
    pub new_h: usize,
    pub pad_x: usize,
    pub pad_y: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, size: usize) -> Letterbox {
        let scale = (size as f64 / src_w as f64).min(size as f64 / src_h as f64);
        let new_w = ((src_w as f64 * scale).round() as usize).clamp(1, size);
        let new_h = ((src_h as f64 * scale).round() as usize).clamp(1, size);
        Letterbox { size, src_w, src_h, new_w, new_h, pad_x: (size - new_w) / 2, pad_y: (size - new_h) / 2 }
    }

    pub fn is_identity(&self) -> bool {
        self.src_w == self.size && self.src_h == self.size
    }

    /// Source-normalized box to canvas-normalized box.
    pub fn map_box(&self, b: &CenterBox) -> CenterBox {
        let s = self.size as f64;
        let (sx, sy) = (self.new_w as f64 / s, self.new_h as f64 / s);
        CenterBox {
            x: b.x * sx + self.pad_x as f64 / s,
            y: b.y * sy + self.pad_y as f64 / s,
            w: b.w * sx,
            h: b.h * sy,
        }
    }

    /// Canvas-normalized `(x, y, w, h)` back to source-normalized.
    pub fn unmap(&self, x: f64, y: f64, w: f64, h: f64) -> (f64, f64, f64, f64) {
        let s = self.size as f64;
        let (sx, sy) = (self.new_w as f64 / s, self.new_h as f64 / s);
        ((x - self.pad_x as f64 / s) / sx, (y - self.pad_y as f64 / s) / sy, w / sx, h / sy)
    }

    pub fn map_annotations(&self, anns: &[Annotation]) -> Vec<Annotation> {
        anns.iter().map(|a| Annotation { class_id: a.class_id, bbox: self.map_box(&a.bbox) }).collect()
    }
}

pub fn resize(img: &PlanarImage, w: usize, h: usize) -> PlanarImage {
    if img.width == w && img.height == h {
        return img.clone();
    }
    let plane = img.plane_len();
    let src: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        let i = y as usize * img.width + x as usize;
        Rgb([img.data[i], img.data[plane + i], img.data[2 * plane + i]])
    });
    let dst = imageops::resize(&src, w as u32, h as u32, FilterType::Triangle);
    let mut out = PlanarImage::filled(w, h, 0.0);
    let p = w * h;
    for (x, y, px) in dst.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            out.data[c * p + i] = px.0[c];
        }
    }
    out
}

pub fn letterbox(img: &PlanarImage, size: usize) -> (PlanarImage, Letterbox) {
    let lb = Letterbox::new(img.width, img.height, size);
    if lb.is_identity() {
        return (img.clone(), lb);
    }
    let resized = resize(img, lb.new_w, lb.new_h);
    let mut out = PlanarImage::filled(size, size, PAD_VALUE);
    let (p_src, p_dst) = (lb.new_w * lb.new_h, size * size);
    for c in 0..3 {
        for y in 0..lb.new_h {
            let s = c * p_src + y * lb.new_w;
            let d = c * p_dst + (y + lb.pad_y) * size + lb.pad_x;
            out.data[d..d + lb.new_w].copy_from_slice(&resized.data[s..s + lb.new_w]);
        }
    }
    (out, lb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic_scene, SceneSpec};
    use crate::geometry::CornerBox;

    #[test]
    fn geometry_of_wide_image() {
        let lb = Letterbox::new(800, 400, 416);
        assert_eq!((lb.new_w, lb.new_h, lb.pad_x, lb.pad_y), (416, 208, 0, 104));
        let b = CenterBox::new(0.5, 0.5, 0.1, 0.2).unwrap();
        let m = lb.map_box(&b);
        assert!((m.x - 0.5).abs() < 1e-12 && (m.y - 0.5).abs() < 1e-12);
        assert!((m.w - 0.1).abs() < 1e-12 && (m.h - 0.1).abs() < 1e-12);
        // aspect ratio preserved in pixels: 80x80 before and after
        assert!((m.w * 416.0 - m.h * 416.0).abs() < 1e-9);
        let (x, y, w, h) = lb.unmap(m.x, m.y, m.w, m.h);
        assert!((x - b.x).abs() < 1e-12 && (y - b.y).abs() < 1e-12 && (w - b.w).abs() < 1e-12 && (h - b.h).abs() < 1e-12);
    }

    #[test]
    fn padding_is_gray_and_identity_is_untouched() {
        let img = PlanarImage::filled(100, 50, 0.9);
        let (out, lb) = letterbox(&img, 64);
        assert_eq!((out.width, out.height), (64, 64));
        assert_eq!(out.get(0, 0, 0), PAD_VALUE);
        assert!((out.get(1, 32, 32) - 0.9).abs() < 1e-6);
        assert!(!lb.is_identity());
        let sq = PlanarImage::filled(64, 64, 0.2);
        assert_eq!(letterbox(&sq, 64).0, sq);
    }

    /// Sub-pixel extent of a resampled binary mask inside the content
    /// region: per axis, the points where the max-coverage profile crosses
    /// one half, interpolated linearly between pixel centers.
    fn covered_box(mask: &PlanarImage, lb: &Letterbox) -> Option<CornerBox> {
        let (x0, y0) = (lb.pad_x, lb.pad_y);
        let (x1, y1) = (lb.pad_x + lb.new_w, lb.pad_y + lb.new_h);
        let cols: Vec<f64> = (x0..x1).map(|x| (y0..y1).map(|y| mask.get(0, y, x) as f64).fold(0.0, f64::max)).collect();
        let rows: Vec<f64> = (y0..y1).map(|y| (x0..x1).map(|x| mask.get(0, y, x) as f64).fold(0.0, f64::max)).collect();
        let edges = |p: &[f64], origin: usize| -> Option<(f64, f64)> {
            let first = p.iter().position(|&v| v > 0.5)?;
            let last = p.iter().rposition(|&v| v > 0.5)?;
            let before = if first > 0 { p[first - 1] } else { 0.0 };
            let after = p.get(last + 1).copied().unwrap_or(0.0);
            let lo = first as f64 - 0.5 + (0.5 - before) / (p[first] - before);
            let hi = last as f64 + 0.5 + (p[last] - 0.5) / (p[last] - after);
            Some((lo + origin as f64, hi + origin as f64))
        };
        let (xa, xb) = edges(&cols, x0)?;
        let (ya, yb) = edges(&rows, y0)?;
        Some(CornerBox { x_min: xa, y_min: ya, x_max: xb, y_max: yb })
    }

    #[test]
    fn remapped_truth_tracks_rendered_objects() {
        // the factors multiscale training uses (416 -> 320 and 416 -> 512)
        // plus a non-square source
        let cases = [((416, 416), 320), ((416, 416), 512), ((300, 200), 416)];
        let mut worst = 1.0f64;
        for ((w, h), size) in cases {
            let spec = SceneSpec { width: w, height: h, min_objects: 3, max_objects: 5, min_size: 24.0, max_size: 40.0, min_gap: 8.0, ..SceneSpec::default() };
            for seed in 0..4 {
                let scene = generate_synthetic_scene(&spec, seed).unwrap();
                for (a, pix) in scene.labeled.annotations.iter().zip(&scene.boxes) {
                    // binary mask of this object's rendered pixels
                    let mut mask = PlanarImage::filled(w, h, 0.0);
                    for y in pix.y_min as usize..pix.y_max as usize {
                        for x in pix.x_min as usize..pix.x_max as usize {
                            if scene.pixels.get(0, y, x) > 0.75 {
                                for c in 0..3 {
                                    mask.set(c, y, x, 1.0);
                                }
                            }
                        }
                    }
                    let (canvas, lb) = letterbox(&mask, size);
                    let t = lb.map_box(&a.bbox);
                    let truth = CornerBox {
                        x_min: (t.x - t.w / 2.0) * size as f64,
                        y_min: (t.y - t.h / 2.0) * size as f64,
                        x_max: (t.x + t.w / 2.0) * size as f64,
                        y_max: (t.y + t.h / 2.0) * size as f64,
                    };
                    let rendered = covered_box(&canvas, &lb).expect("object survives the resize");
                    worst = worst.min(truth.iou(&rendered));
                }
            }
        }
        assert!(worst >= 0.95, "worst IoU {worst}");
    }
}
