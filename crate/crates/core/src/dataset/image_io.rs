//! Planar RGB images with values in `[0, 1]`.

use std::path::Path;

use image::{Rgb, RgbImage};

use super::DatasetError;

/// Planar RGB image, channel-major: `data[c * h * w + y * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl PlanarImage {
    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self { width, height, data: vec![value; 3 * width * height] }
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let idx = c * self.plane_len() + y * self.width + x;
        self.data[idx] = v;
    }

    /// Copies the window `[x0, x0 + w) x [y0, y0 + h)`; the window must lie
    /// inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> PlanarImage {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop window out of bounds");
        let mut out = PlanarImage::filled(w, h, 0.0);
        for c in 0..3 {
            for y in 0..h {
                let src = c * self.plane_len() + (y0 + y) * self.width + x0;
                let dst = c * w * h + y * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    pub fn from_rgb8(img: &RgbImage) -> PlanarImage {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = PlanarImage::filled(w, h, 0.0);
        let plane = w * h;
        for (x, y, p) in img.enumerate_pixels() {
            let i = y as usize * w + x as usize;
            for c in 0..3 {
                out.data[c * plane + i] = p.0[c] as f32 / 255.0;
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let plane = self.plane_len();
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            let q = |c: usize| (self.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(0), q(1), q(2)])
        })
    }

    /// Decodes JPEG, PNG or TIFF from disk.
    pub fn load(path: &Path) -> Result<PlanarImage, DatasetError> {
        let img = image::open(path).map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(PlanarImage::from_rgb8(&img.to_rgb8()))
    }

    /// Writes the image as PNG (or whatever the extension selects).
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        self.to_rgb8().save(path).map_err(|e| DatasetError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Reads image dimensions without decoding the pixels.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize), DatasetError> {
    image::image_dimensions(path)
        .map(|(w, h)| (w as usize, h as usize))
        .map_err(|e| DatasetError::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Draws a one-pixel rectangle outline, clipped to the image.
pub fn draw_rect(img: &mut PlanarImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [f32; 3]) {
    let (w, h) = (img.width as i64, img.height as i64);
    if w == 0 || h == 0 {
        return;
    }
    let cx = |v: i64| v.clamp(0, w - 1) as usize;
    let cy = |v: i64| v.clamp(0, h - 1) as usize;
    let (ax, bx, ay, by) = (cx(x0), cx(x1), cy(y0), cy(y1));
    for x in ax..=bx {
        for c in 0..3 {
            if (0..h).contains(&y0) {
                img.set(c, ay, x, color[c]);
            }
            if (0..h).contains(&y1) {
                img.set(c, by, x, color[c]);
            }
        }
    }
    for y in ay..=by {
        for c in 0..3 {
            if (0..w).contains(&x0) {
                img.set(c, y, ax, color[c]);
            }
            if (0..w).contains(&x1) {
                img.set(c, y, bx, color[c]);
            }
        }
    }
}
