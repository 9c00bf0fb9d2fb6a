//! Axis-aligned box representations and overlap measures.
//!
//! Two parameterizations are used throughout the crate:
//!
//! * [`CornerBox`] holds pixel extents `(x_min, y_min, x_max, y_max)` with the
//!   origin at the top-left of the image.
//! * [`CenterBox`] holds a center point and size normalized to the image
//!   frame, which is what label files store.
//!
//! Coordinates are continuous; the area of a box is `(x_max - x_min) * (y_max - y_min)`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite box coordinate")]
    NonFinite,
    #[error("inverted box extents: min {min} > max {max}")]
    Inverted { min: f64, max: f64 },
    #[error("degenerate box: width {w}, height {h}")]
    Degenerate { w: f64, h: f64 },
    #[error("invalid image dimensions {w}x{h}")]
    ImageSize { w: f64, h: f64 },
    #[error("normalized box out of range: {0}")]
    OutOfRange(String),
}

/// Pixel-space box given by its extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl CornerBox {
    /// Builds a box, rejecting non-finite values and inverted extents.
    /// Zero-area boxes are representable here; conversions reject them.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min > x_max {
            return Err(GeometryError::Inverted { min: x_min, max: x_max });
        }
        if y_min > y_max {
            return Err(GeometryError::Inverted { min: y_min, max: y_max });
        }
        Ok(Self { x_min, y_min, x_max, y_max })
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection(&self, other: &CornerBox) -> f64 {
        let iw = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let ih = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    /// Intersection over union. Two zero-area boxes have IoU 0.
    pub fn iou(&self, other: &CornerBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> CornerBox {
        CornerBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Clips the box to `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> CornerBox {
        CornerBox {
            x_min: self.x_min.clamp(0.0, w),
            y_min: self.y_min.clamp(0.0, h),
            x_max: self.x_max.clamp(0.0, w),
            y_max: self.y_max.clamp(0.0, h),
        }
    }
}

/// Center-form box normalized to the image frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenterBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    /// Builds a validated box: center in `[0, 1]`, size in `(0, 1]`.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::Degenerate { w, h });
        }
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(GeometryError::OutOfRange(format!("center ({x}, {y})")));
        }
        if w > 1.0 || h > 1.0 {
            return Err(GeometryError::OutOfRange(format!("size ({w}, {h})")));
        }
        Ok(Self { x, y, w, h })
    }

    /// Corner extents in the unit frame (no image scaling).
    pub fn unit_corners(&self) -> CornerBox {
        CornerBox {
            x_min: self.x - self.w / 2.0,
            y_min: self.y - self.h / 2.0,
            x_max: self.x + self.w / 2.0,
            y_max: self.y + self.h / 2.0,
        }
    }

    /// IoU computed in the normalized frame. IoU is invariant under per-axis
    /// scaling, so this equals the pixel-space IoU for any image size.
    pub fn iou(&self, other: &CenterBox) -> f64 {
        self.unit_corners().iou(&other.unit_corners())
    }

    /// Rebuilds a center box from unit-frame extents after clipping them to
    /// `[0, 1]`. Fails if nothing of the box remains inside the frame.
    pub fn from_unit_corners_clipped(c: &CornerBox) -> Result<Self, GeometryError> {
        let c = c.clip(1.0, 1.0);
        CenterBox::new(
            (c.x_min + c.x_max) / 2.0,
            (c.y_min + c.y_max) / 2.0,
            c.width(),
            c.height(),
        )
    }
}

fn check_image(image_w: f64, image_h: f64) -> Result<(), GeometryError> {
    if !(image_w > 0.0 && image_h > 0.0 && image_w.is_finite() && image_h.is_finite()) {
        return Err(GeometryError::ImageSize { w: image_w, h: image_h });
    }
    Ok(())
}

/// Normalizes a pixel box: center is the midpoint of the extents and size is
/// their difference, both divided by the image dimensions.
pub fn corner_to_center(
    b: &CornerBox,
    image_w: f64,
    image_h: f64,
) -> Result<CenterBox, GeometryError> {
    check_image(image_w, image_h)?;
    let b = CornerBox::new(b.x_min, b.y_min, b.x_max, b.y_max)?;
    if b.width() <= 0.0 || b.height() <= 0.0 {
        return Err(GeometryError::Degenerate { w: b.width(), h: b.height() });
    }
    CenterBox::new(
        (b.x_max + b.x_min) / (2.0 * image_w),
        (b.y_max + b.y_min) / (2.0 * image_h),
        b.width() / image_w,
        b.height() / image_h,
    )
}

/// Inverse of [`corner_to_center`].
pub fn center_to_corner(
    b: &CenterBox,
    image_w: f64,
    image_h: f64,
) -> Result<CornerBox, GeometryError> {
    check_image(image_w, image_h)?;
    let b = CenterBox::new(b.x, b.y, b.w, b.h)?;
    let cx = b.x * image_w;
    let cy = b.y * image_h;
    let hw = b.w * image_w / 2.0;
    let hh = b.h * image_h / 2.0;
    CornerBox::new(cx - hw, cy - hh, cx + hw, cy + hh)
}

/// IoU of two boxes.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    a.iou(b)
}

/// IoU of two shapes `(w, h)` aligned at a common center.
pub fn centered_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
