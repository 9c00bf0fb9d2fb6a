//! Tiled detection over images larger than the network input.

use rayon::prelude::*;

use crate::dataset::PlanarImage;
use crate::geometry::{CenterBox, CornerBox};
use crate::network::{Network, Scalar, Tensor};
use crate::trainer::letterbox::{letterbox, PAD_VALUE};

use super::{decode, nms, Detection, InferenceError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilePlan {
    pub image_w: usize,
    pub image_h: usize,
    pub tile_size: usize,
    pub overlap: usize,
    /// Tile origins, row-major (y outer, x inner).
    pub offsets: Vec<(usize, usize)>,
    pub xs: Vec<usize>,
    pub ys: Vec<usize>,
}

fn axis_offsets(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let count = (dim - tile).div_ceil(stride) + 1;
    (0..count).map(|i| (i * stride).min(dim - tile)).collect()
}

/// Tiles at `tile_size - overlap` steps; the last row and column are
/// clamped so no tile leaves the image.
pub fn plan_tiles(image_w: usize, image_h: usize, tile_size: usize, overlap: usize) -> Result<TilePlan, InferenceError> {
    if tile_size == 0 || image_w == 0 || image_h == 0 {
        return Err(InferenceError::Config("tile and image sizes must be positive".into()));
    }
    if overlap >= tile_size {
        return Err(InferenceError::Config(format!("overlap {overlap} must be smaller than the tile size {tile_size}")));
    }
    let stride = tile_size - overlap;
    let xs = axis_offsets(image_w, tile_size, stride);
    let ys = axis_offsets(image_h, tile_size, stride);
    let offsets = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(TilePlan { image_w, image_h, tile_size, overlap, offsets, xs, ys })
}

impl TilePlan {
    fn owned_span(starts: &[usize], idx: usize, tile: usize, dim: usize) -> (f64, f64) {
        let lo = if idx == 0 { 0.0 } else { (starts[idx] as f64 + (starts[idx - 1] + tile) as f64) / 2.0 };
        let hi = if idx + 1 == starts.len() {
            dim as f64
        } else {
            ((starts[idx] + tile) as f64 + starts[idx + 1] as f64) / 2.0
        };
        (lo, hi)
    }

    /// Pixel region whose points this tile is responsible for: tiles split
    /// every overlap at its midpoint, so the regions partition the image.
    pub fn owned_region(&self, tile_index: usize) -> CornerBox {
        let (xi, yi) = (tile_index % self.xs.len(), tile_index / self.xs.len());
        let (x_min, x_max) = Self::owned_span(&self.xs, xi, self.tile_size, self.image_w);
        let (y_min, y_max) = Self::owned_span(&self.ys, yi, self.tile_size, self.image_h);
        CornerBox { x_min, y_min, x_max, y_max }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileOptions {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    /// Keep a tile's detection only if its center lies in the tile's owned
    /// region. Objects cut by a tile edge then come only from the tile that
    /// sees them whole (given overlap of at least twice the object size).
    pub ownership: bool,
}

impl Default for TileOptions {
    fn default() -> Self {
        Self { conf_threshold: super::DEFAULT_CONF_THRESHOLD, iou_threshold: super::DEFAULT_IOU_THRESHOLD, ownership: true }
    }
}

fn to_input<T: Scalar>(img: &PlanarImage) -> Tensor<T> {
    Tensor::from_vec(1, 3, img.height, img.width, img.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())
}

/// Runs the network on one image letterboxed to its input size; boxes are
/// normalized to `img`. Detections are not suppressed.
fn raw_detections<T: Scalar>(net: &Network<T>, img: &PlanarImage, conf: f64) -> Result<Vec<Detection>, crate::network::NetworkError> {
    let (canvas, lb) = letterbox(img, net.input_size());
    let pred = net.predict(&to_input(&canvas))?;
    let dets = decode(&pred[0], &net.config().anchors, conf).expect("anchor count matches the network");
    Ok(dets
        .into_iter()
        .filter_map(|d| {
            let (x, y, w, h) = lb.unmap(d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h);
            let c = CornerBox { x_min: x - w / 2.0, y_min: y - h / 2.0, x_max: x + w / 2.0, y_max: y + h / 2.0 };
            CenterBox::from_unit_corners_clipped(&c).ok().map(|bbox| Detection { bbox, ..d })
        })
        .collect())
}

/// Maps a tile-normalized detection into the source frame. Both detection
/// paths go through here so a single full-image tile is bitwise identical
/// to whole-image detection.
fn lift(d: Detection, sx: f64, sy: f64, dx: f64, dy: f64) -> Option<Detection> {
    let b = d.bbox;
    let (cx, cy, w, h) = (b.x * sx + dx, b.y * sy + dy, b.w * sx, b.h * sy);
    let c = CornerBox { x_min: cx - w / 2.0, y_min: cy - h / 2.0, x_max: cx + w / 2.0, y_max: cy + h / 2.0 };
    CenterBox::from_unit_corners_clipped(&c).ok().map(|bbox| Detection { bbox, ..d })
}

/// Whole-image detection: letterbox, decode, suppress. Boxes are
/// normalized to the image.
pub fn detect_image<T: Scalar>(net: &Network<T>, img: &PlanarImage, opts: &TileOptions) -> Result<Vec<Detection>, InferenceError> {
    let dets: Vec<Detection> = raw_detections(net, img, opts.conf_threshold)?
        .into_iter()
        .filter_map(|d| lift(d, 1.0, 1.0, 0.0, 0.0))
        .collect();
    Ok(nms(&dets, opts.iou_threshold))
}

/// Detects per tile (in parallel), lifts boxes into source coordinates and
/// runs one global per-class NMS. Boxes are normalized to the source image.
pub fn detect_tiled<T: Scalar>(
    net: &Network<T>,
    img: &PlanarImage,
    plan: &TilePlan,
    opts: &TileOptions,
) -> Result<Vec<Detection>, InferenceError> {
    if (plan.image_w, plan.image_h) != (img.width, img.height) {
        return Err(InferenceError::Config(format!(
            "tile plan is for {}x{}, image is {}x{}",
            plan.image_w, plan.image_h, img.width, img.height
        )));
    }
    let (iw, ih) = (img.width as f64, img.height as f64);
    let per_tile: Vec<Vec<Detection>> = plan
        .offsets
        .par_iter()
        .enumerate()
        .map(|(t, &(ox, oy))| {
            let w = plan.tile_size.min(img.width - ox);
            let h = plan.tile_size.min(img.height - oy);
            let crop = img.crop(ox, oy, w, h);
            // a short edge tile keeps its pixel scale, padded at the far side
            let tile = if (w, h) == (plan.tile_size, plan.tile_size) {
                crop
            } else {
                let mut t = PlanarImage::filled(plan.tile_size, plan.tile_size, PAD_VALUE);
                for c in 0..3 {
                    for y in 0..h {
                        let s = c * w * h + y * w;
                        let d = c * plan.tile_size * plan.tile_size + y * plan.tile_size;
                        t.data[d..d + w].copy_from_slice(&crop.data[s..s + w]);
                    }
                }
                t
            };
            let dets = raw_detections(net, &tile, opts.conf_threshold)
                .map_err(|source| InferenceError::Tile { x: ox, y: oy, source })?;
            let owned = plan.owned_region(t);
            let (sx, sy) = (plan.tile_size as f64 / iw, plan.tile_size as f64 / ih);
            let (dx, dy) = (ox as f64 / iw, oy as f64 / ih);
            Ok(dets
                .into_iter()
                .filter(|d| {
                    let (px, py) = ((d.bbox.x * sx + dx) * iw, (d.bbox.y * sy + dy) * ih);
                    !opts.ownership || (px >= owned.x_min && px < owned.x_max && py >= owned.y_min && py < owned.y_max)
                })
                .filter_map(|d| lift(d, sx, sy, dx, dy))
                .collect())
        })
        .collect::<Result<_, InferenceError>>()?;
    let all: Vec<Detection> = per_tile.into_iter().flatten().collect();
    Ok(nms(&all, opts.iou_threshold))
}
