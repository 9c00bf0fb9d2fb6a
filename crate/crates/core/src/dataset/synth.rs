//! Synthetic overhead scenes: small bright aircraft-like shapes scattered over
//! a textured background, with exact ground-truth boxes.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{corner_to_center, CornerBox};

use super::image_io::PlanarImage;
use super::labels::Annotation;
use super::manifest::{DatasetManifest, LabeledImage, IMAGES_DIR};
use super::DatasetError;

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object extent in pixels (length of the longer axis before rotation).
    pub min_size: f64,
    pub max_size: f64,
    /// Amplitude of per-pixel background noise.
    pub texture: f32,
    /// Maximum IoU allowed between any two object boxes.
    pub max_overlap: f64,
    /// Minimum pixel gap between object boxes; 0 lets objects abut.
    pub min_gap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 416,
            height: 416,
            min_objects: 1,
            max_objects: 5,
            min_size: 8.0,
            max_size: 32.0,
            texture: 0.08,
            max_overlap: 0.1,
            min_gap: 0.0,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: &str| Err(DatasetError::Invalid(format!("scene spec: {m}")));
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects > max_objects");
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size) {
            return bad("object sizes must satisfy 2 <= min_size <= max_size");
        }
        if self.max_size + 2.0 > self.width.min(self.height) as f64 {
            return bad("objects do not fit in the image");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Aircraft,
    Ellipse,
}

impl Shape {
    /// Membership test in the object frame: `u` along the heading, `v`
    /// across it, both in units of the object length.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Aircraft => {
                let fuselage = u.abs() <= 0.5 && v.abs() <= 0.09;
                let wings = (u - 0.04).abs() <= 0.11 && v.abs() <= 0.5;
                let tail = (-0.5..=-0.36).contains(&u) && v.abs() <= 0.2;
                fuselage || wings || tail
            }
            Shape::Ellipse => (u / 0.5).powi(2) + (v / 0.28).powi(2) <= 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub labeled: LabeledImage,
    pub pixels: PlanarImage,
    /// Tight pixel boxes of the rendered objects, in annotation order.
    pub boxes: Vec<CornerBox>,
}

struct Placed {
    pixels: Vec<(usize, usize)>,
    bbox: CornerBox,
}

fn rasterize(shape: Shape, cx: f64, cy: f64, size: f64, angle: f64, w: usize, h: usize) -> Option<Placed> {
    let (s, c) = angle.sin_cos();
    let r = size / 2.0 + 1.0;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let mut pixels = Vec::new();
    let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let u = (dx * c + dy * s) / size;
            let v = (-dx * s + dy * c) / size;
            if shape.contains(u, v) {
                pixels.push((px, py));
                bx0 = bx0.min(px);
                by0 = by0.min(py);
                bx1 = bx1.max(px);
                by1 = by1.max(py);
            }
        }
    }
    if pixels.len() < 4 {
        return None;
    }
    let bbox = CornerBox {
        x_min: bx0 as f64,
        y_min: by0 as f64,
        x_max: (bx1 + 1) as f64,
        y_max: (by1 + 1) as f64,
    };
    Some(Placed { pixels, bbox })
}

fn conflicts(b: &CornerBox, others: &[CornerBox], spec: &SceneSpec) -> bool {
    others.iter().any(|o| {
        if b.iou(o) > spec.max_overlap {
            return true;
        }
        if spec.min_gap > 0.0 {
            let g = spec.min_gap;
            let grown = CornerBox { x_min: b.x_min - g, y_min: b.y_min - g, x_max: b.x_max + g, y_max: b.y_max + g };
            return grown.intersection(o) > 0.0;
        }
        false
    })
}

/// Renders one scene. Output is a pure function of `(spec, seed)`.
pub fn generate_synthetic_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);

    // background: tinted base level, a gentle linear gradient and pixel noise
    let base: f32 = rng.gen_range(0.22..0.42);
    let tint: [f32; 3] = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    let (gx, gy): (f32, f32) = (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06));
    let mut img = PlanarImage::filled(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let ramp = gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5);
            let noise = if spec.texture > 0.0 { rng.gen_range(-spec.texture..spec.texture) } else { 0.0 };
            for (c, t) in tint.iter().enumerate() {
                img.set(c, y, x, (base + t + ramp + noise).clamp(0.0, 1.0));
            }
        }
    }

    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<CornerBox> = Vec::with_capacity(count);
    let mut placed: Vec<Placed> = Vec::with_capacity(count);
    for n in 0..count {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let size = rng.gen_range(spec.min_size..=spec.max_size);
            let angle = rng.gen_range(0.0..2.0 * PI);
            let shape = if rng.gen_bool(0.5) { Shape::Aircraft } else { Shape::Ellipse };
            let margin = size / 2.0 + 1.0;
            let cx = rng.gen_range(margin..w as f64 - margin);
            let cy = rng.gen_range(margin..h as f64 - margin);
            let Some(p) = rasterize(shape, cx, cy, size, angle, w, h) else { continue };
            if conflicts(&p.bbox, &boxes, spec) {
                continue;
            }
            boxes.push(p.bbox);
            placed.push(p);
            ok = true;
            break;
        }
        if !ok {
            return Err(DatasetError::Infeasible(format!(
                "placed {n} of {count} objects after {PLACEMENT_RETRIES} attempts"
            )));
        }
    }

    for p in &placed {
        let level: f32 = rng.gen_range(0.85..1.0);
        for &(x, y) in &p.pixels {
            for c in 0..3 {
                img.set(c, y, x, level);
            }
        }
    }

    let annotations = boxes
        .iter()
        .map(|b| corner_to_center(b, w as f64, h as f64).map(|bbox| Annotation { class_id: 0, bbox }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SyntheticScene {
        labeled: LabeledImage {
            image_path: PathBuf::from(format!("synthetic_{seed}.png")),
            width: w,
            height: h,
            annotations,
        },
        pixels: img,
        boxes,
    })
}

/// Per-image seeds derived from a master seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen()).collect()
}

/// Generates `count` scenes in memory.
pub fn generate_scenes(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<SyntheticScene>, DatasetError> {
    scene_seeds(seed, count)
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut scene = generate_synthetic_scene(spec, s)?;
            scene.labeled.image_path = PathBuf::from(format!("synth_{i:05}.png"));
            Ok(scene)
        })
        .collect()
}

/// Writes a synthetic dataset (PNG images, labels, classes, manifest) under `root`.
pub fn write_synthetic_dataset(
    root: &Path,
    spec: &SceneSpec,
    count: usize,
    seed: u64,
    class_name: &str,
) -> Result<DatasetManifest, DatasetError> {
    let images_dir = root.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| DatasetError::Io { path: images_dir.clone(), source: e })?;
    let mut items = Vec::with_capacity(count);
    for scene in generate_scenes(spec, count, seed)? {
        let path = images_dir.join(&scene.labeled.image_path);
        scene.pixels.save(&path)?;
        items.push(LabeledImage { image_path: path, ..scene.labeled });
    }
    let manifest = DatasetManifest { root: root.to_path_buf(), class_names: vec![class_name.to_string()], items };
    manifest.write()?;
    Ok(manifest)
}
