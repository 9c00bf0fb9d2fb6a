//! Label files, dataset layout on disk and synthetic scene generation.

use std::path::PathBuf;

use thiserror::Error;

use crate::geometry::GeometryError;

pub mod convert;
pub mod image_io;
pub mod labels;
pub mod manifest;
pub mod synth;

pub use convert::{convert_corner_dataset, Conversion, CornerRecord, RecordError};
pub use image_io::PlanarImage;
pub use labels::{format_label_file, parse_label_file, Annotation};
pub use manifest::{DatasetManifest, LabeledImage};
pub use synth::{generate_synthetic_scene, SceneSpec, SyntheticScene};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("{0}")]
    Invalid(String),
    #[error("invalid box: {0}")]
    Geometry(#[from] GeometryError),
    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("no label file {label} for image {image}")]
    MissingLabel { image: PathBuf, label: PathBuf },
    #[error("infeasible scene: {0}")]
    Infeasible(String),
}
