//! On-disk dataset layout: `images/`, `labels/` matched by file stem, a
//! `classes.txt` with one class name per line and an optional
//! `manifest.txt` listing image paths relative to the root.

use std::fs;
use std::path::{Path, PathBuf};

use super::image_io::image_dimensions;
use super::labels::{format_label_file, parse_label_file, Annotation};
use super::DatasetError;

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const CLASSES_FILE: &str = "classes.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

const IMAGE_EXTENSIONS: [&str; 5] = ["jpg", "jpeg", "png", "tif", "tiff"];

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

impl LabeledImage {
    pub fn stem(&self) -> String {
        file_stem(&self.image_path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub items: Vec<LabeledImage>,
}

pub(crate) fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn io_err(path: &Path, e: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source: e }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Reads `classes.txt`: one non-empty name per line.
pub fn read_class_names(path: &Path) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if names.is_empty() {
        return Err(DatasetError::Invalid(format!("{}: no class names", path.display())));
    }
    Ok(names)
}

/// Lists the image files in a directory, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_file() && is_image(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Path of the label file paired with `image` under `labels_dir`.
pub fn label_path_for(labels_dir: &Path, image: &Path) -> PathBuf {
    labels_dir.join(format!("{}.txt", file_stem(image)))
}

impl DatasetManifest {
    /// Loads a dataset rooted at `root`. Every image needs a label file with
    /// the same stem; an empty label file marks a background image.
    pub fn load(root: &Path) -> Result<DatasetManifest, DatasetError> {
        let class_names = read_class_names(&root.join(CLASSES_FILE))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let images: Vec<PathBuf> = if manifest_path.is_file() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(|l| root.join(l))
                .collect()
        } else {
            list_images(&root.join(IMAGES_DIR))?
        };
        let labels_dir = root.join(LABELS_DIR);
        let mut items = Vec::with_capacity(images.len());
        for image_path in images {
            let label_path = label_path_for(&labels_dir, &image_path);
            if !label_path.is_file() {
                return Err(DatasetError::MissingLabel { image: image_path, label: label_path });
            }
            let text = fs::read_to_string(&label_path).map_err(|e| io_err(&label_path, e))?;
            let annotations = parse_label_file(&text, class_names.len()).map_err(|e| {
                DatasetError::Invalid(format!("{}: {e}", label_path.display()))
            })?;
            let (width, height) = image_dimensions(&image_path)?;
            items.push(LabeledImage { image_path, width, height, annotations });
        }
        Ok(DatasetManifest { root: root.to_path_buf(), class_names, items })
    }

    /// Writes `classes.txt`, `manifest.txt` and one label file per item.
    /// Image files themselves are expected to exist already.
    pub fn write(&self) -> Result<(), DatasetError> {
        let labels_dir = self.root.join(LABELS_DIR);
        fs::create_dir_all(&labels_dir).map_err(|e| io_err(&labels_dir, e))?;
        let classes = self.root.join(CLASSES_FILE);
        let mut text = self.class_names.join("\n");
        text.push('\n');
        fs::write(&classes, text).map_err(|e| io_err(&classes, e))?;
        let mut listing = String::new();
        for item in &self.items {
            let rel = item.image_path.strip_prefix(&self.root).unwrap_or(&item.image_path);
            listing.push_str(&rel.to_string_lossy());
            listing.push('\n');
            let lp = label_path_for(&labels_dir, &item.image_path);
            fs::write(&lp, format_label_file(&item.annotations)).map_err(|e| io_err(&lp, e))?;
        }
        let mp = self.root.join(MANIFEST_FILE);
        fs::write(&mp, listing).map_err(|e| io_err(&mp, e))?;
        Ok(())
    }

    pub fn object_count(&self) -> usize {
        self.items.iter().map(|i| i.annotations.len()).sum()
    }
}
