//! Conversion of pixel corner-box annotations into normalized label files.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use crate::geometry::{corner_to_center, CornerBox};

use super::labels::Annotation;
use super::manifest::{DatasetManifest, LabeledImage, IMAGES_DIR};
use super::DatasetError;

/// One source annotation in pixel corner form.
#[derive(Debug, Clone, PartialEq)]
pub struct CornerRecord {
    /// Image file name, relative to the dataset's `images/` directory.
    pub image: String,
    pub class_name: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

#[derive(Debug)]
pub struct RecordError {
    /// Position of the record in the source list.
    pub index: usize,
    pub image: String,
    pub error: DatasetError,
}

#[derive(Debug)]
pub struct Conversion {
    pub manifest: DatasetManifest,
    pub errors: Vec<RecordError>,
}

/// Converts corner records into a manifest rooted at `root`. Items are sorted
/// by image file name; annotations keep source order within an image. A bad
/// record is reported and skipped without affecting the others.
pub fn convert_corner_dataset(
    root: &Path,
    records: &[CornerRecord],
    image_sizes: &HashMap<String, (usize, usize)>,
    class_names: &[String],
) -> Conversion {
    let mut errors = Vec::new();
    let mut per_image: BTreeMap<&str, (usize, usize, Vec<Annotation>)> = BTreeMap::new();

    for (index, rec) in records.iter().enumerate() {
        let fail = |error: DatasetError| RecordError { index, image: rec.image.clone(), error };
        let Some(&(w, h)) = image_sizes.get(&rec.image) else {
            errors.push(fail(DatasetError::Invalid(format!("no dimensions for image '{}'", rec.image))));
            continue;
        };
        let Some(class_id) = class_names.iter().position(|c| *c == rec.class_name) else {
            errors.push(fail(DatasetError::Invalid(format!("unknown class '{}'", rec.class_name))));
            continue;
        };
        let converted = CornerBox::new(rec.x_min, rec.y_min, rec.x_max, rec.y_max)
            .map(|b| b.clip(w as f64, h as f64))
            .and_then(|b| corner_to_center(&b, w as f64, h as f64));
        match converted {
            Ok(bbox) => per_image
                .entry(rec.image.as_str())
                .or_insert_with(|| (w, h, Vec::new()))
                .2
                .push(Annotation { class_id, bbox }),
            Err(e) => {
                errors.push(fail(e.into()));
                per_image.entry(rec.image.as_str()).or_insert_with(|| (w, h, Vec::new()));
            }
        }
    }

    let items = per_image
        .into_iter()
        .map(|(image, (width, height, annotations))| LabeledImage {
            image_path: root.join(IMAGES_DIR).join(image),
            width,
            height,
            annotations,
        })
        .collect();
    Conversion {
        manifest: DatasetManifest { root: root.to_path_buf(), class_names: class_names.to_vec(), items },
        errors,
    }
}

/// Parsed corner CSV: records plus any per-row image sizes it carried.
#[derive(Debug, Default)]
pub struct CornerCsv {
    pub records: Vec<CornerRecord>,
    pub sizes: HashMap<String, (usize, usize)>,
}

/// Reads `image,class,x_min,y_min,x_max,y_max[,width,height]` rows. A header
/// row is detected by a non-numeric `x_min` field.
pub fn read_corner_csv(path: &Path) -> Result<CornerCsv, DatasetError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DatasetError::Invalid(format!("{}: {e}", path.display())))?;
    let mut out = CornerCsv::default();
    for (i, row) in reader.records().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| DatasetError::Parse { line, reason: e.to_string() })?;
        if row.len() != 6 && row.len() != 8 {
            return Err(DatasetError::Parse { line, reason: format!("expected 6 or 8 fields, found {}", row.len()) });
        }
        if i == 0 && row[2].parse::<f64>().is_err() {
            continue;
        }
        let num = |k: usize| -> Result<f64, DatasetError> {
            row[k].parse::<f64>().map_err(|_| DatasetError::Parse {
                line,
                reason: format!("field {} is not a number: '{}'", k + 1, &row[k]),
            })
        };
        let rec = CornerRecord {
            image: row[0].to_string(),
            class_name: row[1].to_string(),
            x_min: num(2)?,
            y_min: num(3)?,
            x_max: num(4)?,
            y_max: num(5)?,
        };
        if row.len() == 8 {
            let dim = |k: usize| -> Result<usize, DatasetError> {
                row[k].parse::<usize>().map_err(|_| DatasetError::Parse {
                    line,
                    reason: format!("field {} is not an integer: '{}'", k + 1, &row[k]),
                })
            };
            out.sizes.insert(rec.image.clone(), (dim(6)?, dim(7)?));
        }
        out.records.push(rec);
    }
    Ok(out)
}

/// Class names in order of first appearance.
pub fn classes_in_order(records: &[CornerRecord]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in records {
        if !names.contains(&r.class_name) {
            names.push(r.class_name.clone());
        }
    }
    names
}

pub fn image_path(root: &Path, image: &str) -> PathBuf {
    root.join(IMAGES_DIR).join(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::labels::format_label_file;

    fn rec(image: &str, b: [f64; 4]) -> CornerRecord {
        CornerRecord {
            image: image.into(),
            class_name: "aircraft".into(),
            x_min: b[0],
            y_min: b[1],
            x_max: b[2],
            y_max: b[3],
        }
    }

    #[test]
    fn converts_example_record() {
        let sizes = HashMap::from([("a.jpg".to_string(), (500, 500))]);
        let conv = convert_corner_dataset(
            Path::new("/d"),
            &[rec("a.jpg", [100.0, 50.0, 200.0, 150.0])],
            &sizes,
            &["aircraft".to_string()],
        );
        assert!(conv.errors.is_empty());
        let item = &conv.manifest.items[0];
        assert_eq!(format_label_file(&item.annotations), "0 0.300000 0.200000 0.200000 0.200000\n");
        assert_eq!(item.image_path, PathBuf::from("/d/images/a.jpg"));
    }

    #[test]
    fn empty_source_gives_empty_manifest() {
        let conv = convert_corner_dataset(Path::new("/d"), &[], &HashMap::new(), &["x".to_string()]);
        assert!(conv.manifest.items.is_empty() && conv.errors.is_empty());
    }

    #[test]
    fn bad_records_are_isolated() {
        let sizes = HashMap::from([("b.jpg".to_string(), (100, 100)), ("a.jpg".to_string(), (100, 100))]);
        let records = vec![
            rec("b.jpg", [10.0, 10.0, 20.0, 20.0]),
            rec("b.jpg", [30.0, 10.0, 20.0, 20.0]), // x_min > x_max
            rec("missing.jpg", [10.0, 10.0, 20.0, 20.0]),
            rec("a.jpg", [0.0, 0.0, 50.0, 50.0]),
            rec("b.jpg", [40.0, 40.0, 60.0, 60.0]),
        ];
        let conv = convert_corner_dataset(Path::new("/d"), &records, &sizes, &["aircraft".to_string()]);
        let idx: Vec<usize> = conv.errors.iter().map(|e| e.index).collect();
        assert_eq!(idx, vec![1, 2]);
        let names: Vec<String> = conv.manifest.items.iter().map(|i| i.stem()).collect();
        assert_eq!(names, vec!["a", "b"]);
        let b = &conv.manifest.items[1].annotations;
        assert_eq!(b.len(), 2);
        assert!((b[0].bbox.x - 0.15).abs() < 1e-12);
        assert!((b[1].bbox.x - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reads_csv_with_header_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("boxes.csv");
        std::fs::write(
            &p,
            "image,class,x_min,y_min,x_max,y_max,width,height\na.jpg,plane,100,50,200,150,500,500\n",
        )
        .unwrap();
        let csv = read_corner_csv(&p).unwrap();
        assert_eq!(csv.records.len(), 1);
        assert_eq!(csv.sizes["a.jpg"], (500, 500));
        assert_eq!(classes_in_order(&csv.records), vec!["plane".to_string()]);
    }
}
