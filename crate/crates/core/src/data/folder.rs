use super::{GroundTruthBox, ImageSet, LabeledImage, RawImage};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Default annotation file name inside a dataset folder.
pub const ANNOTATION_FILE: &str = "annotations.csv";

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    filename: String,
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

/// A loaded folder plus the problems that were skipped over.
#[derive(Debug, Clone)]
pub struct LoadReport {
    pub set: ImageSet,
    pub warnings: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn read_annotations(path: &Path) -> Result<BTreeMap<String, Vec<GroundTruthBox>>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Annotation {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut map: BTreeMap<String, Vec<GroundTruthBox>> = BTreeMap::new();
    for row in reader.deserialize::<AnnotationRow>() {
        let row = row.map_err(|e| Error::Annotation {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        map.entry(row.filename)
            .or_default()
            .push(GroundTruthBox::new(row.x_min, row.y_min, row.x_max, row.y_max));
    }
    Ok(map)
}

/// Load every PNG/JPEG in `dir`, sorted by file name. Boxes come from
/// `annotations` (defaults to `dir/annotations.csv`; absent file means no
/// boxes). Undecodable images and invalid boxes are skipped with a warning.
pub fn load_folder(dir: &Path, annotations: Option<&Path>) -> Result<LoadReport> {
    if !dir.is_dir() {
        return Err(Error::MissingDirectory(dir.to_path_buf()));
    }
    let default_csv = dir.join(ANNOTATION_FILE);
    let csv_path = annotations.unwrap_or(&default_csv);
    let mut boxes = if csv_path.exists() {
        read_annotations(csv_path)?
    } else if annotations.is_some() {
        return Err(Error::Annotation {
            path: csv_path.to_path_buf(),
            message: "file not found".into(),
        });
    } else {
        BTreeMap::new()
    };

    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();

    let mut warnings = Vec::new();
    let mut items = Vec::with_capacity(files.len());
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let decoded = match image::open(path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                let msg = format!("skipping {}: {e}", path.display());
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
        };
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        let mut image = match RawImage::new(h, w, decoded.into_raw()) {
            Ok(img) => img,
            Err(e) => {
                let msg = format!("skipping {}: {e}", path.display());
                log::warn!("{msg}");
                warnings.push(msg);
                continue;
            }
        };
        image.source_path = Some(path.display().to_string());
        let mut item_boxes = Vec::new();
        for b in boxes.remove(&name).unwrap_or_default() {
            if b.is_valid_in(w as f64, h as f64) {
                item_boxes.push(b);
            } else {
                let msg = format!("dropping invalid box {:?} for {name}", b.to_array());
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        items.push(LabeledImage {
            image,
            boxes: item_boxes,
        });
    }
    if items.is_empty() {
        return Err(Error::NoImages(dir.to_path_buf()));
    }
    Ok(LoadReport {
        set: ImageSet {
            items,
            split_name: dir
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("folder")
                .to_string(),
            seed: 0,
        },
        warnings,
    })
}

/// Write `set` as `img_NNNNN.png` files plus an annotation CSV.
pub fn export_folder(set: &ImageSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut writer = csv::Writer::from_path(dir.join(ANNOTATION_FILE))?;
    for (i, item) in set.items.iter().enumerate() {
        let filename = format!("img_{i:05}.png");
        item.image.to_rgb_image().save(dir.join(&filename))?;
        for b in &item.boxes {
            writer.serialize(AnnotationRow {
                filename: filename.clone(),
                x_min: b.x_min,
                y_min: b.y_min,
                x_max: b.x_max,
                y_max: b.y_max,
            })?;
        }
    }
    // an image-less set still gets a header row
    if set.total_boxes() == 0 {
        writer.write_record(["filename", "x_min", "y_min", "x_max", "y_max"])?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_faces;

    #[test]
    fn export_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_faces(3, (64, 64), 5).unwrap();
        export_folder(&set, dir.path()).unwrap();
        let report = load_folder(dir.path(), None).unwrap();
        assert!(report.warnings.is_empty());
        assert_eq!(report.set.len(), 3);
        for (a, b) in set.items.iter().zip(&report.set.items) {
            assert_eq!(a.image.pixels, b.image.pixels);
            assert_eq!(a.boxes, b.boxes);
        }
    }

    #[test]
    fn corrupt_image_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_faces(3, (64, 64), 5).unwrap();
        export_folder(&set, dir.path()).unwrap();
        std::fs::write(dir.path().join("img_00001.png"), b"not a png").unwrap();
        let report = load_folder(dir.path(), None).unwrap();
        assert_eq!(report.set.len(), 2);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn unannotated_images_get_empty_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let set = synth_faces(2, (64, 64), 5).unwrap();
        export_folder(&set, dir.path()).unwrap();
        std::fs::write(
            dir.path().join(ANNOTATION_FILE),
            "filename,x_min,y_min,x_max,y_max\nimg_00001.png,1,2,20,30\n",
        )
        .unwrap();
        let report = load_folder(dir.path(), None).unwrap();
        assert!(report.set.items[0].boxes.is_empty());
        assert_eq!(report.set.items[1].boxes, vec![GroundTruthBox::new(1.0, 2.0, 20.0, 30.0)]);
    }

    #[test]
    fn empty_and_missing_folders_fail() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_folder(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("no images found"));
        assert!(matches!(
            load_folder(&dir.path().join("nope"), None),
            Err(Error::MissingDirectory(_))
        ));
    }
}
