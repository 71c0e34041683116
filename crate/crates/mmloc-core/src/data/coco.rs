//! Ingestion of COCO-style annotation JSON: `images`, `annotations` and
//! `categories` arrays with `(x, y, w, h)` boxes. Category ids are remapped
//! densely; malformed boxes are dropped with a count, annotations pointing at
//! missing images are hard errors.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use serde::Deserialize;

use crate::encoders::RgbRaster;
use crate::error::{Error, Result};
use crate::proposals::BBox;

use super::SceneSample;

#[derive(Deserialize)]
struct RawImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
    #[serde(default)]
    subset: Option<String>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: u64,
    category_id: i64,
    bbox: Vec<f64>,
}

#[derive(Deserialize)]
struct RawCategory {
    id: i64,
    name: String,
}

#[derive(Deserialize)]
struct RawCoco {
    images: Vec<RawImage>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<RawCategory>,
}

/// Loaded scenes plus the dense category remap and a skipped-box count.
#[derive(Debug)]
pub struct CocoDataset {
    pub scenes: Vec<SceneSample>,
    /// Dense id -> name, sorted by the original category id.
    pub categories: Vec<String>,
    /// Original category id -> dense id.
    pub id_remap: BTreeMap<i64, usize>,
    pub skipped_boxes: usize,
    /// Subset tag per scene (same order), when the file carries one.
    pub subsets: Vec<Option<String>>,
}

/// Parses a COCO-style JSON file. Pixels are read from `file_name` relative
/// to the JSON's directory when the file exists; otherwise the scene carries
/// a blank raster of the declared size.
pub fn load_coco_annotations(path: &Path) -> Result<CocoDataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let raw: RawCoco = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: malformed COCO JSON: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));

    let mut sorted_cats: Vec<(i64, String)> =
        raw.categories.iter().map(|c| (c.id, c.name.clone())).collect();
    sorted_cats.sort_by_key(|(id, _)| *id);
    let id_remap: BTreeMap<i64, usize> = sorted_cats
        .iter()
        .enumerate()
        .map(|(dense, (orig, _))| (*orig, dense))
        .collect();
    let categories: Vec<String> = sorted_cats.into_iter().map(|(_, n)| n).collect();

    let mut scene_index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut scenes: Vec<SceneSample> = Vec::with_capacity(raw.images.len());
    let mut subsets = Vec::with_capacity(raw.images.len());
    for img in &raw.images {
        let file = base.join(&img.file_name);
        let raster = if file.exists() {
            let decoded = image::open(&file)
                .map_err(|e| Error::Data(format!("{}: {e}", file.display())))?
                .to_rgb8();
            let (w, h) = (decoded.width() as usize, decoded.height() as usize);
            let mut px = Array3::<u8>::zeros((h, w, 3));
            for y in 0..h {
                for x in 0..w {
                    let p = decoded.get_pixel(x as u32, y as u32);
                    for c in 0..3 {
                        px[(y, x, c)] = p[c];
                    }
                }
            }
            RgbRaster::new(px)
        } else {
            RgbRaster::new(Array3::zeros((img.height, img.width, 3)))
        };
        scene_index.insert(img.id, scenes.len());
        scenes.push(SceneSample {
            scene_id: img.id,
            image: raster,
            instances: Vec::new(),
        });
        subsets.push(img.subset.clone());
    }

    let mut skipped = 0usize;
    for ann in &raw.annotations {
        let Some(&scene_pos) = scene_index.get(&ann.image_id) else {
            return Err(Error::Data(format!(
                "annotation references missing image id {}",
                ann.image_id
            )));
        };
        if ann.bbox.len() != 4 {
            skipped += 1;
            continue;
        }
        let (x, y, w, h) = (ann.bbox[0], ann.bbox[1], ann.bbox[2], ann.bbox[3]);
        if w <= 0.0 || h <= 0.0 || !x.is_finite() || !y.is_finite() {
            skipped += 1;
            continue;
        }
        let Some(&dense) = id_remap.get(&ann.category_id) else {
            skipped += 1;
            continue;
        };
        scenes[scene_pos]
            .instances
            .push((BBox::new(x, y, x + w, y + h), dense));
    }

    Ok(CocoDataset {
        scenes,
        categories,
        id_remap,
        skipped_boxes: skipped,
        subsets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> std::path::PathBuf {
        let p = dir.join("annotations.json");
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn minimal_file_loads_one_scene() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{
              "images": [{"id": 1, "file_name": "scenes/0.png", "width": 64, "height": 48}],
              "annotations": [{"id": 1, "image_id": 1, "category_id": 7, "bbox": [10, 20, 30, 40]}],
              "categories": [{"id": 7, "name": "red_star"}]
            }"#,
        );
        let ds = load_coco_annotations(&p).unwrap();
        assert_eq!(ds.scenes.len(), 1);
        assert_eq!(ds.scenes[0].instances.len(), 1);
        let (b, cat) = ds.scenes[0].instances[0];
        // (x,y,w,h) converts to corner form
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (10.0, 20.0, 40.0, 60.0));
        assert_eq!(cat, 0); // dense remap
        assert_eq!(ds.categories, vec!["red_star".to_string()]);
        assert_eq!(ds.skipped_boxes, 0);
        // no png on disk: blank raster of the declared size
        assert_eq!(ds.scenes[0].image.height(), 48);
        assert_eq!(ds.scenes[0].image.width(), 64);
    }

    #[test]
    fn malformed_boxes_are_skipped_with_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{
              "images": [{"id": 1, "file_name": "a.png", "width": 8, "height": 8}],
              "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1, "bbox": [0, 0, -5, 4]},
                {"id": 2, "image_id": 1, "category_id": 1, "bbox": [0, 0, 4]},
                {"id": 3, "image_id": 1, "category_id": 1, "bbox": [1, 1, 2, 2]}
              ],
              "categories": [{"id": 1, "name": "thing"}]
            }"#,
        );
        let ds = load_coco_annotations(&p).unwrap();
        assert_eq!(ds.skipped_boxes, 2);
        assert_eq!(ds.scenes[0].instances.len(), 1);
    }

    #[test]
    fn missing_image_id_is_an_error_naming_the_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            r#"{
              "images": [{"id": 1, "file_name": "a.png", "width": 8, "height": 8}],
              "annotations": [{"id": 1, "image_id": 99, "category_id": 1, "bbox": [0, 0, 2, 2]}],
              "categories": [{"id": 1, "name": "thing"}]
            }"#,
        );
        let err = load_coco_annotations(&p).unwrap_err();
        assert!(err.to_string().contains("99"), "error should name the id: {err}");
    }

    #[test]
    fn missing_keys_are_structured_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), r#"{"images": []}"#);
        assert!(matches!(load_coco_annotations(&p), Err(Error::Data(_))));
        let p2 = write(dir.path(), "not json at all");
        assert!(matches!(load_coco_annotations(&p2), Err(Error::Data(_))));
    }

    #[test]
    fn fuzzed_inputs_never_panic() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            "",
            "{}",
            "[]",
            "{\"images\": 3, \"annotations\": [], \"categories\": []}",
            "{\"images\": [{\"id\": \"x\"}], \"annotations\": [], \"categories\": []}",
            "{\"images\": [], \"annotations\": [{\"image_id\": 0}], \"categories\": []}",
        ];
        for (i, body) in cases.iter().enumerate() {
            let p = dir.path().join(format!("f{i}.json"));
            std::fs::write(&p, body).unwrap();
            let _ = load_coco_annotations(&p); // must return Err, not panic
        }
    }
}
