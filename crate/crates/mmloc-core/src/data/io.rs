//! Dataset directory layout:
//!
//! ```text
//! DIR/
//!   scenes/<scene_id>.png
//!   sketches/<category_name>/<k>.png
//!   annotations.json      COCO-style images/annotations/categories (+subset)
//!   gloss.tsv             name<TAB>gloss
//!   split.json            {"seen": [...], "unseen": [...], "seed": N}
//!   meta.json             image/sketch sizes
//! ```

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::{RgbRaster, SketchRaster};
use crate::error::{Error, Result};

use super::coco::load_coco_annotations;
use super::gloss::GlossTable;
use super::{build_categories, Dataset, SceneSample, SplitSpec};

#[derive(Serialize, Deserialize)]
struct MetaFile {
    image_size: usize,
    sketch_size: usize,
    sketches_per_category: usize,
}

fn save_rgb_png(path: &Path, raster: &RgbRaster) -> Result<()> {
    let (h, w, _) = raster.pixels.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    raster.pixels[(y, x, 0)],
                    raster.pixels[(y, x, 1)],
                    raster.pixels[(y, x, 2)],
                ]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

fn save_gray_png(path: &Path, sketch: &SketchRaster) -> Result<()> {
    let (h, w) = sketch.pixels.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (sketch.pixels[(y, x)] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

fn load_gray_png(path: &Path) -> Result<SketchRaster> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            px[(y, x)] = img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0;
        }
    }
    SketchRaster::new(px)
}

/// Writes the dataset to `dir` in the documented layout.
pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir.join("scenes"))?;
    for scene in ds.train.iter().chain(&ds.test) {
        save_rgb_png(&dir.join(format!("scenes/{:05}.png", scene.scene_id)), &scene.image)?;
    }
    for (cat, sketches) in ds.categories.iter().zip(&ds.sketches) {
        let sub = dir.join("sketches").join(&cat.name);
        std::fs::create_dir_all(&sub)?;
        for (k, sk) in sketches.iter().enumerate() {
            save_gray_png(&sub.join(format!("{k}.png")), sk)?;
        }
    }

    let images: Vec<serde_json::Value> = ds
        .train
        .iter()
        .map(|s| (s, "train"))
        .chain(ds.test.iter().map(|s| (s, "test")))
        .map(|(s, subset)| {
            serde_json::json!({
                "id": s.scene_id,
                "file_name": format!("scenes/{:05}.png", s.scene_id),
                "width": s.image.width(),
                "height": s.image.height(),
                "subset": subset,
            })
        })
        .collect();
    let mut ann_id = 0u64;
    let annotations: Vec<serde_json::Value> = ds
        .train
        .iter()
        .chain(&ds.test)
        .flat_map(|s| {
            s.instances.iter().map(|(b, cat)| {
                ann_id += 1;
                serde_json::json!({
                    "id": ann_id,
                    "image_id": s.scene_id,
                    "category_id": cat,
                    "bbox": [b.x1, b.y1, b.width(), b.height()],
                })
            }).collect::<Vec<_>>()
        })
        .collect();
    let categories: Vec<serde_json::Value> = ds
        .categories
        .iter()
        .map(|c| serde_json::json!({"id": c.id, "name": c.name}))
        .collect();
    let coco = serde_json::json!({
        "images": images,
        "annotations": annotations,
        "categories": categories,
    });
    std::fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&coco)?)?;
    std::fs::write(dir.join("gloss.tsv"), ds.gloss_table.to_tsv())?;
    std::fs::write(dir.join("split.json"), serde_json::to_string_pretty(&ds.split)?)?;
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&MetaFile {
            image_size: ds.image_size,
            sketch_size: ds.sketch_size,
            sketches_per_category: ds.sketches.first().map(Vec::len).unwrap_or(0),
        })?,
    )?;
    Ok(())
}

/// Reads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: MetaFile = serde_json::from_str(
        &std::fs::read_to_string(dir.join("meta.json"))
            .map_err(|e| Error::Data(format!("missing meta.json in {}: {e}", dir.display())))?,
    )?;
    let split: SplitSpec = serde_json::from_str(
        &std::fs::read_to_string(dir.join("split.json"))
            .map_err(|e| Error::Data(format!("missing split.json in {}: {e}", dir.display())))?,
    )?;
    split.validate()?;
    let gloss_table = GlossTable::from_tsv(
        &std::fs::read_to_string(dir.join("gloss.tsv"))
            .map_err(|e| Error::Data(format!("missing gloss.tsv in {}: {e}", dir.display())))?,
    )?;

    let coco = load_coco_annotations(&dir.join("annotations.json"))?;
    let n_categories = coco.categories.len();
    let categories = build_categories(n_categories, &gloss_table)?;
    for (i, name) in coco.categories.iter().enumerate() {
        if categories[i].name != *name {
            return Err(Error::Data(format!(
                "annotations.json category {i} is {name:?}, expected {:?}",
                categories[i].name
            )));
        }
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (scene, subset) in coco.scenes.into_iter().zip(&coco.subsets) {
        match subset.as_deref() {
            Some("train") => train.push(scene),
            Some("test") => test.push(scene),
            other => {
                return Err(Error::Data(format!(
                    "scene {} has subset {other:?}; expected train or test",
                    scene.scene_id
                )))
            }
        }
    }
    train.sort_by_key(|s: &SceneSample| s.scene_id);
    test.sort_by_key(|s: &SceneSample| s.scene_id);

    let mut sketches = Vec::with_capacity(categories.len());
    for cat in &categories {
        let mut per_cat = Vec::with_capacity(meta.sketches_per_category);
        for k in 0..meta.sketches_per_category {
            let p = dir.join("sketches").join(&cat.name).join(format!("{k}.png"));
            per_cat.push(load_gray_png(&p).map_err(|e| {
                Error::Data(format!("sketch {}: {e}", p.display()))
            })?);
        }
        sketches.push(per_cat);
    }

    Ok(Dataset {
        categories,
        split,
        train,
        test,
        sketches,
        gloss_table,
        image_size: meta.image_size,
        sketch_size: meta.sketch_size,
    })
}
