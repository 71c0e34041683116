//! QuickDraw-style NDJSON ingestion: one record per line with a `drawing`
//! array of strokes (`[[x...], [y...]]`). Strokes are scaled to the raster
//! and drawn with 1-px lines, no anti-aliasing. Malformed records are
//! skipped and counted.

use std::path::Path;

use ndarray::Array2;
use serde::Deserialize;

use crate::data::shapes::draw_line;
use crate::encoders::SketchRaster;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawRecord {
    drawing: Vec<Vec<Vec<f64>>>,
}

pub struct QuickDrawLoad {
    pub rasters: Vec<SketchRaster>,
    pub skipped: usize,
}

fn rasterize_strokes(strokes: &[Vec<Vec<f64>>], size: usize) -> Option<SketchRaster> {
    // validate stroke structure: [xs, ys] with equal nonzero lengths
    for s in strokes {
        if s.len() != 2 || s[0].len() != s[1].len() {
            return None;
        }
        if s[0].iter().chain(s[1].iter()).any(|v| !v.is_finite()) {
            return None;
        }
    }
    let mut pixels = Array2::<f64>::zeros((size, size));
    let points: Vec<(f64, f64)> = strokes
        .iter()
        .flat_map(|s| s[0].iter().zip(s[1].iter()).map(|(&x, &y)| (x, y)))
        .collect();
    if points.is_empty() {
        // an empty stroke list is a valid record producing a blank raster
        return SketchRaster::new(pixels).ok();
    }
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &points {
        min_x = min_x.min(x);
        min_y = min_y.min(y);
        max_x = max_x.max(x);
        max_y = max_y.max(y);
    }
    let margin = 2.0;
    let span = (size as f64 - 2.0 * margin).max(1.0);
    let sx = (max_x - min_x).max(1e-9);
    let sy = (max_y - min_y).max(1e-9);
    // degenerate extents collapse to the raster center line
    let map = |x: f64, y: f64| -> (f64, f64) {
        let px = if max_x > min_x {
            margin + (x - min_x) / sx * span
        } else {
            size as f64 / 2.0
        };
        let py = if max_y > min_y {
            margin + (y - min_y) / sy * span
        } else {
            size as f64 / 2.0
        };
        (px, py)
    };
    for s in strokes {
        let n = s[0].len();
        if n == 1 {
            let (px, py) = map(s[0][0], s[1][0]);
            let (ix, iy) = (px.round() as i64, py.round() as i64);
            if ix >= 0 && iy >= 0 && (ix as usize) < size && (iy as usize) < size {
                pixels[(iy as usize, ix as usize)] = 1.0;
            }
            continue;
        }
        for i in 0..n - 1 {
            let (x1, y1) = map(s[0][i], s[1][i]);
            let (x2, y2) = map(s[0][i + 1], s[1][i + 1]);
            draw_line(x1, y1, x2, y2, 1, |px, py| {
                if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
                    pixels[(py as usize, px as usize)] = 1.0;
                }
            });
        }
    }
    SketchRaster::new(pixels).ok()
}

/// Loads every parseable record of an NDJSON stroke file, in file order.
pub fn load_quickdraw_strokes(path: &Path, size: usize) -> Result<QuickDrawLoad> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut rasters = Vec::new();
    let mut skipped = 0usize;
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawRecord>(line) {
            Ok(rec) => match rasterize_strokes(&rec.drawing, size) {
                Some(raster) => rasters.push(raster),
                None => skipped += 1,
            },
            Err(_) => skipped += 1,
        }
    }
    Ok(QuickDrawLoad { rasters, skipped })
}
