//! Procedural drawing programs for the synthetic categories. Each family is
//! a small set of closed polygons and open polylines on the unit square;
//! scenes render them filled in the category color, sketches render jittered
//! outlines only, preserving the sketch/photo domain gap.

use ndarray::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Star,
    House,
    Arrow,
    Cup,
    Tree,
    Ring,
    Cross,
    Bolt,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Star,
        ShapeFamily::House,
        ShapeFamily::Arrow,
        ShapeFamily::Cup,
        ShapeFamily::Tree,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Bolt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Star => "star",
            ShapeFamily::House => "house",
            ShapeFamily::Arrow => "arrow",
            ShapeFamily::Cup => "cup",
            ShapeFamily::Tree => "tree",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Bolt => "bolt",
        }
    }
}

/// A drawable program: closed polygons (fillable) plus open polylines.
pub struct ShapeProgram {
    pub polygons: Vec<Vec<(f64, f64)>>,
    pub polylines: Vec<Vec<(f64, f64)>>,
    /// Families drawn as a thick outline instead of a filled region.
    pub hollow: bool,
}

pub fn shape_program(family: ShapeFamily) -> ShapeProgram {
    match family {
        ShapeFamily::Star => {
            let mut pts = Vec::new();
            for i in 0..10 {
                let angle = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
                let r = if i % 2 == 0 { 0.46 } else { 0.19 };
                pts.push((0.5 + r * angle.cos(), 0.5 + r * angle.sin()));
            }
            ShapeProgram { polygons: vec![pts], polylines: vec![], hollow: false }
        }
        ShapeFamily::House => ShapeProgram {
            polygons: vec![vec![
                (0.15, 0.90),
                (0.15, 0.48),
                (0.50, 0.10),
                (0.85, 0.48),
                (0.85, 0.90),
            ]],
            polylines: vec![],
            hollow: false,
        },
        ShapeFamily::Arrow => ShapeProgram {
            polygons: vec![vec![
                (0.06, 0.38),
                (0.52, 0.38),
                (0.52, 0.12),
                (0.94, 0.50),
                (0.52, 0.88),
                (0.52, 0.62),
                (0.06, 0.62),
            ]],
            polylines: vec![],
            hollow: false,
        },
        ShapeFamily::Cup => ShapeProgram {
            polygons: vec![vec![(0.16, 0.12), (0.68, 0.12), (0.61, 0.88), (0.23, 0.88)]],
            // handle attached inside the body edge so strokes stay connected
            polylines: vec![vec![
                (0.62, 0.28),
                (0.82, 0.32),
                (0.88, 0.48),
                (0.80, 0.62),
                (0.60, 0.66),
            ]],
            hollow: false,
        },
        ShapeFamily::Tree => ShapeProgram {
            polygons: vec![
                vec![(0.50, 0.06), (0.88, 0.60), (0.12, 0.60)],
                vec![(0.42, 0.60), (0.58, 0.60), (0.58, 0.94), (0.42, 0.94)],
            ],
            polylines: vec![],
            hollow: false,
        },
        ShapeFamily::Ring => {
            let mut pts = Vec::new();
            for i in 0..20 {
                let angle = i as f64 * std::f64::consts::TAU / 20.0;
                pts.push((0.5 + 0.42 * angle.cos(), 0.5 + 0.42 * angle.sin()));
            }
            ShapeProgram { polygons: vec![pts], polylines: vec![], hollow: true }
        }
        ShapeFamily::Cross => ShapeProgram {
            polygons: vec![vec![
                (0.36, 0.08),
                (0.64, 0.08),
                (0.64, 0.36),
                (0.92, 0.36),
                (0.92, 0.64),
                (0.64, 0.64),
                (0.64, 0.92),
                (0.36, 0.92),
                (0.36, 0.64),
                (0.08, 0.64),
                (0.08, 0.36),
                (0.36, 0.36),
            ]],
            polylines: vec![],
            hollow: false,
        },
        ShapeFamily::Bolt => ShapeProgram {
            polygons: vec![vec![
                (0.60, 0.04),
                (0.22, 0.54),
                (0.44, 0.54),
                (0.34, 0.96),
                (0.78, 0.40),
                (0.55, 0.40),
            ]],
            polylines: vec![],
            hollow: false,
        },
    }
}

/// Tight bounding box of all program points in unit coordinates.
pub fn unit_bbox(program: &ShapeProgram) -> (f64, f64, f64, f64) {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in program.polygons.iter().chain(&program.polylines).flatten() {
        lo.0 = lo.0.min(p.0);
        lo.1 = lo.1.min(p.1);
        hi.0 = hi.0.max(p.0);
        hi.1 = hi.1.max(p.1);
    }
    (lo.0, lo.1, hi.0, hi.1)
}

/// Even-odd scanline polygon fill.
pub fn fill_polygon(poly: &[(f64, f64)], mut plot: impl FnMut(i64, i64)) {
    if poly.len() < 3 {
        return;
    }
    let y_min = poly.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor() as i64;
    let y_max = poly.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
    for y in y_min..=y_max {
        let yc = y as f64 + 0.5;
        let mut xs: Vec<f64> = Vec::new();
        for i in 0..poly.len() {
            let (x1, y1) = poly[i];
            let (x2, y2) = poly[(i + 1) % poly.len()];
            if (y1 <= yc && yc < y2) || (y2 <= yc && yc < y1) {
                xs.push(x1 + (yc - y1) / (y2 - y1) * (x2 - x1));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let x_start = pair[0].round() as i64;
            let x_end = pair[1].round() as i64;
            for x in x_start..x_end {
                plot(x, y);
            }
        }
    }
}

/// Bresenham line with a square brush of the given width; no anti-aliasing.
pub fn draw_line(x1: f64, y1: f64, x2: f64, y2: f64, width: usize, mut plot: impl FnMut(i64, i64)) {
    let (mut x, mut y) = (x1.round() as i64, y1.round() as i64);
    let (xe, ye) = (x2.round() as i64, y2.round() as i64);
    let dx = (xe - x).abs();
    let dy = -(ye - y).abs();
    let sx = if x < xe { 1 } else { -1 };
    let sy = if y < ye { 1 } else { -1 };
    let mut err = dx + dy;
    let half = (width as i64 - 1) / 2;
    loop {
        for oy in -half..=(width as i64 - 1 - half) {
            for ox in -half..=(width as i64 - 1 - half) {
                plot(x + ox, y + oy);
            }
        }
        if x == xe && y == ye {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn stroke_path(points: &[(f64, f64)], closed: bool, width: usize, plot: &mut impl FnMut(i64, i64)) {
    let n = points.len();
    if n < 2 {
        return;
    }
    let last = if closed { n } else { n - 1 };
    for i in 0..last {
        let (x1, y1) = points[i];
        let (x2, y2) = points[(i + 1) % n];
        draw_line(x1, y1, x2, y2, width, &mut *plot);
    }
}

/// Maps a unit-square point into the pixel box `(x, y, w, h)`, stretching the
/// program's tight bbox to fill the box exactly.
pub struct BoxTransform {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    unit: (f64, f64, f64, f64),
}

impl BoxTransform {
    pub fn new(program: &ShapeProgram, x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h, unit: unit_bbox(program) }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (ux1, uy1, ux2, uy2) = self.unit;
        (
            self.x + (p.0 - ux1) / (ux2 - ux1) * self.w,
            self.y + (p.1 - uy1) / (uy2 - uy1) * self.h,
        )
    }
}

/// Draws a filled, colored instance of `family` into the pixel box on an RGB
/// canvas. Hollow families are stroked with a thick outline instead.
pub fn render_instance(
    canvas: &mut Array3<u8>,
    family: ShapeFamily,
    color: [u8; 3],
    x: f64,
    y: f64,
    w: f64,
    h: f64,
) {
    let program = shape_program(family);
    let tf = BoxTransform::new(&program, x, y, w, h);
    let (ch, cw) = (canvas.dim().0, canvas.dim().1);
    let mut plot = |px: i64, py: i64| {
        if px >= 0 && py >= 0 && (px as usize) < cw && (py as usize) < ch {
            for c in 0..3 {
                canvas[(py as usize, px as usize, c)] = color[c];
            }
        }
    };
    let thick = ((w.min(h) * 0.14).round() as usize).max(2);
    for poly in &program.polygons {
        let mapped: Vec<(f64, f64)> = poly.iter().map(|&p| tf.apply(p)).collect();
        if program.hollow {
            stroke_path(&mapped, true, thick, &mut plot);
        } else {
            fill_polygon(&mapped, &mut plot);
        }
    }
    let stroke_w = ((w.min(h) * 0.08).round() as usize).max(2);
    for line in &program.polylines {
        let mapped: Vec<(f64, f64)> = line.iter().map(|&p| tf.apply(p)).collect();
        stroke_path(&mapped, false, stroke_w, &mut plot);
    }
}

/// Renders the outline-only sketch of `family` on a `size x size` grayscale
/// grid. `jitter` in [0,1] displaces vertices with Gaussian noise and varies
/// the stroke width; `jitter == 0` reproduces the canonical prototype for
/// any seed.
pub fn render_sketch_raster(
    family: ShapeFamily,
    size: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let mut pixels = Array2::<f64>::zeros((size, size));
    let program = shape_program(family);
    let margin = size as f64 * 0.12;
    let span = size as f64 - 2.0 * margin;
    let tf = BoxTransform::new(&program, margin, margin, span, span);
    let sigma = jitter * size as f64 * 0.035;
    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let width = if jitter > 0.0 && rng.gen_bool((jitter * 0.5).clamp(0.0, 1.0)) { 2 } else { 1 };
    let mut plot = |px: i64, py: i64| {
        if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
            pixels[(py as usize, px as usize)] = 1.0;
        }
    };
    for poly in &program.polygons {
        let mapped: Vec<(f64, f64)> = poly
            .iter()
            .map(|&p| {
                let (x, y) = tf.apply(p);
                (x + sigma * gauss(rng), y + sigma * gauss(rng))
            })
            .collect();
        stroke_path(&mapped, true, width, &mut plot);
    }
    for line in &program.polylines {
        let mapped: Vec<(f64, f64)> = line
            .iter()
            .map(|&p| {
                let (x, y) = tf.apply(p);
                (x + sigma * gauss(rng), y + sigma * gauss(rng))
            })
            .collect();
        stroke_path(&mapped, false, width, &mut plot);
    }
    pixels
}

/// Number of 8-connected ink components; sketches of every family draw as a
/// single connected figure.
pub fn connected_components(pixels: &Array2<f64>) -> usize {
    let (h, w) = pixels.dim();
    let mut seen = Array2::<bool>::from_elem((h, w), false);
    let mut count = 0;
    let mut stack = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if pixels[(sy, sx)] <= 0.0 || seen[(sy, sx)] {
                continue;
            }
            count += 1;
            stack.push((sy, sx));
            seen[(sy, sx)] = true;
            while let Some((y, x)) = stack.pop() {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                            let (ny, nx) = (ny as usize, nx as usize);
                            if pixels[(ny, nx)] > 0.0 && !seen[(ny, nx)] {
                                seen[(ny, nx)] = true;
                                stack.push((ny, nx));
                            }
                        }
                    }
                }
            }
        }
    }
    count
}
