//! Cross-modal attention for query-guided proposal generation: fuse the
//! sketch and text queries into one vector, score it against every image
//! feature-map location, reweight the original map with the raw scores, and
//! re-inject the attended map through a learned depth projection.
//!
//! The compatibility scores are used exactly as computed (dot product over
//! the scaling constant K) with no normalization; local vectors come from
//! the psi-transformed map while the multiplication applies to the original
//! backbone map.

use std::path::Path;

use ndarray::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::config::ModelConfig;
use crate::encoders::{FeatureMap, Modality, QueryVector};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use rand_chacha::ChaCha8Rng;

/// Final fused query representation (Eq. 3's output).
#[derive(Clone, Debug, PartialEq)]
pub struct FusedQuery {
    pub data: Array1<f64>,
}

/// Raw spatial compatibility scores, one per feature-map cell; `(h, w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub scores: Array2<f64>,
}

impl AttentionMap {
    pub fn new(scores: Array2<f64>) -> Result<Self> {
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("attention map contains non-finite values".into()));
        }
        Ok(Self { scores })
    }

    pub fn width(&self) -> usize {
        self.scores.dim().1
    }

    pub fn height(&self) -> usize {
        self.scores.dim().0
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.scores[(y, x)]
    }
}

/// Registers the fusion map `W` and the depth re-projection of the
/// concatenated attended+original maps.
pub fn init_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    params.init_uniform("att.fuse.w", &[cfg.d, 2 * cfg.d], 2 * cfg.d, rng);
    params.init_uniform("att.proj.w", &[cfg.d, 2 * cfg.d, 1, 1], 2 * cfg.d, rng);
    params.init_zeros("att.proj.b", &[cfg.d]);
}

// ---- graph builders ----

/// Eq. 3: `W [sketch_global; text_vec]`.
pub fn fuse_query_node(g: &mut Graph, params: &ParamSet, sketch_global: NodeId, text_vec: NodeId) -> NodeId {
    let w = g.param("att.fuse.w", params.get("att.fuse.w").clone());
    let cat = g.concat(sketch_global, text_vec, 0);
    g.matvec(w, cat)
}

/// Eq. 4: per-cell dot products with the fused query over K.
pub fn compatibility_node(g: &mut Graph, psi_map: NodeId, query: NodeId, k_constant: f64) -> NodeId {
    let dots = g.dot_map(psi_map, query);
    g.scale(dots, 1.0 / k_constant)
}

/// Eq. 5: scale each local feature vector of the original map by its score.
pub fn apply_attention_node(g: &mut Graph, original_map: NodeId, att: NodeId) -> NodeId {
    g.scale_map(original_map, att)
}

/// Depth-concat `[attended; original]` then 1x1-project back to depth d.
pub fn augment_node(g: &mut Graph, params: &ParamSet, original: NodeId, attended: NodeId) -> NodeId {
    let cat = g.concat(attended, original, 0);
    let w = g.param("att.proj.w", params.get("att.proj.w").clone());
    let b = g.param("att.proj.b", params.get("att.proj.b").clone());
    g.conv2d(cat, w, Some(b), 1, 0)
}

// ---- library operations ----

/// Per-channel global max pool of a sketch feature map.
pub fn global_max_pool(fm: &FeatureMap) -> Result<QueryVector> {
    let mut g = Graph::new();
    let x = g.constant(fm.data.clone().into_dyn());
    let out = g.global_max_pool(x);
    let v = g
        .value(out)
        .view()
        .into_dimensionality::<Ix1>()
        .unwrap()
        .to_owned();
    QueryVector::new(v, Modality::Sketch)
}

/// Eq. 3 with an explicit `(d, 2d)` fusion matrix.
pub fn fuse_query(sketch_global: &QueryVector, text_vec: &QueryVector, w: &Array2<f64>) -> Result<FusedQuery> {
    let d = sketch_global.len();
    if text_vec.len() != d {
        return Err(Error::shape("fuse_query", format!("length {d}"), format!("length {}", text_vec.len())));
    }
    if w.dim() != (d, 2 * d) {
        return Err(Error::shape("fuse_query", format!("({d}, {})", 2 * d), format!("{:?}", w.dim())));
    }
    let mut cat = Array1::<f64>::zeros(2 * d);
    cat.slice_mut(s![..d]).assign(&sketch_global.data);
    cat.slice_mut(s![d..]).assign(&text_vec.data);
    Ok(FusedQuery { data: w.dot(&cat) })
}

/// Eq. 4 over a psi-transformed image map.
pub fn compatibility_map(psi_map: &FeatureMap, query: &FusedQuery, k_constant: f64) -> Result<AttentionMap> {
    if k_constant <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "attention constant K must be positive, got {k_constant}"
        )));
    }
    if psi_map.depth() != query.data.len() {
        return Err(Error::shape(
            "compatibility_map",
            format!("depth {}", query.data.len()),
            format!("depth {}", psi_map.depth()),
        ));
    }
    let (h, w) = (psi_map.height(), psi_map.width());
    let mut scores = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            scores[(y, x)] = psi_map.local_vector(x, y).dot(&query.data) / k_constant;
        }
    }
    AttentionMap::new(scores)
}

/// Eq. 5 on the original backbone map.
pub fn apply_attention(fm: &FeatureMap, att: &AttentionMap) -> Result<FeatureMap> {
    if (att.height(), att.width()) != (fm.height(), fm.width()) {
        return Err(Error::shape(
            "apply_attention",
            format!("({}, {})", fm.height(), fm.width()),
            format!("({}, {})", att.height(), att.width()),
        ));
    }
    let mut out = fm.data.clone();
    for c in 0..fm.depth() {
        let mut plane = out.index_axis_mut(Axis(0), c);
        plane.zip_mut_with(&att.scores, |p, &s| *p *= s);
    }
    FeatureMap::new(out, fm.stride)
}

/// Depth-concat `[attended; original]` and project back to depth d with an
/// explicit `(d, 2d)` map (bias-free variant of the learned projection).
pub fn augment_features(original: &FeatureMap, attended: &FeatureMap, proj: &Array2<f64>) -> Result<FeatureMap> {
    if original.data.dim() != attended.data.dim() {
        return Err(Error::shape(
            "augment_features",
            format!("{:?}", original.data.dim()),
            format!("{:?}", attended.data.dim()),
        ));
    }
    let d = original.depth();
    if proj.dim() != (d, 2 * d) {
        return Err(Error::shape("augment_features", format!("({d}, {})", 2 * d), format!("{:?}", proj.dim())));
    }
    let (h, w) = (original.height(), original.width());
    let mut out = Array3::<f64>::zeros((d, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut cat = Array1::<f64>::zeros(2 * d);
            cat.slice_mut(s![..d]).assign(&attended.local_vector(x, y));
            cat.slice_mut(s![d..]).assign(&original.local_vector(x, y));
            let v = proj.dot(&cat);
            for c in 0..d {
                out[(c, y, x)] = v[c];
            }
        }
    }
    FeatureMap::new(out, original.stride)
}

/// Writes an attention map as a normalized grayscale PNG plus a JSON sidecar
/// `{w, h, k, query_id}` next to it.
pub fn dump_attention_png(att: &AttentionMap, k_constant: f64, query_id: &str, path: &Path) -> Result<()> {
    let (h, w) = att.scores.dim();
    let (lo, hi) = att
        .scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = (hi - lo).max(1e-12);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = ((att.scores[(y, x)] - lo) / range * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    let sidecar = path.with_extension("json");
    let meta = serde_json::json!({
        "w": w,
        "h": h,
        "k": k_constant,
        "query_id": query_id,
    });
    std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
