//! Competing fusion strategies used as baselines against OPS: late fusion of
//! per-modality proposal sets, concatenation fusion of query vectors, and the
//! two multi-sketch schemes (elementwise max of feature maps, mean of
//! attention maps).

use ndarray::prelude::*;

use crate::attention::AttentionMap;
use crate::config::FusionKind;
use crate::encoders::{FeatureMap, QueryVector};
use crate::error::{Error, Result};
use crate::ops_scoring::ScoredProposal;
use crate::proposals::iou;

/// Strategy selector plus the parameters that are not part of the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FusionStrategy {
    pub kind: FusionKind,
    /// Number of sketches consumed by the multi-sketch strategies.
    pub n_sketches: usize,
}

impl FusionStrategy {
    pub fn new(kind: FusionKind) -> Self {
        Self { kind, n_sketches: 1 }
    }

    pub fn multi_sketch(kind: FusionKind, n_sketches: usize) -> Self {
        Self { kind, n_sketches }
    }
}

/// Duplicate threshold of the late-fusion union.
pub const LATE_FUSION_DEDUP_IOU: f64 = 0.9;

/// Union of per-query proposal sets: sort by score, drop near-duplicates
/// (IoU > 0.9, keeping the higher-scored box), return the top `top_n`.
pub fn late_fusion(
    proposals_per_query: &[Vec<ScoredProposal>],
    top_n: usize,
) -> Result<Vec<ScoredProposal>> {
    if proposals_per_query.iter().all(|set| set.is_empty()) {
        return Err(Error::InvalidArgument(
            "late_fusion: all proposal sets are empty".into(),
        ));
    }
    let mut pool: Vec<&ScoredProposal> = proposals_per_query.iter().flatten().collect();
    pool.sort_by(|a, b| b.a.partial_cmp(&a.a).unwrap_or(std::cmp::Ordering::Equal));
    let mut kept: Vec<ScoredProposal> = Vec::new();
    for cand in pool {
        if kept.len() >= top_n {
            break;
        }
        if kept
            .iter()
            .all(|k| iou(&k.proposal.bbox, &cand.proposal.bbox) <= LATE_FUSION_DEDUP_IOU)
        {
            kept.push(cand.clone());
        }
    }
    Ok(kept)
}

/// Concatenation-fusion baseline: `W' [s; t]` replaces the projected vector
/// in the scoring head.
pub fn concat_fusion(
    s_vec: &QueryVector,
    t_vec: &QueryVector,
    w: &Array2<f64>,
) -> Result<QueryVector> {
    let d = s_vec.len();
    if t_vec.len() != d {
        return Err(Error::shape(
            "concat_fusion",
            format!("length {d}"),
            format!("length {}", t_vec.len()),
        ));
    }
    if w.dim() != (d, 2 * d) {
        return Err(Error::shape(
            "concat_fusion",
            format!("({d}, {})", 2 * d),
            format!("{:?}", w.dim()),
        ));
    }
    let mut cat = Array1::<f64>::zeros(2 * d);
    cat.slice_mut(s![..d]).assign(&s_vec.data);
    cat.slice_mut(s![d..]).assign(&t_vec.data);
    QueryVector::new(w.dot(&cat), s_vec.modality)
}

/// Multi-sketch feature fusion: elementwise max across the sketch maps.
pub fn feature_fusion(sketch_fms: &[FeatureMap]) -> Result<FeatureMap> {
    let first = sketch_fms
        .first()
        .ok_or_else(|| Error::InvalidArgument("feature_fusion: no feature maps".into()))?;
    let mut out = first.data.clone();
    for fm in &sketch_fms[1..] {
        if fm.data.dim() != out.dim() {
            return Err(Error::shape(
                "feature_fusion",
                format!("{:?}", out.dim()),
                format!("{:?}", fm.data.dim()),
            ));
        }
        out.zip_mut_with(&fm.data, |o, &v| *o = o.max(v));
    }
    FeatureMap::new(out, first.stride)
}

/// Multi-sketch attention fusion: elementwise mean across attention maps.
pub fn attention_fusion(att_maps: &[AttentionMap]) -> Result<AttentionMap> {
    let first = att_maps
        .first()
        .ok_or_else(|| Error::InvalidArgument("attention_fusion: no attention maps".into()))?;
    let mut out = first.scores.clone();
    for att in &att_maps[1..] {
        if att.scores.dim() != out.dim() {
            return Err(Error::shape(
                "attention_fusion",
                format!("{:?}", out.dim()),
                format!("{:?}", att.scores.dim()),
            ));
        }
        out += &att.scores;
    }
    out /= att_maps.len() as f64;
    AttentionMap::new(out)
}
