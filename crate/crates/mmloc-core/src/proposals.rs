//! Query-aware region proposal machinery: anchor grids, the RPN heads,
//! box decoding with greedy NMS, nearest-cell RoI extraction, IoU, and
//! foreground labeling of proposals against query-class ground truth.

use ndarray::prelude::*;

use crate::autodiff::{Graph, NodeId};
use crate::config::ModelConfig;
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.width()).max(0.0) * (self.height()).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2
            && self.y1 < self.y2
            && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }
}

/// Intersection-over-union of two boxes; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Reference box tiled on the feature grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub ratio: f64,
}

impl Anchor {
    /// Box with area `scale^2` and aspect ratio `width/height = ratio`.
    pub fn to_box(&self) -> BBox {
        let w = self.scale * self.ratio.sqrt();
        let h = self.scale / self.ratio.sqrt();
        BBox::new(
            self.cx - w / 2.0,
            self.cy - h / 2.0,
            self.cx + w / 2.0,
            self.cy + h / 2.0,
        )
    }
}

/// Anchors centered on every cell of a `w x h` grid: cells row-major, then
/// scales, then ratios. This order matches the RPN head plane layout.
pub fn generate_anchors(
    w: usize,
    h: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(w * h * scales.len() * ratios.len());
    for y in 0..h {
        for x in 0..w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for &scale in scales {
                for &ratio in ratios {
                    anchors.push(Anchor { cx, cy, scale, ratio });
                }
            }
        }
    }
    anchors
}

/// Candidate box with its objectness logit and originating grid cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// `(m, n)` feature-grid cell the anchor was centered on.
    pub source_cell: (usize, usize),
}

/// Registers the RPN parameters: shared 3x3 conv, objectness and delta heads.
/// The prediction heads start near zero so untrained anchors decode to
/// themselves instead of clamped log-scale garbage.
pub fn init_params(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let a = cfg.anchors_per_cell();
    params.init_uniform("rpn.conv.w", &[cfg.rpn_channels, cfg.d, 3, 3], cfg.d * 9, rng);
    params.init_zeros("rpn.conv.b", &[cfg.rpn_channels]);
    let head = |params: &mut ParamSet, name: &str, out: usize, rng: &mut ChaCha8Rng| {
        let w = ndarray::ArrayD::from_shape_fn(
            ndarray::IxDyn(&[out, cfg.rpn_channels, 1, 1]),
            |_| rng.gen_range(-0.01..0.01),
        );
        params.insert(name, w);
    };
    head(params, "rpn.obj.w", a, rng);
    params.init_zeros("rpn.obj.b", &[a]);
    head(params, "rpn.delta.w", 4 * a, rng);
    params.init_zeros("rpn.delta.b", &[4 * a]);
}

/// RPN graph head: objectness logits `(H*W*A)` and deltas `(H*W*A, 4)`,
/// both in anchor enumeration order.
pub fn rpn_forward_node(g: &mut Graph, params: &ParamSet, fm: NodeId) -> (NodeId, NodeId) {
    let w = g.param("rpn.conv.w", params.get("rpn.conv.w").clone());
    let b = g.param("rpn.conv.b", params.get("rpn.conv.b").clone());
    let h = g.conv2d(fm, w, Some(b), 1, 1);
    let h = g.relu(h);

    let ow = g.param("rpn.obj.w", params.get("rpn.obj.w").clone());
    let ob = g.param("rpn.obj.b", params.get("rpn.obj.b").clone());
    let obj_planes = g.conv2d(h, ow, Some(ob), 1, 0);
    let obj = g.flatten_anchor_major(obj_planes);

    let dw = g.param("rpn.delta.w", params.get("rpn.delta.w").clone());
    let db = g.param("rpn.delta.b", params.get("rpn.delta.b").clone());
    let delta_planes = g.conv2d(h, dw, Some(db), 1, 0);
    // planes are laid out anchor-major with 4 components per anchor, so the
    // flat vector regroups directly into (H*W*A, 4)
    let flat = g.flatten_anchor_major(delta_planes);
    let n = g.value(flat).len() / 4;
    let deltas = g.reshape(flat, &[n, 4]);
    (obj, deltas)
}

/// Library wrapper of the RPN head for inference-style use.
pub fn rpn_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    fm: &FeatureMap,
) -> Result<(Vec<f64>, Vec<[f64; 4]>)> {
    if fm.depth() != cfg.d {
        return Err(Error::shape(
            "rpn_forward",
            format!("depth {}", cfg.d),
            format!("depth {}", fm.depth()),
        ));
    }
    let mut g = Graph::new();
    let x = g.constant(fm.data.clone().into_dyn());
    let (obj, deltas) = rpn_forward_node(&mut g, params, x);
    let obj_v = g.value(obj).iter().copied().collect();
    let d2 = g
        .value(deltas)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let deltas_v = d2.rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect();
    Ok((obj_v, deltas_v))
}

/// Faster-R-CNN delta parameterization of `gt` relative to `anchor`.
pub fn encode_deltas(anchor: &Anchor, gt: &BBox) -> [f64; 4] {
    let abox = anchor.to_box();
    let (aw, ah) = (abox.width(), abox.height());
    let (gcx, gcy) = gt.center();
    [
        (gcx - anchor.cx) / aw,
        (gcy - anchor.cy) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Applies `(dx, dy, dw, dh)` to an anchor. Log-scale deltas are clamped to
/// ±4 so early-training outputs cannot overflow.
pub fn decode_deltas(anchor: &Anchor, d: &[f64; 4]) -> BBox {
    let abox = anchor.to_box();
    let (aw, ah) = (abox.width(), abox.height());
    let cx = anchor.cx + d[0] * aw;
    let cy = anchor.cy + d[1] * ah;
    let w = aw * d[2].clamp(-4.0, 4.0).exp();
    let h = ah * d[3].clamp(-4.0, 4.0).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
}

/// Decodes every anchor, clips to the image, ranks by objectness (ties broken
/// by lower anchor index), greedily suppresses overlaps at `nms_iou`, and
/// keeps the `top_n` best.
#[allow(clippy::too_many_arguments)]
pub fn decode_and_nms(
    anchors: &[Anchor],
    objectness: &[f64],
    deltas: &[[f64; 4]],
    top_n: usize,
    nms_iou: f64,
    image_w: f64,
    image_h: f64,
    stride: usize,
) -> Result<Vec<Proposal>> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("decode_and_nms: empty anchor list".into()));
    }
    if anchors.len() != objectness.len() || anchors.len() != deltas.len() {
        return Err(Error::InvalidArgument(format!(
            "decode_and_nms: misaligned inputs ({} anchors, {} scores, {} deltas)",
            anchors.len(),
            objectness.len(),
            deltas.len()
        )));
    }
    let mut candidates: Vec<(usize, Proposal)> = Vec::with_capacity(anchors.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let raw = decode_deltas(anchor, &deltas[i]);
        let mut clipped = raw.clip(image_w, image_h);
        if clipped.x2 - clipped.x1 < 1e-3 || clipped.y2 - clipped.y1 < 1e-3 {
            // fully clipped away; keep a sliver so downstream math stays finite
            clipped = BBox::new(
                clipped.x1.min(image_w - 1e-3),
                clipped.y1.min(image_h - 1e-3),
                (clipped.x1 + 1e-3).min(image_w),
                (clipped.y1 + 1e-3).min(image_h),
            );
        }
        let cell = (
            (anchor.cx / stride as f64).floor() as usize,
            (anchor.cy / stride as f64).floor() as usize,
        );
        candidates.push((
            i,
            Proposal {
                bbox: clipped,
                objectness: objectness[i],
                source_cell: cell,
            },
        ));
    }
    candidates.sort_by(|(ia, a), (ib, b)| {
        b.objectness
            .partial_cmp(&a.objectness)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ia.cmp(ib))
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for (_, cand) in candidates {
        if kept.len() >= top_n {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) < nms_iou) {
            kept.push(cand);
        }
    }
    Ok(kept)
}

/// Source-cell indices for nearest-cell RoI pooling; shared by the library
/// wrapper and the training graph.
pub fn roi_cell_indices(
    fm_h: usize,
    fm_w: usize,
    stride: u32,
    bbox: &BBox,
    out: usize,
) -> (Vec<usize>, Vec<usize>) {
    let s = stride as f64;
    let (x1, x2) = (bbox.x1 / s, bbox.x2 / s);
    let (y1, y2) = (bbox.y1 / s, bbox.y2 / s);
    let mut rows = Vec::with_capacity(out * out);
    let mut cols = Vec::with_capacity(out * out);
    for i in 0..out {
        let v = y1 + (i as f64 + 0.5) * (y2 - y1) / out as f64;
        let row = (v.floor().max(0.0) as usize).min(fm_h - 1);
        for j in 0..out {
            let u = x1 + (j as f64 + 0.5) * (x2 - x1) / out as f64;
            let col = (u.floor().max(0.0) as usize).min(fm_w - 1);
            rows.push(row);
            cols.push(col);
        }
    }
    (rows, cols)
}

/// Nearest-cell RoI pooling into an `out x out x d` patch. A sub-cell box
/// replicates its single cell rather than erroring.
pub fn roi_extract(fm: &FeatureMap, bbox: &BBox, out: usize) -> Result<FeatureMap> {
    let (iw, ih) = (
        fm.width() as f64 * fm.stride as f64,
        fm.height() as f64 * fm.stride as f64,
    );
    if bbox.x1 < 0.0 || bbox.y1 < 0.0 || bbox.x2 > iw + 1e-9 || bbox.y2 > ih + 1e-9 || !bbox.is_valid()
    {
        return Err(Error::InvalidArgument(format!(
            "roi_extract: box {bbox:?} outside image {iw}x{ih}"
        )));
    }
    let (rows, cols) = roi_cell_indices(fm.height(), fm.width(), fm.stride, bbox, out);
    let d = fm.depth();
    let mut patch = Array3::<f64>::zeros((d, out, out));
    for i in 0..out {
        for j in 0..out {
            let (sy, sx) = (rows[i * out + j], cols[i * out + j]);
            for c in 0..d {
                patch[(c, i, j)] = fm.data[(c, sy, sx)];
            }
        }
    }
    FeatureMap::new(patch, fm.stride)
}

/// Graph version of [`roi_extract`] over a feature-map node.
pub fn roi_extract_node(
    g: &mut Graph,
    fm: NodeId,
    fm_h: usize,
    fm_w: usize,
    stride: u32,
    bbox: &BBox,
    out: usize,
) -> NodeId {
    let (rows, cols) = roi_cell_indices(fm_h, fm_w, stride, bbox, out);
    g.gather_cells(fm, rows, cols, out, out)
}

/// `y_k = 1` iff the proposal overlaps a query-class ground-truth box at
/// IoU >= 0.5.
pub fn label_proposals(proposals: &[Proposal], gt_boxes: &[BBox]) -> Vec<u8> {
    proposals
        .iter()
        .map(|p| {
            let fg = gt_boxes.iter().any(|gt| iou(&p.bbox, gt) >= 0.5);
            u8::from(fg)
        })
        .collect()
}

/// Per-anchor RPN training targets.
pub struct AnchorTargets {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    /// Delta regression target for each positive anchor (same order).
    pub delta_targets: Vec<[f64; 4]>,
}

/// Positive iff IoU >= 0.5 with any target box; everything else negative.
pub fn anchor_targets(anchors: &[Anchor], gt_boxes: &[BBox]) -> AnchorTargets {
    let mut positive = Vec::new();
    let mut negative = Vec::new();
    let mut delta_targets = Vec::new();
    for (i, anchor) in anchors.iter().enumerate() {
        let abox = anchor.to_box();
        let mut best = 0.0;
        let mut best_gt: Option<&BBox> = None;
        for gt in gt_boxes {
            let v = iou(&abox, gt);
            if v > best {
                best = v;
                best_gt = Some(gt);
            }
        }
        if best >= 0.5 {
            positive.push(i);
            delta_targets.push(encode_deltas(anchor, best_gt.unwrap()));
        } else {
            negative.push(i);
        }
    }
    AnchorTargets {
        positive,
        negative,
        delta_targets,
    }
}

/// Numerically stable binary cross-entropy with logits.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln()
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

/// Class-balanced RPN objectness loss: mean BCE over positives plus mean BCE
/// over negatives, each weighted 1/2 (an empty class contributes 0 and the
/// other keeps weight 1).
pub fn rpn_objectness_loss_node(g: &mut Graph, logits: NodeId, targets: &AnchorTargets) -> NodeId {
    let z: Vec<f64> = g.value(logits).iter().copied().collect();
    let pos = targets.positive.clone();
    let neg = targets.negative.clone();
    let (wp, wn) = match (pos.is_empty(), neg.is_empty()) {
        (true, true) => (0.0, 0.0),
        (true, false) => (0.0, 1.0),
        (false, true) => (1.0, 0.0),
        (false, false) => (0.5, 0.5),
    };
    let mut loss = 0.0;
    for &i in &pos {
        loss += wp * bce_with_logits(z[i], 1.0) / pos.len().max(1) as f64;
    }
    for &i in &neg {
        loss += wn * bce_with_logits(z[i], 0.0) / neg.len().max(1) as f64;
    }
    let n = z.len();
    let zc = z.clone();
    g.scalar_from(
        logits,
        loss,
        Box::new(move |gs| {
            let mut grad = Array1::<f64>::zeros(n);
            for &i in &pos {
                let s = 1.0 / (1.0 + (-zc[i]).exp());
                grad[i] = gs * wp * (s - 1.0) / pos.len() as f64;
            }
            for &i in &neg {
                let s = 1.0 / (1.0 + (-zc[i]).exp());
                grad[i] = gs * wn * s / neg.len() as f64;
            }
            grad.into_dyn()
        }),
    )
}

/// Smooth-L1 box regression over positive anchors (mean over positives of the
/// summed four components). Returns a zero constant when nothing is positive.
pub fn rpn_box_loss_node(g: &mut Graph, deltas: NodeId, targets: &AnchorTargets) -> NodeId {
    if targets.positive.is_empty() {
        return g.constant(ArrayD::zeros(ndarray::IxDyn(&[])));
    }
    let d2 = g
        .value(deltas)
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .to_owned();
    let pos = targets.positive.clone();
    let tgt = targets.delta_targets.clone();
    let npos = pos.len() as f64;
    let mut loss = 0.0;
    for (pi, &i) in pos.iter().enumerate() {
        for c in 0..4 {
            loss += smooth_l1(d2[(i, c)] - tgt[pi][c]);
        }
    }
    loss /= npos;
    let shape = d2.dim();
    g.scalar_from(
        deltas,
        loss,
        Box::new(move |gs| {
            let mut grad = Array2::<f64>::zeros(shape);
            for (pi, &i) in pos.iter().enumerate() {
                for c in 0..4 {
                    let x = d2[(i, c)] - tgt[pi][c];
                    grad[(i, c)] = gs * x.clamp(-1.0, 1.0) / npos;
                }
            }
            grad.into_dyn()
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn iou_hand_cases() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        let disjoint = BBox::new(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &disjoint), 0.0);
        let half = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((iou(&a, &half) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetric_and_identity_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let rb = |rng: &mut ChaCha8Rng| {
                let x1: f64 = rng.gen_range(0.0..50.0);
                let y1: f64 = rng.gen_range(0.0..50.0);
                BBox::new(x1, y1, x1 + rng.gen_range(1.0..40.0), y1 + rng.gen_range(1.0..40.0))
            };
            let a = rb(&mut rng);
            let b = rb(&mut rng);
            assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            assert!((0.0..=1.0).contains(&v));
            if (v - 1.0).abs() < 1e-12 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn anchor_grid_counts_and_geometry() {
        let anchors = generate_anchors(2, 2, 8, &[16.0], &[1.0]);
        assert_eq!(anchors.len(), 4);
        assert_eq!((anchors[0].cx, anchors[0].cy), (4.0, 4.0));
        assert_eq!((anchors[3].cx, anchors[3].cy), (12.0, 12.0));
        let b = anchors[0].to_box();
        assert!((b.width() - 16.0).abs() < 1e-12 && (b.height() - 16.0).abs() < 1e-12);

        let many = generate_anchors(16, 16, 8, &[16.0, 32.0, 64.0], &[0.5, 2.0]);
        assert_eq!(many.len(), 1536);
    }

    #[test]
    fn decode_zero_deltas_returns_anchor() {
        let anchors = generate_anchors(1, 1, 8, &[4.0], &[1.0]);
        let props = decode_and_nms(&anchors, &[0.3], &[[0.0; 4]], 10, 0.7, 64.0, 64.0, 8).unwrap();
        assert_eq!(props.len(), 1);
        let want = anchors[0].to_box();
        assert!((props[0].bbox.x1 - want.x1).abs() < 1e-12);
        assert!((props[0].bbox.y2 - want.y2).abs() < 1e-12);
        assert_eq!(props[0].source_cell, (0, 0));
    }

    #[test]
    fn nms_suppresses_duplicates_keeping_higher_score() {
        let anchors = vec![
            Anchor { cx: 16.0, cy: 16.0, scale: 16.0, ratio: 1.0 },
            Anchor { cx: 16.0, cy: 16.0, scale: 16.0, ratio: 1.0 },
        ];
        let props =
            decode_and_nms(&anchors, &[0.8, 0.9], &[[0.0; 4], [0.0; 4]], 10, 0.5, 64.0, 64.0, 8)
                .unwrap();
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].objectness, 0.9);
    }

    #[test]
    fn nms_matches_brute_force_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..=20);
            let mut anchors = Vec::new();
            let mut scores = Vec::new();
            let mut deltas = Vec::new();
            for _ in 0..n {
                anchors.push(Anchor {
                    cx: rng.gen_range(8.0..120.0),
                    cy: rng.gen_range(8.0..120.0),
                    scale: rng.gen_range(8.0..48.0),
                    ratio: 1.0,
                });
                scores.push(rng.gen_range(-1.0..1.0));
                deltas.push([
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                ]);
            }
            let got = decode_and_nms(&anchors, &scores, &deltas, n, 0.5, 128.0, 128.0, 8).unwrap();

            // O(n^2) reference: decode, sort by (score desc, index), greedy keep
            let decoded: Vec<BBox> = anchors
                .iter()
                .zip(&deltas)
                .map(|(a, d)| decode_deltas(a, d).clip(128.0, 128.0))
                .collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let mut kept: Vec<usize> = Vec::new();
            for &i in &order {
                if kept.iter().all(|&k| iou(&decoded[k], &decoded[i]) < 0.5) {
                    kept.push(i);
                }
            }
            assert_eq!(got.len(), kept.len());
            for (p, &i) in got.iter().zip(&kept) {
                assert_eq!(p.objectness, scores[i]);
            }
            // invariants: scores non-increasing, pairwise IoU < threshold
            for w in got.windows(2) {
                assert!(w[0].objectness >= w[1].objectness);
            }
            for i in 0..got.len() {
                for j in i + 1..got.len() {
                    assert!(iou(&got[i].bbox, &got[j].bbox) < 0.5);
                }
            }
        }
    }

    #[test]
    fn decode_and_nms_rejects_empty() {
        assert!(decode_and_nms(&[], &[], &[], 5, 0.5, 64.0, 64.0, 8).is_err());
    }

    #[test]
    fn roi_extract_constant_and_aligned() {
        let fm = FeatureMap::new(Array3::from_elem((4, 8, 8), 1.5), 8).unwrap();
        let patch = roi_extract(&fm, &BBox::new(0.0, 0.0, 64.0, 64.0), 7).unwrap();
        assert!(patch.data.iter().all(|&v| v == 1.5));

        // a box exactly covering a 7x7 cell window copies those cells
        let mut data = Array3::<f64>::zeros((1, 8, 8));
        for y in 0..8 {
            for x in 0..8 {
                data[(0, y, x)] = (y * 8 + x) as f64;
            }
        }
        let fm = FeatureMap::new(data, 8).unwrap();
        let patch = roi_extract(&fm, &BBox::new(8.0, 0.0, 64.0, 56.0), 7).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(patch.data[(0, i, j)], (i * 8 + (j + 1)) as f64);
            }
        }
    }

    #[test]
    fn roi_extract_degenerate_box_replicates_cell() {
        let mut data = Array3::<f64>::zeros((1, 4, 4));
        data[(0, 2, 1)] = 9.0;
        let fm = FeatureMap::new(data, 8).unwrap();
        // sub-cell box inside cell (1,2)
        let patch = roi_extract(&fm, &BBox::new(10.0, 17.0, 12.0, 19.0), 3).unwrap();
        assert!(patch.data.iter().all(|&v| v == 9.0));
    }

    #[test]
    fn roi_extract_matches_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let fm = FeatureMap::new(
            Array3::from_shape_fn((3, 16, 16), |_| rng.gen_range(-1.0..1.0)),
            8,
        )
        .unwrap();
        for _ in 0..30 {
            let x1: f64 = rng.gen_range(0.0..100.0);
            let y1: f64 = rng.gen_range(0.0..100.0);
            let b = BBox::new(x1, y1, x1 + rng.gen_range(2.0..27.0), y1 + rng.gen_range(2.0..27.0));
            let patch = roi_extract(&fm, &b, 7).unwrap();
            for i in 0..7 {
                for j in 0..7 {
                    let v = b.y1 / 8.0 + (i as f64 + 0.5) * (b.y2 - b.y1) / 8.0 / 7.0;
                    let u = b.x1 / 8.0 + (j as f64 + 0.5) * (b.x2 - b.x1) / 8.0 / 7.0;
                    let sy = (v.floor().max(0.0) as usize).min(15);
                    let sx = (u.floor().max(0.0) as usize).min(15);
                    for c in 0..3 {
                        assert_eq!(patch.data[(c, i, j)], fm.data[(c, sy, sx)]);
                    }
                }
            }
        }
    }

    #[test]
    fn roi_extract_rejects_out_of_bounds() {
        let fm = FeatureMap::new(Array3::zeros((1, 4, 4)), 8).unwrap();
        assert!(roi_extract(&fm, &BBox::new(-1.0, 0.0, 8.0, 8.0), 3).is_err());
        assert!(roi_extract(&fm, &BBox::new(0.0, 0.0, 40.0, 8.0), 3).is_err());
    }

    #[test]
    fn label_proposals_thresholds_and_order_invariance() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let exact = Proposal { bbox: gt[0], objectness: 0.0, source_cell: (0, 0) };
        // shifted box whose IoU with the gt falls just below 0.5
        let near = Proposal {
            bbox: BBox::new(3.43, 0.0, 13.43, 10.0),
            objectness: 0.0,
            source_cell: (0, 0),
        };
        assert!(iou(&near.bbox, &gt[0]) < 0.5);
        let labels = label_proposals(&[exact.clone(), near.clone()], &gt);
        assert_eq!(labels, vec![1, 0]);
        let labels_rev = label_proposals(&[near, exact], &gt);
        assert_eq!(labels_rev, vec![0, 1]);
    }

    #[test]
    fn label_proposals_matches_max_iou_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rb = |rng: &mut ChaCha8Rng| {
            let x1: f64 = rng.gen_range(0.0..80.0);
            let y1: f64 = rng.gen_range(0.0..80.0);
            BBox::new(x1, y1, x1 + rng.gen_range(5.0..40.0), y1 + rng.gen_range(5.0..40.0))
        };
        for _ in 0..40 {
            let gts: Vec<BBox> = (0..rng.gen_range(1..4)).map(|_| rb(&mut rng)).collect();
            let props: Vec<Proposal> = (0..rng.gen_range(1..10))
                .map(|_| Proposal { bbox: rb(&mut rng), objectness: 0.0, source_cell: (0, 0) })
                .collect();
            let labels = label_proposals(&props, &gts);
            for (p, &l) in props.iter().zip(&labels) {
                let best = gts.iter().map(|g| iou(&p.bbox, g)).fold(0.0, f64::max);
                assert_eq!(l, u8::from(best >= 0.5));
            }
        }
    }

    #[test]
    fn rpn_forward_shapes_and_zero_input() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &mut rng);
        let fm = FeatureMap::new(Array3::zeros((64, 4, 4)), 8).unwrap();
        let (obj, deltas) = rpn_forward(&params, &cfg, &fm).unwrap();
        assert_eq!(obj.len(), 4 * 4 * 9);
        assert_eq!(deltas.len(), 4 * 4 * 9);
        // zero map and zero biases give all-zero outputs
        assert!(obj.iter().all(|&v| v == 0.0));
        assert!(deltas.iter().all(|d| d.iter().all(|&v| v == 0.0)));
        // depth mismatch is an error
        let bad = FeatureMap::new(Array3::zeros((32, 4, 4)), 8).unwrap();
        assert!(rpn_forward(&params, &cfg, &bad).is_err());
    }

    #[test]
    fn rpn_gradients_match_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        init_params(&mut params, &cfg, &mut rng);
        let fmv = Array3::from_shape_fn((cfg.d, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let anchors = generate_anchors(3, 3, 8, &cfg.anchor_scales, &cfg.anchor_ratios);
        let gts = vec![BBox::new(2.0, 2.0, 19.0, 20.0)];
        let targets = anchor_targets(&anchors, &gts);
        assert!(!targets.positive.is_empty());

        let loss_fn = |p: &ParamSet| {
            let mut g = Graph::new();
            let x = g.constant(fmv.clone().into_dyn());
            let (obj, deltas) = rpn_forward_node(&mut g, p, x);
            let l1 = rpn_objectness_loss_node(&mut g, obj, &targets);
            let l2 = rpn_box_loss_node(&mut g, deltas, &targets);
            let l = g.add(l1, l2);
            g.scalar_value(l)
        };
        let analytic = {
            let mut g = Graph::new();
            let x = g.constant(fmv.clone().into_dyn());
            let (obj, deltas) = rpn_forward_node(&mut g, &params, x);
            let l1 = rpn_objectness_loss_node(&mut g, obj, &targets);
            let l2 = rpn_box_loss_node(&mut g, deltas, &targets);
            let l = g.add(l1, l2);
            g.backward(l)
        };
        let h = 1e-4;
        for name in ["rpn.conv.w", "rpn.obj.w", "rpn.delta.w", "rpn.obj.b"] {
            let grad: Vec<f64> = analytic[name].iter().copied().collect();
            let base = params.get(name).to_owned();
            for idx in [0, grad.len() / 2, grad.len() - 1] {
                let mut plus = base.clone();
                plus.as_slice_mut().unwrap()[idx] += h;
                let mut pp = params.clone();
                pp.set(name, plus);
                let fp = loss_fn(&pp);
                let mut minus = base.clone();
                minus.as_slice_mut().unwrap()[idx] -= h;
                let mut pm = params.clone();
                pm.set(name, minus);
                let fm_ = loss_fn(&pm);
                let fd = (fp - fm_) / (2.0 * h);
                let a = grad[idx];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (a - fd).abs() / denom < 1e-4,
                    "{name}[{idx}]: analytic {a} vs fd {fd}"
                );
            }
        }
    }
}
