//! End-to-end assembly of the localization model: the shared parameter set,
//! the differentiable training graph (encoders, attention, RPN, RoI scoring,
//! losses), and the inference path built from the same library operations so
//! training and evaluation compute identical numbers.

use ndarray::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionMap};
use crate::autodiff::{GradMap, Graph, NodeId};
use crate::config::{FusionKind, ModelConfig, TrainConfig};
use crate::encoders::{self, FeatureMap, GlossTokens, Modality, QueryVector, RgbRaster, SketchRaster};
use crate::error::{Error, Result};
use crate::fusion;
use crate::ops_scoring::{self, ScoredProposal, ScoringHead};
use crate::params::ParamSet;
use crate::proposals::{self, anchor_targets, generate_anchors, Anchor, BBox, Proposal};

/// Parameters plus the architecture they were built for.
#[derive(Clone)]
pub struct Model {
    pub params: ParamSet,
    pub cfg: ModelConfig,
    pub vocab_size: usize,
}

impl Model {
    /// Fresh model with uniform fan-in init, deterministic in `seed`.
    pub fn init(cfg: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        encoders::init_params(&mut params, cfg, vocab_size, &mut rng);
        attention::init_params(&mut params, cfg, &mut rng);
        proposals::init_params(&mut params, cfg, &mut rng);
        ops_scoring::init_params(&mut params, cfg, &mut rng);
        params.init_uniform("fuse_cat.w", &[cfg.d, 2 * cfg.d], 2 * cfg.d, &mut rng);
        Ok(Model { params, cfg: cfg.clone(), vocab_size })
    }

    pub fn anchors(&self) -> Vec<Anchor> {
        let cells = self.cfg.image_size / self.cfg.stride;
        generate_anchors(
            cells,
            cells,
            self.cfg.stride,
            &self.cfg.anchor_scales,
            &self.cfg.anchor_ratios,
        )
    }

    pub fn scoring_head(&self) -> ScoringHead {
        ScoringHead::from_params(&self.params, self.cfg.score_head)
    }

    fn fuse_matrix(&self, name: &str) -> Array2<f64> {
        self.params
            .get(name)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned()
    }

    /// The learned 1x1 augment projection as a `(d, 2d)` matrix.
    pub fn augment_matrix(&self) -> Array2<f64> {
        let w4 = self
            .params
            .get("att.proj.w")
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let (o, i, _, _) = w4.dim();
        Array2::from_shape_fn((o, i), |(a, b)| w4[(a, b, 0, 0)])
    }
}

fn image_tensor(image: &RgbRaster) -> ArrayD<f64> {
    image.to_tensor().into_dyn()
}

fn sketch_tensor(sketch: &SketchRaster) -> ArrayD<f64> {
    sketch.to_tensor().into_dyn()
}

/// One training example: an image paired with a query of one category.
pub struct TrainSample<'a> {
    pub image: &'a RgbRaster,
    pub sketch: &'a SketchRaster,
    pub gloss: &'a GlossTokens,
    pub class_tokens: Option<&'a GlossTokens>,
    /// Ground-truth boxes of the query category in this image.
    pub query_boxes: Vec<BBox>,
    /// Every instance box (used when the RPN is class-agnostic).
    pub all_boxes: Vec<BBox>,
}

/// Scalar components of one training loss evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub query: f64,
    pub rpn_objectness: f64,
    pub rpn_box: f64,
    pub rois: usize,
    pub positives: usize,
}

/// Deterministic RoI selection for the scoring loss: ground-truth boxes are
/// injected as foreground, labeled foreground proposals follow, then hard
/// (high-objectness) negatives. Negatives are capped at three times the
/// foreground count so the background hinge cannot drown the batch and
/// collapse every score to zero.
fn select_scoring_rois(
    props: &[Proposal],
    query_boxes: &[BBox],
    roi_batch: usize,
) -> Vec<(BBox, u8)> {
    let labels = proposals::label_proposals(props, query_boxes);
    let mut rois: Vec<(BBox, u8)> = Vec::with_capacity(roi_batch);
    for b in query_boxes.iter().take(roi_batch / 2) {
        rois.push((*b, 1));
    }
    for (p, &y) in props.iter().zip(&labels) {
        if y == 1 && rois.len() < roi_batch / 2 {
            rois.push((p.bbox, 1));
        }
    }
    let fg = rois.len();
    let bg_cap = (3 * fg.max(1)).min(roi_batch - fg.min(roi_batch));
    let mut bg = 0usize;
    for (p, &y) in props.iter().zip(&labels) {
        if y == 0 && bg < bg_cap && rois.len() < roi_batch {
            rois.push((p.bbox, 0));
            bg += 1;
        }
    }
    rois
}

/// Builds the full training graph for one sample and returns the loss node.
/// `attention_on` distinguishes stage 2 from stage 1 (bypass: the RPN and
/// RoIs consume the raw backbone map).
#[allow(clippy::too_many_arguments)]
fn build_loss_graph(
    g: &mut Graph,
    model: &Model,
    sample: &TrainSample,
    variant: FusionKind,
    attention_on: bool,
    tcfg: &TrainConfig,
    anchors: &[Anchor],
) -> Result<(NodeId, LossBreakdown)> {
    let cfg = &model.cfg;
    let params = &model.params;
    if sample.image.height() % cfg.stride != 0 || sample.image.width() % cfg.stride != 0 {
        return Err(Error::shape(
            "train",
            format!("image divisible by {}", cfg.stride),
            format!("{}x{}", sample.image.width(), sample.image.height()),
        ));
    }
    let use_sketch = !matches!(variant, FusionKind::Gloss);
    let use_text = !matches!(
        variant,
        FusionKind::Sketch | FusionKind::FeatureMultiSketch | FusionKind::AttentionMultiSketch
    );

    let img = g.constant(image_tensor(sample.image));
    let img_fm = encoders::backbone_node(g, params, "enc_i", img);
    let (fm_h, fm_w) = {
        let s = g.shape(img_fm);
        (s[1], s[2])
    };

    let sketch_fm = if use_sketch {
        let sk = g.constant(sketch_tensor(sample.sketch));
        Some(encoders::backbone_node(g, params, "enc_s", sk))
    } else {
        None
    };
    let text_vec = if use_text {
        Some(encoders::encode_text_node(g, params, &sample.gloss.tokens))
    } else {
        None
    };

    // query-guided augmentation of the image map
    let rpn_input = if attention_on {
        let psi_img = encoders::psi_map_node(g, params, "psi_i", img_fm);
        let zero_d = g.constant(ArrayD::zeros(ndarray::IxDyn(&[cfg.d])));
        let s_global = match sketch_fm {
            Some(sfm) => {
                let psi_s = encoders::psi_map_node(g, params, "psi_s", sfm);
                g.global_max_pool(psi_s)
            }
            None => zero_d,
        };
        let t_psi = match text_vec {
            Some(t) => encoders::psi_vec_node(g, params, t),
            None => g.constant(ArrayD::zeros(ndarray::IxDyn(&[cfg.d]))),
        };
        let fused = attention::fuse_query_node(g, params, s_global, t_psi);
        let att = attention::compatibility_node(g, psi_img, fused, cfg.k_constant);
        let attended = attention::apply_attention_node(g, img_fm, att);
        attention::augment_node(g, params, img_fm, attended)
    } else {
        img_fm
    };

    // RPN losses over anchor targets. Stage 1 trains a vanilla RPN on all
    // instance boxes (without attention it has no query information, so
    // query-conditioned labels would be contradictory); stage 2 conditions
    // the positives on the query class so the attention signal is the only
    // way to satisfy them.
    let (obj_logits, deltas) = proposals::rpn_forward_node(g, params, rpn_input);
    let rpn_boxes = if tcfg.query_conditioned_rpn && attention_on {
        &sample.query_boxes
    } else {
        &sample.all_boxes
    };
    let targets = anchor_targets(anchors, rpn_boxes);
    let l_obj = proposals::rpn_objectness_loss_node(g, obj_logits, &targets);
    let l_box = proposals::rpn_box_loss_node(g, deltas, &targets);

    // decode proposals (objectness values, detached) and pick scoring RoIs
    let obj_values: Vec<f64> = g.value(obj_logits).iter().copied().collect();
    let delta_values: Vec<[f64; 4]> = {
        let d2 = g.value(deltas).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        d2.rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect()
    };
    let img_extent = (cfg.image_size as f64, cfg.image_size as f64);
    let props = proposals::decode_and_nms(
        anchors,
        &obj_values,
        &delta_values,
        tcfg.top_n_train,
        0.7,
        img_extent.0,
        img_extent.1,
        cfg.stride,
    )?;
    let rois = select_scoring_rois(&props, &sample.query_boxes, tcfg.roi_batch);

    // proposal feature rows through the RoI head (from the backbone map,
    // matching the r_k^{phi_I} pooling in the scoring path)
    let mut r_rows = Vec::with_capacity(rois.len());
    let mut labels = Vec::with_capacity(rois.len());
    for (bbox, y) in &rois {
        let clipped = bbox.clip(img_extent.0, img_extent.1);
        let patch = proposals::roi_extract_node(
            g,
            img_fm,
            fm_h,
            fm_w,
            cfg.stride as u32,
            &clipped,
            cfg.roi_size,
        );
        r_rows.push(encoders::phi_map_node(g, params, "phi_i", patch));
        labels.push(*y);
    }
    let l_query = if r_rows.is_empty() {
        g.constant(ArrayD::zeros(ndarray::IxDyn(&[])))
    } else {
        let r = g.stack_rows(&r_rows);
        let q_rows = match variant {
            FusionKind::Concat => {
                let s_prime = encoders::phi_map_node(g, params, "phi_s", sketch_fm.unwrap());
                let t_prime = encoders::phi_text_node(g, params, text_vec.unwrap());
                let w = g.param("fuse_cat.w", params.get("fuse_cat.w").clone());
                let cat = g.concat(s_prime, t_prime, 0);
                let fused = g.matvec(w, cat);
                let copies: Vec<NodeId> = (0..r_rows.len()).map(|_| fused).collect();
                g.stack_rows(&copies)
            }
            _ => {
                let mut cols = Vec::new();
                if let Some(sfm) = sketch_fm {
                    cols.push(encoders::phi_map_node(g, params, "phi_s", sfm));
                }
                if let Some(t) = text_vec {
                    cols.push(encoders::phi_text_node(g, params, t));
                }
                if cfg.use_class_query {
                    if let Some(class) = sample.class_tokens {
                        let cvec = encoders::encode_text_node(g, params, &class.tokens);
                        cols.push(encoders::phi_text_node(g, params, cvec));
                    }
                }
                debug_assert!(!cols.is_empty());
                let b = g.stack_cols(&cols);
                g.project_rows(b, r, cfg.ridge)?
            }
        };
        let scores = ops_scoring::score_rows_node(g, params, r, q_rows, cfg.score_head);
        // margin/ranking structure plus the directional classification loss
        // on the labeled proposals
        let l_margin = ops_scoring::query_loss_node(g, scores.probs, &labels, tcfg.m_plus, tcfg.m_minus);
        let l_cls = ops_scoring::proposal_bce_node(g, &scores, &labels);
        g.add(l_margin, l_cls)
    };

    // all parts unit-weighted
    let partial = g.add(l_query, l_obj);
    let total = g.add(partial, l_box);
    let breakdown = LossBreakdown {
        total: g.scalar_value(total),
        query: g.scalar_value(l_query),
        rpn_objectness: g.scalar_value(l_obj),
        rpn_box: g.scalar_value(l_box),
        rois: rois.len(),
        positives: labels.iter().filter(|&&y| y == 1).count(),
    };
    Ok((total, breakdown))
}

/// Loss and parameter gradients for one training sample.
pub fn training_step(
    model: &Model,
    sample: &TrainSample,
    variant: FusionKind,
    attention_on: bool,
    tcfg: &TrainConfig,
    anchors: &[Anchor],
) -> Result<(LossBreakdown, GradMap)> {
    let mut g = Graph::new();
    let (loss, breakdown) = build_loss_graph(&mut g, model, sample, variant, attention_on, tcfg, anchors)?;
    let grads = g.backward(loss);
    Ok((breakdown, grads))
}

/// Loss only (used by finite-difference checks).
pub fn training_loss_value(
    model: &Model,
    sample: &TrainSample,
    variant: FusionKind,
    attention_on: bool,
    tcfg: &TrainConfig,
    anchors: &[Anchor],
) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let (_, breakdown) = build_loss_graph(&mut g, model, sample, variant, attention_on, tcfg, anchors)?;
    Ok(breakdown)
}

// ---- inference ----

/// Query-independent per-scene encodings.
pub struct SceneEncoding {
    pub img_fm: FeatureMap,
    pub psi_fm: Option<FeatureMap>,
}

pub fn encode_scene(model: &Model, image: &RgbRaster, with_attention: bool) -> Result<SceneEncoding> {
    let img_fm = encoders::encode_image(&model.params, &model.cfg, image)?;
    let psi_fm = if with_attention {
        Some(encoders::psi_transform_map(&model.params, encoders::PsiHead::Image, &img_fm)?)
    } else {
        None
    };
    Ok(SceneEncoding { img_fm, psi_fm })
}

/// Per-query encodings (possibly several sketches for the multi-sketch
/// fusion strategies).
pub struct QueryEncoding {
    /// Global max-pooled psi vectors, one per effective sketch.
    pub sketch_globals: Vec<QueryVector>,
    pub text_psi: Option<QueryVector>,
    pub s_prime: Option<QueryVector>,
    pub t_prime: Option<QueryVector>,
    pub class_prime: Option<QueryVector>,
}

pub fn encode_query(
    model: &Model,
    sketches: &[&SketchRaster],
    gloss: Option<&GlossTokens>,
    class_tokens: Option<&GlossTokens>,
    strategy: fusion::FusionStrategy,
) -> Result<QueryEncoding> {
    let params = &model.params;
    let cfg = &model.cfg;
    let use_sketch = !matches!(strategy.kind, FusionKind::Gloss);
    let use_text = !matches!(
        strategy.kind,
        FusionKind::Sketch | FusionKind::FeatureMultiSketch | FusionKind::AttentionMultiSketch
    );

    let mut sketch_globals = Vec::new();
    let mut s_prime = None;
    if use_sketch {
        if sketches.is_empty() {
            return Err(Error::InvalidArgument("query needs at least one sketch".into()));
        }
        let fms: Vec<FeatureMap> = sketches
            .iter()
            .map(|s| encoders::encode_sketch(params, cfg, s))
            .collect::<Result<_>>()?;
        match strategy.kind {
            FusionKind::FeatureMultiSketch => {
                let fused = fusion::feature_fusion(&fms)?;
                let psi = encoders::psi_transform_map(params, encoders::PsiHead::Sketch, &fused)?;
                sketch_globals.push(attention::global_max_pool(&psi)?);
                s_prime = Some(phi_sketch(model, &fused)?);
            }
            FusionKind::AttentionMultiSketch => {
                let mut primes = Vec::new();
                for fm in &fms {
                    let psi = encoders::psi_transform_map(params, encoders::PsiHead::Sketch, fm)?;
                    sketch_globals.push(attention::global_max_pool(&psi)?);
                    primes.push(phi_sketch(model, fm)?);
                }
                // scoring uses the mean of the per-sketch query vectors
                let mut mean = Array1::<f64>::zeros(cfg.d);
                for p in &primes {
                    mean += &p.data;
                }
                mean /= primes.len() as f64;
                s_prime = Some(QueryVector::new(mean, Modality::Sketch)?);
            }
            _ => {
                let fm = &fms[0];
                let psi = encoders::psi_transform_map(params, encoders::PsiHead::Sketch, fm)?;
                sketch_globals.push(attention::global_max_pool(&psi)?);
                s_prime = Some(phi_sketch(model, fm)?);
            }
        }
    }

    let mut text_psi = None;
    let mut t_prime = None;
    if use_text {
        let gloss = gloss.ok_or_else(|| Error::InvalidArgument("query needs gloss tokens".into()))?;
        let t_vec = encoders::encode_text(params, cfg, gloss)?;
        text_psi = Some(encoders::psi_transform_vec(params, encoders::PsiHead::Text, &t_vec)?);
        t_prime = Some(phi_text(model, &t_vec)?);
    }

    let class_prime = match (cfg.use_class_query, class_tokens) {
        (true, Some(class)) => {
            let c_vec = encoders::encode_text(params, cfg, class)?;
            let mut p = phi_text(model, &c_vec)?;
            p.modality = Modality::Class;
            Some(p)
        }
        _ => None,
    };

    Ok(QueryEncoding { sketch_globals, text_psi, s_prime, t_prime, class_prime })
}

fn phi_sketch(model: &Model, fm: &FeatureMap) -> Result<QueryVector> {
    let mut g = Graph::new();
    let x = g.constant(fm.data.clone().into_dyn());
    let out = encoders::phi_map_node(&mut g, &model.params, "phi_s", x);
    let v = g.value(out).view().into_dimensionality::<Ix1>().unwrap().to_owned();
    QueryVector::new(v, Modality::Sketch)
}

fn phi_text(model: &Model, v: &QueryVector) -> Result<QueryVector> {
    let mut g = Graph::new();
    let x = g.constant(v.data.clone().into_dyn());
    let out = encoders::phi_text_node(&mut g, &model.params, x);
    let data = g.value(out).view().into_dimensionality::<Ix1>().unwrap().to_owned();
    QueryVector::new(data, Modality::Gloss)
}

/// Inference output for one (scene, query) pair.
pub struct LocalizeOutput {
    /// Objectness-ranked proposals after NMS (before query scoring).
    pub proposals: Vec<Proposal>,
    /// Query-scored proposals, best first.
    pub scored: Vec<ScoredProposal>,
    pub attention: Option<AttentionMap>,
}

/// Runs the full localization pipeline for one scene/query pair.
#[allow(clippy::too_many_arguments)]
pub fn localize_scene(
    model: &Model,
    scene: &SceneEncoding,
    query: &QueryEncoding,
    variant: FusionKind,
    attention_on: bool,
    top_n_decode: usize,
    top_n_scored: usize,
) -> Result<LocalizeOutput> {
    let cfg = &model.cfg;
    let zero = QueryVector::new(Array1::zeros(cfg.d), Modality::Gloss)?;
    let mut attention_map = None;

    let rpn_map: FeatureMap = if attention_on {
        let psi_fm = scene
            .psi_fm
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("scene encoded without the attention path".into()))?;
        let fuse_w = model.fuse_matrix("att.fuse.w");
        let att = if query.sketch_globals.len() > 1 {
            // attention fusion over the per-sketch maps
            let mut maps = Vec::new();
            for sg in &query.sketch_globals {
                let fused = attention::fuse_query(sg, query.text_psi.as_ref().unwrap_or(&zero), &fuse_w)?;
                maps.push(attention::compatibility_map(psi_fm, &fused, cfg.k_constant)?);
            }
            fusion::attention_fusion(&maps)?
        } else {
            let sg = query.sketch_globals.first().unwrap_or(&zero);
            let fused = attention::fuse_query(sg, query.text_psi.as_ref().unwrap_or(&zero), &fuse_w)?;
            attention::compatibility_map(psi_fm, &fused, cfg.k_constant)?
        };
        let attended = attention::apply_attention(&scene.img_fm, &att)?;
        let out = attention::augment_features(&scene.img_fm, &attended, &model.augment_matrix())?;
        attention_map = Some(att);
        out
    } else {
        scene.img_fm.clone()
    };

    let anchors = model.anchors();
    let (obj, deltas) = proposals::rpn_forward(&model.params, cfg, &rpn_map)?;
    let extent = cfg.image_size as f64;
    let props = proposals::decode_and_nms(
        &anchors,
        &obj,
        &deltas,
        top_n_decode,
        0.7,
        extent,
        extent,
        cfg.stride,
    )?;

    // scoring basis (or fused query) per variant
    enum ScoringMode {
        Projection(ops_scoring::ProjectionOperator),
        Fixed(QueryVector),
    }
    let mode = match variant {
        FusionKind::Concat => {
            let s = query.s_prime.as_ref().ok_or_else(|| missing("sketch"))?;
            let t = query.t_prime.as_ref().ok_or_else(|| missing("gloss"))?;
            let fused = fusion::concat_fusion(s, t, &model.fuse_matrix("fuse_cat.w"))?;
            ScoringMode::Fixed(fused)
        }
        FusionKind::Ops => {
            let mut queries = Vec::new();
            queries.push(query.s_prime.clone().ok_or_else(|| missing("sketch"))?);
            queries.push(query.t_prime.clone().ok_or_else(|| missing("gloss"))?);
            if let Some(c) = &query.class_prime {
                queries.push(c.clone());
            }
            let basis = ops_scoring::QueryBasis::from_queries(&queries, cfg.ridge, cfg.normalize_basis)?;
            ScoringMode::Projection(ops_scoring::build_projection_from_basis(&basis)?)
        }
        FusionKind::Sketch | FusionKind::FeatureMultiSketch | FusionKind::AttentionMultiSketch => {
            let s = query.s_prime.clone().ok_or_else(|| missing("sketch"))?;
            let basis = ops_scoring::QueryBasis::from_queries(&[s], cfg.ridge, cfg.normalize_basis)?;
            ScoringMode::Projection(ops_scoring::build_projection_from_basis(&basis)?)
        }
        FusionKind::Gloss => {
            let t = query.t_prime.clone().ok_or_else(|| missing("gloss"))?;
            let basis = ops_scoring::QueryBasis::from_queries(&[t], cfg.ridge, cfg.normalize_basis)?;
            ScoringMode::Projection(ops_scoring::build_projection_from_basis(&basis)?)
        }
        FusionKind::Late => {
            return Err(Error::InvalidArgument(
                "late fusion combines per-modality runs; call localize with sketch and gloss variants".into(),
            ))
        }
    };

    let head = model.scoring_head();
    let mut scored = Vec::new();
    for p in props.iter().take(top_n_scored) {
        let patch = proposals::roi_extract(&scene.img_fm, &p.bbox, cfg.roi_size)?;
        let r = encoders::proposal_head(&model.params, cfg, &patch)?;
        let q = match &mode {
            ScoringMode::Projection(op) => ops_scoring::project(op, &r)?,
            ScoringMode::Fixed(fq) => fq.clone(),
        };
        let a = ops_scoring::score(&r, &q, &head)?;
        scored.push(ScoredProposal { proposal: p.clone(), a, q: q.data });
    }
    scored.sort_by(|a, b| {
        b.a.partial_cmp(&a.a)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                b.proposal
                    .objectness
                    .partial_cmp(&a.proposal.objectness)
                    .unwrap_or(std::cmp::Ordering::Equal),
            )
    });

    Ok(LocalizeOutput { proposals: props, scored, attention: attention_map })
}

fn missing(what: &str) -> Error {
    Error::InvalidArgument(format!("query encoding is missing the {what} modality"))
}

/// Fused-query attention map for the debug dump CLI.
pub fn attention_for_dump(
    model: &Model,
    scene: &SceneEncoding,
    query: &QueryEncoding,
) -> Result<AttentionMap> {
    let cfg = &model.cfg;
    let zero = QueryVector::new(Array1::zeros(cfg.d), Modality::Gloss)?;
    let psi_fm = scene
        .psi_fm
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("scene encoded without the attention path".into()))?;
    let sg = query.sketch_globals.first().unwrap_or(&zero);
    let fused = attention::fuse_query(sg, query.text_psi.as_ref().unwrap_or(&zero), &model.fuse_matrix("att.fuse.w"))?;
    attention::compatibility_map(psi_fm, &fused, cfg.k_constant)
}
