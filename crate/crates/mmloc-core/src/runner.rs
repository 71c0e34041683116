//! Experiment orchestration: the two-stage training loop (localization first,
//! attention added second), checkpoint save/load, the evaluation protocol
//! over test scenes x query categories, and the K/m/fusion sweep.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FusionKind, FusionKindDefault, SplitMode};
use crate::data::Dataset;
use crate::encoders::GlossTokens;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, GroundTruth, Prediction};
use crate::fusion::{self, FusionStrategy};
use crate::ops_scoring::ScoredProposal;
use crate::params::{self, GradAccumulator, SgdOptimizer};
use crate::pipeline::{self, Model, QueryEncoding, TrainSample};
use crate::proposals::BBox;

pub const CHECKPOINT_KIND: &str = "mmloc-checkpoint";

/// Result of a training run.
pub struct TrainOutcome {
    pub model: Model,
    /// Mean total loss per epoch, stages concatenated.
    pub epoch_losses: Vec<f64>,
    pub epochs_run: usize,
}

/// Progress callback events.
#[derive(Clone, Copy, Debug)]
pub struct EpochReport {
    pub stage: usize,
    pub epoch_in_stage: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

/// Trains the model on the dataset per the config schedule. Stage 1 runs the
/// localization model with attention bypassed; stage 2 enables attention and
/// continues with a reset optimizer.
pub fn train(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, dataset, |_| {})
}

pub fn train_with(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(EpochReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Data("training requires a nonempty train split".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init_seed: u64 = master.gen();
    let shuffle_seed: u64 = master.gen();
    let mut model = Model::init(&cfg.model, dataset.vocab_size(), init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let anchors = model.anchors();
    let variant = cfg.fusion.0;
    let mut epoch_losses = Vec::new();
    let mut epochs_run = 0usize;

    for (stage, (epochs, attention_on)) in [
        (cfg.train.epochs_stage1, false),
        (cfg.train.epochs_stage2, true),
    ]
    .iter()
    .enumerate()
    {
        // stage 2 resets the optimizer state and the decay schedule
        let mut optimizer = SgdOptimizer::new(cfg.train.lr, cfg.train.momentum);
        for epoch in 0..*epochs {
            let lr = cfg.train.lr_at_epoch(epoch);
            optimizer.lr = lr;
            let mut order: Vec<usize> = (0..dataset.train.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            let mut seen = 0usize;
            for (batch_id, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
                let mut acc = GradAccumulator::new();
                let mut batch_loss = 0.0;
                for &scene_idx in chunk {
                    let scene = &dataset.train[scene_idx];
                    let cat = scene.instances[rng.gen_range(0..scene.instances.len())].1;
                    let sketch_idx = rng.gen_range(0..dataset.sketches[cat].len());
                    let query_boxes: Vec<BBox> = scene
                        .instances
                        .iter()
                        .filter(|(_, c)| *c == cat)
                        .map(|(b, _)| *b)
                        .collect();
                    let all_boxes: Vec<BBox> = scene.instances.iter().map(|(b, _)| *b).collect();
                    let class_tokens = dataset.gloss_table.name_tokens(&dataset.categories[cat].name)?;
                    let sample = TrainSample {
                        image: &scene.image,
                        sketch: &dataset.sketches[cat][sketch_idx],
                        gloss: &dataset.categories[cat].gloss,
                        class_tokens: cfg.model.use_class_query.then_some(&class_tokens),
                        query_boxes,
                        all_boxes,
                    };
                    let (breakdown, grads) = pipeline::training_step(
                        &model,
                        &sample,
                        variant,
                        *attention_on,
                        &cfg.train,
                        &anchors,
                    )?;
                    if !breakdown.total.is_finite() {
                        return Err(Error::Divergence {
                            epoch: epochs_run,
                            batch: batch_id,
                            loss: breakdown.total,
                        });
                    }
                    batch_loss += breakdown.total;
                    acc.add(grads);
                }
                let mut grads = acc.mean();
                params::clip_grad_norm(&mut grads, cfg.train.grad_clip);
                optimizer.step(&mut model.params, &grads);
                epoch_loss += batch_loss;
                seen += chunk.len();
            }
            let mean_loss = epoch_loss / seen.max(1) as f64;
            epoch_losses.push(mean_loss);
            epochs_run += 1;
            on_epoch(EpochReport {
                stage: stage + 1,
                epoch_in_stage: epoch,
                mean_loss,
                lr,
            });
        }
    }

    Ok(TrainOutcome { model, epoch_losses, epochs_run })
}

/// Serialized training state: parameters plus the config and RNG position.
pub struct Checkpoint {
    pub model: Model,
    pub config: ExperimentConfig,
    pub epoch: usize,
    pub data_dir: Option<PathBuf>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let meta = serde_json::json!({
        "kind": CHECKPOINT_KIND,
        "d": ckpt.model.cfg.d,
        "strides": [ckpt.model.cfg.stride],
        "vocab_size": ckpt.model.vocab_size,
        "seed": ckpt.config.seed,
        "config": serde_json::to_value(&ckpt.config)?,
        "config_hash": ckpt.config.hash(),
        "epoch": ckpt.epoch,
        "data_dir": ckpt.data_dir.as_ref().map(|p| p.display().to_string()),
    });
    params::save_archive(path, &ckpt.model.params, meta)
}

/// Loads a checkpoint; unless `force`, the stored config hash must equal the
/// hash of the stored config (guarding against tampered or mixed files).
pub fn load_checkpoint(path: &Path, force: bool) -> Result<Checkpoint> {
    let (params, header) = params::load_archive(path)?;
    let meta = &header.meta;
    if meta["kind"] != CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let config: ExperimentConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;
    let stored_hash = meta["config_hash"].as_str().unwrap_or_default();
    if !force && stored_hash != config.hash() {
        return Err(Error::Checkpoint(
            "config hash mismatch (pass force to override)".into(),
        ));
    }
    let vocab_size = meta["vocab_size"].as_u64().unwrap_or(0) as usize;
    let model = Model {
        params,
        cfg: config.model.clone(),
        vocab_size,
    };
    let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
    let data_dir = meta["data_dir"].as_str().map(PathBuf::from);
    Ok(Checkpoint { model, config, epoch, data_dir })
}

/// Evaluation options beyond the config defaults.
#[derive(Clone, Copy, Debug)]
pub struct EvalOptions {
    pub split: SplitMode,
    pub fusion: FusionKind,
    /// Force the attention pass-through (reproduces stage-1 behavior).
    pub attention_bypass: bool,
}

fn query_encoding_for(
    model: &Model,
    dataset: &Dataset,
    cat: usize,
    sketch_idx: usize,
    fusion_kind: FusionKind,
) -> Result<QueryEncoding> {
    let cat_spec = &dataset.categories[cat];
    let class_tokens: GlossTokens = dataset.gloss_table.name_tokens(&cat_spec.name)?;
    let strategy = FusionStrategy::new(effective_encoding_kind(fusion_kind));
    pipeline::encode_query(
        model,
        &[&dataset.sketches[cat][sketch_idx]],
        Some(&cat_spec.gloss),
        model.cfg.use_class_query.then_some(&class_tokens),
        strategy,
    )
}

/// Late fusion needs both modalities encoded; single-modality variants only
/// need their own, everything else needs both.
fn effective_encoding_kind(kind: FusionKind) -> FusionKind {
    match kind {
        FusionKind::Late => FusionKind::Ops,
        other => other,
    }
}

/// Runs the full protocol: every test scene is queried with every category
/// of the evaluation set (unseen only in the open split, all categories in
/// the closed split).
pub fn evaluate(
    model: &Model,
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    opts: EvalOptions,
) -> Result<EvalReport> {
    match opts.split {
        SplitMode::Open => {
            if dataset.split.unseen.is_empty() {
                return Err(Error::Eval(
                    "open-split evaluation requires a nonempty unseen set".into(),
                ));
            }
            if cfg.data.split_mode != SplitMode::Open {
                return Err(Error::Eval(
                    "checkpoint was trained on a closed split; open evaluation is inconsistent".into(),
                ));
            }
        }
        SplitMode::Closed => {
            if cfg.data.split_mode != SplitMode::Closed {
                return Err(Error::Eval(
                    "checkpoint was trained on an open split; closed evaluation is inconsistent".into(),
                ));
            }
        }
    }
    let query_cats: Vec<usize> = match opts.split {
        SplitMode::Open => dataset.split.unseen.clone(),
        SplitMode::Closed => (0..dataset.categories.len()).collect(),
    };
    let attention_on = !opts.attention_bypass;
    let top_n_decode = cfg.eval.top_n.max(cfg.eval.recall_budget);

    let mut preds_by_cat: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
    let mut gts_by_cat: BTreeMap<usize, Vec<GroundTruth>> = BTreeMap::new();
    let mut recall_covered = 0usize;
    let mut recall_total = 0usize;
    let mut query_cache: BTreeMap<(usize, usize), QueryEncoding> = BTreeMap::new();

    for scene in &dataset.test {
        let enc = pipeline::encode_scene(model, &scene.image, attention_on)?;
        for &cat in &query_cats {
            let sketch_idx = dataset.eval_sketch_index(scene.scene_id, cat);
            if !query_cache.contains_key(&(cat, sketch_idx)) {
                query_cache.insert(
                    (cat, sketch_idx),
                    query_encoding_for(model, dataset, cat, sketch_idx, opts.fusion)?,
                );
            }
            let query = &query_cache[&(cat, sketch_idx)];
            let scored: Vec<ScoredProposal>;
            let raw_proposals: Vec<BBox>;
            match opts.fusion {
                FusionKind::Late => {
                    let s_out = pipeline::localize_scene(
                        model, &enc, query, FusionKind::Sketch, attention_on, top_n_decode, cfg.eval.top_n,
                    )?;
                    let g_out = pipeline::localize_scene(
                        model, &enc, query, FusionKind::Gloss, attention_on, top_n_decode, cfg.eval.top_n,
                    )?;
                    raw_proposals = s_out.proposals.iter().map(|p| p.bbox).collect();
                    scored = fusion::late_fusion(&[s_out.scored, g_out.scored], cfg.eval.top_n)?;
                }
                kind => {
                    let out = pipeline::localize_scene(
                        model, &enc, query, kind, attention_on, top_n_decode, cfg.eval.top_n,
                    )?;
                    raw_proposals = out.proposals.iter().map(|p| p.bbox).collect();
                    scored = out.scored;
                }
            }
            for sp in &scored {
                preds_by_cat.entry(cat).or_default().push(Prediction {
                    scene_id: scene.scene_id,
                    category: cat,
                    bbox: sp.proposal.bbox,
                    score: sp.a,
                });
            }
            let cat_gts: Vec<BBox> = scene
                .instances
                .iter()
                .filter(|(_, c)| *c == cat)
                .map(|(b, _)| *b)
                .collect();
            for b in &cat_gts {
                gts_by_cat.entry(cat).or_default().push(GroundTruth {
                    scene_id: scene.scene_id,
                    bbox: *b,
                });
            }
            if !cat_gts.is_empty() {
                recall_total += cat_gts.len();
                for gt in &cat_gts {
                    if raw_proposals
                        .iter()
                        .take(cfg.eval.recall_budget)
                        .any(|p| crate::proposals::iou(p, gt) >= cfg.eval.recall_iou)
                    {
                        recall_covered += 1;
                    }
                }
            }
        }
    }

    let empty_p: Vec<Prediction> = Vec::new();
    let empty_g: Vec<GroundTruth> = Vec::new();
    let mut per_category = Vec::new();
    let mut ap50_sum = 0.0;
    let mut ap50_n = 0usize;
    for &cat in &query_cats {
        let p = preds_by_cat.get(&cat).unwrap_or(&empty_p);
        let g = gts_by_cat.get(&cat).unwrap_or(&empty_g);
        let ap50 = eval::ap_at_iou(p, g, 0.5);
        let map = eval::category_map(p, g);
        if let (Some(a), Some(m)) = (ap50, map) {
            ap50_sum += a;
            ap50_n += 1;
            per_category.push(eval::CategoryReport {
                id: cat,
                name: dataset.categories[cat].name.clone(),
                ap50: a * 100.0,
                map: m * 100.0,
                gt_count: g.len(),
            });
        }
    }
    let map = eval::mean_ap(&preds_by_cat, &gts_by_cat);
    Ok(EvalReport {
        schema_version: 1,
        map_convention: "coco-0.50:0.95".into(),
        split: opts.split.as_str().into(),
        fusion: opts.fusion.as_str().into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        ap50: if ap50_n == 0 { 0.0 } else { ap50_sum / ap50_n as f64 * 100.0 },
        map: map * 100.0,
        proposal_recall: if recall_total == 0 {
            0.0
        } else {
            recall_covered as f64 / recall_total as f64
        },
        recall_budget: cfg.eval.recall_budget,
        per_category,
    })
}

/// Localizes a query category in one image using a trained model.
pub fn localize(
    model: &Model,
    dataset: &Dataset,
    image: &crate::encoders::RgbRaster,
    category_name: &str,
    fusion_kind: FusionKind,
    top_n: usize,
    sketch_idx: usize,
) -> Result<Vec<ScoredProposal>> {
    let cat = dataset.category_by_name(category_name)?.id;
    let sketch_idx = sketch_idx % dataset.sketches[cat].len();
    let enc = pipeline::encode_scene(model, image, true)?;
    let query = query_encoding_for(model, dataset, cat, sketch_idx, fusion_kind)?;
    let top_decode = top_n.max(50);
    match fusion_kind {
        FusionKind::Late => {
            let s = pipeline::localize_scene(model, &enc, &query, FusionKind::Sketch, true, top_decode, top_n)?;
            let g = pipeline::localize_scene(model, &enc, &query, FusionKind::Gloss, true, top_decode, top_n)?;
            fusion::late_fusion(&[s.scored, g.scored], top_n)
        }
        kind => {
            let out = pipeline::localize_scene(model, &enc, &query, kind, true, top_decode, top_n)?;
            Ok(out.scored.into_iter().take(top_n).collect())
        }
    }
}

/// One cell of a sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub fusion: String,
    pub status: String,
    pub ap50: Option<f64>,
    pub map: Option<f64>,
    pub proposal_recall: Option<f64>,
    pub error: Option<String>,
}

/// Sweep grid: each listed value is run with every other parameter at its
/// config default (the Table-6 protocol), one trained+evaluated run per cell.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k_values: Vec<f64>,
    /// A single margin `m` maps to `m_plus = m`, `m_minus = 1 - m`.
    pub m_values: Vec<f64>,
    pub fusion_values: Vec<String>,
}

impl SweepGrid {
    /// Parses `"K=200,256,312;m=0.25,0.3,0.35;fusion=ops,concat"`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut grid = SweepGrid::default();
        for part in text.split(';') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (key, values) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad grid component {part:?}")))?;
            match key.trim() {
                "K" | "k" => {
                    grid.k_values = values
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad K value {v:?}"))))
                        .collect::<Result<_>>()?;
                }
                "m" => {
                    grid.m_values = values
                        .split(',')
                        .map(|v| v.trim().parse().map_err(|_| Error::Config(format!("bad m value {v:?}"))))
                        .collect::<Result<_>>()?;
                }
                "fusion" => {
                    grid.fusion_values = values.split(',').map(|v| v.trim().to_string()).collect();
                }
                other => return Err(Error::Config(format!("unknown sweep parameter {other:?}"))),
            }
        }
        Ok(grid)
    }

    pub fn cells(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for k in &self.k_values {
            out.push(("K".to_string(), format!("{k}")));
        }
        for m in &self.m_values {
            out.push(("m".to_string(), format!("{m}")));
        }
        for f in &self.fusion_values {
            out.push(("fusion".to_string(), f.clone()));
        }
        out
    }
}

/// Trains and evaluates one run per grid cell; per-cell errors are recorded
/// in the row and the sweep continues.
pub fn sweep(base: &ExperimentConfig, dataset: &Dataset, grid: &SweepGrid) -> Vec<SweepRow> {
    let mut rows = Vec::new();
    for (param, value) in grid.cells() {
        let mut cfg = base.clone();
        let mut fusion = cfg.fusion.0;
        let apply: Result<()> = (|| {
            match param.as_str() {
                "K" => cfg.model.k_constant = value.parse().map_err(|_| Error::Config("bad K".into()))?,
                "m" => {
                    let m: f64 = value.parse().map_err(|_| Error::Config("bad m".into()))?;
                    cfg.train.m_plus = m;
                    cfg.train.m_minus = 1.0 - m;
                }
                "fusion" => {
                    fusion = FusionKind::parse(&value)?;
                    cfg.fusion = FusionKindDefault(fusion);
                }
                _ => return Err(Error::Config(format!("unknown sweep parameter {param:?}"))),
            }
            Ok(())
        })();
        let outcome = apply.and_then(|()| {
            let trained = train(&cfg, dataset)?;
            evaluate(
                &trained.model,
                &cfg,
                dataset,
                EvalOptions {
                    split: cfg.data.split_mode,
                    fusion,
                    attention_bypass: false,
                },
            )
        });
        rows.push(match outcome {
            Ok(report) => SweepRow {
                parameter: param,
                value,
                fusion: fusion.as_str().to_string(),
                status: "ok".into(),
                ap50: Some(report.ap50),
                map: Some(report.map),
                proposal_recall: Some(report.proposal_recall),
                error: None,
            },
            Err(e) => SweepRow {
                parameter: param,
                value,
                fusion: fusion.as_str().to_string(),
                status: "error".into(),
                ap50: None,
                map: None,
                proposal_recall: None,
                error: Some(e.to_string()),
            },
        });
    }
    rows
}

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("parameter,value,fusion,status,ap50,map,proposal_recall,error\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.parameter,
            r.value,
            r.fusion,
            r.status,
            r.ap50.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.map.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.proposal_recall.map(|v| format!("{v:.4}")).unwrap_or_default(),
            r.error.clone().unwrap_or_default().replace(',', ";"),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataConfig, ModelConfig, TrainConfig};
    use crate::data::generate_dataset;

    /// A configuration small enough for loop-level tests.
    pub fn micro_config() -> ExperimentConfig {
        ExperimentConfig {
            seed: 11,
            fusion: FusionKindDefault(FusionKind::Ops),
            model: ModelConfig {
                image_size: 64,
                sketch_size: 32,
                ..ModelConfig::tiny()
            },
            data: DataConfig {
                categories: 16,
                train_scenes: 6,
                test_scenes: 3,
                sketches_per_category: 2,
                ..DataConfig::default()
            },
            train: TrainConfig {
                epochs_stage1: 1,
                epochs_stage2: 1,
                batch_size: 3,
                top_n_train: 12,
                roi_batch: 6,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    fn micro_dataset(cfg: &ExperimentConfig) -> Dataset {
        generate_dataset(&cfg.data, cfg.model.image_size, cfg.model.sketch_size, cfg.seed).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let mut cfg = micro_config();
        cfg.train.epochs_stage1 = 0;
        cfg.train.epochs_stage2 = 0;
        let ds = micro_dataset(&cfg);
        let out = train(&cfg, &ds).unwrap();
        let fresh = {
            let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
            let init_seed: u64 = master.gen();
            Model::init(&cfg.model, ds.vocab_size(), init_seed).unwrap()
        };
        assert!(out.model.params.bitwise_eq(&fresh.params));
        assert!(out.epoch_losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_for_a_fixed_seed() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert!(a.model.params.bitwise_eq(&b.model.params));
    }

    #[test]
    fn evaluation_is_deterministic_and_serializable() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let out = train(&cfg, &ds).unwrap();
        let opts = EvalOptions {
            split: SplitMode::Open,
            fusion: FusionKind::Ops,
            attention_bypass: false,
        };
        let r1 = evaluate(&out.model, &cfg, &ds, opts).unwrap();
        let r2 = evaluate(&out.model, &cfg, &ds, opts).unwrap();
        assert_eq!(r1.to_json(), r2.to_json());
        assert!(r1.ap50 >= 0.0 && r1.ap50 <= 100.0);
        assert!(r1.map >= 0.0 && r1.map <= 100.0);
    }

    #[test]
    fn evaluate_rejects_inconsistent_split_requests() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let out = train(&cfg, &ds).unwrap();
        // closed eval on an open-trained checkpoint
        let err = evaluate(
            &out.model,
            &cfg,
            &ds,
            EvalOptions { split: SplitMode::Closed, fusion: FusionKind::Ops, attention_bypass: false },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Eval(_)));
        // open eval with an empty unseen set
        let mut closed_cfg = cfg.clone();
        closed_cfg.data.split_mode = SplitMode::Closed;
        closed_cfg.data.unseen_fraction = 0.0;
        let closed_ds = micro_dataset(&closed_cfg);
        let closed_out = train(&closed_cfg, &closed_ds).unwrap();
        let err = evaluate(
            &closed_out.model,
            &closed_cfg,
            &closed_ds,
            EvalOptions { split: SplitMode::Open, fusion: FusionKind::Ops, attention_bypass: false },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Eval(_)));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_the_report() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let out = train(&cfg, &ds).unwrap();
        let opts = EvalOptions {
            split: SplitMode::Open,
            fusion: FusionKind::Ops,
            attention_bypass: false,
        };
        let before = evaluate(&out.model, &cfg, &ds, opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(
            &path,
            &Checkpoint {
                model: out.model,
                config: cfg.clone(),
                epoch: 2,
                data_dir: None,
            },
        )
        .unwrap();
        let loaded = load_checkpoint(&path, false).unwrap();
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.config, cfg);
        let after = evaluate(&loaded.model, &loaded.config, &ds, opts).unwrap();
        assert_eq!(before.to_json(), after.to_json());
    }

    #[test]
    fn checkpoint_hash_mismatch_requires_force() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let out = train(&cfg, &ds).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(
            &path,
            &Checkpoint { model: out.model, config: cfg, epoch: 1, data_dir: None },
        )
        .unwrap();
        // corrupt the stored hash
        let (params, mut header) = params::load_archive(&path).unwrap();
        header.meta["config_hash"] = serde_json::json!("0000000000000000");
        params::save_archive(&path, &params, header.meta).unwrap();
        assert!(load_checkpoint(&path, false).is_err());
        assert!(load_checkpoint(&path, true).is_ok());
    }

    #[test]
    fn localize_returns_top_n_and_is_stateless() {
        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let out = train(&cfg, &ds).unwrap();
        let scene = &ds.test[0];
        let name = ds.categories[scene.instances[0].1].name.clone();
        let a = localize(&out.model, &ds, &scene.image, &name, FusionKind::Ops, 1, 0).unwrap();
        assert_eq!(a.len(), 1);
        let b = localize(&out.model, &ds, &scene.image, &name, FusionKind::Ops, 1, 0).unwrap();
        assert_eq!(a[0].proposal.bbox, b[0].proposal.bbox);
        assert_eq!(a[0].a, b[0].a);
        // two different category queries give independent result lists
        let other = ds
            .categories
            .iter()
            .find(|c| c.name != name)
            .unwrap()
            .name
            .clone();
        let c = localize(&out.model, &ds, &scene.image, &other, FusionKind::Ops, 1, 0).unwrap();
        assert_eq!(c.len(), 1);
        // unknown category errors
        assert!(matches!(
            localize(&out.model, &ds, &scene.image, "no_such_thing", FusionKind::Ops, 1, 0),
            Err(Error::UnknownCategory(_))
        ));
    }

    #[test]
    fn sweep_grid_parses_and_produces_rows() {
        let grid = SweepGrid::parse("K=200,256;m=0.3").unwrap();
        assert_eq!(grid.k_values, vec![200.0, 256.0]);
        assert_eq!(grid.m_values, vec![0.3]);
        assert_eq!(grid.cells().len(), 3);
        assert!(SweepGrid::parse("bogus=1").is_err());
        // empty grid produces an empty table
        let empty = SweepGrid::parse("").unwrap();
        assert!(empty.cells().is_empty());

        let cfg = micro_config();
        let ds = micro_dataset(&cfg);
        let rows = sweep(&cfg, &ds, &SweepGrid::parse("K=200,256").unwrap());
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert_eq!(r.status, "ok", "error: {:?}", r.error);
            assert!(r.ap50.is_some());
        }
        let csv = sweep_rows_to_csv(&rows);
        assert!(csv.lines().count() == 3);
        assert!(csv.starts_with("parameter,value,"));
    }
}
