//! Experiment configuration: model dimensions, dataset parameters, training
//! schedule, and the flat `key = value` config-file format used by the CLI.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which scoring head turns `[r; q]` into a probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreHead {
    /// One-layer network followed by a sigmoid.
    Neural,
    /// `(cos(r, q) + 1) / 2`.
    Cosine,
}

/// Query-fusion strategy, both for training and at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Orthogonal-projection scoring over the sketch+gloss basis.
    Ops,
    /// Concatenate-and-project fused query.
    Concat,
    /// Union of per-modality proposal sets (evaluation only).
    Late,
    /// Sketch query alone.
    Sketch,
    /// Gloss query alone.
    Gloss,
    /// Elementwise max over several sketch feature maps.
    FeatureMultiSketch,
    /// Mean over several sketch attention maps.
    AttentionMultiSketch,
}

impl FusionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Self::Ops),
            "concat" => Ok(Self::Concat),
            "late" => Ok(Self::Late),
            "sketch" => Ok(Self::Sketch),
            "gloss" => Ok(Self::Gloss),
            "feature_multi_sketch" => Ok(Self::FeatureMultiSketch),
            "attention_multi_sketch" => Ok(Self::AttentionMultiSketch),
            other => Err(Error::Config(format!("unknown fusion kind {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ops => "ops",
            Self::Concat => "concat",
            Self::Late => "late",
            Self::Sketch => "sketch",
            Self::Gloss => "gloss",
            Self::FeatureMultiSketch => "feature_multi_sketch",
            Self::AttentionMultiSketch => "attention_multi_sketch",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Open,
    Closed,
}

impl SplitMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "open" => Ok(Self::Open),
            "closed" => Ok(Self::Closed),
            other => Err(Error::Config(format!("unknown split mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Open => "open",
            Self::Closed => "closed",
        }
    }
}

/// Architecture hyperparameters shared by all encoders and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature depth of every encoder output and query vector.
    pub d: usize,
    pub image_size: usize,
    pub sketch_size: usize,
    /// Hidden channels of the three stride-2 backbone blocks.
    pub image_channels: [usize; 3],
    pub sketch_channels: [usize; 3],
    pub rpn_channels: usize,
    pub roi_mid_channels: usize,
    pub roi_size: usize,
    /// Total spatial stride of the backbones (three stride-2 blocks).
    pub stride: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Attention scaling constant of the compatibility scores.
    pub k_constant: f64,
    /// Ridge added to the basis Gram matrix before inversion.
    pub ridge: f64,
    /// Unit-normalize basis columns before building the projection (ablation).
    pub normalize_basis: bool,
    pub score_head: ScoreHead,
    /// Include the category-name query as a third basis vector.
    pub use_class_query: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            image_size: 128,
            sketch_size: 64,
            image_channels: [8, 16, 32],
            sketch_channels: [8, 16, 32],
            rpn_channels: 32,
            roi_mid_channels: 32,
            roi_size: 7,
            stride: 8,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            k_constant: 256.0,
            ridge: 1e-6,
            normalize_basis: false,
            score_head: ScoreHead::Neural,
            use_class_query: false,
        }
    }
}

impl ModelConfig {
    /// A deliberately tiny variant for finite-difference tests.
    pub fn tiny() -> Self {
        Self {
            d: 4,
            image_size: 24,
            sketch_size: 24,
            image_channels: [3, 3, 4],
            sketch_channels: [3, 3, 4],
            rpn_channels: 4,
            roi_mid_channels: 4,
            roi_size: 5,
            ..Self::default()
        }
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if self.image_size % self.stride != 0 || self.sketch_size % self.stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} and sketch_size {} must be divisible by stride {}",
                self.image_size, self.sketch_size, self.stride
            )));
        }
        if self.k_constant <= 0.0 {
            return Err(Error::Config(format!(
                "attention constant K must be positive, got {}",
                self.k_constant
            )));
        }
        if self.ridge < 0.0 {
            return Err(Error::Config("ridge must be non-negative".into()));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::Config("anchor scales/ratios must be nonempty".into()));
        }
        if self.stride != 8 {
            return Err(Error::Config(
                "stride is fixed at 8 by the three stride-2 backbone blocks".into(),
            ));
        }
        Ok(())
    }
}

/// Synthetic-dataset parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub categories: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub sketches_per_category: usize,
    /// Hand-drawing jitter in [0,1].
    pub jitter: f64,
    /// Probability that a scene deliberately contains a confusable pair
    /// (same shape in another color, or same color on another shape).
    pub confusion_rate: f64,
    pub unseen_fraction: f64,
    pub split_mode: SplitMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: 16,
            train_scenes: 500,
            test_scenes: 150,
            sketches_per_category: 12,
            jitter: 0.3,
            confusion_rate: 0.5,
            unseen_fraction: 0.25,
            split_mode: SplitMode::Open,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.categories < 8 {
            return Err(Error::Config(format!(
                "at least 8 categories required, got {}",
                self.categories
            )));
        }
        if self.categories > 16 {
            return Err(Error::Config(
                "at most 16 procedural categories are defined".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::Config("jitter must be in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.confusion_rate) {
            return Err(Error::Config("confusion_rate must be in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) {
            return Err(Error::Config("unseen_fraction must be in [0,1)".into()));
        }
        if self.split_mode == SplitMode::Open {
            let unseen = (self.unseen_fraction * self.categories as f64).round() as usize;
            if unseen == 0 {
                return Err(Error::Config(
                    "open split requires a nonempty unseen set".into(),
                ));
            }
            if unseen >= self.categories {
                return Err(Error::Config("unseen fraction leaves no seen categories".into()));
            }
        }
        if self.sketches_per_category == 0 || self.train_scenes == 0 {
            return Err(Error::Config("scene and sketch counts must be positive".into()));
        }
        Ok(())
    }
}

/// Optimization schedule (SGD with momentum, stepwise decay, two stages).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    /// Decay is applied every this many epochs within a stage.
    pub decay_interval: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub m_plus: f64,
    pub m_minus: f64,
    /// Proposals kept by NMS during training.
    pub top_n_train: usize,
    /// Region-of-interest count fed to the scoring loss per sample.
    pub roi_batch: usize,
    /// Label stage-2 RPN anchors against query-class boxes only (stage 1 is
    /// always class-agnostic: without attention the labels would contradict).
    pub query_conditioned_rpn: bool,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            decay_factor: 0.1,
            decay_interval: 4,
            epochs_stage1: 10,
            epochs_stage2: 10,
            batch_size: 8,
            m_plus: 0.3,
            m_minus: 0.7,
            top_n_train: 100,
            roi_batch: 16,
            query_conditioned_rpn: true,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.momentum < 0.0 || self.momentum >= 1.0 {
            return Err(Error::Config("lr must be positive, momentum in [0,1)".into()));
        }
        if self.decay_factor <= 0.0 || self.decay_factor > 1.0 {
            return Err(Error::Config("decay_factor must be in (0,1]".into()));
        }
        if self.decay_interval == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_interval and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.m_plus) || !(0.0..1.0).contains(&self.m_minus) {
            return Err(Error::Config("margins must lie in [0,1)".into()));
        }
        if self.top_n_train == 0 || self.roi_batch == 0 {
            return Err(Error::Config("top_n_train and roi_batch must be positive".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative (0 disables)".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch_in_stage: usize) -> f64 {
        self.lr * self.decay_factor.powi((epoch_in_stage / self.decay_interval) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Proposals kept by NMS (and scored) at evaluation time.
    pub top_n: usize,
    /// Proposal budget of the recall ablation.
    pub recall_budget: usize,
    /// Recall IoU threshold.
    pub recall_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_n: 50,
            recall_budget: 100,
            recall_iou: 0.5,
        }
    }
}

/// Everything a run needs; the unit serialized into checkpoints and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub fusion: FusionKindDefault,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Newtype so `ExperimentConfig::default()` picks OPS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionKindDefault(pub FusionKind);

impl Default for FusionKindDefault {
    fn default() -> Self {
        FusionKindDefault(FusionKind::Ops)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.eval.top_n == 0 || self.eval.recall_budget == 0 {
            return Err(Error::Config("eval.top_n and eval.recall_budget must be positive".into()));
        }
        if matches!(
            self.fusion.0,
            FusionKind::Late | FusionKind::FeatureMultiSketch | FusionKind::AttentionMultiSketch
        ) {
            return Err(Error::Config(format!(
                "fusion kind {:?} is evaluation-only and cannot be trained",
                self.fusion.0.as_str()
            )));
        }
        Ok(())
    }

    /// FNV-1a hash of the canonical JSON encoding; used to pair checkpoints
    /// with the config that produced them.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Parses the flat `key = value` config format. Unknown keys are errors.
    /// `seed_override` (the `MMLOC_SEED` environment variable in the CLI)
    /// wins over the file's seed.
    pub fn from_str_with_override(text: &str, seed_override: Option<&str>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("duplicate key {key:?}")));
            }
            cfg.apply_kv(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        if let Some(seed) = seed_override {
            cfg.seed = seed
                .parse()
                .map_err(|_| Error::Config(format!("MMLOC_SEED must be an integer, got {seed:?}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path, seed_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_with_override(&text, seed_override)
    }

    fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
        }
        fn boolean(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("invalid bool {v:?} for {key}"))),
            }
        }
        fn list(key: &str, v: &str) -> Result<Vec<f64>> {
            v.split(',')
                .map(|p| num::<f64>(key, p.trim()))
                .collect::<Result<Vec<_>>>()
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "fusion.kind" => self.fusion = FusionKindDefault(FusionKind::parse(value)?),
            "model.d" => self.model.d = num(key, value)?,
            "model.image_size" => self.model.image_size = num(key, value)?,
            "model.sketch_size" => self.model.sketch_size = num(key, value)?,
            "model.rpn_channels" => self.model.rpn_channels = num(key, value)?,
            "model.roi_mid_channels" => self.model.roi_mid_channels = num(key, value)?,
            "model.k_constant" => self.model.k_constant = num(key, value)?,
            "model.ridge" => self.model.ridge = num(key, value)?,
            "model.normalize_basis" => self.model.normalize_basis = boolean(key, value)?,
            "model.use_class_query" => self.model.use_class_query = boolean(key, value)?,
            "model.score_head" => {
                self.model.score_head = match value {
                    "neural" => ScoreHead::Neural,
                    "cosine" => ScoreHead::Cosine,
                    _ => return Err(Error::Config(format!("unknown score head {value:?}"))),
                }
            }
            "model.anchor_scales" => self.model.anchor_scales = list(key, value)?,
            "model.anchor_ratios" => self.model.anchor_ratios = list(key, value)?,
            "data.categories" => self.data.categories = num(key, value)?,
            "data.train_scenes" => self.data.train_scenes = num(key, value)?,
            "data.test_scenes" => self.data.test_scenes = num(key, value)?,
            "data.sketches_per_category" => self.data.sketches_per_category = num(key, value)?,
            "data.jitter" => self.data.jitter = num(key, value)?,
            "data.confusion_rate" => self.data.confusion_rate = num(key, value)?,
            "data.unseen_fraction" => self.data.unseen_fraction = num(key, value)?,
            "split.mode" => self.data.split_mode = SplitMode::parse(value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.momentum" => self.train.momentum = num(key, value)?,
            "train.decay_factor" => self.train.decay_factor = num(key, value)?,
            "train.decay_interval" => self.train.decay_interval = num(key, value)?,
            "train.epochs_stage1" => self.train.epochs_stage1 = num(key, value)?,
            "train.epochs_stage2" => self.train.epochs_stage2 = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.m_plus" => self.train.m_plus = num(key, value)?,
            "train.m_minus" => self.train.m_minus = num(key, value)?,
            "train.top_n" => self.train.top_n_train = num(key, value)?,
            "train.roi_batch" => self.train.roi_batch = num(key, value)?,
            "train.query_conditioned_rpn" => {
                self.train.query_conditioned_rpn = boolean(key, value)?
            }
            "train.grad_clip" => self.train.grad_clip = num(key, value)?,
            "eval.top_n" => self.eval.top_n = num(key, value)?,
            "eval.recall_budget" => self.eval.recall_budget = num(key, value)?,
            "eval.recall_iou" => self.eval.recall_iou = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_config() {
        let text = "
            # comment
            seed = 7
            fusion.kind = concat
            model.k_constant = 200   # inline comment
            train.m_plus = 0.25
            split.mode = closed
            data.unseen_fraction = 0.0
        ";
        let cfg = ExperimentConfig::from_str_with_override(text, None).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.fusion.0, FusionKind::Concat);
        assert_eq!(cfg.model.k_constant, 200.0);
        assert_eq!(cfg.train.m_plus, 0.25);
        assert_eq!(cfg.data.split_mode, SplitMode::Closed);
    }

    #[test]
    fn env_seed_overrides_file_seed() {
        let cfg = ExperimentConfig::from_str_with_override("seed = 7", Some("99")).unwrap();
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_str_with_override("bogus.key = 1", None).is_err());
        assert!(ExperimentConfig::from_str_with_override("train.lr = fast", None).is_err());
        assert!(ExperimentConfig::from_str_with_override("seed = 1\nseed = 2", None).is_err());
        // open split with unseen_fraction 0 is invalid
        assert!(ExperimentConfig::from_str_with_override("data.unseen_fraction = 0.0", None).is_err());
        // evaluation-only fusion kinds cannot be trained
        assert!(ExperimentConfig::from_str_with_override("fusion.kind = late", None).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn lr_schedule_steps_down() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at_epoch(0), 0.01);
        assert_eq!(t.lr_at_epoch(3), 0.01);
        assert!((t.lr_at_epoch(4) - 0.001).abs() < 1e-12);
        assert!((t.lr_at_epoch(8) - 0.0001).abs() < 1e-12);
    }
}
