//! The run-configuration file: one TOML document with `[data]`, `[model]`,
//! `[loss]`, `[train]` and `[eval]` sections. Unknown keys are errors;
//! missing keys take documented defaults. Parsing then re-serializing a
//! resolved config is idempotent, and every run embeds its resolved config
//! in its outputs.

use serde::{Deserialize, Serialize};

use crate::data::{default_categories, CategorySpec, SceneSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::model::{HeadSource, Level, ModelConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub image_size: usize,
    pub seed: u64,
    pub count_train: usize,
    pub count_eval: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub background_base: f64,
    pub noise_amp: f64,
    /// Omitted -> three default categories scaled to the image size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<CategorySpec>>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            image_size: 128,
            seed: 7,
            count_train: 1000,
            count_eval: 200,
            objects_min: 1,
            objects_max: 4,
            background_base: 0.35,
            noise_amp: 0.12,
            categories: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub l: usize,
    pub decompose_levels: Vec<Level>,
    pub ratio: f64,
    pub pool_s: usize,
    pub heads: usize,
    pub cbr_kernel: usize,
    pub head_source: HeadSource,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            l: 32,
            decompose_levels: vec![Level::P3, Level::P4],
            ratio: 0.5,
            pool_s: 4,
            heads: 2,
            cbr_kernel: 1,
            head_source: HeadSource::Obj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub symmetric_al: bool,
    pub abs_ds: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { tau: 0.07, alpha: 1.0, beta: 1.0, symmetric_al: false, abs_ds: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate every N epochs; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { epochs: 60, batch_size: 16, lr: 0.01, momentum: 0.9, seed: 42, eval_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub batch_size: usize,
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub retrieval_batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { batch_size: 16, score_thresh: 0.05, nms_iou: 0.5, retrieval_batch: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path_for_errors: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::parse(path_for_errors, e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Fill derived defaults (category table scaled to the image size).
    pub fn resolve(&mut self) {
        if self.data.categories.is_none() {
            self.data.categories = Some(default_categories(self.data.image_size));
        }
    }

    /// Canonical serialized form of the resolved config.
    pub fn to_canonical_toml(&self) -> String {
        let mut resolved = self.clone();
        resolved.resolve();
        toml::to_string(&resolved).expect("config serializes")
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let categories = self
            .data
            .categories
            .clone()
            .unwrap_or_else(|| default_categories(self.data.image_size));
        SceneSpec {
            image_size: self.data.image_size,
            categories,
            objects_min: self.data.objects_min,
            objects_max: self.data.objects_max,
            background_base: self.data.background_base,
            noise_amp: self.data.noise_amp,
            seed: self.data.seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.data.categories.as_ref().map(|c| c.len()).unwrap_or(3)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            l: self.model.l,
            decompose_levels: self.model.decompose_levels.clone(),
            ratio: self.model.ratio,
            pool_s: self.model.pool_s,
            heads: self.model.heads,
            num_classes: self.num_classes(),
            image_size: self.data.image_size,
            tau: self.loss.tau,
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            cbr_kernel: self.model.cbr_kernel,
            head_source: self.model.head_source,
            symmetric_al: self.loss.symmetric_al,
            abs_ds: self.loss.abs_ds,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            momentum: self.train.momentum,
            seed: self.train.seed,
            eval_every: self.train.eval_every,
            model: self.model_config(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            batch_size: self.eval.batch_size,
            score_thresh: self.eval.score_thresh,
            nms_iou: self.eval.nms_iou,
            retrieval_batch: self.eval.retrieval_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene_spec().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.eval.nms_iou <= 0.0 || self.eval.nms_iou >= 1.0 {
            return Err(Error::config(format!("eval.nms_iou {} outside (0, 1)", self.eval.nms_iou)));
        }
        if self.eval.batch_size == 0 || self.eval.retrieval_batch == 0 {
            return Err(Error::config("eval batch sizes must be positive".to_string()));
        }
        Ok(())
    }
}
