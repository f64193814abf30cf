//! Run configuration, training, evaluation, ablations and diagnostics.

mod ablate;
mod eval;
mod optim;
mod tools;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::geometry::ShiftConfig;
use crate::hqm::{AmmConfig, HardSettings, HqmStrategy, StrategyKind};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::scenes::SceneSpec;

pub use ablate::{ablate, AblationRow, AblationSummary, AblationTable};
pub use eval::{
    average_precision, detections_from, evaluate, evaluate_detections, predict_scene, Detection, EvalReport,
};
pub use optim::AdamW;
pub use tools::{dump_attention, grad_check, GradCheckRow, GradCheckSummary, GRAD_CHECK_STRATEGIES};
pub use train::{train, train_on, Benchmark, EpochMetrics, StepStats, TrainSummary, Trainer, METRICS_HEADER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    /// Seed of the benchmark itself; the training split starts here and the
    /// validation split at `seed + VAL_SEED_OFFSET`.
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

pub const VAL_SEED_OFFSET: u64 = 1 << 32;

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::default(),
            seed: 2024,
            train_scenes: 512,
            val_scenes: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the epochs after which the learning rate is multiplied
    /// by `decay_factor`.
    pub decay_at: f64,
    pub decay_factor: f64,
    /// Rescale the full gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 40,
            batch_size: 8,
            decay_at: 0.6,
            decay_factor: 0.1,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    /// First zero-based epoch that runs at the decayed rate.
    pub fn decay_epoch(&self) -> usize {
        (self.epochs as f64 * self.decay_at).round() as usize
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.decay_epoch() {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Both boxes need at least this IoU for a true positive.
    pub iou_threshold: f64,
    /// Triplets scoring at or below this are discarded.
    pub score_threshold: f64,
    /// Validation mAP that counts as converged in ablation tables.
    pub map_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.0,
            map_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    /// Strategy labels such as `ajl` or `amm_only+no_topk`.
    pub strategies: Vec<String>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            strategies: ["baseline", "gbs_only", "amm_only", "ajl"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Seeds parameter init, batch order and hard-branch draws.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub strategy: HqmStrategy,
    pub amm: AmmConfig,
    pub shift: ShiftConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            strategy: HqmStrategy::default(),
            amm: AmmConfig::default(),
            shift: ShiftConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        let scene = SceneSpec {
            num_classes: 3,
            num_verbs: 3,
            min_pairs: 1,
            max_pairs: 2,
            grid_h: 6,
            grid_w: 6,
            ..SceneSpec::default()
        };
        Self {
            data: DataConfig {
                scene,
                seed: 7,
                train_scenes: 8,
                val_scenes: 4,
            },
            model: ModelConfig {
                dim: 8,
                heads: 2,
                layers: 2,
                num_queries: 4,
                ffn_dim: 16,
                num_classes: 3,
                num_verbs: 3,
            },
            amm: AmmConfig {
                k: 8,
                ..AmmConfig::default()
            },
            optim: OptimConfig {
                epochs: 2,
                batch_size: 4,
                ..OptimConfig::default()
            },
            out_dir: PathBuf::from("runs/tiny"),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| config_err(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = &self.data.scene;
        spec.validate()?;
        self.model.validate()?;
        if self.model.num_classes != spec.num_classes || self.model.num_verbs != spec.num_verbs {
            return Err(config_err(format!(
                "model expects {} classes and {} verbs, data has {} and {}",
                self.model.num_classes, self.model.num_verbs, spec.num_classes, spec.num_verbs
            )));
        }
        if spec.max_pairs > self.model.num_queries {
            return Err(config_err("scenes may hold more pairs than there are queries"));
        }
        self.amm.validate(spec.grid_h * spec.grid_w)?;
        self.shift.validate()?;
        self.strategy.validate()?;
        self.loss.validate()?;
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return Err(config_err("epochs and batch size must be at least 1"));
        }
        let positive = [o.lr, o.eps];
        let unit = [o.beta1, o.beta2, o.decay_at, o.decay_factor];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || unit.iter().any(|v| !(0.0..=1.0).contains(v))
            || !(o.weight_decay.is_finite() && o.weight_decay >= 0.0)
            || o.beta1 == 1.0
            || o.beta2 == 1.0
        {
            return Err(config_err("optimizer settings out of range"));
        }
        if let Some(c) = o.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(config_err("gradient clip must be positive"));
            }
        }
        if self.data.train_scenes == 0 || self.data.val_scenes == 0 {
            return Err(config_err("both splits need at least one scene"));
        }
        let e = &self.eval;
        if !(0.0..=1.0).contains(&e.iou_threshold) || !e.score_threshold.is_finite() {
            return Err(config_err("evaluation thresholds out of range"));
        }
        Ok(())
    }

    pub fn hard_settings(&self) -> HardSettings {
        HardSettings {
            strategy: self.strategy.clone(),
            amm: self.amm.clone(),
            shift: self.shift,
        }
    }

    /// Copy with another strategy and seed.
    pub fn variant(&self, strategy: &HqmStrategy, seed: u64) -> Self {
        Self {
            strategy: strategy.clone(),
            seed,
            ..self.clone()
        }
    }

    pub fn ablation_strategies(&self) -> Result<Vec<HqmStrategy>> {
        if self.ablation.strategies.is_empty() {
            return Err(config_err("ablation needs at least one strategy"));
        }
        self.ablation.strategies.iter().map(|s| s.parse()).collect()
    }
}

impl StrategyKind {
    pub fn as_strategy(self) -> HqmStrategy {
        HqmStrategy::plain(self)
    }
}
