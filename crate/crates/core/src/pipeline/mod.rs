//! End-to-end orchestration: pretraining, hard-negative harvesting,
//! finetuning, detection, evaluation and the ablation grid.

mod gradsuite;
mod model;
mod stages;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::AnchorError;
use crate::data::{DataError, SynthConfig};
use crate::eval::EvalError;
use crate::featconcat::{ConcatConfig, FeatError};
use crate::geometry::GeometryError;
use crate::net::{NetError, SgdConfig};
use crate::sampling::{SamplingError, SamplingParams};
use crate::scaling::{ScaleError, ScalePolicy};

pub use gradsuite::{gradient_suite, sample_batch, DETECTOR_SAMPLES};
pub use model::{
    BatchOutput, Detector, LossBreakdown, LossWeights, ModelConfig, RpnParams, RpnTargets, TrainBatch, Trunk,
    MAX_LOG_SCALE,
};
pub use stages::{
    continue_stage, detect_dataset, detect_image, eval_images, evaluate, false_positives_at, prepare_head,
    run_ablation, run_pipeline, stage_finetune, stage_mine, stage_pretrain, AblationFlags, AblationResult, AblationRow,
    Corpora, Dataset, DetectMode, ImageDetections, PipelineRun,
};
pub use train::{
    load_checkpoint, save_checkpoint, train_stage, Checkpoint, SavedState, StageKind, TrainLog, TrainState,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{stage}: loss became non-finite at iteration {iteration}")]
    Diverged { stage: String, iteration: usize },
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Anchor(#[from] AnchorError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Scale(#[from] ScaleError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    /// True for problems with the configuration or inputs, as opposed to
    /// failures while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            PipelineError::Config(_)
                | PipelineError::Anchor(AnchorError::InvalidConfig(_))
                | PipelineError::Scale(ScaleError::Policy(_))
                | PipelineError::Data(DataError::Config(_))
                | PipelineError::Sampling(SamplingError::Params(_))
                | PipelineError::Feat(FeatError::Config(_))
        )
    }
}

/// Hard-negative harvest thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningParams {
    /// Detections scoring above this are candidates.
    pub score: f64,
    /// Candidates overlapping every face below this are kept.
    pub iou: f64,
}

impl Default for MiningParams {
    fn default() -> Self {
        MiningParams { score: 0.8, iou: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionParams {
    /// A proposal is a face above this score.
    pub score_threshold: f64,
    pub nms: f64,
    /// Lower score bound in export mode.
    pub export_floor: f64,
}

impl Default for DetectionParams {
    fn default() -> Self {
        DetectionParams {
            score_threshold: 0.8,
            nms: 0.3,
            export_floor: 0.001,
        }
    }
}

/// Iterations and fixed learning rate of one training stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub iterations: usize,
    pub lr: f64,
}

/// The full-scale schedule (VGG16-sized network, real corpora). Kept for
/// reference; desk-scale runs use [`TrainerParams`] instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullScaleReference {
    pub pretrain: StageSchedule,
    pub mining: StageSchedule,
    pub finetune: StageSchedule,
}

impl Default for FullScaleReference {
    fn default() -> Self {
        FullScaleReference {
            pretrain: StageSchedule {
                iterations: 110_000,
                lr: 1e-4,
            },
            mining: StageSchedule {
                iterations: 100_000,
                lr: 1e-4,
            },
            finetune: StageSchedule {
                iterations: 40_000,
                lr: 1e-3,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerParams {
    /// On the external corpus.
    pub pretrain: StageSchedule,
    /// Continued training on the external corpus with harvested hard
    /// negatives injected.
    pub mining: StageSchedule,
    /// On the target corpus.
    pub finetune: StageSchedule,
    pub sgd: SgdConfig,
    pub flip_prob: f64,
    pub loss_weights: LossWeights,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub full_scale: FullScaleReference,
}

impl Default for TrainerParams {
    fn default() -> Self {
        TrainerParams {
            pretrain: StageSchedule {
                iterations: 1200,
                lr: 0.01,
            },
            mining: StageSchedule {
                iterations: 400,
                lr: 0.005,
            },
            finetune: StageSchedule {
                iterations: 1000,
                lr: 0.005,
            },
            sgd: SgdConfig::default(),
            flip_prob: 0.5,
            loss_weights: LossWeights::default(),
            checkpoint_every: 0,
            full_scale: FullScaleReference::default(),
        }
    }
}

/// Synthetic corpora: the target train/test split and the harder
/// external corpus used for pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataParams {
    pub train: SynthConfig,
    pub test: SynthConfig,
    pub external: SynthConfig,
}

impl Default for DataParams {
    fn default() -> Self {
        DataParams {
            train: SynthConfig {
                images: 200,
                prefix: "train".into(),
                ..SynthConfig::default()
            },
            test: SynthConfig {
                images: 50,
                prefix: "test".into(),
                ..SynthConfig::default()
            },
            external: SynthConfig {
                images: 300,
                prefix: "ext".into(),
                attributes: true,
                max_faces: 4,
                distractor_rate: 0.6,
                ..SynthConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub concat: ConcatConfig,
    /// Single-scale policy for pretraining and testing.
    pub pretrain_scales: ScalePolicy,
    /// Multi-scale policy for finetuning.
    pub finetune_scales: ScalePolicy,
    pub rpn: RpnParams,
    pub sampling: SamplingParams,
    pub mining: MiningParams,
    pub detection: DetectionParams,
    pub trainer: TrainerParams,
    pub data: DataParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            model: ModelConfig::default(),
            concat: ConcatConfig::default(),
            pretrain_scales: ScalePolicy {
                targets: vec![128.0],
                max_size: 213.0,
            },
            finetune_scales: ScalePolicy {
                targets: vec![102.0, 128.0, 160.0],
                max_size: 267.0,
            },
            rpn: RpnParams::default(),
            sampling: SamplingParams::default(),
            mining: MiningParams::default(),
            detection: DetectionParams::default(),
            trainer: TrainerParams::default(),
            data: DataParams::default(),
        }
    }
}

fn unit(name: &str, v: f64) -> Result<(), PipelineError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{name} = {v} is outside [0, 1]")))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.model.validate()?;
        self.concat.validate()?;
        self.pretrain_scales.validate()?;
        self.finetune_scales.validate()?;
        self.rpn.validate()?;
        self.sampling.validate()?;
        unit("mining.score", self.mining.score)?;
        unit("mining.iou", self.mining.iou)?;
        unit("detection.score_threshold", self.detection.score_threshold)?;
        unit("detection.nms", self.detection.nms)?;
        unit("detection.export_floor", self.detection.export_floor)?;
        unit("trainer.flip_prob", self.trainer.flip_prob)?;
        for (name, s) in [
            ("pretrain", self.trainer.pretrain),
            ("mining", self.trainer.mining),
            ("finetune", self.trainer.finetune),
        ] {
            if s.iterations == 0 {
                return Err(PipelineError::Config(format!(
                    "trainer.{name}.iterations must be at least 1"
                )));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(PipelineError::Config(format!("trainer.{name}.lr must be positive")));
            }
        }
        for t in &self.concat.taps {
            if *t >= self.model.backbone.taps.len() {
                return Err(PipelineError::Config(format!("concat tap {t} does not exist")));
            }
        }
        self.data.train.validate()?;
        self.data.test.validate()?;
        self.data.external.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `dotted.path=value` overrides. Values parse as JSON when
    /// they can and are taken as strings otherwise.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, PipelineError> {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for (key, raw) in overrides {
            let value: serde_json::Value =
                serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.clone()));
            let mut slot = &mut v;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| PipelineError::Config(format!("unknown config key {key}")))?;
            }
            *slot = value;
        }
        let cfg: PipelineConfig = serde_json::from_value(v).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), c);
        assert!(PipelineConfig::from_json(r#"{"sed": 1}"#).is_err());
    }

    #[test]
    fn overrides() {
        let c = PipelineConfig::default()
            .with_overrides(&[
                ("seed".into(), "11".into()),
                ("trainer.finetune.lr".into(), "0.5".into()),
            ])
            .unwrap();
        assert_eq!((c.seed, c.trainer.finetune.lr), (11, 0.5));
        assert!(PipelineConfig::default()
            .with_overrides(&[("mining.score".into(), "1.5".into())])
            .is_err());
        assert!(PipelineConfig::default()
            .with_overrides(&[("nope".into(), "1".into())])
            .is_err());
    }
}
