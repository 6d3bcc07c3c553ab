//! One-image-per-step SGD training with resumable state.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Detector, LossBreakdown, TrainBatch};
use super::{PipelineConfig, PipelineError, StageSchedule};
use crate::data::ImageRecord;
use crate::geometry::{BBox, Region};
use crate::net::{Differentiable, Sgd, Tensor, WeightFile};
use crate::sampling::{inject_hard_negatives, sample_rois, HardNegative};
use crate::scaling::{choose_scale, flip_region, hflip, scale_record, ScalePolicy};

/// Which training stage is running. Each stage draws from its own random
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Mining,
    Finetune,
}

impl StageKind {
    fn salt(self) -> u64 {
        match self {
            StageKind::Pretrain => 0x7072_6574,
            StageKind::Mining => 0x6d69_6e65,
            StageKind::Finetune => 0x6669_6e65,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageKind::Pretrain => "pretrain",
            StageKind::Mining => "mining",
            StageKind::Finetune => "finetune",
        }
    }
}

/// Optimizer state and progress through a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub stage: StageKind,
    pub iteration: usize,
    pub sgd: Sgd,
}

impl TrainState {
    pub fn new(stage: StageKind, model: &Detector, cfg: &PipelineConfig) -> Self {
        TrainState {
            stage,
            iteration: 0,
            sgd: Sgd::new(cfg.trainer.sgd, &model.params()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub losses: Vec<LossBreakdown>,
    /// Largest `|norm / target − 1|` over every RoI blob seen, when the
    /// multi-layer head is active.
    pub max_blob_norm_rel_err: Option<f64>,
    pub blobs_checked: usize,
    pub hard_injected: usize,
    pub hard_dropped: usize,
}

impl TrainLog {
    /// Mean total loss over a window of iterations.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let w = &self.losses[from.min(self.losses.len())..to.min(self.losses.len())];
        w.iter().map(|l| l.total).sum::<f64>() / w.len().max(1) as f64
    }
}

fn iteration_rng(seed: u64, stage: StageKind, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.salt());
    rng.set_stream(iteration as u64 + 1);
    rng
}

/// Image visited at `iteration`: a fresh shuffle per pass over the data.
fn image_index(seed: u64, stage: StageKind, iteration: usize, n: usize) -> usize {
    let epoch = iteration / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stage.salt() ^ 0x0e0c);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order[iteration % n]
}

/// Applies the resize factor and optional mirror of a training image to
/// harvested boxes from the same image.
fn transform_hards(hards: &[HardNegative], rx: f64, ry: f64, flip_width: Option<f64>) -> Vec<HardNegative> {
    hards
        .iter()
        .map(|h| {
            let b = BBox {
                x1: h.roi.x1 * rx,
                y1: h.roi.y1 * ry,
                x2: h.roi.x2 * rx,
                y2: h.roi.y2 * ry,
            };
            let roi = match flip_width {
                Some(w) => flip_region(&Region::Rect(b), w).bounding_box(),
                None => b,
            };
            HardNegative { roi, ..h.clone() }
        })
        .collect()
}

/// Runs `state.iteration .. schedule.iterations` of a stage. Each step
/// picks one image, resizes it under `scales`, mirrors it with the
/// configured probability, samples proposal-network and head targets
/// (injecting any hard negatives for that image) and takes one SGD step.
/// Everything random is derived from `(seed, stage, iteration)`, so a run
/// resumed from a checkpoint matches an uninterrupted one.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    model: &mut Detector,
    state: &mut TrainState,
    dataset: &[(ImageRecord, Tensor)],
    cfg: &PipelineConfig,
    schedule: StageSchedule,
    scales: &ScalePolicy,
    hards: Option<&BTreeMap<String, Vec<HardNegative>>>,
    mut on_step: impl FnMut(usize, &LossBreakdown, &Detector, &TrainState) -> Result<(), PipelineError>,
) -> Result<TrainLog, PipelineError> {
    if dataset.is_empty() {
        return Err(PipelineError::Config(format!(
            "{}: empty training set",
            state.stage.name()
        )));
    }
    let mut log = TrainLog::default();
    let target_norm = model.concat.as_ref().map(|c| c.cfg.target_norm);
    while state.iteration < schedule.iterations {
        let it = state.iteration;
        let mut rng = iteration_rng(cfg.seed, state.stage, it);
        let (orig, img) = &dataset[image_index(cfg.seed, state.stage, it, dataset.len())];
        let factor = choose_scale(orig.width, orig.height, scales, &mut rng);
        let (mut img, mut rec) = scale_record(img, orig, factor)?;
        let (rx, ry) = (
            rec.width as f64 / orig.width as f64,
            rec.height as f64 / orig.height as f64,
        );
        let flip = rng.gen_bool(cfg.trainer.flip_prob);
        if flip {
            let (fi, fr) = hflip(&img, &rec)?;
            img = fi;
            rec = fr;
        }
        let gts = rec.boxes();
        let trunk = model.trunk(&img)?;
        let rpn = model.rpn_targets(rec.width, rec.height, &gts, &cfg.rpn, &mut rng);
        let mut proposals: Vec<BBox> = model
            .proposals(&trunk, &cfg.rpn, cfg.rpn.train_proposals)
            .into_iter()
            .map(|p| p.region)
            .collect();
        proposals.extend(gts.iter().filter(|g| !g.is_degenerate()));
        let mut batch = sample_rois(&proposals, &gts, &cfg.sampling, &mut rng)?;
        if let Some(h) = hards.and_then(|m| m.get(&orig.id)) {
            let moved = transform_hards(h, rx, ry, flip.then_some(rec.width as f64));
            batch = inject_hard_negatives(batch, &moved, cfg.sampling.batch, &mut rng)?;
            log.hard_injected += batch.stats.hard;
            log.hard_dropped += batch.stats.dropped_hard;
        }
        let train = TrainBatch {
            image: img,
            rpn,
            rois: batch.samples,
            weights: cfg.trainer.loss_weights,
        };
        let (loss, grads, norms) = model.batch_loss(&trunk, &train, true)?;
        let grads = grads.expect("requested gradients");
        if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(PipelineError::Diverged {
                stage: state.stage.name().into(),
                iteration: it,
            });
        }
        if let Some(t) = target_norm {
            for n in norms {
                let e = (n / t - 1.0).abs();
                log.max_blob_norm_rel_err = Some(log.max_blob_norm_rel_err.map_or(e, |m: f64| m.max(e)));
                log.blobs_checked += 1;
            }
        }
        let mults = model.lr_multipliers();
        state.sgd.step(&mut model.params_mut(), &grads, schedule.lr, &mults)?;
        state.iteration += 1;
        log.losses.push(loss);
        on_step(it, &loss, model, state)?;
    }
    Ok(log)
}

/// Model weights plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Detector,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, model: &Detector, state: &TrainState) -> Result<(), PipelineError> {
    let mut wf = model.to_weight_file(serde_json::json!({
        "stage": state.stage,
        "iteration": state.iteration,
        "sgd": state.sgd.config,
    }));
    for (name, v) in model.param_names().iter().zip(&state.sgd.velocity) {
        wf.tensors.push((format!("velocity.{name}"), v.clone()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
            path: dir.display().to_string(),
            msg: e.to_string(),
        })?;
    }
    wf.save(path)?;
    Ok(())
}

/// Stage, iteration, optimizer buffers and optimizer settings stored in a
/// checkpoint.
pub type SavedState = (StageKind, usize, Vec<Tensor>, crate::net::SgdConfig);

/// Loads a model file. Files written by [`save_checkpoint`] also restore
/// the optimizer state; plain model files get a fresh one at iteration 0.
pub fn load_checkpoint(path: &Path) -> Result<(Detector, Option<SavedState>), PipelineError> {
    let wf = WeightFile::load(path)?;
    let (model, extra) = Detector::from_weight_file(&wf)?;
    let stage: Option<StageKind> = extra.get("stage").and_then(|s| serde_json::from_value(s.clone()).ok());
    let iteration = extra.get("iteration").and_then(|v| v.as_u64());
    let sgd: Option<crate::net::SgdConfig> = extra.get("sgd").and_then(|s| serde_json::from_value(s.clone()).ok());
    match (stage, iteration, sgd) {
        (Some(stage), Some(it), Some(sgd)) => {
            let velocity = model
                .param_names()
                .iter()
                .map(|n| {
                    wf.get(&format!("velocity.{n}"))
                        .cloned()
                        .ok_or_else(|| PipelineError::Io {
                            path: path.display().to_string(),
                            msg: format!("checkpoint lacks optimizer state for {n}"),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok((model, Some((stage, it as usize, velocity, sgd))))
        }
        _ => Ok((model, None)),
    }
}

impl Checkpoint {
    pub fn load(path: &Path, cfg: &PipelineConfig, default_stage: StageKind) -> Result<Self, PipelineError> {
        let (model, saved) = load_checkpoint(path)?;
        let state = match saved {
            Some((stage, iteration, velocity, config)) => TrainState {
                stage,
                iteration,
                sgd: Sgd { config, velocity },
            },
            None => TrainState::new(default_stage, &model, cfg),
        };
        Ok(Checkpoint { model, state })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        save_checkpoint(path, &self.model, &self.state)
    }
}
