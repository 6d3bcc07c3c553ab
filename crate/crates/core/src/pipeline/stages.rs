//! The pipeline stages, corpus-level detection and the ablation grid.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{Detector, LossBreakdown};
use super::train::{train_stage, StageKind, TrainLog, TrainState};
use super::{PipelineConfig, PipelineError};
use crate::data::{filter_records, gen_synthetic, ImageRecord};
use crate::eval::{roc_curve, EvalImage, RocCurve};
use crate::geometry::{clip_box, BBox, Region, ScoredRegion};
use crate::net::Tensor;
use crate::sampling::{group_by_image, mine_hard_negatives, HardNegative};
use crate::scaling::{choose_scale, resize_image, ScalePolicy};

pub type Dataset = Vec<(ImageRecord, Tensor)>;

/// Image id with its detections.
pub type ImageDetections = (String, Vec<ScoredRegion<BBox>>);

/// The three synthetic corpora a run uses.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpora {
    pub external: Dataset,
    pub train: Dataset,
    pub test: Dataset,
}

impl Corpora {
    /// Generates every corpus from the config's seed. The external corpus
    /// is filtered by annotation difficulty.
    pub fn synthesize(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        let external = gen_synthetic(&cfg.data.external, cfg.seed.wrapping_add(2))?;
        let kept: BTreeMap<String, ImageRecord> =
            filter_records(&external.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>())
                .into_iter()
                .map(|r| (r.id.clone(), r))
                .collect();
        let external = external
            .into_iter()
            .filter_map(|(r, img)| kept.get(&r.id).map(|k| (k.clone(), img)))
            .collect();
        Ok(Corpora {
            external,
            train: gen_synthetic(&cfg.data.train, cfg.seed)?,
            test: gen_synthetic(&cfg.data.test, cfg.seed.wrapping_add(1))?,
        })
    }
}

/// Final detections keep scores above the detection threshold; export mode
/// keeps everything above the export floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectMode {
    Final,
    Export,
}

/// Resizes under the single-scale policy, detects, and maps boxes back
/// to the input image.
pub fn detect_image(
    model: &Detector,
    image: &Tensor,
    cfg: &PipelineConfig,
    mode: DetectMode,
) -> Result<Vec<ScoredRegion<BBox>>, PipelineError> {
    let (_, _, h, w) = image.dims4()?;
    let test_policy = ScalePolicy {
        targets: vec![cfg.pretrain_scales.targets[0]],
        ..cfg.pretrain_scales.clone()
    };
    let factor = choose_scale(w, h, &test_policy, &mut ChaCha8Rng::seed_from_u64(0));
    let scaled = resize_image(image, factor);
    let (_, _, sh, sw) = scaled.dims4()?;
    let floor = match mode {
        DetectMode::Final => cfg.detection.score_threshold,
        DetectMode::Export => cfg.detection.export_floor,
    };
    let dets = model.detect(&scaled, &cfg.rpn, cfg.rpn.test_proposals, floor, cfg.detection.nms)?;
    let (rx, ry) = (w as f64 / sw as f64, h as f64 / sh as f64);
    Ok(dets
        .into_iter()
        .filter_map(|d| {
            let b = BBox {
                x1: d.region.x1 * rx,
                y1: d.region.y1 * ry,
                x2: d.region.x2 * rx,
                y2: d.region.y2 * ry,
            };
            let b = clip_box(&b, w as f64, h as f64);
            (!b.is_degenerate()).then_some(ScoredRegion {
                region: b,
                score: d.score,
            })
        })
        .collect())
}

/// Detections for every image, ordered by image id. `jobs` threads work
/// on images in parallel; the result does not depend on `jobs`.
pub fn detect_dataset(
    model: &Detector,
    dataset: &[(ImageRecord, Tensor)],
    cfg: &PipelineConfig,
    mode: DetectMode,
    jobs: usize,
) -> Result<Vec<ImageDetections>, PipelineError> {
    let run = |(r, img): &(ImageRecord, Tensor)| detect_image(model, img, cfg, mode).map(|d| (r.id.clone(), d));
    let mut out: Vec<ImageDetections> = if jobs <= 1 {
        dataset.iter().map(run).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| PipelineError::Config(format!("thread pool: {e}")))?;
        pool.install(|| dataset.par_iter().map(run).collect::<Result<_, _>>())?
    };
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Pairs detections with ground truth by image id. Images without an
/// entry in `detections` count as having no detections.
pub fn eval_images(records: &[ImageRecord], detections: &[(String, Vec<ScoredRegion>)]) -> Vec<EvalImage> {
    let by_id: BTreeMap<&str, &Vec<ScoredRegion>> = detections.iter().map(|(k, v)| (k.as_str(), v)).collect();
    records
        .iter()
        .map(|r| EvalImage {
            id: r.id.clone(),
            detections: by_id.get(r.id.as_str()).map(|v| v.to_vec()).unwrap_or_default(),
            faces: r.regions(),
        })
        .collect()
}

fn as_regions(dets: Vec<ImageDetections>) -> Vec<(String, Vec<ScoredRegion>)> {
    dets.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|d| d.map(Region::Rect)).collect()))
        .collect()
}

/// Detections on `dataset` scored into a ROC curve.
pub fn evaluate(
    model: &Detector,
    dataset: &[(ImageRecord, Tensor)],
    cfg: &PipelineConfig,
    mode: DetectMode,
    jobs: usize,
) -> Result<RocCurve, PipelineError> {
    let dets = as_regions(detect_dataset(model, dataset, cfg, mode, jobs)?);
    let records: Vec<ImageRecord> = dataset.iter().map(|(r, _)| r.clone()).collect();
    Ok(roc_curve(&eval_images(&records, &dets))?)
}

/// False positives among detections scoring above `threshold`.
pub fn false_positives_at(curve: &RocCurve, threshold: f64) -> usize {
    curve
        .points
        .iter()
        .rfind(|p| p.threshold > threshold)
        .map_or(0, |p| p.false_positives)
}

/// Trains a fresh plain-head model on the external corpus at the
/// single-scale policy.
pub fn stage_pretrain(
    cfg: &PipelineConfig,
    dataset: &[(ImageRecord, Tensor)],
) -> Result<(Detector, TrainLog), PipelineError> {
    let mut model = Detector::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut state = TrainState::new(StageKind::Pretrain, &model, cfg);
    let log = continue_stage(&mut model, &mut state, dataset, &[], cfg, false, false, |_, _, _, _| {
        Ok(())
    })?;
    Ok((model, log))
}

/// Runs the model over `dataset` and keeps detections scoring above the
/// mining threshold that overlap no face enough.
pub fn stage_mine(
    model: &Detector,
    dataset: &[(ImageRecord, Tensor)],
    cfg: &PipelineConfig,
    jobs: usize,
) -> Result<Vec<HardNegative>, PipelineError> {
    let dets = detect_dataset(model, dataset, cfg, DetectMode::Export, jobs)?;
    let by_id: BTreeMap<&str, &ImageRecord> = dataset.iter().map(|(r, _)| (r.id.as_str(), r)).collect();
    let mut out = Vec::new();
    for (id, d) in &dets {
        let gts = by_id[id.as_str()].boxes();
        out.extend(mine_hard_negatives(id, d, &gts, cfg.mining.score, cfg.mining.iou));
    }
    Ok(out)
}

/// Switches the head to multi-layer features when `concat` is set and the
/// model does not use them yet. The new reduction is seeded from the config.
pub fn prepare_head(model: &mut Detector, cfg: &PipelineConfig, concat: bool) -> Result<(), PipelineError> {
    if concat && model.concat.is_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0ca7);
        model.enable_concat(cfg.concat.clone(), &mut rng)?;
    }
    Ok(())
}

/// Runs `state`'s stage from its current iteration to the end of that
/// stage's schedule, injecting hard negatives from `store` into the
/// batches of the images they came from. With `multiscale` the finetune
/// scale policy is used instead of the single-scale one.
#[allow(clippy::too_many_arguments)]
pub fn continue_stage(
    model: &mut Detector,
    state: &mut TrainState,
    dataset: &[(ImageRecord, Tensor)],
    store: &[HardNegative],
    cfg: &PipelineConfig,
    concat: bool,
    multiscale: bool,
    on_step: impl FnMut(usize, &LossBreakdown, &Detector, &TrainState) -> Result<(), PipelineError>,
) -> Result<TrainLog, PipelineError> {
    prepare_head(model, cfg, concat)?;
    let schedule = match state.stage {
        StageKind::Pretrain => cfg.trainer.pretrain,
        StageKind::Mining => cfg.trainer.mining,
        StageKind::Finetune => cfg.trainer.finetune,
    };
    let scales = if multiscale {
        &cfg.finetune_scales
    } else {
        &cfg.pretrain_scales
    };
    let grouped = group_by_image(store);
    train_stage(
        model,
        state,
        dataset,
        cfg,
        schedule,
        scales,
        (!grouped.is_empty()).then_some(&grouped),
        on_step,
    )
}

/// Continues training `model` through a whole stage; see
/// [`continue_stage`].
pub fn stage_finetune(
    model: &mut Detector,
    dataset: &[(ImageRecord, Tensor)],
    store: &[HardNegative],
    cfg: &PipelineConfig,
    stage: StageKind,
    concat: bool,
    multiscale: bool,
) -> Result<TrainLog, PipelineError> {
    prepare_head(model, cfg, concat)?;
    let mut state = TrainState::new(stage, model, cfg);
    continue_stage(
        model,
        &mut state,
        dataset,
        store,
        cfg,
        concat,
        multiscale,
        |_, _, _, _| Ok(()),
    )
}

/// Switches for one ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Twelve anchors per location; nine drops the smallest size group.
    pub twelve_anchors: bool,
    pub external: bool,
    pub mining: bool,
    pub concat: bool,
    pub multiscale: bool,
}

impl AblationFlags {
    pub const ALL: AblationFlags = AblationFlags {
        twelve_anchors: true,
        external: true,
        mining: true,
        concat: true,
        multiscale: true,
    };

    /// The config a run with these flags uses.
    pub fn apply(&self, cfg: &PipelineConfig) -> PipelineConfig {
        let mut c = cfg.clone();
        if !self.twelve_anchors && c.model.anchors.sizes.len() > 1 {
            c.model.anchors.sizes.remove(0);
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: usize,
    pub flags: AblationFlags,
}

impl AblationRow {
    /// The seven-row grid: anchors, external pretraining, mining, feature
    /// concatenation and multi-scale training switched on in turn.
    pub fn table() -> Vec<AblationRow> {
        let f = |twelve_anchors, external, mining, concat, multiscale| AblationFlags {
            twelve_anchors,
            external,
            mining,
            concat,
            multiscale,
        };
        [
            f(false, false, false, false, false),
            f(true, false, false, false, false),
            f(true, false, false, true, false),
            f(true, true, false, false, false),
            f(true, true, true, false, false),
            f(true, true, true, true, false),
            f(true, true, true, true, true),
        ]
        .into_iter()
        .enumerate()
        .map(|(i, flags)| AblationRow { id: i + 1, flags })
        .collect()
    }

    pub fn get(id: usize) -> Option<AblationRow> {
        AblationRow::table().into_iter().find(|r| r.id == id)
    }
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub model: Detector,
    /// Model after external pretraining, when that stage ran.
    pub pretrained: Option<Detector>,
    pub hard_negatives: Vec<HardNegative>,
    pub logs: Vec<(StageKind, TrainLog)>,
}

/// Runs the stages a flag set calls for:
///
/// 1. with `external`: pretrain on the external corpus, then (with
///    `mining`) harvest hard negatives from it and keep training on it
///    with them injected;
/// 2. finetune on the target training corpus, with the multi-layer head
///    and multi-scale policy as flagged.
///
/// `pretrained` lets several runs share one pretraining result.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    flags: &AblationFlags,
    data: &Corpora,
    pretrained: Option<&Detector>,
    jobs: usize,
) -> Result<PipelineRun, PipelineError> {
    let cfg = flags.apply(cfg);
    cfg.validate()?;
    let mut logs = Vec::new();
    let mut hard = Vec::new();
    let (mut model, pre) = if flags.external {
        let pre = match pretrained {
            Some(m) => m.clone(),
            None => {
                let (m, log) = stage_pretrain(&cfg, &data.external)?;
                logs.push((StageKind::Pretrain, log));
                m
            }
        };
        let mut model = pre.clone();
        if flags.mining {
            hard = stage_mine(&pre, &data.external, &cfg, jobs)?;
            let log = stage_finetune(&mut model, &data.external, &hard, &cfg, StageKind::Mining, false, false)?;
            logs.push((StageKind::Mining, log));
        }
        (model, Some(pre))
    } else {
        (
            Detector::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?,
            None,
        )
    };
    let log = stage_finetune(
        &mut model,
        &data.train,
        &[],
        &cfg,
        StageKind::Finetune,
        flags.concat,
        flags.multiscale,
    )?;
    logs.push((StageKind::Finetune, log));
    Ok(PipelineRun {
        model,
        pretrained: pre,
        hard_negatives: hard,
        logs,
    })
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub row: AblationRow,
    pub curve: RocCurve,
    pub run: PipelineRun,
}

/// Runs every row end to end and scores it on the test corpus in export
/// mode. Rows with external pretraining share one pretrained model per
/// anchor setting.
pub fn run_ablation(
    rows: &[AblationRow],
    cfg: &PipelineConfig,
    data: &Corpora,
    jobs: usize,
) -> Result<Vec<AblationResult>, PipelineError> {
    let mut shared: BTreeMap<bool, Detector> = BTreeMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let f = row.flags;
        if f.external && !shared.contains_key(&f.twelve_anchors) {
            let (m, _) = stage_pretrain(&f.apply(cfg), &data.external)?;
            shared.insert(f.twelve_anchors, m);
        }
        let run = run_pipeline(
            cfg,
            &f,
            data,
            shared.get(&f.twelve_anchors).filter(|_| f.external),
            jobs,
        )?;
        let curve = evaluate(&run.model, &data.test, &f.apply(cfg), DetectMode::Export, jobs)?;
        out.push(AblationResult { row: *row, curve, run });
    }
    Ok(out)
}
