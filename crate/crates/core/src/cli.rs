//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors (bad flags,
//! unreadable or invalid config, missing inputs), 2 for failures while
//! running.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    filter_records, load_dataset, make_folds, parse_fddb_ellipses, parse_wider, read_records, save_dataset,
    serialize_wider, ImageRecord, ANNOTATIONS_FILE,
};
use crate::eval::{
    aggregate_folds, box_to_ellipse, emit_report, read_detections, roc_svg, write_detections, DetectionFormat,
    EvalImage, RocCurve,
};
use crate::geometry::{Region, ScoredRegion};
use crate::pipeline::{
    continue_stage, detect_dataset, eval_images, false_positives_at, gradient_suite, prepare_head, run_ablation,
    save_checkpoint, stage_mine, AblationRow, Checkpoint, Corpora, Dataset, DetectMode, Detector, PipelineConfig,
    PipelineError, StageKind, TrainState,
};
use crate::sampling::{append_hard_negatives, read_hard_negatives};

#[derive(Debug, Parser)]
#[command(
    name = "facercnn",
    version,
    about = "Two-stage face detector: training, detection and ROC evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON pipeline config. Missing keys take built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (config: seed, default 7).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threads for per-image detection; 0 uses every core.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Override a config value, e.g. `--set trainer.finetune.lr=0.001`.
    /// Applied after the config file; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train, test and external corpora.
    Synth {
        /// Output root; corpora go to `train/`, `test/` and `external/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a plain-head model on the external corpus at the single-scale
    /// policy (config: trainer.pretrain, default 1200 iterations at 0.01).
    Pretrain {
        /// Dataset directory as written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Model file; also receives periodic checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Harvest hard negatives: detections scoring above the mining
    /// threshold that overlap no face (config: mining.score 0.8,
    /// mining.iou 0.5).
    Mine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Hard-negative store (JSON lines), overwritten.
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a model, optionally injecting hard negatives,
    /// with the multi-layer head and multi-scale policy unless disabled.
    Finetune {
        /// Starting model; optional with `--resume`.
        #[arg(long, required_unless_present = "resume")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Hard-negative store from `mine`.
        #[arg(long)]
        hard: Option<PathBuf>,
        /// Which schedule to run (config: trainer.mining / trainer.finetune).
        #[arg(long, value_enum, default_value_t = Schedule::Finetune)]
        schedule: Schedule,
        /// Keep the plain single-layer head.
        #[arg(long)]
        no_concat: bool,
        /// Train at the single-scale policy.
        #[arg(long)]
        single_scale: bool,
        #[command(flatten)]
        ckpt: CheckpointArgs,
    },
    /// Detect faces in every image of a dataset directory.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Detection file (image id, count, one detection per line).
        #[arg(long)]
        out: PathBuf,
        /// `final` keeps scores above detection.score_threshold (0.8);
        /// `export` keeps scores above detection.export_floor (0.001).
        #[arg(long, value_enum, default_value_t = Mode::Final)]
        mode: Mode,
        /// Write ellipses fitted to the boxes instead of boxes.
        #[arg(long)]
        ellipse: bool,
    },
    /// Score detections against ground truth: ROC CSV plus SVG plots.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        /// Dataset directory, annotations JSON lines, an ellipse list or a
        /// box list.
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Convert box detections to ellipses before matching.
        #[arg(long)]
        ellipse: bool,
        /// Also split images into this many folds and report each.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Run ablation rows end to end on the synthetic corpora and compare
    /// their ROC curves.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Row ids, 1 to 7.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 5, 6, 7])]
        rows: Vec<usize>,
        /// Read corpora written by `synth` instead of generating them.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every layer, the multi-layer head and
    /// the whole detector. Fails unless the largest relative error is
    /// below the tolerance.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Continue from a checkpoint written by a previous run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Save to `--out` every this many iterations (config:
    /// trainer.checkpoint_every, default 0 = only at the end).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Schedule {
    Mining,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Final,
    Export,
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl<E: Into<PipelineError>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e = e.into();
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn runtime(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "{}: no such file or directory",
            path.display()
        )))
    }
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
pub fn resolve_config(g: &GlobalArgs) -> Result<PipelineConfig, CliError> {
    let base = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Validation(format!("{}: cannot read config: {e}", p.display())))?;
            PipelineConfig::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    let mut overrides = g.overrides.clone();
    if let Some(s) = g.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    Ok(base.with_overrides(&overrides)?)
}

fn jobs(n: usize) -> usize {
    if n == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        n
    }
}

fn load(dir: &Path) -> Result<Dataset, CliError> {
    require(&dir.join(ANNOTATIONS_FILE))?;
    Ok(load_dataset(dir)?)
}

fn load_model(path: &Path) -> Result<Detector, CliError> {
    require(path)?;
    Ok(Checkpoint::load(path, &PipelineConfig::default(), StageKind::Pretrain)?.model)
}

/// Trains `state`'s stage to completion, saving to `out` every
/// `checkpoint_every` iterations and at the end.
#[allow(clippy::too_many_arguments)]
fn train_to_file(
    mut model: Detector,
    mut state: TrainState,
    data: &Dataset,
    store: &[crate::sampling::HardNegative],
    cfg: &PipelineConfig,
    concat: bool,
    multiscale: bool,
    out: &Path,
    checkpoint_every: usize,
) -> Result<(), CliError> {
    let stage = state.stage.name();
    let log = continue_stage(
        &mut model,
        &mut state,
        data,
        store,
        cfg,
        concat,
        multiscale,
        |it, loss, m, st| {
            if it % 100 == 0 {
                eprintln!("{stage} {it:>6}  loss {:.4}", loss.total);
            }
            if checkpoint_every > 0 && (it + 1) % checkpoint_every == 0 {
                save_checkpoint(out, m, st)?;
            }
            Ok(())
        },
    )?;
    save_checkpoint(out, &model, &state)?;
    let n = log.losses.len();
    println!(
        "{stage}: {n} iterations, mean loss {:.4} over the last {}",
        log.mean_loss(n.saturating_sub(50), n),
        n.min(50)
    );
    if let Some(e) = log.max_blob_norm_rel_err {
        println!("blob norm: {} blobs, max relative deviation {e:.3e}", log.blobs_checked);
    }
    if log.hard_injected > 0 {
        println!(
            "hard negatives injected: {}, dropped: {}",
            log.hard_injected, log.hard_dropped
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Resumes from `resume` when given (a checkpoint for another stage
/// contributes only its weights), otherwise starts `stage` on `model`.
fn initial_state(
    resume: Option<&Path>,
    model: Option<Detector>,
    stage: StageKind,
    cfg: &PipelineConfig,
    concat: bool,
) -> Result<(Detector, TrainState), CliError> {
    let (mut model, state) = match resume {
        Some(p) => {
            require(p)?;
            let ck = Checkpoint::load(p, cfg, stage)?;
            let state = (ck.state.stage == stage).then_some(ck.state);
            (ck.model, state)
        }
        None => (model.expect("model or checkpoint"), None),
    };
    let had_concat = model.concat.is_some();
    prepare_head(&mut model, cfg, concat)?;
    let state = match state {
        Some(s) if had_concat == model.concat.is_some() => s,
        _ => TrainState::new(stage, &model, cfg),
    };
    Ok((model, state))
}

fn as_regions(dets: Vec<(String, Vec<ScoredRegion<crate::geometry::BBox>>)>) -> Vec<(String, Vec<ScoredRegion>)> {
    dets.into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|d| d.map(Region::Rect)).collect()))
        .collect()
}

fn to_ellipses(dets: Vec<(String, Vec<ScoredRegion>)>) -> Vec<(String, Vec<ScoredRegion>)> {
    dets.into_iter()
        .map(|(k, v)| {
            let v = v
                .into_iter()
                .map(|d| match d.region {
                    Region::Rect(b) => match box_to_ellipse(&b) {
                        Ok(e) => ScoredRegion {
                            region: Region::Ellipse(e),
                            score: d.score,
                        },
                        Err(_) => d,
                    },
                    Region::Ellipse(_) => d,
                })
                .collect();
            (k, v)
        })
        .collect()
}

fn read_annotations(path: &Path) -> Result<Vec<ImageRecord>, CliError> {
    require(path)?;
    if path.is_dir() {
        let p = path.join(ANNOTATIONS_FILE);
        require(&p)?;
        return Ok(read_records(&p)?);
    }
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(read_records(path)?);
    }
    let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
    match parse_fddb_ellipses(&text) {
        Ok(r) => Ok(r),
        Err(e) => parse_wider(&text).map_err(|_| e.into()),
    }
}

fn summary_line(label: &str, curve: &RocCurve, images: usize, threshold: f64) -> String {
    format!(
        "{label}: {} faces, {} images, TPR at <=1 FP/image {:.4}, false positives above {threshold}: {}",
        curve.faces,
        images,
        curve.tpr_at(images),
        false_positives_at(curve, threshold)
    )
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| runtime(d, e))?;
    }
    fs::write(path, text).map_err(|e| runtime(path, e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli.global)?;
    let jobs = jobs(cli.global.jobs);
    match cli.command {
        Command::Synth { out } => {
            let c = Corpora::synthesize(&cfg)?;
            for (name, data) in [("train", &c.train), ("test", &c.test), ("external", &c.external)] {
                let dir = out.join(name);
                save_dataset(&dir, data)?;
                let records: Vec<ImageRecord> = data.iter().map(|(r, _)| r.clone()).collect();
                write(&dir.join("bbx_gt.txt"), &serialize_wider(&records))?;
                println!("{name}: {} images in {}", data.len(), dir.display());
            }
        }
        Command::Pretrain { data, out, ckpt } => {
            let data = load(&data)?;
            let keep: std::collections::BTreeSet<String> =
                filter_records(&data.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>())
                    .into_iter()
                    .map(|r| r.id)
                    .collect();
            let data: Dataset = data.into_iter().filter(|(r, _)| keep.contains(&r.id)).collect();
            let fresh = Detector::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
            let (model, state) = initial_state(ckpt.resume.as_deref(), Some(fresh), StageKind::Pretrain, &cfg, false)?;
            let every = ckpt.checkpoint_every.unwrap_or(cfg.trainer.checkpoint_every);
            train_to_file(model, state, &data, &[], &cfg, false, false, &out, every)?;
        }
        Command::Mine { model, data, out } => {
            let model = load_model(&model)?;
            let data = load(&data)?;
            let store = stage_mine(&model, &data, &cfg, jobs)?;
            if out.exists() {
                fs::remove_file(&out).map_err(|e| runtime(&out, e))?;
            }
            append_hard_negatives(&out, &store)?;
            println!(
                "{} hard negatives from {} images -> {}",
                store.len(),
                data.len(),
                out.display()
            );
        }
        Command::Finetune {
            model,
            data,
            out,
            hard,
            schedule,
            no_concat,
            single_scale,
            ckpt,
        } => {
            let start = match (&ckpt.resume, &model) {
                (None, Some(m)) => Some(load_model(m)?),
                _ => None,
            };
            let data = load(&data)?;
            let store = match &hard {
                Some(p) => {
                    require(p)?;
                    read_hard_negatives(p)?
                }
                None => Vec::new(),
            };
            let stage = match schedule {
                Schedule::Mining => StageKind::Mining,
                Schedule::Finetune => StageKind::Finetune,
            };
            let (m, state) = initial_state(ckpt.resume.as_deref(), start, stage, &cfg, !no_concat)?;
            let every = ckpt.checkpoint_every.unwrap_or(cfg.trainer.checkpoint_every);
            train_to_file(m, state, &data, &store, &cfg, !no_concat, !single_scale, &out, every)?;
        }
        Command::Detect {
            model,
            data,
            out,
            mode,
            ellipse,
        } => {
            let model = load_model(&model)?;
            let data = load(&data)?;
            let mode = match mode {
                Mode::Final => DetectMode::Final,
                Mode::Export => DetectMode::Export,
            };
            let dets = as_regions(detect_dataset(&model, &data, &cfg, mode, jobs)?);
            let n: usize = dets.iter().map(|(_, d)| d.len()).sum();
            let format = if ellipse {
                DetectionFormat::Ellipse
            } else {
                DetectionFormat::Rect
            };
            write_detections(&out, &dets, format)?;
            println!("{n} detections in {} images -> {}", dets.len(), out.display());
        }
        Command::Eval {
            detections,
            annotations,
            out,
            ellipse,
            folds,
        } => {
            require(&detections)?;
            let mut dets = read_detections(&detections)?;
            if ellipse {
                dets = to_ellipses(dets);
            }
            let records = read_annotations(&annotations)?;
            let images = eval_images(&records, &dets);
            let curve = crate::eval::roc_curve(&images)?;
            emit_report(&out, "roc", &curve)?;
            println!(
                "{}",
                summary_line("all", &curve, images.len(), cfg.detection.score_threshold)
            );
            if let Some(k) = folds {
                let splits = make_folds(&records, k, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
                let by_id: std::collections::BTreeMap<&str, &EvalImage> =
                    images.iter().map(|i| (i.id.as_str(), i)).collect();
                let fold_images: Vec<Vec<EvalImage>> = splits
                    .iter()
                    .map(|s| s.test.iter().map(|id| by_id[id.as_str()].clone()).collect())
                    .collect();
                let summary = aggregate_folds(&fold_images, Some(k))?;
                for (i, c) in summary.per_fold.iter().enumerate() {
                    emit_report(&out, &format!("fold{}", i + 1), c)?;
                    println!(
                        "{}",
                        summary_line(
                            &format!("fold {}", i + 1),
                            c,
                            fold_images[i].len(),
                            cfg.detection.score_threshold
                        )
                    );
                }
            }
            println!("reports in {}", out.display());
        }
        Command::Ablate { out, rows, data } => {
            let rows = rows
                .iter()
                .map(|&id| {
                    AblationRow::get(id)
                        .ok_or_else(|| CliError::Validation(format!("no ablation row {id}; rows are 1 to 7")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let corpora = match &data {
                Some(root) => Corpora {
                    train: load(&root.join("train"))?,
                    test: load(&root.join("test"))?,
                    external: load(&root.join("external"))?,
                },
                None => Corpora::synthesize(&cfg)?,
            };
            let results = run_ablation(&rows, &cfg, &corpora, jobs)?;
            let mut table = String::from(
                "id,anchors,external,mining,concat,multiscale,tpr_at_1fp_per_image,false_positives_at_threshold,final_y_continuous\n",
            );
            let images = corpora.test.len();
            for r in &results {
                let f = r.row.flags;
                let stem = format!("row{}", r.row.id);
                emit_report(&out, &stem, &r.curve)?;
                let dets = as_regions(detect_dataset(
                    &r.run.model,
                    &corpora.test,
                    &f.apply(&cfg),
                    DetectMode::Export,
                    jobs,
                )?);
                write_detections(
                    &out.join(format!("{stem}_detections.txt")),
                    &dets,
                    DetectionFormat::Rect,
                )?;
                let last = r.curve.points.last().map_or(0.0, |p| p.y_continuous);
                writeln!(
                    table,
                    "{},{},{},{},{},{},{:.6},{},{:.6}",
                    r.row.id,
                    if f.twelve_anchors { 12 } else { 9 },
                    f.external as u8,
                    f.mining as u8,
                    f.concat as u8,
                    f.multiscale as u8,
                    r.curve.tpr_at(images),
                    false_positives_at(&r.curve, cfg.detection.score_threshold),
                    last
                )
                .unwrap();
                println!(
                    "{}",
                    summary_line(
                        &format!("row {}", r.row.id),
                        &r.curve,
                        images,
                        cfg.detection.score_threshold
                    )
                );
            }
            write(&out.join("ablation.csv"), &table)?;
            let series: Vec<(String, &RocCurve)> =
                results.iter().map(|r| (format!("ID {}", r.row.id), &r.curve)).collect();
            write(
                &out.join("ablation_discrete.svg"),
                &roc_svg("ablation (discrete)", &series, true),
            )?;
            write(
                &out.join("ablation_continuous.svg"),
                &roc_svg("ablation (continuous)", &series, false),
            )?;
            println!("reports in {}", out.display());
        }
        Command::Gradcheck { eps, tol } => {
            let report = gradient_suite(eps, cfg.seed)?;
            println!("{report}");
            if !report.passes(tol) {
                return Err(CliError::Runtime(format!(
                    "max relative error {:.3e} is not below {tol:e}",
                    report.max_rel_err()
                )));
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
