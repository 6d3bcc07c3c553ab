//! Trains the full configuration (every improvement switched on) on the
//! synthetic corpora and scores it on the held-out test set.
//!
//! ```text
//! cargo run --release --example end_to_end -- trainer.finetune.iterations=400
//! ```
//!
//! Arguments are `dotted.key=value` config overrides.

use std::time::Instant;

use facercnn::pipeline::{
    evaluate, false_positives_at, run_pipeline, AblationFlags, Corpora, DetectMode, PipelineConfig,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let overrides: Vec<(String, String)> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let cfg = PipelineConfig::default().with_overrides(&overrides)?;
    let t = Instant::now();
    let data = Corpora::synthesize(&cfg)?;
    println!(
        "corpora: {} external, {} train, {} test images",
        data.external.len(),
        data.train.len(),
        data.test.len()
    );
    let run = run_pipeline(&cfg, &AblationFlags::ALL, &data, None, 1)?;
    for (stage, log) in &run.logs {
        let n = log.losses.len();
        println!(
            "{:<9} {:>5} iters  loss {:.3} -> {:.3}  hard injected {}",
            stage.name(),
            n,
            log.mean_loss(0, 50),
            log.mean_loss(n.saturating_sub(50), n),
            log.hard_injected
        );
    }
    println!("hard negatives harvested: {}", run.hard_negatives.len());
    println!("trained in {:.1}s", t.elapsed().as_secs_f64());

    let faces: usize = data.test.iter().map(|(r, _)| r.annotations.len()).sum();
    let curve = evaluate(&run.model, &data.test, &cfg, DetectMode::Export, 1)?;
    println!(
        "test: {} faces, TPR at <=1 FP/image {:.3}, FPs above 0.8: {}",
        faces,
        curve.tpr_at(data.test.len()),
        false_positives_at(&curve, cfg.detection.score_threshold)
    );
    if let Some(pre) = &run.pretrained {
        let before = evaluate(pre, &data.test, &cfg, DetectMode::Export, 1)?;
        println!(
            "pretrained only: TPR {:.3}, FPs above 0.8: {}",
            before.tpr_at(data.test.len()),
            false_positives_at(&before, cfg.detection.score_threshold)
        );
    }
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
