//! Runs ablation rows on the synthetic corpora and prints one summary line
//! each. Iteration counts are cut by default so the whole table runs in a
//! few minutes; pass `full` for the default schedules.
//!
//! ```text
//! cargo run --release --example ablation -- 1,4,5,7
//! ```

use facercnn::pipeline::{false_positives_at, run_ablation, AblationRow, Corpora, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "full");
    let rows: Vec<AblationRow> = match args.iter().find(|a| a.contains(',') || a.parse::<usize>().is_ok()) {
        Some(list) => list
            .split(',')
            .filter_map(|s| s.trim().parse().ok())
            .filter_map(AblationRow::get)
            .collect(),
        None => AblationRow::table(),
    };
    let mut cfg = PipelineConfig::default();
    if !full {
        cfg.trainer.pretrain.iterations = 400;
        cfg.trainer.mining.iterations = 150;
        cfg.trainer.finetune.iterations = 300;
    }
    let data = Corpora::synthesize(&cfg)?;
    let images = data.test.len();
    println!(
        "row  12a ext mine concat multi   TPR@1FP/img  FPs>{}",
        cfg.detection.score_threshold
    );
    for r in run_ablation(&rows, &cfg, &data, 1)? {
        let f = r.row.flags;
        let mark = |b: bool| if b { "x" } else { "." };
        println!(
            "{:>3}   {}   {}    {}     {}      {}      {:.3}        {}",
            r.row.id,
            mark(f.twelve_anchors),
            mark(f.external),
            mark(f.mining),
            mark(f.concat),
            mark(f.multiscale),
            r.curve.tpr_at(images),
            false_positives_at(&r.curve, cfg.detection.score_threshold)
        );
    }
    Ok(())
}
