//! Briefly trains a model, harvests confident detections that overlap no
//! face, and injects them into a sampled RoI batch as flagged backgrounds.

use facercnn::data::{gen_synthetic, SynthConfig};
use facercnn::geometry::BBox;
use facercnn::pipeline::{stage_mine, stage_pretrain, PipelineConfig};
use facercnn::sampling::{group_by_image, inject_hard_negatives, sample_rois};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig::default();
    cfg.trainer.pretrain.iterations = 300;
    cfg.mining.score = 0.5;
    let data = gen_synthetic(
        &SynthConfig {
            images: 40,
            ..Default::default()
        },
        11,
    )?;
    let (model, log) = stage_pretrain(&cfg, &data)?;
    let n = log.losses.len();
    println!(
        "pretrained {n} iterations, loss {:.3} -> {:.3}",
        log.mean_loss(0, 30),
        log.mean_loss(n - 30, n)
    );

    let store = stage_mine(&model, &data, &cfg, 1)?;
    let groups = group_by_image(&store);
    println!(
        "{} hard negatives (score > {}, IoU < {} with every face) in {} images",
        store.len(),
        cfg.mining.score,
        cfg.mining.iou,
        groups.len()
    );
    let Some((id, hards)) = groups.iter().next() else {
        println!("nothing mined; train longer or lower the score threshold");
        return Ok(());
    };
    let rec = &data.iter().find(|(r, _)| &r.id == id).expect("mined image").0;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let proposals: Vec<BBox> = (0..300)
        .map(|_| {
            let (x, y, s) = (
                rng.gen_range(0.0..100.0),
                rng.gen_range(0.0..100.0),
                rng.gen_range(12.0..60.0),
            );
            BBox::from_xywh(x, y, s, s * 1.2).expect("positive size")
        })
        .collect();
    let batch = sample_rois(&proposals, &rec.boxes(), &cfg.sampling, &mut rng)?;
    println!("batch for {id}: {:?}", batch.stats);
    let batch = inject_hard_negatives(batch, hards, cfg.sampling.batch, &mut rng)?;
    println!("after injection:  {:?}", batch.stats);
    Ok(())
}
