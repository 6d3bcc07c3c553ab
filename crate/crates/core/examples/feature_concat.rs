//! Pools one face region from every backbone tap, L2-normalizes each
//! pooled blob, concatenates them and rescales the result to the target
//! norm, then runs the learned 1x1 reduction.

use facercnn::data::{gen_synthetic, SynthConfig};
use facercnn::featconcat::{concat_rescale, element_scale, l2_normalize, roi_pool, ConcatConfig};
use facercnn::pipeline::{Detector, PipelineConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = PipelineConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Detector::new(cfg.model.clone(), &mut rng)?;
    model.enable_concat(ConcatConfig::default(), &mut rng)?;
    let concat = model.concat.as_ref().expect("enabled");

    let (rec, img) = gen_synthetic(
        &SynthConfig {
            images: 1,
            ..Default::default()
        },
        3,
    )?
    .remove(0);
    let roi = rec.boxes()[0];
    let trunk = model.trunk(&img)?;
    println!("face {:?}", roi);

    let mut blobs = Vec::new();
    for (i, (fmap, stride)) in trunk.taps.iter().enumerate() {
        let (pooled, _) = roi_pool(fmap, *stride, &roi, concat.cfg.pooled)?;
        let normed = l2_normalize(&pooled)?;
        println!(
            "tap {i}: stride {stride:>2}, {} channels, pooled norm {:.3} -> {:.3}",
            fmap.shape()[1],
            pooled.norm(),
            normed.norm()
        );
        blobs.push(normed);
    }
    let blob = concat_rescale(&blobs, concat.cfg.target_norm)?;
    println!(
        "concatenated blob {:?}, norm {:.6} (target {}), per-element scale {:.2}",
        blob.shape(),
        blob.norm(),
        concat.cfg.target_norm,
        element_scale(concat.cfg.target_norm, blob.len())
    );
    println!("reduction learning-rate multiplier {:.3e}", concat.lr_multiplier());

    let (features, _) = concat.forward(&trunk.taps, &[roi])?;
    println!("head input after 1x1 reduction: {:?}", features.shape());
    Ok(())
}
