//! Finite-difference checks for every layer kernel, the multi-layer
//! feature head and the assembled detector.
//!
//! Layer outputs are reduced to a scalar with a fixed random projection.
//! Inputs to relu, max pooling and smooth L1 are drawn away from their
//! kinks so a central difference never straddles one.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Detector, LossWeights, ModelConfig, RpnParams, TrainBatch};
use super::PipelineError;
use crate::data::{gen_synthetic, SynthConfig};
use crate::featconcat::{
    concat_rescale, concat_rescale_backward, l2_normalize, l2_normalize_backward, roi_pool, roi_pool_backward,
    ConcatConfig, FeatureConcat,
};
use crate::geometry::BBox;
use crate::net::gradcheck::finite_diff_check_sampled;
use crate::net::layers::{
    conv2d, conv2d_backward, linear, linear_backward, max_pool2d, max_pool2d_backward, relu, relu_backward, softmax,
    softmax_backward,
};
use crate::net::{
    check_gradients, smooth_l1_loss, softmax_ce_loss, Backbone, BackboneSpec, Differentiable, GradCheckReport,
    NetError, Tensor,
};
use crate::sampling::{sample_rois, SamplingParams};

/// Entries probed per tensor in the detector-level checks.
pub const DETECTOR_SAMPLES: usize = 40;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = uniform(shape, 0.1, 1.0, rng);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.gen_bool(0.5) {
            *v = -*v
        }
    });
    t
}

/// Distinct values on a 0.01 grid, so every max is unique by a wide margin.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v).expect("shape")
}

fn names(prefix: &str, parts: &[&str]) -> Vec<String> {
    parts.iter().map(|p| format!("{prefix}.{p}")).collect()
}

fn layer_checks(eps: f64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, NetError> {
    let seed = rng.gen();
    let mut report = GradCheckReport {
        epsilon: eps,
        entries: Vec::new(),
    };

    let proj = uniform(&[2, 4, 4, 3], -1.0, 1.0, rng);
    let mut vars = vec![
        uniform(&[2, 3, 7, 6], -1.0, 1.0, rng),
        uniform(&[4, 3, 3, 3], -1.0, 1.0, rng),
        uniform(&[4], -1.0, 1.0, rng),
    ];
    let r = check_gradients(
        |v| {
            let y = conv2d(&v[0], &v[1], &v[2], 2, 1)?;
            let (dx, dw, db) = conv2d_backward(&v[0], &v[1], 2, 1, &proj)?;
            Ok((y.dot(&proj), vec![dx, dw, db]))
        },
        &mut vars,
        &names("conv2d", &["input", "weight", "bias"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    let proj = uniform(&[2, 3, 5, 5], -1.0, 1.0, rng);
    let mut vars = vec![off_zero(&[2, 3, 5, 5], rng)];
    let r = check_gradients(
        |v| {
            let y = relu(&v[0]);
            Ok((y.dot(&proj), vec![relu_backward(&y, &proj)]))
        },
        &mut vars,
        &names("relu", &["input"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    let proj = uniform(&[1, 2, 3, 3], -1.0, 1.0, rng);
    let mut vars = vec![distinct(&[1, 2, 6, 7], rng)];
    let r = check_gradients(
        |v| {
            let (y, arg) = max_pool2d(&v[0], 2, 2)?;
            Ok((y.dot(&proj), vec![max_pool2d_backward(v[0].shape(), &arg, &proj)]))
        },
        &mut vars,
        &names("max_pool2d", &["input"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    let proj = uniform(&[3, 4], -1.0, 1.0, rng);
    let mut vars = vec![
        uniform(&[3, 5], -1.0, 1.0, rng),
        uniform(&[4, 5], -1.0, 1.0, rng),
        uniform(&[4], -1.0, 1.0, rng),
    ];
    let r = check_gradients(
        |v| {
            let y = linear(&v[0], &v[1], &v[2])?;
            let (dx, dw, db) = linear_backward(&v[0], &v[1], &proj)?;
            Ok((y.dot(&proj), vec![dx, dw, db]))
        },
        &mut vars,
        &names("linear", &["input", "weight", "bias"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    let proj = uniform(&[3, 4], -1.0, 1.0, rng);
    let mut vars = vec![uniform(&[3, 4], -2.0, 2.0, rng)];
    let r = check_gradients(
        |v| {
            let y = softmax(&v[0])?;
            Ok((y.dot(&proj), vec![softmax_backward(&y, &proj)?]))
        },
        &mut vars,
        &names("softmax", &["input"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    let labels = [0usize, 1, 1, 0, 1];
    let mut vars = vec![uniform(&[5, 2], -2.0, 2.0, rng)];
    let r = check_gradients(
        |v| {
            let (l, g) = softmax_ce_loss(&v[0], &labels)?;
            Ok((l, vec![g]))
        },
        &mut vars,
        &names("softmax_ce", &["logits"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    // residuals of magnitude 0.1..0.9 or 1.1..3 on either side of the kink
    let target = uniform(&[4, 4], -1.0, 1.0, rng);
    let mut pred = target.clone();
    for (i, p) in pred.data_mut().iter_mut().enumerate() {
        let mag = if i % 2 == 0 {
            rng.gen_range(0.1..0.9)
        } else {
            rng.gen_range(1.1..3.0)
        };
        *p += if rng.gen_bool(0.5) { mag } else { -mag };
    }
    let weights = Tensor::from_vec(&[4, 4], (0..16).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect())?;
    let mut vars = vec![pred];
    let r = check_gradients(
        |v| {
            let (l, g) = smooth_l1_loss(&v[0], &target, &weights)?;
            Ok((l, vec![g]))
        },
        &mut vars,
        &names("smooth_l1", &["pred"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);
    Ok(report)
}

fn feature_checks(eps: f64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, PipelineError> {
    let seed = rng.gen();
    let feat = |e: crate::featconcat::FeatError| NetError::Shape(e.to_string());
    let roi = BBox::new(5.0, 3.0, 41.0, 30.0)?;

    let proj = uniform(&[1, 3, 4, 4], -1.0, 1.0, rng);
    let mut vars = vec![distinct(&[1, 3, 6, 6], rng)];
    let mut report = check_gradients(
        |v| {
            let (y, cache) = roi_pool(&v[0], 8, &roi, 4).map_err(feat)?;
            Ok((y.dot(&proj), vec![roi_pool_backward(&cache, &proj)]))
        },
        &mut vars,
        &names("roi_pool", &["fmap"]),
        eps,
        200,
        seed,
    )?;

    let proj = uniform(&[1, 2, 3, 3], -1.0, 1.0, rng);
    let mut vars = vec![uniform(&[1, 2, 3, 3], -1.0, 1.0, rng)];
    let r = check_gradients(
        |v| {
            let y = l2_normalize(&v[0]).map_err(feat)?;
            Ok((y.dot(&proj), vec![l2_normalize_backward(&v[0], &y, &proj)]))
        },
        &mut vars,
        &names("l2_normalize", &["input"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    let proj = uniform(&[1, 6, 2, 2], -1.0, 1.0, rng);
    let mut vars = vec![
        uniform(&[1, 1, 2, 2], -1.0, 1.0, rng),
        uniform(&[1, 2, 2, 2], -1.0, 1.0, rng),
        uniform(&[1, 3, 2, 2], -1.0, 1.0, rng),
    ];
    let r = check_gradients(
        |v| {
            let y = concat_rescale(v, 4700.0).map_err(feat)?;
            Ok((y.dot(&proj), concat_rescale_backward(v, 4700.0, &proj).map_err(feat)?))
        },
        &mut vars,
        &names("concat_rescale", &["blob0", "blob1", "blob2"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    // the whole multi-layer head: taps and 1x1 reduction together
    let cfg = ConcatConfig {
        taps: vec![0, 1, 2],
        pooled: 3,
        target_norm: 4700.0,
        output_channels: 4,
    };
    let head = FeatureConcat::new(cfg.clone(), &[2, 3, 4], rng)?;
    let rois = [BBox::new(2.0, 4.0, 40.0, 44.0)?, BBox::new(10.0, 0.0, 30.0, 25.0)?];
    let strides = [4usize, 8, 16];
    let proj = uniform(&[2, 4, 3, 3], -1.0, 1.0, rng);
    let mut vars = vec![
        uniform(&[1, 2, 12, 12], -1.0, 1.0, rng),
        uniform(&[1, 3, 6, 6], -1.0, 1.0, rng),
        uniform(&[1, 4, 3, 3], -1.0, 1.0, rng),
        head.reduce.weight.clone(),
        uniform(&[4], -1.0, 1.0, rng),
    ];
    let r = check_gradients(
        |v| {
            let mut h = head.clone();
            h.reduce.weight = v[3].clone();
            h.reduce.bias = v[4].clone();
            let taps: Vec<(Tensor, usize)> = (0..3).map(|i| (v[i].clone(), strides[i])).collect();
            let (y, cache) = h.forward(&taps, &rois).map_err(feat)?;
            let (mut g, gr) = h.backward(&taps, &cache, &proj).map_err(feat)?;
            g.extend(gr);
            Ok((y.dot(&proj), g))
        },
        &mut vars,
        &names("concat_head", &["tap0", "tap1", "tap2", "reduce.weight", "reduce.bias"]),
        eps,
        200,
        seed,
    )?;
    report = report.merge(r);

    let backbone = Backbone::new(BackboneSpec::default(), rng)?;
    let image = uniform(&[1, 1, 32, 32], -0.5, 0.5, rng);
    let (taps, _) = backbone.forward(&image)?;
    let projs = taps.iter().map(|(t, _)| uniform(t.shape(), -1.0, 1.0, rng)).collect();
    let mut probe = TapProjection { backbone, projs };
    let r = finite_diff_check_sampled(&mut probe, &image, eps, 60, seed)?;
    Ok(report.merge(r))
}

/// A backbone whose loss is a fixed projection of its tap outputs.
struct TapProjection {
    backbone: Backbone,
    projs: Vec<Tensor>,
}

impl Differentiable for TapProjection {
    type Input = Tensor;

    fn param_names(&self) -> Vec<String> {
        self.backbone.param_names()
    }

    fn params(&self) -> Vec<&Tensor> {
        self.backbone.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.backbone.params_mut()
    }

    fn loss_and_grads(&self, image: &Tensor) -> Result<(f64, Vec<Tensor>), NetError> {
        let (taps, cache) = self.backbone.forward(image)?;
        let loss = taps.iter().zip(&self.projs).map(|((t, _), p)| t.dot(p)).sum();
        let grads = self
            .backbone
            .backward(&cache, &self.projs.iter().cloned().map(Some).collect::<Vec<_>>())?;
        Ok((loss, grads))
    }

    fn kink_signature(&self, image: &Tensor) -> Result<u64, NetError> {
        let mut h = DefaultHasher::new();
        self.backbone.forward(image)?.1.hash_pattern(&mut h);
        Ok(h.finish())
    }
}

/// A realistic training batch for a small detector on one synthetic image.
pub fn sample_batch(model: &Detector, seed: u64) -> Result<TrainBatch, PipelineError> {
    let synth = SynthConfig {
        images: 1,
        width: 64,
        height: 64,
        min_faces: 2,
        max_faces: 2,
        min_face: 16.0,
        max_face: 30.0,
        prefix: "grad".into(),
        ..SynthConfig::default()
    };
    let (rec, image) = gen_synthetic(&synth, seed)?.remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rpn = RpnParams {
        batch: 32,
        ..RpnParams::default()
    };
    let gts = rec.boxes();
    let trunk = model.trunk(&image)?;
    let targets = model.rpn_targets(rec.width, rec.height, &gts, &rpn, &mut rng);
    let mut proposals: Vec<BBox> = model
        .proposals(&trunk, &rpn, 50)
        .into_iter()
        .map(|p| p.region)
        .collect();
    proposals.extend(gts.iter().copied());
    let sampling = SamplingParams {
        batch: 12,
        ..SamplingParams::default()
    };
    let batch = sample_rois(&proposals, &gts, &sampling, &mut rng)?;
    Ok(TrainBatch {
        image,
        rpn: targets,
        rois: batch.samples,
        weights: LossWeights::default(),
    })
}

fn detector_checks(eps: f64, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, PipelineError> {
    let cfg = ModelConfig {
        hidden: 16,
        rpn_channels: 8,
        pooled: 3,
        ..ModelConfig::default()
    };
    let mut plain = Detector::new(cfg, rng)?;
    let batch = sample_batch(&plain, rng.gen())?;
    let seed = rng.gen();
    let mut report = finite_diff_check_sampled(&mut plain, &batch, eps, DETECTOR_SAMPLES, seed)?;
    report
        .entries
        .iter_mut()
        .for_each(|e| e.name = format!("detector.{}", e.name));

    let mut concat = plain.clone();
    concat.enable_concat(ConcatConfig::default(), rng)?;
    let mut r = finite_diff_check_sampled(&mut concat, &batch, eps, DETECTOR_SAMPLES, seed)?;
    r.entries
        .iter_mut()
        .for_each(|e| e.name = format!("detector+concat.{}", e.name));
    Ok(report.merge(r))
}

/// Runs every check. The same `seed` always probes the same entries.
pub fn gradient_suite(eps: f64, seed: u64) -> Result<GradCheckReport, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = layer_checks(eps, &mut rng)?;
    let report = report.merge(feature_checks(eps, &mut rng)?);
    Ok(report.merge(detector_checks(eps, &mut rng)?))
}
