//! The two-stage detector: backbone, proposal network and RoI head, with
//! an optional multi-layer feature head.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::anchors::{
    decode_delta, encode_delta, fmap_extent, generate_anchors, label_anchors, select_proposals, AnchorConfig,
    AnchorLabel, BoxDelta,
};
use crate::featconcat::{roi_pool, roi_pool_backward_into, ConcatCache, ConcatConfig, FeatureConcat, RoiPoolCache};
use crate::geometry::{clip_box, nms, BBox, ScoredRegion};
use crate::net::layers::{relu, relu_backward, softmax};
use crate::net::{
    hash_active, smooth_l1_loss, softmax_ce_loss, Backbone, BackboneCache, BackboneSpec, Conv2d, Differentiable,
    Linear, NetError, Tensor, WeightFile,
};
use crate::sampling::{RoiLabel, RoiSample};

/// Largest log-size change a predicted delta may apply.
pub const MAX_LOG_SCALE: f64 = 4.135166556742356; // ln(1000 / 16)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub anchors: AnchorConfig,
    /// Width of the proposal network's 3×3 conv.
    pub rpn_channels: usize,
    /// RoI pooling grid side.
    pub pooled: usize,
    /// Width of the head's hidden layer.
    pub hidden: usize,
    /// Head regression targets are divided by these.
    pub bbox_stds: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneSpec::default(),
            anchors: AnchorConfig {
                sizes: vec![16.0, 32.0, 64.0, 128.0],
                ..AnchorConfig::default()
            },
            rpn_channels: 32,
            pooled: 7,
            hidden: 96,
            bbox_stds: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.backbone.validate()?;
        self.anchors.validate()?;
        if self.anchors.stride != self.backbone.max_stride() {
            return Err(PipelineError::Config(format!(
                "anchor stride {} differs from the backbone's deepest stride {}",
                self.anchors.stride,
                self.backbone.max_stride()
            )));
        }
        if self.rpn_channels == 0 || self.pooled == 0 || self.hidden == 0 {
            return Err(PipelineError::Config(
                "rpn_channels, pooled and hidden must be positive".into(),
            ));
        }
        if self.bbox_stds.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(PipelineError::Config("bbox_stds must be positive".into()));
        }
        Ok(())
    }
}

/// Loss term weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub head_cls: f64,
    pub head_box: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rpn_cls: 1.0,
            rpn_box: 1.0,
            head_cls: 1.0,
            head_box: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn_cls: f64,
    pub rpn_box: f64,
    pub head_cls: f64,
    pub head_box: f64,
    pub total: f64,
}

/// Proposal-network labels for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RpnTargets {
    /// Sampled anchor indices.
    pub anchors: Vec<usize>,
    /// 1 for face, 0 for background, aligned with `anchors`.
    pub labels: Vec<usize>,
    /// Regression targets, meaningful where the label is 1.
    pub deltas: Vec<[f64; 4]>,
}

/// Everything a differentiable training step needs: the preprocessed
/// image and the sampled targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub image: Tensor,
    pub rpn: RpnTargets,
    pub rois: Vec<RoiSample>,
    pub weights: LossWeights,
}

/// Proposal-network sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpnParams {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub batch: usize,
    pub fg_fraction: f64,
    pub nms: f64,
    pub pre_nms: usize,
    pub train_proposals: usize,
    pub test_proposals: usize,
    /// Proposals narrower or shorter than this (pixels) are dropped.
    pub min_size: f64,
}

impl Default for RpnParams {
    fn default() -> Self {
        RpnParams {
            pos_iou: 0.7,
            neg_iou: 0.3,
            batch: 256,
            fg_fraction: 0.5,
            nms: 0.7,
            pre_nms: 6000,
            train_proposals: 2000,
            test_proposals: 100,
            min_size: 4.0,
        }
    }
}

impl RpnParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let unit = [self.pos_iou, self.neg_iou, self.fg_fraction, self.nms];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) || self.neg_iou > self.pos_iou {
            return Err(PipelineError::Config(
                "rpn thresholds must lie in [0, 1] with neg_iou <= pos_iou".into(),
            ));
        }
        if self.batch == 0 || self.test_proposals == 0 || self.train_proposals == 0 {
            return Err(PipelineError::Config(
                "rpn batch and proposal counts must be positive".into(),
            ));
        }
        if self.pre_nms < self.train_proposals.max(self.test_proposals) {
            return Err(PipelineError::Config(
                "pre_nms must be at least the proposal counts".into(),
            ));
        }
        Ok(())
    }
}

/// Loss, optional gradients and per-RoI blob norms.
pub type BatchOutput = (LossBreakdown, Option<Vec<Tensor>>, Vec<f64>);

/// Forward values shared by training and detection.
pub struct Trunk {
    pub taps: Vec<(Tensor, usize)>,
    cache: BackboneCache,
    rpn_hidden: Tensor,
    pub rpn_cls: Tensor,
    pub rpn_reg: Tensor,
    pub fmap_w: usize,
    pub fmap_h: usize,
    pub image_w: usize,
    pub image_h: usize,
}

enum HeadCache {
    Plain(Vec<RoiPoolCache>),
    Concat(ConcatCache),
}

struct HeadOut {
    cache: HeadCache,
    flat: Tensor,
    hidden: Tensor,
    cls: Tensor,
    reg: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub rpn_conv: Conv2d,
    pub rpn_cls: Conv2d,
    pub rpn_reg: Conv2d,
    pub concat: Option<FeatureConcat>,
    pub fc: Linear,
    pub cls: Linear,
    pub reg: Linear,
}

fn small_conv(cin: usize, cout: usize, scale: f64, rng: &mut impl Rng) -> Conv2d {
    let mut c = Conv2d::he(cin, cout, 1, 1, 0, rng);
    c.weight.scale(scale);
    c
}

impl Detector {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.backbone.clone(), rng)?;
        let c = *backbone
            .spec
            .tap_channels()
            .last()
            .expect("validated backbone has taps");
        let a = cfg.anchors.anchors_per_location();
        let feat = c * cfg.pooled * cfg.pooled;
        Ok(Detector {
            rpn_conv: Conv2d::he(c, cfg.rpn_channels, 3, 1, 1, rng),
            rpn_cls: small_conv(cfg.rpn_channels, 2 * a, 0.1, rng),
            rpn_reg: small_conv(cfg.rpn_channels, 4 * a, 0.01, rng),
            concat: None,
            fc: Linear::he(feat, cfg.hidden, rng),
            cls: Linear::scaled(cfg.hidden, 2, 0.1, rng),
            reg: Linear::scaled(cfg.hidden, 4, 0.01, rng),
            backbone,
            cfg,
        })
    }

    /// Channels of the deepest tap, which the plain head pools.
    pub fn head_channels(&self) -> usize {
        *self.backbone.spec.tap_channels().last().expect("taps")
    }

    /// Switches the head to multi-layer features with a fresh reduction.
    /// The reduction outputs as many channels as the plain head pooled, so
    /// the fully connected layers carry over.
    pub fn enable_concat(&mut self, mut cfg: ConcatConfig, rng: &mut impl Rng) -> Result<(), PipelineError> {
        cfg.pooled = self.cfg.pooled;
        cfg.output_channels = self.head_channels();
        self.concat = Some(FeatureConcat::new(cfg, &self.backbone.spec.tap_channels(), rng)?);
        Ok(())
    }

    pub fn anchors_for(&self, image_w: usize, image_h: usize) -> Vec<BBox> {
        let s = self.cfg.anchors.stride;
        generate_anchors(&self.cfg.anchors, fmap_extent(image_w, s), fmap_extent(image_h, s))
    }

    /// Learning-rate multiplier per parameter tensor.
    pub fn lr_multipliers(&self) -> Vec<f64> {
        let mut m = vec![1.0; self.backbone.params().len() + 6];
        if let Some(c) = &self.concat {
            m.push(c.lr_multiplier());
            m.push(1.0);
        }
        m.extend([1.0; 6]);
        m
    }

    pub fn trunk(&self, image: &Tensor) -> Result<Trunk, PipelineError> {
        let (_, _, h, w) = image.dims4()?;
        let mut x = image.clone();
        x.data_mut().iter_mut().for_each(|v| *v -= 0.5);
        let (taps, cache) = self.backbone.forward(&x)?;
        let last = &taps.last().expect("taps").0;
        let rpn_hidden = relu(&self.rpn_conv.forward(last)?);
        let rpn_cls = self.rpn_cls.forward(&rpn_hidden)?;
        let rpn_reg = self.rpn_reg.forward(&rpn_hidden)?;
        let s = self.cfg.anchors.stride;
        let (fmap_w, fmap_h) = (fmap_extent(w, s), fmap_extent(h, s));
        let (_, _, fh, fw) = rpn_cls.dims4()?;
        debug_assert_eq!((fw, fh), (fmap_w, fmap_h));
        Ok(Trunk {
            taps,
            cache,
            rpn_hidden,
            rpn_cls,
            rpn_reg,
            fmap_w,
            fmap_h,
            image_w: w,
            image_h: h,
        })
    }

    /// Anchor `i` is shape `i % A` at location `i / A`.
    fn anchor_channels(&self, anchor: usize) -> (usize, usize) {
        let a = self.cfg.anchors.anchors_per_location();
        (anchor % a, anchor / a)
    }

    /// Face probability and box delta of every anchor.
    pub fn rpn_outputs(&self, trunk: &Trunk) -> (Vec<f64>, Vec<BoxDelta>) {
        let a = self.cfg.anchors.anchors_per_location();
        let plane = trunk.fmap_w * trunk.fmap_h;
        let n = plane * a;
        let cls = trunk.rpn_cls.data();
        let reg = trunk.rpn_reg.data();
        let mut scores = Vec::with_capacity(n);
        let mut deltas = Vec::with_capacity(n);
        for i in 0..n {
            let (k, loc) = self.anchor_channels(i);
            let bg = cls[(2 * k) * plane + loc];
            let fg = cls[(2 * k + 1) * plane + loc];
            scores.push(1.0 / (1.0 + (bg - fg).exp()));
            let d = |j: usize| reg[(4 * k + j) * plane + loc];
            deltas.push(BoxDelta {
                tx: d(0),
                ty: d(1),
                tw: d(2),
                th: d(3),
            });
        }
        (scores, deltas)
    }

    /// Decoded, clipped and suppressed proposals.
    pub fn proposals(&self, trunk: &Trunk, params: &RpnParams, post_k: usize) -> Vec<ScoredRegion<BBox>> {
        let anchors = self.anchors_for(trunk.image_w, trunk.image_h);
        let (scores, deltas) = self.rpn_outputs(trunk);
        let (w, h) = (trunk.image_w as f64, trunk.image_h as f64);
        let scored: Vec<ScoredRegion<BBox>> = anchors
            .iter()
            .zip(scores.iter().zip(&deltas))
            .filter_map(|(a, (&s, d))| {
                let b = decode_delta(a, &d.clamp_scale(MAX_LOG_SCALE)).ok()?;
                let b = clip_box(&b, w, h);
                (b.width() >= params.min_size && b.height() >= params.min_size && s.is_finite())
                    .then_some(ScoredRegion { region: b, score: s })
            })
            .collect();
        select_proposals(&scored, params.pre_nms.max(post_k), params.nms, post_k)
    }

    /// Labels anchors against `gts` and samples a balanced subset.
    pub fn rpn_targets<R: Rng>(
        &self,
        image_w: usize,
        image_h: usize,
        gts: &[BBox],
        params: &RpnParams,
        rng: &mut R,
    ) -> RpnTargets {
        let anchors = self.anchors_for(image_w, image_h);
        let matches = label_anchors(&anchors, gts, params.pos_iou, params.neg_iou);
        let pos: Vec<usize> = (0..anchors.len())
            .filter(|&i| matches[i].label == AnchorLabel::Positive)
            .collect();
        let neg: Vec<usize> = (0..anchors.len())
            .filter(|&i| matches[i].label == AnchorLabel::Negative)
            .collect();
        let n_pos = pos
            .len()
            .min((params.batch as f64 * params.fg_fraction).round() as usize);
        let n_neg = neg.len().min(params.batch - n_pos);
        let take = |pool: &[usize], n: usize, rng: &mut R| -> Vec<usize> {
            let mut v: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
            v.sort_unstable();
            v
        };
        let pos = take(&pos, n_pos, rng);
        let neg = take(&neg, n_neg, rng);
        let mut t = RpnTargets::default();
        for &i in &pos {
            let g = matches[i].gt.expect("positive anchors have a match");
            let d = encode_delta(&anchors[i], &gts[g])
                .map(|d| d.to_array())
                .unwrap_or([0.0; 4]);
            t.anchors.push(i);
            t.labels.push(1);
            t.deltas.push(d);
        }
        for &i in &neg {
            t.anchors.push(i);
            t.labels.push(0);
            t.deltas.push([0.0; 4]);
        }
        t
    }

    fn head_forward(&self, trunk: &Trunk, rois: &[BBox]) -> Result<HeadOut, PipelineError> {
        let p = self.cfg.pooled;
        let r = rois.len();
        let (feats, cache) = match &self.concat {
            Some(c) => {
                let (f, cache) = c.forward(&trunk.taps, rois)?;
                (f, HeadCache::Concat(cache))
            }
            None => {
                let (fmap, stride) = trunk.taps.last().expect("taps");
                let mut outs = Vec::with_capacity(r);
                let mut caches = Vec::with_capacity(r);
                for roi in rois {
                    let (y, c) = roi_pool(fmap, *stride, roi, p)?;
                    outs.push(y);
                    caches.push(c);
                }
                let f = if outs.is_empty() {
                    Tensor::zeros(&[0, self.head_channels(), p, p])
                } else {
                    Tensor::stack(&outs)?
                };
                (f, HeadCache::Plain(caches))
            }
        };
        let flat = feats.reshape(&[r, self.head_channels() * p * p])?;
        let hidden = relu(&self.fc.forward(&flat)?);
        let cls = self.cls.forward(&hidden)?;
        let reg = self.reg.forward(&hidden)?;
        Ok(HeadOut {
            cache,
            flat,
            hidden,
            cls,
            reg,
        })
    }

    /// Loss of a prepared batch, and gradients in [`Detector::params`]
    /// order when `grads` is set. Also returns each RoI's blob norm when
    /// the multi-layer head is active.
    pub fn batch_loss(&self, trunk: &Trunk, batch: &TrainBatch, grads: bool) -> Result<BatchOutput, PipelineError> {
        let w = batch.weights;
        let plane = trunk.fmap_w * trunk.fmap_h;

        // proposal network
        let n = batch.rpn.anchors.len();
        let mut logits = Tensor::zeros(&[n, 2]);
        let mut pred = Tensor::zeros(&[n, 4]);
        let mut target = Tensor::zeros(&[n, 4]);
        let mut bw = Tensor::zeros(&[n, 4]);
        for (r, &i) in batch.rpn.anchors.iter().enumerate() {
            let (k, loc) = self.anchor_channels(i);
            logits.data_mut()[2 * r] = trunk.rpn_cls.data()[(2 * k) * plane + loc];
            logits.data_mut()[2 * r + 1] = trunk.rpn_cls.data()[(2 * k + 1) * plane + loc];
            for j in 0..4 {
                pred.data_mut()[4 * r + j] = trunk.rpn_reg.data()[(4 * k + j) * plane + loc];
                target.data_mut()[4 * r + j] = batch.rpn.deltas[r][j];
                bw.data_mut()[4 * r + j] = if batch.rpn.labels[r] == 1 { 1.0 } else { 0.0 };
            }
        }
        let (rpn_cls, d_logits) = softmax_ce_loss(&logits, &batch.rpn.labels)?;
        let (rpn_box, d_pred) = smooth_l1_loss(&pred, &target, &bw)?;

        // head
        let rois: Vec<BBox> = batch.rois.iter().map(|s| s.roi).collect();
        let head = self.head_forward(trunk, &rois)?;
        let stds = self.cfg.bbox_stds;
        let r = rois.len();
        let mut labels = Vec::with_capacity(r);
        let mut htarget = Tensor::zeros(&[r, 4]);
        let mut hw = Tensor::zeros(&[r, 4]);
        for (i, s) in batch.rois.iter().enumerate() {
            match s.label {
                RoiLabel::Foreground { target, .. } => {
                    labels.push(1);
                    for (j, v) in target.to_array().iter().enumerate() {
                        htarget.data_mut()[4 * i + j] = v / stds[j];
                        hw.data_mut()[4 * i + j] = 1.0;
                    }
                }
                RoiLabel::Background => labels.push(0),
            }
        }
        let (head_cls, d_cls) = softmax_ce_loss(&head.cls, &labels)?;
        let (head_box, d_reg) = smooth_l1_loss(&head.reg, &htarget, &hw)?;
        let losses = LossBreakdown {
            rpn_cls,
            rpn_box,
            head_cls,
            head_box,
            total: w.rpn_cls * rpn_cls + w.rpn_box * rpn_box + w.head_cls * head_cls + w.head_box * head_box,
        };
        let norms = match &head.cache {
            HeadCache::Concat(c) => c.blob_norms.clone(),
            HeadCache::Plain(_) => Vec::new(),
        };
        if !grads {
            return Ok((losses, None, norms));
        }

        // head backward
        let (d_hid_c, g_cls_w, g_cls_b) = self.cls.backward(&head.hidden, &d_cls.scaled(w.head_cls))?;
        let (d_hid_r, g_reg_w, g_reg_b) = self.reg.backward(&head.hidden, &d_reg.scaled(w.head_box))?;
        let mut d_hid = d_hid_c;
        d_hid.add_assign(&d_hid_r)?;
        let d_pre = relu_backward(&head.hidden, &d_hid);
        let (d_flat, g_fc_w, g_fc_b) = self.fc.backward(&head.flat, &d_pre)?;
        let p = self.cfg.pooled;
        let d_feats = d_flat.reshape(&[r, self.head_channels(), p, p])?;
        let mut d_taps: Vec<Tensor> = trunk.taps.iter().map(|(t, _)| Tensor::zeros(t.shape())).collect();
        let mut g_reduce = Vec::new();
        match &head.cache {
            HeadCache::Plain(caches) => {
                let last = d_taps.len() - 1;
                for (c, d) in caches.iter().zip(d_feats.unstack()) {
                    roi_pool_backward_into(c, &d, &mut d_taps[last]);
                }
            }
            HeadCache::Concat(cache) => {
                let concat = self.concat.as_ref().expect("concat cache implies concat head");
                let (dt, g) = concat.backward(&trunk.taps, cache, &d_feats)?;
                d_taps = dt;
                g_reduce = g;
            }
        }

        // proposal network backward
        let mut d_rpn_cls = Tensor::zeros(trunk.rpn_cls.shape());
        let mut d_rpn_reg = Tensor::zeros(trunk.rpn_reg.shape());
        for (r, &i) in batch.rpn.anchors.iter().enumerate() {
            let (k, loc) = self.anchor_channels(i);
            d_rpn_cls.data_mut()[(2 * k) * plane + loc] += w.rpn_cls * d_logits.data()[2 * r];
            d_rpn_cls.data_mut()[(2 * k + 1) * plane + loc] += w.rpn_cls * d_logits.data()[2 * r + 1];
            for j in 0..4 {
                d_rpn_reg.data_mut()[(4 * k + j) * plane + loc] += w.rpn_box * d_pred.data()[4 * r + j];
            }
        }
        let (dh1, g_rc_w, g_rc_b) = self.rpn_cls.backward(&trunk.rpn_hidden, &d_rpn_cls)?;
        let (dh2, g_rr_w, g_rr_b) = self.rpn_reg.backward(&trunk.rpn_hidden, &d_rpn_reg)?;
        let mut dh = dh1;
        dh.add_assign(&dh2)?;
        let dh = relu_backward(&trunk.rpn_hidden, &dh);
        let last = trunk.taps.len() - 1;
        let (d_last, g_conv_w, g_conv_b) = self.rpn_conv.backward(&trunk.taps[last].0, &dh)?;
        d_taps[last].add_assign(&d_last)?;

        let tap_grads: Vec<Option<Tensor>> = d_taps.into_iter().map(Some).collect();
        let mut out = self.backbone.backward(&trunk.cache, &tap_grads)?;
        out.extend([g_conv_w, g_conv_b, g_rc_w, g_rc_b, g_rr_w, g_rr_b]);
        out.extend(g_reduce);
        out.extend([g_fc_w, g_fc_b, g_cls_w, g_cls_b, g_reg_w, g_reg_b]);
        Ok((losses, Some(out), norms))
    }

    /// Fingerprint of the piecewise choices `batch_loss` makes on `batch`:
    /// active relu units, pooling winners and smooth-L1 branches.
    pub fn kink_signature(&self, batch: &TrainBatch) -> Result<u64, PipelineError> {
        let mut h = DefaultHasher::new();
        let trunk = self.trunk(&batch.image)?;
        trunk.cache.hash_pattern(&mut h);
        hash_active(trunk.rpn_hidden.data(), &mut h);
        let plane = trunk.fmap_w * trunk.fmap_h;
        for (r, &i) in batch.rpn.anchors.iter().enumerate() {
            if batch.rpn.labels[r] == 1 {
                let (k, loc) = self.anchor_channels(i);
                for j in 0..4 {
                    let d = trunk.rpn_reg.data()[(4 * k + j) * plane + loc] - batch.rpn.deltas[r][j];
                    (d.abs() < 1.0).hash(&mut h);
                }
            }
        }
        let rois: Vec<BBox> = batch.rois.iter().map(|s| s.roi).collect();
        let head = self.head_forward(&trunk, &rois)?;
        match &head.cache {
            HeadCache::Plain(c) => c.iter().for_each(|c| c.argmax.hash(&mut h)),
            HeadCache::Concat(c) => c.hash_pattern(&mut h),
        }
        hash_active(head.hidden.data(), &mut h);
        for (i, s) in batch.rois.iter().enumerate() {
            if let RoiLabel::Foreground { target, .. } = s.label {
                for (j, v) in target.to_array().iter().enumerate() {
                    let d = head.reg.data()[4 * i + j] - v / self.cfg.bbox_stds[j];
                    (d.abs() < 1.0).hash(&mut h);
                }
            }
        }
        Ok(h.finish())
    }

    /// Scores and boxes for every proposal: resize-free, in the input
    /// image's coordinates, before thresholding.
    pub fn score_proposals(
        &self,
        image: &Tensor,
        rpn: &RpnParams,
        proposals: usize,
    ) -> Result<Vec<ScoredRegion<BBox>>, PipelineError> {
        let trunk = self.trunk(image)?;
        let props = self.proposals(&trunk, rpn, proposals);
        let rois: Vec<BBox> = props.iter().map(|p| p.region).collect();
        if rois.is_empty() {
            return Ok(Vec::new());
        }
        let head = self.head_forward(&trunk, &rois)?;
        let prob = softmax(&head.cls)?;
        let stds = self.cfg.bbox_stds;
        let (w, h) = (trunk.image_w as f64, trunk.image_h as f64);
        let mut out = Vec::with_capacity(rois.len());
        for (i, roi) in rois.iter().enumerate() {
            let r = &head.reg.data()[4 * i..4 * i + 4];
            let d = BoxDelta {
                tx: r[0] * stds[0],
                ty: r[1] * stds[1],
                tw: r[2] * stds[2],
                th: r[3] * stds[3],
            }
            .clamp_scale(MAX_LOG_SCALE);
            let b = decode_delta(roi, &d).map(|b| clip_box(&b, w, h)).unwrap_or(*roi);
            let s = prob.data()[2 * i + 1];
            if s.is_finite() && !b.is_degenerate() {
                out.push(ScoredRegion {
                    region: b,
                    score: s.clamp(0.0, 1.0),
                });
            }
        }
        Ok(out)
    }

    /// Detections above `min_score` after NMS at `nms_thr`, highest score
    /// first.
    pub fn detect(
        &self,
        image: &Tensor,
        rpn: &RpnParams,
        proposals: usize,
        min_score: f64,
        nms_thr: f64,
    ) -> Result<Vec<ScoredRegion<BBox>>, PipelineError> {
        let scored: Vec<ScoredRegion<BBox>> = self
            .score_proposals(image, rpn, proposals)?
            .into_iter()
            .filter(|d| d.score > min_score)
            .collect();
        Ok(nms(&scored, nms_thr).into_iter().map(|i| scored[i]).collect())
    }

    /// Weight container with the model layout in its metadata.
    pub fn to_weight_file(&self, extra: serde_json::Value) -> WeightFile {
        let meta = serde_json::json!({
            "model": self.cfg,
            "concat": self.concat.as_ref().map(|c| &c.cfg),
            "extra": extra,
        });
        let tensors = self
            .param_names()
            .into_iter()
            .zip(self.params().into_iter().cloned())
            .collect();
        WeightFile::new(meta.to_string(), tensors)
    }

    /// Rebuilds a model from [`Detector::to_weight_file`] output.
    pub fn from_weight_file(wf: &WeightFile) -> Result<(Self, serde_json::Value), PipelineError> {
        #[derive(Deserialize)]
        struct Meta {
            model: ModelConfig,
            concat: Option<ConcatConfig>,
            #[serde(default)]
            extra: serde_json::Value,
        }
        let meta: Meta =
            serde_json::from_str(&wf.meta).map_err(|e| NetError::Weights(format!("unreadable model metadata: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Detector::new(meta.model, &mut rng)?;
        if let Some(c) = meta.concat {
            model.enable_concat(c, &mut rng)?;
        }
        let names = model.param_names();
        wf.assign(&names, model.params_mut())?;
        Ok((model, meta.extra))
    }
}

impl Differentiable for Detector {
    type Input = TrainBatch;

    fn param_names(&self) -> Vec<String> {
        let mut n = self.backbone.param_names();
        for layer in ["rpn.conv", "rpn.cls", "rpn.reg"] {
            n.push(format!("{layer}.weight"));
            n.push(format!("{layer}.bias"));
        }
        if self.concat.is_some() {
            n.push("concat.reduce.weight".into());
            n.push("concat.reduce.bias".into());
        }
        for layer in ["head.fc", "head.cls", "head.reg"] {
            n.push(format!("{layer}.weight"));
            n.push(format!("{layer}.bias"));
        }
        n
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.backbone.params();
        for c in [&self.rpn_conv, &self.rpn_cls, &self.rpn_reg] {
            p.push(&c.weight);
            p.push(&c.bias);
        }
        if let Some(c) = &self.concat {
            p.push(&c.reduce.weight);
            p.push(&c.reduce.bias);
        }
        for l in [&self.fc, &self.cls, &self.reg] {
            p.push(&l.weight);
            p.push(&l.bias);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.backbone.params_mut();
        for c in [&mut self.rpn_conv, &mut self.rpn_cls, &mut self.rpn_reg] {
            p.push(&mut c.weight);
            p.push(&mut c.bias);
        }
        if let Some(c) = &mut self.concat {
            p.push(&mut c.reduce.weight);
            p.push(&mut c.reduce.bias);
        }
        for l in [&mut self.fc, &mut self.cls, &mut self.reg] {
            p.push(&mut l.weight);
            p.push(&mut l.bias);
        }
        p
    }

    fn loss_and_grads(&self, input: &TrainBatch) -> Result<(f64, Vec<Tensor>), NetError> {
        let run = || -> Result<(f64, Vec<Tensor>), PipelineError> {
            let trunk = self.trunk(&input.image)?;
            let (l, g, _) = self.batch_loss(&trunk, input, true)?;
            Ok((l.total, g.expect("requested gradients")))
        };
        run().map_err(|e| match e {
            PipelineError::Net(n) => n,
            other => NetError::Shape(other.to_string()),
        })
    }

    fn kink_signature(&self, input: &TrainBatch) -> Result<u64, NetError> {
        Detector::kink_signature(self, input).map_err(|e| NetError::Shape(e.to_string()))
    }

    fn loss(&self, input: &TrainBatch) -> Result<f64, NetError> {
        let trunk = self.trunk(&input.image).map_err(|e| NetError::Shape(e.to_string()))?;
        let (l, _, _) = self
            .batch_loss(&trunk, input, false)
            .map_err(|e| NetError::Shape(e.to_string()))?;
        Ok(l.total)
    }
}
