//! Anchor tiling for the region proposal network, box-delta coding and
//! proposal selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou_rect, nms, score_order, BBox, ScoredRegion};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnchorError {
    #[error("degenerate box")]
    DegenerateBox,
    #[error("non-finite box delta")]
    NonFiniteDelta,
    #[error("invalid anchor config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Square side lengths in pixels; each anchor of size `s` has area `s²`.
    pub sizes: Vec<f64>,
    /// Height-to-width ratios.
    pub ratios: Vec<f64>,
    /// Pixels between neighbouring anchor centers.
    pub stride: usize,
}

impl Default for AnchorConfig {
    /// Four sizes by three ratios: twelve anchors per location.
    fn default() -> Self {
        AnchorConfig {
            sizes: vec![64.0, 128.0, 256.0, 512.0],
            ratios: vec![1.0, 2.0, 0.5],
            stride: 16,
        }
    }
}

impl AnchorConfig {
    /// The classic three-size layout without the smallest size group.
    pub fn nine_anchor() -> Self {
        AnchorConfig {
            sizes: vec![128.0, 256.0, 512.0],
            ..Default::default()
        }
    }

    pub fn anchors_per_location(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        let bad = |m: &str| Err(AnchorError::InvalidConfig(m.to_string()));
        if self.sizes.is_empty() || self.ratios.is_empty() {
            return bad("sizes and ratios must be non-empty");
        }
        if self.sizes.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("sizes must be positive");
        }
        if self.sizes.windows(2).any(|w| w[1] <= w[0]) {
            return bad("sizes must be strictly increasing");
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return bad("ratios must be positive");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        Ok(())
    }

    /// Width and height of every anchor shape, in the order used at each
    /// location (sizes outer, ratios inner).
    pub fn shapes(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.anchors_per_location());
        for &s in &self.sizes {
            for &r in &self.ratios {
                let root = r.sqrt();
                out.push((s / root, s * root));
            }
        }
        out
    }
}

/// Feature-map extent for an image side at the given stride. Inputs are
/// zero-padded up to a stride multiple, so this rounds up.
pub fn fmap_extent(image_side: usize, stride: usize) -> usize {
    image_side.div_ceil(stride)
}

/// Anchors for a `fmap_w × fmap_h` feature map, location-major: index
/// `(row * fmap_w + col) * A + k` for anchor shape `k`.
pub fn generate_anchors(cfg: &AnchorConfig, fmap_w: usize, fmap_h: usize) -> Vec<BBox> {
    let shapes = cfg.shapes();
    let stride = cfg.stride as f64;
    let mut out = Vec::with_capacity(fmap_w * fmap_h * shapes.len());
    for row in 0..fmap_h {
        let cy = (row as f64 + 0.5) * stride;
        for col in 0..fmap_w {
            let cx = (col as f64 + 0.5) * stride;
            for &(w, h) in &shapes {
                out.push(BBox {
                    x1: cx - 0.5 * w,
                    y1: cy - 0.5 * h,
                    x2: cx + 0.5 * w,
                    y2: cy + 0.5 * h,
                });
            }
        }
    }
    out
}

/// Regression target relative to an anchor: center offsets in units of
/// anchor size and log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        BoxDelta {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Caps the log-size terms so decoding cannot overflow.
    pub fn clamp_scale(self, max_log: f64) -> Self {
        BoxDelta {
            tw: self.tw.min(max_log),
            th: self.th.min(max_log),
            ..self
        }
    }
}

pub fn encode_delta(anchor: &BBox, gt: &BBox) -> Result<BoxDelta, AnchorError> {
    if anchor.is_degenerate() || gt.is_degenerate() {
        return Err(AnchorError::DegenerateBox);
    }
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        tx: (gcx - acx) / aw,
        ty: (gcy - acy) / ah,
        tw: (gt.width() / aw).ln(),
        th: (gt.height() / ah).ln(),
    })
}

pub fn decode_delta(anchor: &BBox, d: &BoxDelta) -> Result<BBox, AnchorError> {
    if anchor.is_degenerate() {
        return Err(AnchorError::DegenerateBox);
    }
    if !d.is_finite() {
        return Err(AnchorError::NonFiniteDelta);
    }
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    let cx = acx + d.tx * aw;
    let cy = acy + d.ty * ah;
    let w = aw * d.tw.exp();
    let h = ah * d.th.exp();
    if !(w.is_finite() && h.is_finite()) {
        return Err(AnchorError::NonFiniteDelta);
    }
    Ok(BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorMatch {
    pub label: AnchorLabel,
    /// Ground truth with the highest IoU, if any ground truth exists.
    pub gt: Option<usize>,
    pub max_iou: f64,
}

/// Labels anchors for proposal-network training.
///
/// Positive when the best IoU reaches `pos_thr`, or when the anchor is a
/// best match for some ground truth (ties included, IoU must be non-zero).
/// Negative when the best IoU is below `neg_thr`. Everything else is
/// ignored.
pub fn label_anchors(anchors: &[BBox], gts: &[BBox], pos_thr: f64, neg_thr: f64) -> Vec<AnchorMatch> {
    debug_assert!(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0);
    if gts.is_empty() {
        return anchors
            .iter()
            .map(|_| AnchorMatch {
                label: AnchorLabel::Negative,
                gt: None,
                max_iou: 0.0,
            })
            .collect();
    }
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou_rect(a, g)).collect())
        .collect();
    let mut gt_best = vec![0.0f64; gts.len()];
    for row in &ious {
        for (g, &v) in row.iter().enumerate() {
            gt_best[g] = gt_best[g].max(v);
        }
    }
    ious.iter()
        .map(|row| {
            let (best_gt, max_iou) =
                row.iter().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (g, &v)| if v > acc.1 { (g, v) } else { acc },
                );
            let is_gt_argmax = row.iter().zip(&gt_best).any(|(&v, &best)| best > 0.0 && v == best);
            let label = if max_iou >= pos_thr || is_gt_argmax {
                AnchorLabel::Positive
            } else if max_iou < neg_thr {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            AnchorMatch {
                label,
                gt: Some(best_gt),
                max_iou,
            }
        })
        .collect()
}

/// Top `pre_nms_k` by score, NMS at `nms_thr`, then the first `post_nms_k`
/// survivors. Output scores are non-increasing.
pub fn select_proposals(
    scored: &[ScoredRegion<BBox>],
    pre_nms_k: usize,
    nms_thr: f64,
    post_nms_k: usize,
) -> Vec<ScoredRegion<BBox>> {
    debug_assert!(pre_nms_k >= post_nms_k && post_nms_k >= 1);
    let top: Vec<ScoredRegion<BBox>> = score_order(scored)
        .into_iter()
        .take(pre_nms_k)
        .map(|i| scored[i])
        .collect();
    nms(&top, nms_thr)
        .into_iter()
        .take(post_nms_k)
        .map(|i| top[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn anchor_counts() {
        let cfg = AnchorConfig::default();
        assert_eq!(generate_anchors(&cfg, 1, 1).len(), 12);
        assert_eq!(generate_anchors(&cfg, 2, 2).len(), 48);
        assert_eq!(AnchorConfig::nine_anchor().anchors_per_location(), 9);
    }

    #[test]
    fn area_preserving_shapes() {
        let cfg = AnchorConfig {
            sizes: vec![128.0],
            ratios: vec![2.0],
            stride: 16,
        };
        let a = generate_anchors(&cfg, 1, 1)[0];
        assert!((a.width() - 90.50966799187808).abs() < 1e-9);
        assert!((a.height() - 181.01933598375618).abs() < 1e-9);
        assert!((a.area() - 16384.0).abs() < 1e-6);
        assert_eq!(a.center(), (8.0, 8.0));
    }

    #[test]
    fn anchor_layout_is_location_major() {
        let cfg = AnchorConfig::default();
        let anchors = generate_anchors(&cfg, 3, 2);
        // row 1, col 2, shape 5
        let (cx, cy) = anchors[(3 + 2) * 12 + 5].center();
        assert!((cx - 2.5 * 16.0).abs() < 1e-9 && (cy - 1.5 * 16.0).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(AnchorConfig::default().validate().is_ok());
        let mut c = AnchorConfig {
            sizes: vec![128.0, 64.0],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.sizes = vec![];
        assert!(c.validate().is_err());
        let c = AnchorConfig {
            ratios: vec![0.0],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn delta_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_delta(&a, &a).unwrap(), BoxDelta::default());
        let g = bx(0.0, 0.0, 20.0, 20.0);
        let d = encode_delta(&a, &g).unwrap();
        let ln2 = 2f64.ln();
        assert!((d.tx - 0.5).abs() < 1e-12 && (d.ty - 0.5).abs() < 1e-12);
        assert!((d.tw - ln2).abs() < 1e-12 && (d.th - ln2).abs() < 1e-12);
        let back = decode_delta(&a, &d).unwrap();
        for (x, y) in [(back.x1, 0.0), (back.y1, 0.0), (back.x2, 20.0), (back.y2, 20.0)] {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(decode_delta(&a, &BoxDelta::default()).unwrap(), a);
    }

    #[test]
    fn delta_errors_and_extremes() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let z = bx(3.0, 3.0, 3.0, 8.0);
        assert_eq!(encode_delta(&z, &a), Err(AnchorError::DegenerateBox));
        assert_eq!(encode_delta(&a, &z), Err(AnchorError::DegenerateBox));
        let nan = BoxDelta {
            tx: f64::NAN,
            ..Default::default()
        };
        assert_eq!(decode_delta(&a, &nan), Err(AnchorError::NonFiniteDelta));
        let tiny = decode_delta(
            &a,
            &BoxDelta {
                tx: 0.0,
                ty: 0.0,
                tw: -50.0,
                th: -50.0,
            },
        )
        .unwrap();
        assert!(tiny.x1 <= tiny.x2 && tiny.y1 <= tiny.y2);
        assert!(tiny.area() < 1e-40);
    }

    #[test]
    fn labeling_rules() {
        let gts = [bx(0.0, 0.0, 10.0, 10.0)];
        let anchors = [
            bx(0.0, 0.0, 10.0, 10.0),
            bx(50.0, 50.0, 60.0, 60.0),
            bx(0.0, 0.0, 10.0, 14.0), // IoU 100/140 ≈ 0.714
            bx(0.0, 0.0, 10.0, 20.0), // IoU 0.5 -> ignore
        ];
        let l = label_anchors(&anchors, &gts, 0.7, 0.3);
        assert_eq!(l[0].label, AnchorLabel::Positive);
        assert_eq!(l[1].label, AnchorLabel::Negative);
        assert_eq!(l[2].label, AnchorLabel::Positive);
        assert_eq!(l[3].label, AnchorLabel::Ignore);
        assert_eq!(l[0].gt, Some(0));
    }

    #[test]
    fn argmax_anchor_is_positive_below_threshold() {
        // Best anchor overlaps the gt at IoU 0.4 exactly.
        let gts = [bx(0.0, 0.0, 10.0, 10.0)];
        let anchors = [
            bx(0.0, 0.0, 10.0, 4.0),
            bx(0.0, 0.0, 10.0, 2.0),
            bx(30.0, 0.0, 40.0, 10.0),
        ];
        let l = label_anchors(&anchors, &gts, 0.7, 0.3);
        assert!((l[0].max_iou - 0.4).abs() < 1e-12);
        assert_eq!(l[0].label, AnchorLabel::Positive);
        assert_eq!(l[1].label, AnchorLabel::Negative);
        assert_eq!(l[2].label, AnchorLabel::Negative);
    }

    #[test]
    fn empty_gts_all_negative() {
        let anchors = generate_anchors(&AnchorConfig::default(), 2, 2);
        assert!(label_anchors(&anchors, &[], 0.7, 0.3)
            .iter()
            .all(|m| m.label == AnchorLabel::Negative && m.gt.is_none()));
    }

    #[test]
    fn proposal_selection() {
        let disjoint: Vec<_> = (0..5)
            .map(|i| {
                let x = i as f64 * 20.0;
                ScoredRegion::new(bx(x, 0.0, x + 10.0, 10.0), 0.1 * i as f64).unwrap()
            })
            .collect();
        let kept = select_proposals(&disjoint, 6000, 0.7, 100);
        assert_eq!(kept.len(), 5);
        assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));

        let copies: Vec<_> = (0..300)
            .map(|i| ScoredRegion::new(bx(0.0, 0.0, 10.0, 10.0), (i % 7) as f64 / 7.0).unwrap())
            .collect();
        assert_eq!(select_proposals(&copies, 6000, 0.7, 100).len(), 1);
        assert_eq!(select_proposals(&disjoint, 3, 0.7, 2).len(), 2);
    }
}
