//! Foreground/background RoI sampling and hard-negative mining.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{encode_delta, BoxDelta};
use crate::geometry::{iou_rect, score_order, BBox, ScoredRegion};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("invalid sampling parameters: {0}")]
    Params(String),
    #[error("hard negatives from several images passed together: {0} and {1}")]
    MixedImages(String, String),
    #[error("{path}:{line}: {msg}")]
    Store { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingParams {
    /// A RoI is foreground when its best IoU with a face exceeds this.
    pub fg_iou: f64,
    /// RoIs per image.
    pub batch: usize,
    /// Target foreground share; 0.25 gives 1:3.
    pub fg_fraction: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            fg_iou: 0.5,
            batch: 128,
            fg_fraction: 0.25,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<(), SamplingError> {
        if self.batch < 4 {
            return Err(SamplingError::Params(format!("batch {} below 4", self.batch)));
        }
        if !(0.0..=1.0).contains(&self.fg_iou) || !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(SamplingError::Params("thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Foreground quota of a full batch.
    pub fn fg_quota(&self) -> usize {
        (self.batch as f64 * self.fg_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RoiLabel {
    Foreground { gt: usize, target: BoxDelta },
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSample {
    pub roi: BBox,
    pub label: RoiLabel,
    pub is_hard: bool,
}

impl RoiSample {
    pub fn is_foreground(&self) -> bool {
        matches!(self.label, RoiLabel::Foreground { .. })
    }
}

/// Counts describing a sampled batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchStats {
    pub foreground: usize,
    pub background: usize,
    pub hard: usize,
    /// Hard negatives that did not fit into the background slots.
    pub dropped_hard: usize,
    /// The batch could not be filled at the requested ratio.
    pub ratio_shortfall: bool,
}

impl BatchStats {
    /// Achieved foreground:background ratio (`fg / bg`), infinite when no
    /// background was sampled.
    pub fn fg_bg_ratio(&self) -> f64 {
        if self.background == 0 {
            f64::INFINITY
        } else {
            self.foreground as f64 / self.background as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiBatch {
    pub samples: Vec<RoiSample>,
    pub stats: BatchStats,
}

fn max_iou(roi: &BBox, gts: &[BBox]) -> (Option<usize>, f64) {
    gts.iter().enumerate().fold((None, 0.0), |(bi, bv), (i, g)| {
        let v = iou_rect(roi, g);
        if bi.is_none() || v > bv {
            (Some(i), v)
        } else {
            (bi, bv)
        }
    })
}

fn pick<R: Rng>(rng: &mut R, pool: &[usize], n: usize) -> Vec<usize> {
    if n >= pool.len() {
        return pool.to_vec();
    }
    sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
}

/// Labels proposals against the faces and samples a batch at the
/// configured foreground share. When one pool runs short the other fills
/// the remaining slots. Degenerate proposals are skipped.
pub fn sample_rois<R: Rng>(
    proposals: &[BBox],
    gts: &[BBox],
    params: &SamplingParams,
    rng: &mut R,
) -> Result<RoiBatch, SamplingError> {
    params.validate()?;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let mut matched = Vec::with_capacity(proposals.len());
    for (i, p) in proposals.iter().enumerate() {
        let (g, v) = max_iou(p, gts);
        matched.push(g);
        if p.is_degenerate() {
            continue;
        }
        if g.is_some() && v > params.fg_iou {
            fg.push(i);
        } else {
            bg.push(i);
        }
    }
    let quota = params.fg_quota();
    let mut n_fg = quota.min(fg.len());
    let n_bg = (params.batch - n_fg).min(bg.len());
    if n_fg + n_bg < params.batch {
        n_fg = (params.batch - n_bg).min(fg.len());
    }
    let fg_pick = pick(rng, &fg, n_fg);
    let bg_pick = pick(rng, &bg, n_bg);

    let mut samples = Vec::with_capacity(n_fg + n_bg);
    for &i in &fg_pick {
        let gt = matched[i].expect("foreground has a match");
        let target = encode_delta(&proposals[i], &gts[gt]).expect("positive-area boxes");
        samples.push(RoiSample {
            roi: proposals[i],
            label: RoiLabel::Foreground { gt, target },
            is_hard: false,
        });
    }
    for &i in &bg_pick {
        samples.push(RoiSample {
            roi: proposals[i],
            label: RoiLabel::Background,
            is_hard: false,
        });
    }
    Ok(RoiBatch {
        stats: BatchStats {
            foreground: n_fg,
            background: n_bg,
            hard: 0,
            dropped_hard: 0,
            ratio_shortfall: n_fg != quota || n_fg + n_bg != params.batch,
        },
        samples,
    })
}

/// A confidently scored detection that overlaps no face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardNegative {
    pub image_id: String,
    #[serde(rename = "box")]
    pub roi: BBox,
    pub score: f64,
}

/// Detections scoring above `score_thr` whose best IoU with every face is
/// below `iou_thr`.
pub fn mine_hard_negatives(
    image_id: &str,
    dets: &[ScoredRegion<BBox>],
    gts: &[BBox],
    score_thr: f64,
    iou_thr: f64,
) -> Vec<HardNegative> {
    dets.iter()
        .filter(|d| d.score > score_thr && max_iou(&d.region, gts).1 < iou_thr)
        .map(|d| HardNegative {
            image_id: image_id.to_string(),
            roi: d.region,
            score: d.score,
        })
        .collect()
}

/// Adds an image's hard negatives to its batch as flagged backgrounds.
///
/// Background slots are `batch - foreground`. Hard negatives take slots
/// first, highest harvest score first; ordinary backgrounds fill what is
/// left, evicted uniformly at random when there is no room. Hard negatives
/// beyond the slot count are dropped and counted.
pub fn inject_hard_negatives<R: Rng>(
    batch: RoiBatch,
    hards: &[HardNegative],
    batch_size: usize,
    rng: &mut R,
) -> Result<RoiBatch, SamplingError> {
    if hards.is_empty() {
        return Ok(batch);
    }
    if let Some(other) = hards.iter().find(|h| h.image_id != hards[0].image_id) {
        return Err(SamplingError::MixedImages(
            hards[0].image_id.clone(),
            other.image_id.clone(),
        ));
    }
    let (fg, ordinary): (Vec<RoiSample>, Vec<RoiSample>) = batch.samples.into_iter().partition(|s| s.is_foreground());
    let slots = batch_size.saturating_sub(fg.len());

    let as_scored: Vec<ScoredRegion<BBox>> = hards
        .iter()
        .map(|h| ScoredRegion {
            region: h.roi,
            score: h.score,
        })
        .collect();
    let order = score_order(&as_scored);
    let kept_hard: Vec<usize> = order.into_iter().take(slots).collect();
    let room = slots - kept_hard.len();
    let keep_idx: Vec<usize> = if ordinary.len() > room {
        let mut v = sample(rng, ordinary.len(), room).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..ordinary.len()).collect()
    };

    let mut samples = fg;
    let n_fg = samples.len();
    samples.extend(kept_hard.iter().map(|&i| RoiSample {
        roi: hards[i].roi,
        label: RoiLabel::Background,
        is_hard: true,
    }));
    samples.extend(keep_idx.iter().map(|&i| ordinary[i]));
    let stats = BatchStats {
        foreground: n_fg,
        background: samples.len() - n_fg,
        hard: kept_hard.len(),
        dropped_hard: hards.len() - kept_hard.len(),
        ratio_shortfall: batch.stats.ratio_shortfall || hards.len() > slots,
    };
    Ok(RoiBatch { samples, stats })
}

/// Appends records to a JSON-lines hard-negative store.
pub fn append_hard_negatives(path: &Path, hards: &[HardNegative]) -> Result<(), SamplingError> {
    let io = |e| SamplingError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    let mut w = BufWriter::new(f);
    for h in hards {
        let line = serde_json::to_string(h).expect("hard negative serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_hard_negatives(path: &Path) -> Result<Vec<HardNegative>, SamplingError> {
    let f = File::open(path).map_err(|e| SamplingError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| SamplingError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let h = serde_json::from_str(&line).map_err(|e| SamplingError::Store {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(h);
    }
    Ok(out)
}

/// Groups hard negatives by image id.
pub fn group_by_image(hards: &[HardNegative]) -> BTreeMap<String, Vec<HardNegative>> {
    let mut map: BTreeMap<String, Vec<HardNegative>> = BTreeMap::new();
    for h in hards {
        map.entry(h.image_id.clone()).or_default().push(h.clone());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// `n_fg` proposals overlapping the face at (0,0,100,100) and `n_bg`
    /// far away.
    fn pools(n_fg: usize, n_bg: usize) -> (Vec<BBox>, Vec<BBox>) {
        let mut p = Vec::new();
        for i in 0..n_fg {
            let d = (i % 10) as f64;
            p.push(bx(d, d, 100.0 + d, 100.0 + d));
        }
        for i in 0..n_bg {
            let x = 200.0 + i as f64;
            p.push(bx(x, 0.0, x + 50.0, 50.0));
        }
        (p, vec![bx(0.0, 0.0, 100.0, 100.0)])
    }

    #[test]
    fn ample_pools_give_one_to_three() {
        let (p, g) = pools(100, 500);
        let b = sample_rois(&p, &g, &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b.stats.foreground, b.stats.background), (32, 96));
        assert!(!b.stats.ratio_shortfall);
        assert!((b.stats.fg_bg_ratio() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_overlap_all_background() {
        let (p, g) = pools(0, 300);
        let b = sample_rois(&p, &g, &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b.stats.foreground, b.stats.background), (0, 128));
        assert!(b.stats.ratio_shortfall);
    }

    #[test]
    fn foreground_shortfall_filled_with_background() {
        let (p, g) = pools(10, 300);
        let b = sample_rois(&p, &g, &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b.stats.foreground, b.stats.background), (10, 118));
        assert!(b.stats.ratio_shortfall);
    }

    #[test]
    fn background_shortfall_filled_with_foreground() {
        let (p, g) = pools(100, 20);
        let b = sample_rois(&p, &g, &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!((b.stats.foreground, b.stats.background), (100, 20));
    }

    #[test]
    fn empty_and_invalid() {
        let b = sample_rois(&[], &[], &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.samples.is_empty());
        let bad = SamplingParams {
            batch: 3,
            ..Default::default()
        };
        assert!(sample_rois(&[], &[], &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn foreground_targets_encode_matched_face() {
        let (p, g) = pools(5, 5);
        let b = sample_rois(&p, &g, &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for s in &b.samples {
            if let RoiLabel::Foreground { gt, target } = s.label {
                assert_eq!(target, encode_delta(&s.roi, &g[gt]).unwrap());
            }
        }
    }

    #[test]
    fn mining_rules() {
        let g = [bx(0.0, 0.0, 10.0, 10.0)];
        // IoU 0.3 exactly: width overlap w gives 10w / (200 − 10w) = 0.3 -> w = 60/13
        let w = 60.0 / 13.0;
        let low = bx(10.0 - w, 0.0, 20.0 - w, 10.0);
        assert!((iou_rect(&low, &g[0]) - 0.3).abs() < 1e-12);
        let high = bx(2.5, 0.0, 12.5, 10.0); // IoU 0.6
        assert!((iou_rect(&high, &g[0]) - 0.6).abs() < 1e-12);
        let dets = [
            ScoredRegion::new(low, 0.9).unwrap(),
            ScoredRegion::new(high, 0.9).unwrap(),
            ScoredRegion::new(low, 0.5).unwrap(),
        ];
        let h = mine_hard_negatives("img", &dets, &g, 0.8, 0.5);
        assert_eq!(h.len(), 1);
        assert_eq!(h[0].roi, low);
        assert_eq!(h[0].image_id, "img");
    }

    fn hards(n: usize) -> Vec<HardNegative> {
        (0..n)
            .map(|i| HardNegative {
                image_id: "a".into(),
                roi: bx(500.0 + i as f64, 0.0, 520.0 + i as f64, 20.0),
                score: 0.81 + 0.18 * (i as f64 / n as f64),
            })
            .collect()
    }

    fn base() -> RoiBatch {
        let (p, g) = pools(100, 500);
        sample_rois(&p, &g, &SamplingParams::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn injection_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(inject_hard_negatives(base(), &[], 128, &mut rng).unwrap(), base());

        let b = inject_hard_negatives(base(), &hards(5), 128, &mut rng).unwrap();
        assert_eq!(b.samples.len(), 128);
        assert_eq!(b.stats.hard, 5);
        assert_eq!(
            b.samples.iter().filter(|s| !s.is_foreground() && !s.is_hard).count(),
            91
        );
        assert_eq!(b.stats.foreground, 32);

        let hs = hards(200);
        let b = inject_hard_negatives(base(), &hs, 128, &mut rng).unwrap();
        assert_eq!(b.stats.hard, 96);
        assert_eq!(b.stats.dropped_hard, 104);
        assert_eq!(b.samples.iter().filter(|s| !s.is_foreground() && !s.is_hard).count(), 0);
        let min_kept = b
            .samples
            .iter()
            .filter(|s| s.is_hard)
            .map(|s| s.roi.x1)
            .fold(f64::MAX, f64::min);
        // scores increase with index, so the 96 hardest are the last ones
        assert_eq!(min_kept, 500.0 + 104.0);
    }

    #[test]
    fn injection_rejects_mixed_images() {
        let mut hs = hards(2);
        hs[1].image_id = "b".into();
        assert!(inject_hard_negatives(base(), &hs, 128, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn store_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("hard.jsonl");
        append_hard_negatives(&p, &hards(3)).unwrap();
        append_hard_negatives(&p, &hards(2)).unwrap();
        let back = read_hard_negatives(&p).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(back[..3], hards(3)[..]);
        assert_eq!(group_by_image(&back)["a"].len(), 5);
    }
}
