//! Multi-layer RoI features.
//!
//! Each selected backbone tap is RoI max-pooled to a fixed grid and
//! L2-normalized as a whole blob. The normalized blobs are concatenated
//! along channels, the concatenation is rescaled to a fixed Frobenius norm
//! (4700 by default), and a 1×1 convolution maps the result back to the
//! channel count the single-tap head expects. Every step has a backward
//! pass.

use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::net::layers::he_uniform;
use crate::net::{Conv2d, NetError, Tensor};

/// Norm below which a pooled blob is treated as dead.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("empty roi: ({x1}, {y1}, {x2}, {y2}) lies outside the feature map")]
    EmptyRoi { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("roi has no area")]
    DegenerateRoi,
    #[error("unnormalizable blob (norm {0:e})")]
    Unnormalizable(f64),
    #[error("spatial mismatch between blobs: {0:?} vs {1:?}")]
    SpatialMismatch(Vec<usize>, Vec<usize>),
    #[error("channel mismatch: 1x1 weights take {expected} channels, blob has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid concat config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcatConfig {
    /// Indices into the backbone's tap list.
    pub taps: Vec<usize>,
    /// Pooled grid side.
    pub pooled: usize,
    /// Frobenius norm of the concatenated blob after rescaling.
    pub target_norm: f64,
    /// Channels produced by the 1×1 reduction.
    pub output_channels: usize,
}

impl Default for ConcatConfig {
    fn default() -> Self {
        ConcatConfig {
            taps: vec![0, 1, 2],
            pooled: 7,
            target_norm: 4700.0,
            output_channels: 32,
        }
    }
}

impl ConcatConfig {
    pub fn validate(&self) -> Result<(), FeatError> {
        if self.taps.is_empty() {
            return Err(FeatError::Config("at least one tap is required".into()));
        }
        if self.pooled == 0 {
            return Err(FeatError::Config("pooled size must be at least 1".into()));
        }
        if !(self.target_norm > 0.0 && self.target_norm.is_finite()) {
            return Err(FeatError::Config("target norm must be positive".into()));
        }
        if self.output_channels == 0 {
            return Err(FeatError::Config("output channels must be positive".into()));
        }
        Ok(())
    }
}

/// Which input cell won each pooled output cell.
#[derive(Debug, Clone)]
pub struct RoiPoolCache {
    pub in_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

fn bin_bounds(start: f64, bin: f64, i: usize, limit: usize) -> (usize, usize) {
    let lo = (start + i as f64 * bin).floor().max(0.0) as usize;
    let hi = (start + (i + 1) as f64 * bin).ceil().max(0.0) as usize;
    let lo = lo.min(limit - 1);
    let hi = hi.clamp(lo + 1, limit);
    (lo, hi)
}

/// RoI max pooling of `fmap (1, c, h, w)` over `roi` (image pixels) into
/// `(1, c, out, out)`. Bin edges are rounded outward so no bin is empty;
/// ties go to the lowest flat index.
pub fn roi_pool(fmap: &Tensor, stride: usize, roi: &BBox, out: usize) -> Result<(Tensor, RoiPoolCache), FeatError> {
    let (n, c, h, w) = fmap.dims4()?;
    if n != 1 {
        return Err(NetError::Shape(format!("roi_pool expects batch 1, got {:?}", fmap.shape())).into());
    }
    if roi.is_degenerate() {
        return Err(FeatError::DegenerateRoi);
    }
    let s = stride as f64;
    let (fx1, fy1, fx2, fy2) = (roi.x1 / s, roi.y1 / s, roi.x2 / s, roi.y2 / s);
    if fx1 >= w as f64 || fy1 >= h as f64 || fx2 <= 0.0 || fy2 <= 0.0 || out == 0 {
        return Err(FeatError::EmptyRoi {
            x1: roi.x1,
            y1: roi.y1,
            x2: roi.x2,
            y2: roi.y2,
        });
    }
    let bw = (fx2 - fx1) / out as f64;
    let bh = (fy2 - fy1) / out as f64;
    let mut y = Tensor::zeros(&[1, c, out, out]);
    let mut argmax = vec![0usize; c * out * out];
    let xd = fmap.data();
    for by in 0..out {
        let (y0, y1) = bin_bounds(fy1, bh, by, h);
        for bx in 0..out {
            let (x0, x1) = bin_bounds(fx1, bw, bx, w);
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        let i = (ch * h + yy) * w + xx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                }
                let o = (ch * out + by) * out + bx;
                y.data_mut()[o] = best;
                argmax[o] = best_i;
            }
        }
    }
    Ok((
        y,
        RoiPoolCache {
            in_shape: fmap.shape().to_vec(),
            argmax,
        },
    ))
}

/// Adds the pooled-output gradient into `dfmap` at the winning cells.
pub fn roi_pool_backward_into(cache: &RoiPoolCache, dout: &Tensor, dfmap: &mut Tensor) {
    debug_assert_eq!(dfmap.shape(), &cache.in_shape[..]);
    let d = dfmap.data_mut();
    for (o, &i) in cache.argmax.iter().enumerate() {
        d[i] += dout.data()[o];
    }
}

pub fn roi_pool_backward(cache: &RoiPoolCache, dout: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(&cache.in_shape);
    roi_pool_backward_into(cache, dout, &mut d);
    d
}

/// `x / ‖x‖_F` over the whole tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor, FeatError> {
    let n = x.norm();
    if n <= NORM_EPSILON {
        return Err(FeatError::Unnormalizable(n));
    }
    Ok(x.clone().scaled(1.0 / n))
}

/// Gradient of [`l2_normalize`]: `(dy − y·⟨y, dy⟩) / ‖x‖`.
pub fn l2_normalize_backward(x: &Tensor, y: &Tensor, dy: &Tensor) -> Tensor {
    let n = x.norm();
    let inner = y.dot(dy);
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(y.data())
        .for_each(|(d, &yv)| *d = (*d - yv * inner) / n);
    dx
}

fn check_spatial(blobs: &[Tensor]) -> Result<(usize, usize), FeatError> {
    let first = blobs
        .first()
        .ok_or_else(|| FeatError::Config("no blobs to concatenate".into()))?;
    let (_, _, h, w) = first.dims4()?;
    for b in blobs {
        let (n, _, bh, bw) = b.dims4()?;
        if n != 1 || bh != h || bw != w {
            return Err(FeatError::SpatialMismatch(first.shape().to_vec(), b.shape().to_vec()));
        }
    }
    Ok((h, w))
}

fn concat_channels(blobs: &[Tensor]) -> Result<Tensor, FeatError> {
    let (h, w) = check_spatial(blobs)?;
    let c: usize = blobs.iter().map(|b| b.shape()[1]).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for b in blobs {
        data.extend_from_slice(b.data());
    }
    Ok(Tensor::from_vec(&[1, c, h, w], data)?)
}

/// Channel-wise concatenation rescaled so its Frobenius norm is exactly
/// `target_norm`.
pub fn concat_rescale(blobs: &[Tensor], target_norm: f64) -> Result<Tensor, FeatError> {
    let z = concat_channels(blobs)?;
    let n = z.norm();
    if n <= NORM_EPSILON {
        return Err(FeatError::Unnormalizable(n));
    }
    Ok(z.scaled(target_norm / n))
}

/// Gradient of [`concat_rescale`] split back per input blob.
pub fn concat_rescale_backward(blobs: &[Tensor], target_norm: f64, dout: &Tensor) -> Result<Vec<Tensor>, FeatError> {
    let z = concat_channels(blobs)?;
    let n = z.norm();
    let u = z.clone().scaled(1.0 / n);
    let inner = u.dot(dout);
    let k = target_norm / n;
    let dz: Vec<f64> = dout
        .data()
        .iter()
        .zip(u.data())
        .map(|(&d, &uv)| k * (d - uv * inner))
        .collect();
    let mut out = Vec::with_capacity(blobs.len());
    let mut off = 0;
    for b in blobs {
        let len = b.len();
        out.push(Tensor::from_vec(b.shape(), dz[off..off + len].to_vec())?);
        off += len;
    }
    Ok(out)
}

/// Pointwise channel mixing with a 1×1 convolution.
pub fn reduce_1x1(blob: &Tensor, reduce: &Conv2d) -> Result<Tensor, FeatError> {
    let (_, c, _, _) = blob.dims4()?;
    let (_, wc, kh, kw) = reduce.weight.dims4()?;
    if kh != 1 || kw != 1 {
        return Err(FeatError::Config(format!(
            "reduction weights must be 1x1, got {:?}",
            reduce.weight.shape()
        )));
    }
    if wc != c {
        return Err(FeatError::ChannelMismatch { expected: wc, got: c });
    }
    Ok(reduce.forward(blob)?)
}

/// Per-element magnitude of a blob of `elements` entries rescaled to
/// `target_norm`.
pub fn element_scale(target_norm: f64, elements: usize) -> f64 {
    target_norm / (elements as f64).sqrt()
}

/// The concatenation head: config plus the 1×1 reduction parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConcat {
    pub cfg: ConcatConfig,
    pub reduce: Conv2d,
}

/// Forward intermediates for a batch of RoIs.
pub struct ConcatCache {
    pools: Vec<Vec<RoiPoolCache>>,
    pooled: Vec<Vec<Tensor>>,
    normalized: Vec<Vec<Tensor>>,
    stacked: Tensor,
    /// Frobenius norm of each RoI's rescaled blob.
    pub blob_norms: Vec<f64>,
}

impl ConcatCache {
    /// Feeds the RoI pooling winners into `h`.
    pub fn hash_pattern(&self, h: &mut impl Hasher) {
        for c in self.pools.iter().flatten() {
            c.argmax.hash(h);
        }
    }
}

impl FeatureConcat {
    /// He-initialized reduction, divided by the per-element scale of the
    /// rescaled blob so outputs start at unit magnitude.
    pub fn new(cfg: ConcatConfig, tap_channels: &[usize], rng: &mut impl Rng) -> Result<Self, FeatError> {
        cfg.validate()?;
        let mut cin = 0;
        for &t in &cfg.taps {
            cin += *tap_channels
                .get(t)
                .ok_or_else(|| FeatError::Config(format!("tap {t} not among {} backbone taps", tap_channels.len())))?;
        }
        let scale = element_scale(cfg.target_norm, cin * cfg.pooled * cfg.pooled);
        let weight = he_uniform(&[cfg.output_channels, cin, 1, 1], cin, rng).scaled(1.0 / scale);
        Ok(FeatureConcat {
            reduce: Conv2d {
                weight,
                bias: Tensor::zeros(&[cfg.output_channels]),
                stride: 1,
                pad: 0,
            },
            cfg,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.reduce.weight.shape()[1]
    }

    /// Learning-rate multiplier that makes an SGD step on the reduction
    /// behave as if the blob had unit per-element scale.
    pub fn lr_multiplier(&self) -> f64 {
        let elements = self.input_channels() * self.cfg.pooled * self.cfg.pooled;
        element_scale(self.cfg.target_norm, elements).powi(-2)
    }

    /// Features for every RoI, stacked as `(R, output_channels, p, p)`.
    pub fn forward(&self, taps: &[(Tensor, usize)], rois: &[BBox]) -> Result<(Tensor, ConcatCache), FeatError> {
        let p = self.cfg.pooled;
        let mut pools = Vec::with_capacity(rois.len());
        let mut pooled = Vec::with_capacity(rois.len());
        let mut normalized = Vec::with_capacity(rois.len());
        let mut blobs = Vec::with_capacity(rois.len());
        let mut blob_norms = Vec::with_capacity(rois.len());
        for roi in rois {
            let mut rp = Vec::with_capacity(self.cfg.taps.len());
            let mut rpooled = Vec::with_capacity(self.cfg.taps.len());
            let mut rnorm = Vec::with_capacity(self.cfg.taps.len());
            for &t in &self.cfg.taps {
                let (fmap, stride) = taps
                    .get(t)
                    .ok_or_else(|| FeatError::Config(format!("tap {t} missing from backbone output")))?;
                let (y, cache) = roi_pool(fmap, *stride, roi, p)?;
                rnorm.push(l2_normalize(&y)?);
                rpooled.push(y);
                rp.push(cache);
            }
            let blob = concat_rescale(&rnorm, self.cfg.target_norm)?;
            blob_norms.push(blob.norm());
            blobs.push(blob);
            pools.push(rp);
            pooled.push(rpooled);
            normalized.push(rnorm);
        }
        let stacked = if blobs.is_empty() {
            Tensor::zeros(&[0, self.input_channels(), p, p])
        } else {
            Tensor::stack(&blobs)?
        };
        let out = if blobs.is_empty() {
            Tensor::zeros(&[0, self.cfg.output_channels, p, p])
        } else {
            reduce_1x1(&stacked, &self.reduce)?
        };
        Ok((
            out,
            ConcatCache {
                pools,
                pooled,
                normalized,
                stacked,
                blob_norms,
            },
        ))
    }

    /// Returns gradients for every backbone tap (zeros for unused taps) and
    /// for the reduction `[weight, bias]`.
    pub fn backward(
        &self,
        taps: &[(Tensor, usize)],
        cache: &ConcatCache,
        dout: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>), FeatError> {
        let mut dtaps: Vec<Tensor> = taps.iter().map(|(t, _)| Tensor::zeros(t.shape())).collect();
        if cache.pools.is_empty() {
            return Ok((
                dtaps,
                vec![
                    Tensor::zeros(self.reduce.weight.shape()),
                    Tensor::zeros(self.reduce.bias.shape()),
                ],
            ));
        }
        let (dstack, dw, db) = self.reduce.backward(&cache.stacked, dout)?;
        for (r, dblob) in dstack.unstack().into_iter().enumerate() {
            let dunits = concat_rescale_backward(&cache.normalized[r], self.cfg.target_norm, &dblob)?;
            for (k, &t) in self.cfg.taps.iter().enumerate() {
                let dpool = l2_normalize_backward(&cache.pooled[r][k], &cache.normalized[r][k], &dunits[k]);
                roi_pool_backward_into(&cache.pools[r][k], &dpool, &mut dtaps[t]);
            }
        }
        Ok((dtaps, vec![dw, db]))
    }
}

/// Concatenated, rescaled and reduced features for one RoI:
/// roi_pool → l2_normalize per tap → concat_rescale → reduce_1x1.
pub fn concat_features(
    taps: &[(Tensor, usize)],
    roi: &BBox,
    cfg: &ConcatConfig,
    reduce: &Conv2d,
) -> Result<Tensor, FeatError> {
    let mut units = Vec::with_capacity(cfg.taps.len());
    for &t in &cfg.taps {
        let (fmap, stride) = taps
            .get(t)
            .ok_or_else(|| FeatError::Config(format!("tap {t} missing from backbone output")))?;
        let (y, _) = roi_pool(fmap, *stride, roi, cfg.pooled)?;
        units.push(l2_normalize(&y)?);
    }
    let blob = concat_rescale(&units, cfg.target_norm)?;
    reduce_1x1(&blob, reduce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn roi_pool_examples() {
        let c = Tensor::filled(&[1, 2, 5, 5], 3.5);
        let (y, _) = roi_pool(&c, 4, &bx(1.0, 2.0, 13.0, 17.0), 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.5));

        let ramp = Tensor::from_vec(&[1, 1, 4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let (y, _) = roi_pool(&ramp, 8, &bx(0.0, 0.0, 32.0, 32.0), 2).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);

        let (y, _) = roi_pool(&ramp, 8, &bx(8.0, 8.0, 16.0, 16.0), 2).unwrap();
        assert_eq!(y.data(), &[6.0; 4]);
    }

    #[test]
    fn roi_pool_errors() {
        let m = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(matches!(
            roi_pool(&m, 8, &bx(40.0, 0.0, 60.0, 10.0), 2),
            Err(FeatError::EmptyRoi { .. })
        ));
        assert!(matches!(
            roi_pool(&m, 8, &bx(1.0, 1.0, 1.0, 9.0), 2),
            Err(FeatError::DegenerateRoi)
        ));
        // Partially outside is fine.
        assert!(roi_pool(&m, 8, &bx(-20.0, -20.0, 4.0, 4.0), 3).is_ok());
    }

    #[test]
    fn roi_pool_backward_routes_to_single_cells() {
        let m = random(&[1, 3, 6, 6], 1);
        let (y, cache) = roi_pool(&m, 4, &bx(2.0, 3.0, 19.0, 22.0), 4).unwrap();
        let d = roi_pool_backward(&cache, &Tensor::filled(y.shape(), 1.0));
        assert_eq!(d.sum(), y.len() as f64);
    }

    #[test]
    fn normalize_properties() {
        let x = random(&[1, 2, 3, 3], 2);
        let y = l2_normalize(&x).unwrap();
        assert!((y.norm() - 1.0).abs() < 1e-14);
        let y2 = l2_normalize(&x.clone().scaled(17.0)).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            l2_normalize(&Tensor::zeros(&[1, 1, 2, 2])),
            Err(FeatError::Unnormalizable(_))
        ));
    }

    #[test]
    fn normalize_gradient() {
        let mut vars = vec![random(&[1, 2, 3, 3], 3)];
        let probe = random(&[1, 2, 3, 3], 4);
        let f = |v: &[Tensor]| {
            let y = l2_normalize(&v[0]).unwrap();
            let g = l2_normalize_backward(&v[0], &y, &probe);
            Ok((y.dot(&probe), vec![g]))
        };
        let r = check_gradients(f, &mut vars, &["x".into()], 1e-5, 200, 0).unwrap();
        assert!(r.passes(1e-6), "{r}");
    }

    #[test]
    fn rescale_examples() {
        let a = l2_normalize(&random(&[1, 2, 2, 2], 5)).unwrap();
        let single = concat_rescale(std::slice::from_ref(&a), 4700.0).unwrap();
        for (s, x) in single.data().iter().zip(a.data()) {
            assert!((s - 4700.0 * x).abs() < 1e-9);
        }
        let b = l2_normalize(&random(&[1, 3, 2, 2], 6)).unwrap();
        let c = l2_normalize(&random(&[1, 1, 2, 2], 7)).unwrap();
        let out = concat_rescale(&[a.clone(), b, c], 4700.0).unwrap();
        assert_eq!(out.shape(), &[1, 6, 2, 2]);
        assert!((out.norm() - 4700.0).abs() <= 1e-9 * 4700.0);
        let k = 4700.0 / 3f64.sqrt();
        assert!((out.data()[0] - k * a.data()[0]).abs() < 1e-9);
        let bad = concat_rescale(&[a, Tensor::filled(&[1, 1, 3, 2], 1.0)], 1.0);
        assert!(matches!(bad, Err(FeatError::SpatialMismatch(..))));
    }

    #[test]
    fn reduce_examples() {
        let blob = random(&[1, 3, 2, 2], 8);
        let mut w = Tensor::zeros(&[2, 3, 1, 1]);
        w.data_mut()[2] = 1.0; // out 0 <- in 2
        w.data_mut()[3] = 1.0; // out 1 <- in 0
        let conv = Conv2d {
            weight: w,
            bias: Tensor::zeros(&[2]),
            stride: 1,
            pad: 0,
        };
        let y = reduce_1x1(&blob, &conv).unwrap();
        assert_eq!(&y.data()[..4], &blob.data()[8..12]);
        assert_eq!(&y.data()[4..], &blob.data()[..4]);
        let zero = Conv2d {
            weight: Tensor::zeros(&[2, 3, 1, 1]),
            ..conv.clone()
        };
        assert!(reduce_1x1(&blob, &zero).unwrap().data().iter().all(|&v| v == 0.0));
        let wrong = Conv2d {
            weight: Tensor::zeros(&[2, 4, 1, 1]),
            ..conv
        };
        assert!(matches!(
            reduce_1x1(&blob, &wrong),
            Err(FeatError::ChannelMismatch { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn single_tap_identity_composition() {
        let taps = vec![(random(&[1, 2, 8, 8], 9), 4usize)];
        let cfg = ConcatConfig {
            taps: vec![0],
            pooled: 3,
            target_norm: 4700.0,
            output_channels: 2,
        };
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let conv = Conv2d {
            weight: w,
            bias: Tensor::zeros(&[2]),
            stride: 1,
            pad: 0,
        };
        let roi = bx(3.0, 2.0, 25.0, 30.0);
        let got = concat_features(&taps, &roi, &cfg, &conv).unwrap();
        let want = l2_normalize(&roi_pool(&taps[0].0, 4, &roi, 3).unwrap().0)
            .unwrap()
            .scaled(4700.0);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_forward_matches_single_and_tracks_norms() {
        let taps = vec![
            (random(&[1, 2, 16, 16], 10), 4usize),
            (random(&[1, 3, 8, 8], 11), 8),
            (random(&[1, 4, 4, 4], 12), 16),
        ];
        let cfg = ConcatConfig {
            taps: vec![0, 1, 2],
            pooled: 2,
            target_norm: 4700.0,
            output_channels: 5,
        };
        let head = FeatureConcat::new(cfg.clone(), &[2, 3, 4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let rois = [bx(0.0, 0.0, 30.0, 20.0), bx(10.0, 12.0, 60.0, 64.0)];
        let (out, cache) = head.forward(&taps, &rois).unwrap();
        assert_eq!(out.shape(), &[2, 5, 2, 2]);
        for n in &cache.blob_norms {
            assert!((n - 4700.0).abs() <= 1e-9 * 4700.0);
        }
        let one = concat_features(&taps, &rois[1], &cfg, &head.reduce).unwrap();
        assert_eq!(out.unstack()[1], one);
    }
}
