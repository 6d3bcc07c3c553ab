//! Resize policies and horizontal flipping, applied to images and their
//! annotations together.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Annotation, ImageRecord};
use crate::geometry::{BBox, EllipseRegion, Region};
use crate::net::Tensor;

#[derive(Debug, Error)]
pub enum ScaleError {
    #[error("invalid scale policy: {0}")]
    Policy(String),
    #[error("image is {actual:?} but record says {expected:?}")]
    SizeMismatch {
        actual: (usize, usize),
        expected: (usize, usize),
    },
}

/// Shorter-side targets and a longer-side cap, in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalePolicy {
    pub targets: Vec<f64>,
    pub max_size: f64,
}

impl ScalePolicy {
    pub fn new(targets: Vec<f64>, max_size: f64) -> Result<Self, ScaleError> {
        let p = ScalePolicy { targets, max_size };
        p.validate()?;
        Ok(p)
    }

    /// Single 600 target, longer side capped at 1000.
    pub fn full_size_single() -> Self {
        ScalePolicy {
            targets: vec![600.0],
            max_size: 1000.0,
        }
    }

    /// Targets {480, 600, 750}, cap 1250.
    pub fn full_size_multi() -> Self {
        ScalePolicy {
            targets: vec![480.0, 600.0, 750.0],
            max_size: 1250.0,
        }
    }

    pub fn validate(&self) -> Result<(), ScaleError> {
        if self.targets.is_empty() {
            return Err(ScaleError::Policy("no scale targets".into()));
        }
        if self.targets.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(ScaleError::Policy("targets must be positive".into()));
        }
        let top = self.targets.iter().cloned().fold(0.0, f64::max);
        if self.max_size.is_nan() || self.max_size < top {
            return Err(ScaleError::Policy(format!(
                "cap {} below largest target {top}",
                self.max_size
            )));
        }
        Ok(())
    }

    /// Factor for a fixed target (no randomness).
    pub fn factor_for(&self, width: usize, height: usize, target: f64) -> f64 {
        let short = width.min(height) as f64;
        let long = width.max(height) as f64;
        let f = target / short;
        if f * long > self.max_size {
            self.max_size / long
        } else {
            f
        }
    }
}

/// Picks a target uniformly and returns the single resize factor, reduced
/// if the longer side would exceed the cap.
pub fn choose_scale<R: Rng>(width: usize, height: usize, policy: &ScalePolicy, rng: &mut R) -> f64 {
    assert!(width > 0 && height > 0, "choose_scale on empty image");
    let t = if policy.targets.len() == 1 {
        policy.targets[0]
    } else {
        policy.targets[rng.gen_range(0..policy.targets.len())]
    };
    policy.factor_for(width, height, t)
}

/// Output side length for a factor: `round(side * factor)`, at least 1.
pub fn scaled_len(side: usize, factor: f64) -> usize {
    ((side as f64 * factor).round() as usize).max(1)
}

/// Bilinear resize of an `(N,C,H,W)` tensor with half-pixel centers and
/// edge clamping.
pub fn resize_image(image: &Tensor, factor: f64) -> Tensor {
    assert!(factor > 0.0 && factor.is_finite(), "resize factor must be positive");
    let (n, c, h, w) = image.dims4().expect("resize_image needs a 4-d tensor");
    let (oh, ow) = (scaled_len(h, factor), scaled_len(w, factor));
    if (oh, ow) == (h, w) {
        return image.clone();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(oh, h);
    let xs = taps(ow, w);
    let src = image.data();
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * oh * ow..(plane + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - fx) + s[y0 * w + x1] * fx;
                let bot = s[y1 * w + x0] * (1.0 - fx) + s[y1 * w + x1] * fx;
                d[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn map_region(r: &Region, f: impl Fn(&BBox) -> BBox, g: impl Fn(&EllipseRegion) -> EllipseRegion) -> Region {
    match r {
        Region::Rect(b) => Region::Rect(f(b)),
        Region::Ellipse(e) => Region::Ellipse(g(e)),
    }
}

/// Mirrors a region across the vertical line `x = width / 2`.
pub fn flip_region(r: &Region, width: f64) -> Region {
    map_region(
        r,
        |b| BBox {
            x1: width - b.x2,
            y1: b.y1,
            x2: width - b.x1,
            y2: b.y2,
        },
        |e| EllipseRegion::new(width - e.cx, e.cy, e.major_r, e.minor_r, -e.angle).expect("valid ellipse"),
    )
}

/// Scales a region about the origin.
pub fn scale_region(r: &Region, factor: f64) -> Region {
    map_region(
        r,
        |b| b.scaled(factor),
        |e| {
            EllipseRegion::new(
                e.cx * factor,
                e.cy * factor,
                e.major_r * factor,
                e.minor_r * factor,
                e.angle,
            )
            .expect("valid ellipse")
        },
    )
}

fn check_dims(image: &Tensor, record: &ImageRecord) -> Result<(), ScaleError> {
    let (_, _, h, w) = image.dims4().expect("4-d image");
    if (w, h) != (record.width, record.height) {
        return Err(ScaleError::SizeMismatch {
            actual: (w, h),
            expected: (record.width, record.height),
        });
    }
    Ok(())
}

/// Mirrors image columns and every annotation.
pub fn hflip(image: &Tensor, record: &ImageRecord) -> Result<(Tensor, ImageRecord), ScaleError> {
    check_dims(image, record)?;
    let (n, c, h, w) = image.dims4().expect("4-d image");
    let mut out = image.clone();
    let src = image.data();
    let dst = out.data_mut();
    for row in 0..n * c * h {
        for x in 0..w {
            dst[row * w + x] = src[row * w + (w - 1 - x)];
        }
    }
    let width = record.width as f64;
    let rec = ImageRecord {
        annotations: record
            .annotations
            .iter()
            .map(|a| Annotation {
                region: flip_region(&a.region, width),
                ..*a
            })
            .collect(),
        ..record.clone()
    };
    Ok((out, rec))
}

/// Resizes an image and its annotations by `factor`. Regions scale by the
/// exact per-axis ratio of output to input size.
pub fn scale_record(image: &Tensor, record: &ImageRecord, factor: f64) -> Result<(Tensor, ImageRecord), ScaleError> {
    check_dims(image, record)?;
    let out = resize_image(image, factor);
    let (_, _, oh, ow) = out.dims4().expect("4-d image");
    let rx = ow as f64 / record.width as f64;
    let ry = oh as f64 / record.height as f64;
    let rec = ImageRecord {
        width: ow,
        height: oh,
        annotations: record
            .annotations
            .iter()
            .map(|a| Annotation {
                region: if rx == ry {
                    scale_region(&a.region, rx)
                } else {
                    scale_region_xy(&a.region, rx, ry)
                },
                ..*a
            })
            .collect(),
        ..record.clone()
    };
    Ok((out, rec))
}

/// Per-axis scaling. Ellipses use the mean ratio; the two ratios differ
/// only by rounding.
fn scale_region_xy(r: &Region, rx: f64, ry: f64) -> Region {
    map_region(
        r,
        |b| BBox {
            x1: b.x1 * rx,
            y1: b.y1 * ry,
            x2: b.x2 * rx,
            y2: b.y2 * ry,
        },
        |e| {
            let m = 0.5 * (rx + ry);
            EllipseRegion::new(e.cx * rx, e.cy * ry, e.major_r * m, e.minor_r * m, e.angle).expect("valid ellipse")
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scale_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ScalePolicy::new(vec![750.0], 1250.0).unwrap();
        assert_eq!(choose_scale(800, 1200, &p, &mut rng), 0.9375);
        let p = ScalePolicy::new(vec![600.0], 1250.0).unwrap();
        assert!((choose_scale(600, 3000, &p, &mut rng) - 1250.0 / 3000.0).abs() < 1e-15);
        assert_eq!(choose_scale(600, 600, &p, &mut rng), 1.0);
        assert!(ScalePolicy::new(vec![], 10.0).is_err());
        assert!(ScalePolicy::new(vec![600.0], 500.0).is_err());
    }

    #[test]
    fn resize_examples() {
        let ramp = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(resize_image(&ramp, 1.0), ramp);
        let up = resize_image(&ramp, 2.0);
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        for row in up.data().chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
        let flat = Tensor::filled(&[1, 2, 5, 7], 0.3);
        let r = resize_image(&flat, 0.63);
        assert!(r.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert_eq!(resize_image(&flat, 0.01).shape(), &[1, 2, 1, 1]);
    }

    fn rec(b: BBox, w: usize) -> ImageRecord {
        ImageRecord {
            id: "x".into(),
            width: w,
            height: 10,
            annotations: vec![Annotation::rect(b)],
        }
    }

    #[test]
    fn flip_examples() {
        let img = Tensor::from_vec(&[1, 1, 10, 100], (0..1000).map(|v| v as f64).collect()).unwrap();
        let r = rec(BBox::new(10.0, 0.0, 20.0, 10.0).unwrap(), 100);
        let (fi, fr) = hflip(&img, &r).unwrap();
        assert_eq!(
            fr.annotations[0].region,
            Region::Rect(BBox::new(80.0, 0.0, 90.0, 10.0).unwrap())
        );
        assert_eq!(fi.data()[0], 99.0);
        let (bi, br) = hflip(&fi, &fr).unwrap();
        assert_eq!((bi, br), (img.clone(), r));
        let centered = rec(BBox::new(40.0, 0.0, 60.0, 10.0).unwrap(), 100);
        assert_eq!(hflip(&img, &centered).unwrap().1, centered);
        assert!(hflip(&img, &rec(BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), 50)).is_err());
    }

    #[test]
    fn ellipse_flip_negates_angle() {
        let e = EllipseRegion::new(30.0, 5.0, 8.0, 4.0, 0.4).unwrap();
        let Region::Ellipse(f) = flip_region(&Region::Ellipse(e), 100.0) else {
            unreachable!()
        };
        assert_eq!((f.cx, f.angle), (70.0, -0.4));
    }
}
