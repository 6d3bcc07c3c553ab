//! Region types (rectangles and ellipses), overlap measures and greedy
//! non-maximum suppression.
//!
//! Coordinates are continuous pixels. A box spans `[x1, x2] × [y1, y2]` and
//! its area is `(x2 - x1) * (y2 - y1)`; there is no legacy "+1".

use std::cmp::Ordering;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box has negative extent: ({x1}, {y1}, {x2}, {y2})")]
    NegativeExtent { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("non-finite coordinate in region")]
    NonFinite,
    #[error("ellipse radii must be positive, got {major} and {minor}")]
    BadRadii { major: f64, minor: f64 },
    #[error("score {0} outside [0, 1]")]
    BadScore(f64),
}

/// Axis-aligned rectangle with `x1 <= x2` and `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x2 < x1 || y2 < y1 {
            return Err(GeometryError::NegativeExtent { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    /// Corner + size form, as used by WIDER annotations and FDDB rectangle
    /// submissions.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        BBox::new(x, y, x + w, y + h)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() <= 0.0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Uniform scaling about the origin.
    pub fn scaled(&self, factor: f64) -> BBox {
        BBox {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// Rotated ellipse. `angle` is the rotation of the major axis from the
/// x-axis and is kept in `[-π/2, π/2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipseRegion {
    pub cx: f64,
    pub cy: f64,
    pub major_r: f64,
    pub minor_r: f64,
    pub angle: f64,
}

/// Wraps an angle into `[-π/2, π/2)`. An ellipse is symmetric under a
/// half-turn, so this loses nothing.
pub fn normalize_angle(angle: f64) -> f64 {
    if (-PI / 2.0..PI / 2.0).contains(&angle) {
        return angle;
    }
    let mut a = (angle + PI / 2.0).rem_euclid(PI) - PI / 2.0;
    if a >= PI / 2.0 {
        a -= PI;
    }
    a
}

impl EllipseRegion {
    /// Builds a normalized ellipse. If the radii arrive in the wrong order
    /// they are swapped and the angle turned by a quarter so the region is
    /// unchanged.
    pub fn new(cx: f64, cy: f64, major_r: f64, minor_r: f64, angle: f64) -> Result<Self, GeometryError> {
        if ![cx, cy, major_r, minor_r, angle].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if major_r <= 0.0 || minor_r <= 0.0 {
            return Err(GeometryError::BadRadii {
                major: major_r,
                minor: minor_r,
            });
        }
        let (major_r, minor_r, angle) = if major_r >= minor_r {
            (major_r, minor_r, angle)
        } else {
            (minor_r, major_r, angle + PI / 2.0)
        };
        Ok(EllipseRegion {
            cx,
            cy,
            major_r,
            minor_r,
            angle: normalize_angle(angle),
        })
    }

    pub fn area(&self) -> f64 {
        PI * self.major_r * self.minor_r
    }

    /// Tight axis-aligned bounding box.
    pub fn bounding_box(&self) -> BBox {
        let (s, c) = self.angle.sin_cos();
        let hx = ((self.major_r * c).powi(2) + (self.minor_r * s).powi(2)).sqrt();
        let hy = ((self.major_r * s).powi(2) + (self.minor_r * c).powi(2)).sqrt();
        BBox {
            x1: self.cx - hx,
            y1: self.cy - hy,
            x2: self.cx + hx,
            y2: self.cy + hy,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.major_r).powi(2) + (v / self.minor_r).powi(2) <= 1.0
    }

    /// Horizontal extent of the ellipse on the scanline `y`, if any.
    fn row_span(&self, y: f64) -> Option<(f64, f64)> {
        let (s, c) = self.angle.sin_cos();
        let ia = 1.0 / (self.major_r * self.major_r);
        let ib = 1.0 / (self.minor_r * self.minor_r);
        let dy = y - self.cy;
        // Quadratic in dx: qa·dx² + qb·dx + qc <= 0
        let qa = c * c * ia + s * s * ib;
        let qb = 2.0 * dy * c * s * (ia - ib);
        let qc = dy * dy * (s * s * ia + c * c * ib) - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let root = disc.sqrt();
        let lo = (-qb - root) / (2.0 * qa);
        let hi = (-qb + root) / (2.0 * qa);
        Some((self.cx + lo, self.cx + hi))
    }
}

/// A face region in either of the two shapes FDDB compares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Region {
    Rect(BBox),
    Ellipse(EllipseRegion),
}

impl Region {
    pub fn bounding_box(&self) -> BBox {
        match self {
            Region::Rect(b) => *b,
            Region::Ellipse(e) => e.bounding_box(),
        }
    }

    pub fn area(&self) -> f64 {
        match self {
            Region::Rect(b) => b.area(),
            Region::Ellipse(e) => e.area(),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Rect(b) => b.contains(x, y),
            Region::Ellipse(e) => e.contains(x, y),
        }
    }

    fn row_span(&self, y: f64) -> Option<(f64, f64)> {
        match self {
            Region::Rect(b) => {
                if y >= b.y1 && y <= b.y2 {
                    Some((b.x1, b.x2))
                } else {
                    None
                }
            }
            Region::Ellipse(e) => e.row_span(y),
        }
    }
}

impl From<BBox> for Region {
    fn from(b: BBox) -> Self {
        Region::Rect(b)
    }
}

impl From<EllipseRegion> for Region {
    fn from(e: EllipseRegion) -> Self {
        Region::Ellipse(e)
    }
}

/// A region with a detector confidence in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredRegion<R = Region> {
    pub region: R,
    pub score: f64,
}

impl<R> ScoredRegion<R> {
    pub fn new(region: R, score: f64) -> Result<Self, GeometryError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::BadScore(score));
        }
        Ok(ScoredRegion { region, score })
    }

    pub fn map<S>(self, f: impl FnOnce(R) -> S) -> ScoredRegion<S> {
        ScoredRegion {
            region: f(self.region),
            score: self.score,
        }
    }
}

/// Exact rectangle IoU. Zero when the union is empty.
pub fn iou_rect(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Smallest supported raster resolution.
pub const MIN_RASTER_RESOLUTION: usize = 64;

/// IoU of two arbitrary regions by rasterization.
///
/// A `resolution × resolution` grid is laid over the joint bounding box
/// (plus a small margin) and a cell counts as inside a region when its
/// center is. Both shapes are convex, so each grid row is handled as a
/// single interval per region and the cost is linear in `resolution`.
/// The error is of order perimeter / resolution in relative terms.
///
/// # Panics
///
/// Panics if `resolution` is below [`MIN_RASTER_RESOLUTION`].
pub fn raster_iou(a: &Region, b: &Region, resolution: usize) -> f64 {
    assert!(
        resolution >= MIN_RASTER_RESOLUTION,
        "raster resolution {resolution} below {MIN_RASTER_RESOLUTION}"
    );
    let ba = a.bounding_box();
    let bb = b.bounding_box();
    let fx1 = ba.x1.min(bb.x1);
    let fy1 = ba.y1.min(bb.y1);
    let fx2 = ba.x2.max(bb.x2);
    let fy2 = ba.y2.max(bb.y2);
    let margin_x = 0.01 * (fx2 - fx1);
    let margin_y = 0.01 * (fy2 - fy1);
    let x0 = fx1 - margin_x;
    let y0 = fy1 - margin_y;
    let dx = (fx2 - fx1 + 2.0 * margin_x) / resolution as f64;
    let dy = (fy2 - fy1 + 2.0 * margin_y) / resolution as f64;
    if dx <= 0.0 || dy <= 0.0 {
        return 0.0;
    }

    // Number of cell centers x0 + (i + 0.5)·dx lying in [lo, hi].
    let count = |lo: f64, hi: f64| -> i64 {
        if hi < lo {
            return 0;
        }
        let first = ((lo - x0) / dx - 0.5).ceil().max(0.0);
        let last = ((hi - x0) / dx - 0.5).floor().min(resolution as f64 - 1.0);
        if last < first {
            0
        } else {
            (last - first) as i64 + 1
        }
    };

    let mut inter = 0i64;
    let mut n_a = 0i64;
    let mut n_b = 0i64;
    for row in 0..resolution {
        let y = y0 + (row as f64 + 0.5) * dy;
        let sa = a.row_span(y);
        let sb = b.row_span(y);
        if let Some((lo, hi)) = sa {
            n_a += count(lo, hi);
        }
        if let Some((lo, hi)) = sb {
            n_b += count(lo, hi);
        }
        if let (Some((la, ha)), Some((lb, hb))) = (sa, sb) {
            inter += count(la.max(lb), ha.min(hb));
        }
    }
    let union = n_a + n_b - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU between two regions: exact for two rectangles, rasterized whenever
/// an ellipse is involved.
pub fn region_iou(a: &Region, b: &Region, resolution: usize) -> f64 {
    match (a, b) {
        (Region::Rect(x), Region::Rect(y)) => iou_rect(x, y),
        _ => {
            if a.bounding_box().intersection_area(&b.bounding_box()) <= 0.0 {
                0.0
            } else {
                raster_iou(a, b, resolution)
            }
        }
    }
}

/// Indices ordered by descending score; equal scores keep the lower index
/// first.
pub fn score_order<R>(dets: &[ScoredRegion<R>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression. Returns the kept indices in descending
/// score order; a box is dropped when its IoU with an already kept box
/// exceeds `threshold`.
pub fn nms(dets: &[ScoredRegion<BBox>], threshold: f64) -> Vec<usize> {
    let order = score_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let bi = &dets[i].region;
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_rect(bi, &dets[j].region) > threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Clamps a box into `[0, width] × [0, height]`.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, width),
        y1: b.y1.clamp(0.0, height),
        x2: b.x2.clamp(0.0, width),
        y2: b.y2.clamp(0.0, height),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn scored(b: BBox, s: f64) -> ScoredRegion<BBox> {
        ScoredRegion::new(b, s).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou_rect(&a, &a), 1.0);
        assert_eq!(iou_rect(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        let c = bx(5.0, 0.0, 15.0, 10.0);
        assert!((iou_rect(&a, &c) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes() {
        let z = bx(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou_rect(&z, &z), 0.0);
        assert!(BBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn raster_examples() {
        let circle = Region::Ellipse(EllipseRegion::new(5.0, 5.0, 5.0, 5.0, 0.0).unwrap());
        assert!((raster_iou(&circle, &circle, 256) - 1.0).abs() <= 2.0 / 256.0);

        let a = Region::Rect(bx(0.0, 0.0, 10.0, 10.0));
        let b = Region::Rect(bx(5.0, 0.0, 15.0, 10.0));
        assert!((raster_iou(&a, &b, 1024) - 1.0 / 3.0).abs() < 0.01);

        let r = raster_iou(&circle, &a, 1024);
        assert!((r - std::f64::consts::FRAC_PI_4).abs() < 0.01, "{r}");
    }

    #[test]
    fn rotated_ellipse_raster_matches_pointwise_count() {
        let e = Region::Ellipse(EllipseRegion::new(3.0, -2.0, 6.0, 2.5, 0.7).unwrap());
        let r = Region::Rect(bx(0.0, -4.0, 7.0, 1.0));
        // Brute force over the same cell centers.
        let res = 128;
        let ba = e.bounding_box();
        let bb = r.bounding_box();
        let (fx1, fy1) = (ba.x1.min(bb.x1), ba.y1.min(bb.y1));
        let (fx2, fy2) = (ba.x2.max(bb.x2), ba.y2.max(bb.y2));
        let (mx, my) = (0.01 * (fx2 - fx1), 0.01 * (fy2 - fy1));
        let dx = (fx2 - fx1 + 2.0 * mx) / res as f64;
        let dy = (fy2 - fy1 + 2.0 * my) / res as f64;
        let (mut i, mut u) = (0, 0);
        for row in 0..res {
            for col in 0..res {
                let x = fx1 - mx + (col as f64 + 0.5) * dx;
                let y = fy1 - my + (row as f64 + 0.5) * dy;
                let (p, q) = (e.contains(x, y), r.contains(x, y));
                i += (p && q) as i32;
                u += (p || q) as i32;
            }
        }
        let brute = i as f64 / u as f64;
        assert!((raster_iou(&e, &r, res) - brute).abs() < 1e-3);
    }

    #[test]
    #[should_panic]
    fn raster_rejects_low_resolution() {
        let a = Region::Rect(bx(0.0, 0.0, 1.0, 1.0));
        raster_iou(&a, &a, 16);
    }

    #[test]
    fn ellipse_normalization() {
        let e = EllipseRegion::new(0.0, 0.0, 3.0, 5.0, 0.0).unwrap();
        assert_eq!(e.major_r, 5.0);
        assert_eq!(e.minor_r, 3.0);
        assert!((e.angle + PI / 2.0).abs() < 1e-12);
        let f = EllipseRegion::new(0.0, 0.0, 5.0, 3.0, PI / 2.0).unwrap();
        assert!((f.angle + PI / 2.0).abs() < 1e-12);
        assert!(EllipseRegion::new(0.0, 0.0, 0.0, 3.0, 0.0).is_err());
        for k in -20..20 {
            let a = normalize_angle(k as f64 * 0.37);
            assert!((-PI / 2.0..PI / 2.0).contains(&a));
        }
    }

    #[test]
    fn ellipse_bounding_box_rotated_quarter() {
        let e = EllipseRegion::new(10.0, 20.0, 6.0, 2.0, PI / 2.0 - 1e-12).unwrap();
        let b = e.bounding_box();
        assert!((b.width() - 4.0).abs() < 1e-9);
        assert!((b.height() - 12.0).abs() < 1e-9);
    }

    #[test]
    fn nms_examples() {
        assert!(nms(&[], 0.3).is_empty());
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[scored(a, 0.5)], 0.3), vec![0]);
        assert_eq!(nms(&[scored(a, 0.8), scored(a, 0.9)], 0.3), vec![1]);
        let b = bx(50.0, 50.0, 60.0, 60.0);
        assert_eq!(nms(&[scored(a, 0.2), scored(b, 0.7)], 0.3), vec![1, 0]);
    }

    #[test]
    fn nms_tie_prefers_lower_index() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        let b = bx(1.0, 0.0, 11.0, 10.0);
        assert_eq!(nms(&[scored(a, 0.5), scored(b, 0.5)], 0.3), vec![0]);
        assert_eq!(nms(&[scored(b, 0.5), scored(a, 0.5)], 0.3), vec![0]);
    }

    #[test]
    fn clip_examples() {
        assert_eq!(
            clip_box(&bx(-5.0, -5.0, 20.0, 20.0), 10.0, 10.0),
            bx(0.0, 0.0, 10.0, 10.0)
        );
        let inside = bx(1.0, 2.0, 3.0, 4.0);
        assert_eq!(clip_box(&inside, 10.0, 10.0), inside);
        let c = clip_box(&bx(15.0, 15.0, 20.0, 20.0), 10.0, 10.0);
        assert_eq!(c, bx(10.0, 10.0, 10.0, 10.0));
        assert_eq!(c.area(), 0.0);
    }

    #[test]
    fn scored_region_rejects_bad_score() {
        assert!(ScoredRegion::new(bx(0.0, 0.0, 1.0, 1.0), 1.5).is_err());
        assert!(ScoredRegion::new(bx(0.0, 0.0, 1.0, 1.0), -0.1).is_err());
    }
}
