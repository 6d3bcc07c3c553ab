//! FDDB-style scoring: optimal one-to-one matching of detections to faces,
//! discrete and continuous ROC sweeps, fold pooling, report output and the
//! detection file format.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{raster_iou, region_iou, score_order, BBox, EllipseRegion, Region, ScoredRegion};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no faces in the evaluation set")]
    NoFaces,
    #[error("expected {expected} folds, got {actual}")]
    FoldCount { expected: usize, actual: usize },
    #[error("degenerate box cannot be converted to an ellipse")]
    Degenerate,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Pairs below this overlap are never matched.
pub const MIN_MATCH_IOU: f64 = 1e-6;
/// A match counts as a discrete true positive above this overlap.
pub const TP_IOU: f64 = 0.5;
/// Raster resolution for overlaps involving an ellipse.
pub const EVAL_RESOLUTION: usize = 512;

/// Maximum-weight one-to-one assignment on a dense `rows × cols` weight
/// matrix (Hungarian method, O(n³)). Returns `(row, col)` pairs; every row
/// of the smaller side is assigned, so zero-weight pairs may appear.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| -> f64 {
        if transpose {
            -weights[j][i]
        } else {
            -weights[i][j]
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            if transpose {
                (j - 1, p[j] - 1)
            } else {
                (p[j] - 1, j - 1)
            }
        })
        .collect();
    out.sort_unstable();
    out
}

/// Greedy reference: rows in the given order each take their best free
/// column at or above `min_weight`.
pub fn greedy_assignment(weights: &[Vec<f64>], order: &[usize], min_weight: f64) -> Vec<(usize, usize)> {
    let cols = weights.first().map_or(0, |r| r.len());
    let mut taken = vec![false; cols];
    let mut out = Vec::new();
    for &i in order {
        let best = (0..cols)
            .filter(|&j| !taken[j] && weights[i][j] >= min_weight)
            .fold(None, |b: Option<usize>, j| match b {
                Some(k) if weights[i][k] >= weights[i][j] => Some(k),
                _ => Some(j),
            });
        if let Some(j) = best {
            taken[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Sum of the weights of an assignment.
pub fn assignment_total(weights: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| weights[i][j]).sum()
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// `(detection, face, iou)`, sorted by detection index.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_faces: Vec<usize>,
}

impl MatchResult {
    pub fn total_iou(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }

    pub fn true_positives(&self, tp_iou: f64) -> usize {
        self.pairs.iter().filter(|p| p.2 > tp_iou).count()
    }
}

fn match_matrix(iou: &[Vec<f64>], faces: usize, min_iou: f64) -> MatchResult {
    let masked: Vec<Vec<f64>> = iou
        .iter()
        .map(|r| r.iter().map(|&v| if v < min_iou { 0.0 } else { v }).collect())
        .collect();
    let pairs: Vec<(usize, usize, f64)> = max_weight_assignment(&masked)
        .into_iter()
        .filter(|&(d, f)| masked[d][f] >= min_iou)
        .map(|(d, f)| (d, f, iou[d][f]))
        .collect();
    let mut det_used = vec![false; iou.len()];
    let mut face_used = vec![false; faces];
    for &(d, f, _) in &pairs {
        det_used[d] = true;
        face_used[f] = true;
    }
    MatchResult {
        pairs,
        unmatched_detections: (0..iou.len()).filter(|&d| !det_used[d]).collect(),
        unmatched_faces: (0..faces).filter(|&f| !face_used[f]).collect(),
    }
}

/// Largest number of pairs with overlap above `tp_iou` that can be matched
/// one-to-one.
fn discrete_matches(iou: &[Vec<f64>], tp_iou: f64) -> usize {
    let w: Vec<Vec<f64>> = iou
        .iter()
        .map(|r| r.iter().map(|&v| if v > tp_iou { 1.0 } else { 0.0 }).collect())
        .collect();
    let pairs = max_weight_assignment(&w);
    pairs.iter().filter(|&&(d, f)| w[d][f] > 0.0).count()
}

fn iou_matrix(dets: &[ScoredRegion], faces: &[Region], resolution: usize) -> Vec<Vec<f64>> {
    dets.iter()
        .map(|d| faces.iter().map(|f| region_iou(&d.region, f, resolution)).collect())
        .collect()
}

/// Maximum-total-IoU one-to-one matching. Rectangle pairs use exact
/// overlap; anything involving an ellipse is rasterized.
pub fn match_detections(dets: &[ScoredRegion], faces: &[Region], min_iou: f64) -> MatchResult {
    match_matrix(&iou_matrix(dets, faces, EVAL_RESOLUTION), faces.len(), min_iou)
}

/// Detections and ground truth for one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalImage {
    pub id: String,
    pub detections: Vec<ScoredRegion>,
    pub faces: Vec<Region>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub false_positives: usize,
    pub y_discrete: f64,
    pub y_continuous: f64,
}

/// Discrete and continuous curves sharing one threshold sweep.
///
/// At each threshold the detections scoring at or above it are matched.
/// `y_discrete` is the share of faces matched above [`TP_IOU`] (using a
/// matching that maximizes that count), `y_continuous` the summed overlap
/// of the maximum-total-IoU matching over the face count, and
/// `false_positives` the number of detections that are not discrete true
/// positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub faces: usize,
    pub images: usize,
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn discrete(&self) -> Vec<(usize, f64)> {
        self.points.iter().map(|p| (p.false_positives, p.y_discrete)).collect()
    }

    pub fn continuous(&self) -> Vec<(usize, f64)> {
        self.points
            .iter()
            .map(|p| (p.false_positives, p.y_continuous))
            .collect()
    }

    /// Best discrete rate among points with at most `max_fp` false
    /// positives.
    pub fn tpr_at(&self, max_fp: usize) -> f64 {
        self.points
            .iter()
            .filter(|p| p.false_positives <= max_fp)
            .map(|p| p.y_discrete)
            .fold(0.0, f64::max)
    }

    /// The point for the lowest threshold not below `threshold`.
    pub fn at_threshold(&self, threshold: f64) -> Option<&RocPoint> {
        self.points.iter().rfind(|p| p.threshold >= threshold)
    }
}

/// Sweeps every distinct detection score from high to low, rematching only
/// the images whose detection set changed.
pub fn roc_curve(images: &[EvalImage]) -> Result<RocCurve, EvalError> {
    let faces: usize = images.iter().map(|i| i.faces.len()).sum();
    if faces == 0 {
        return Err(EvalError::NoFaces);
    }
    struct State {
        iou: Vec<Vec<f64>>,
        active: usize,
        cont: f64,
        tp: usize,
    }
    let mut states: Vec<State> = Vec::with_capacity(images.len());
    let mut events: Vec<(f64, usize)> = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let order = score_order(&img.detections);
        let sorted: Vec<ScoredRegion> = order.iter().map(|&i| img.detections[i]).collect();
        events.extend(sorted.iter().map(|d| (d.score, k)));
        states.push(State {
            iou: iou_matrix(&sorted, &img.faces, EVAL_RESOLUTION),
            active: 0,
            cont: 0.0,
            tp: 0,
        });
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let mut points = Vec::new();
    if events.is_empty() {
        points.push(RocPoint {
            threshold: f64::INFINITY,
            false_positives: 0,
            y_discrete: 0.0,
            y_continuous: 0.0,
        });
    }
    let mut dets = 0usize;
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        let mut touched = Vec::new();
        while i < events.len() && events[i].0 == t {
            let k = events[i].1;
            states[k].active += 1;
            dets += 1;
            if touched.last() != Some(&k) {
                touched.push(k);
            }
            i += 1;
        }
        for k in touched {
            let s = &mut states[k];
            let iou = &s.iou[..s.active];
            s.cont = match_matrix(iou, images[k].faces.len(), MIN_MATCH_IOU).total_iou();
            s.tp = discrete_matches(iou, TP_IOU);
        }
        let tp: usize = states.iter().map(|s| s.tp).sum();
        let cont: f64 = states.iter().map(|s| s.cont).sum();
        points.push(RocPoint {
            threshold: t,
            false_positives: dets - tp,
            y_discrete: tp as f64 / faces as f64,
            y_continuous: cont / faces as f64,
        });
    }
    Ok(RocCurve {
        faces,
        images: images.len(),
        points,
    })
}

/// Pooled curve over all folds plus each fold's own curve.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldSummary {
    pub pooled: RocCurve,
    pub per_fold: Vec<RocCurve>,
}

/// Pools detections from every fold into one corpus-level sweep.
pub fn aggregate_folds(folds: &[Vec<EvalImage>], expected: Option<usize>) -> Result<FoldSummary, EvalError> {
    if let Some(e) = expected {
        if e != folds.len() {
            return Err(EvalError::FoldCount {
                expected: e,
                actual: folds.len(),
            });
        }
    }
    if folds.is_empty() {
        return Err(EvalError::FoldCount {
            expected: expected.unwrap_or(1),
            actual: 0,
        });
    }
    let per_fold = folds.iter().map(|f| roc_curve(f)).collect::<Result<Vec<_>, _>>()?;
    let all: Vec<EvalImage> = folds.iter().flatten().cloned().collect();
    Ok(FoldSummary {
        pooled: roc_curve(&all)?,
        per_fold,
    })
}

/// Objective for the box-to-ellipse factor on the unit square.
fn unit_square_iou(k: f64, resolution: usize) -> f64 {
    let square = Region::Rect(BBox {
        x1: -0.5,
        y1: -0.5,
        x2: 0.5,
        y2: 0.5,
    });
    let circle = Region::Ellipse(EllipseRegion {
        cx: 0.0,
        cy: 0.0,
        major_r: 0.5 * k,
        minor_r: 0.5 * k,
        angle: 0.0,
    });
    raster_iou(&square, &circle, resolution)
}

/// Golden-section search for the factor `k` in `[0.8, 1.6]` maximizing
/// the overlap of a box with the axis-aligned ellipse of semi-axes
/// `k·w/2, k·h/2`. The optimum is the same for every box (the objective is
/// invariant under axis scaling), so it is computed once on the unit
/// square. Returns `(k, iou)`.
pub fn optimal_ellipse_factor() -> (f64, f64) {
    static CACHE: OnceLock<(f64, f64)> = OnceLock::new();
    *CACHE.get_or_init(|| {
        let res = 1024;
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (0.8, 1.6);
        let mut c = b - g * (b - a);
        let mut d = a + g * (b - a);
        let (mut fc, mut fd) = (unit_square_iou(c, res), unit_square_iou(d, res));
        while b - a > 1e-6 {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - g * (b - a);
                fc = unit_square_iou(c, res);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + g * (b - a);
                fd = unit_square_iou(d, res);
            }
        }
        let k = 0.5 * (a + b);
        (k, unit_square_iou(k, res))
    })
}

/// Axis-aligned ellipse with the box's center and semi-axes scaled by
/// [`optimal_ellipse_factor`].
pub fn box_to_ellipse(b: &BBox) -> Result<EllipseRegion, EvalError> {
    if b.is_degenerate() {
        return Err(EvalError::Degenerate);
    }
    let (k, _) = optimal_ellipse_factor();
    let (cx, cy) = b.center();
    EllipseRegion::new(cx, cy, 0.5 * k * b.width(), 0.5 * k * b.height(), 0.0).map_err(|_| EvalError::Degenerate)
}

/// Writes `threshold,false_positives,y_discrete,y_continuous` rows.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,false_positives,y_discrete,y_continuous\n");
    for p in &curve.points {
        writeln!(
            s,
            "{},{},{:.6},{:.6}",
            p.threshold, p.false_positives, p.y_discrete, p.y_continuous
        )
        .expect("write to string");
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG line plot of several curves; `discrete` picks which y
/// to draw.
pub fn roc_svg(title: &str, series: &[(String, &RocCurve)], discrete: bool) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 60.0, 160.0, 40.0, 50.0);
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let max_fp = series
        .iter()
        .flat_map(|(_, c)| c.points.iter().map(|p| p.false_positives))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        ml + pw / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let y = mt + ph * (1.0 - f);
        let x = ml + pw * f;
        writeln!(
            s,
            r##"<line x1="{ml}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{f:.1}</text>"##,
            ml + pw,
            ml - 6.0,
            y + 4.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.0}</text>"#,
            mt + ph + 16.0,
            max_fp * f
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">false positives</text>"#,
        ml + pw / 2.0,
        h - 12.0
    )
    .unwrap();
    let ylabel = if discrete {
        "true positive rate"
    } else {
        "mean matched overlap"
    };
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.2})">{ylabel}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    )
    .unwrap();
    for (n, (label, curve)) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        let mut pts = format!("{ml:.2},{:.2}", mt + ph);
        for p in &curve.points {
            let y = if discrete { p.y_discrete } else { p.y_continuous };
            write!(
                pts,
                " {:.2},{:.2}",
                ml + pw * p.false_positives as f64 / max_fp,
                mt + ph * (1.0 - y)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
        )
        .unwrap();
        let ly = mt + 14.0 + 18.0 * n as f64;
        writeln!(
            s,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            ml + pw + 10.0,
            ml + pw + 30.0,
            ml + pw + 36.0,
            ly + 4.0,
            escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<stem>.csv`, `<stem>_discrete.svg` and `<stem>_continuous.svg`
/// into `dir` and returns their paths.
pub fn emit_report(dir: &Path, stem: &str, curve: &RocCurve) -> Result<Vec<PathBuf>, EvalError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, roc_csv(curve)).map_err(io_err(&csv))?;
    let mut out = vec![csv];
    for (suffix, discrete) in [("discrete", true), ("continuous", false)] {
        let p = dir.join(format!("{stem}_{suffix}.svg"));
        let svg = roc_svg(&format!("{stem} ({suffix})"), &[(stem.to_string(), curve)], discrete);
        fs::write(&p, svg).map_err(io_err(&p))?;
        out.push(p);
    }
    Ok(out)
}

/// Shape written to detection files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionFormat {
    /// `x y w h score`
    Rect,
    /// `major minor angle cx cy score`
    Ellipse,
}

/// Formats per-image detections in the FDDB submission layout. In ellipse
/// mode rectangles are converted with [`box_to_ellipse`].
pub fn format_detections(items: &[(String, Vec<ScoredRegion>)], format: DetectionFormat) -> String {
    let mut s = String::new();
    for (name, dets) in items {
        writeln!(s, "{name}\n{}", dets.len()).unwrap();
        for d in dets {
            match (format, d.region) {
                (DetectionFormat::Rect, r) => {
                    let b = r.bounding_box();
                    writeln!(s, "{} {} {} {} {}", b.x1, b.y1, b.width(), b.height(), d.score).unwrap();
                }
                (DetectionFormat::Ellipse, r) => {
                    let e = match r {
                        Region::Ellipse(e) => e,
                        Region::Rect(b) => box_to_ellipse(&b).unwrap_or(EllipseRegion {
                            cx: b.center().0,
                            cy: b.center().1,
                            major_r: f64::MIN_POSITIVE,
                            minor_r: f64::MIN_POSITIVE,
                            angle: 0.0,
                        }),
                    };
                    writeln!(
                        s,
                        "{} {} {} {} {} {}",
                        e.major_r, e.minor_r, e.angle, e.cx, e.cy, d.score
                    )
                    .unwrap();
                }
            }
        }
    }
    s
}

/// Parses detection text. Each detection line's shape is inferred from its
/// field count (5 = rectangle, 6 = ellipse).
pub fn parse_detections(text: &str) -> Result<Vec<(String, Vec<ScoredRegion>)>, EvalError> {
    let perr = |line: usize, msg: String| EvalError::Parse { line, msg };
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some((n, name)) = lines.next() {
        let (cn, c) = lines
            .next()
            .ok_or_else(|| perr(n + 1, "missing detection count".into()))?;
        let count: usize = c
            .trim()
            .parse()
            .map_err(|_| perr(cn, format!("bad detection count {:?}", c.trim())))?;
        let mut dets = Vec::with_capacity(count);
        for k in 0..count {
            let (m, line) = lines
                .next()
                .ok_or_else(|| perr(cn + k + 1, format!("expected {count} detections, found {k}")))?;
            let f = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| perr(m, format!("not a number: {t:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            let region = match f.len() {
                5 => BBox::from_xywh(f[0], f[1], f[2], f[3]).map(Region::Rect),
                6 => EllipseRegion::new(f[3], f[4], f[0], f[1], f[2]).map(Region::Ellipse),
                k => return Err(perr(m, format!("expected 5 or 6 fields, found {k}"))),
            }
            .map_err(|e| perr(m, e.to_string()))?;
            let score = *f.last().expect("non-empty");
            dets.push(ScoredRegion::new(region, score).map_err(|e| perr(m, e.to_string()))?);
        }
        out.push((name.trim().to_string(), dets));
    }
    Ok(out)
}

pub fn write_detections(
    path: &Path,
    items: &[(String, Vec<ScoredRegion>)],
    format: DetectionFormat,
) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, format_detections(items, format)).map_err(io_err(path))
}

pub fn read_detections(path: &Path) -> Result<Vec<(String, Vec<ScoredRegion>)>, EvalError> {
    parse_detections(&fs::read_to_string(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(x1: f64, y1: f64, x2: f64, y2: f64) -> Region {
        Region::Rect(BBox::new(x1, y1, x2, y2).unwrap())
    }

    fn det(r: Region, s: f64) -> ScoredRegion {
        ScoredRegion::new(r, s).unwrap()
    }

    #[test]
    fn identity_matching() {
        let faces = vec![rect(0.0, 0.0, 10.0, 10.0), rect(20.0, 0.0, 30.0, 12.0)];
        let dets: Vec<_> = faces.iter().map(|&f| det(f, 1.0)).collect();
        let m = match_detections(&dets, &faces, MIN_MATCH_IOU);
        assert_eq!(m.pairs, vec![(0, 0, 1.0), (1, 1, 1.0)]);
        let c = roc_curve(&[EvalImage {
            id: "a".into(),
            detections: dets,
            faces,
        }])
        .unwrap();
        assert_eq!(c.points.len(), 1);
        assert_eq!(
            (
                c.points[0].false_positives,
                c.points[0].y_discrete,
                c.points[0].y_continuous
            ),
            (0, 1.0, 1.0)
        );
    }

    #[test]
    fn one_to_one() {
        let faces = vec![rect(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![
            det(rect(0.0, 0.0, 10.0, 10.0), 0.9),
            det(rect(1.0, 0.0, 11.0, 10.0), 0.8),
        ];
        let m = match_detections(&dets, &faces, MIN_MATCH_IOU);
        assert_eq!(m.pairs.len(), 1);
        assert_eq!(m.unmatched_detections, vec![1]);
    }

    #[test]
    fn hungarian_beats_greedy_on_crossing_case() {
        // greedy gives det 0 face 0 (0.6) and leaves det 1 only 0.0
        let w = vec![vec![0.6, 0.5], vec![0.55, 0.0]];
        let g = greedy_assignment(&w, &[0, 1], MIN_MATCH_IOU);
        let h = max_weight_assignment(&w);
        assert!((assignment_total(&w, &g) - 0.6).abs() < 1e-12);
        assert!((assignment_total(&w, &h) - 1.05).abs() < 1e-12);
        // rectangular in both orientations
        let t = vec![vec![0.6, 0.55], vec![0.5, 0.0]];
        assert_eq!(max_weight_assignment(&t), vec![(0, 1), (1, 0)]);
        let tall = vec![vec![0.1], vec![0.9], vec![0.3]];
        assert_eq!(max_weight_assignment(&tall), vec![(1, 0)]);
    }

    #[test]
    fn roc_examples() {
        let none = roc_curve(&[EvalImage {
            id: "a".into(),
            detections: vec![],
            faces: vec![rect(0.0, 0.0, 1.0, 1.0)],
        }])
        .unwrap();
        assert_eq!(none.points.len(), 1);
        assert_eq!((none.points[0].false_positives, none.points[0].y_discrete), (0, 0.0));
        assert!(roc_curve(&[]).is_err());

        // detection at IoU 0.6 against one of two faces: continuous 0.3
        let faces = vec![rect(0.0, 0.0, 10.0, 10.0), rect(50.0, 50.0, 60.0, 60.0)];
        let d = rect(0.0, 0.0, 10.0, 6.0);
        let c = roc_curve(&[EvalImage {
            id: "b".into(),
            detections: vec![det(d, 0.9)],
            faces,
        }])
        .unwrap();
        assert!((c.points[0].y_continuous - 0.3).abs() < 1e-12);
        assert_eq!(c.points[0].y_discrete, 0.5);
    }

    #[test]
    fn three_image_fixture() {
        let f = |x: f64| rect(x, 0.0, x + 10.0, 10.0);
        let images = vec![
            EvalImage {
                id: "1".into(),
                detections: vec![det(f(0.0), 0.9), det(f(20.0), 0.8)],
                faces: vec![f(0.0), f(20.0)],
            },
            EvalImage {
                id: "2".into(),
                detections: vec![det(f(0.0), 0.95), det(f(100.0), 0.7)],
                faces: vec![f(0.0), f(40.0)],
            },
            EvalImage {
                id: "3".into(),
                detections: vec![det(f(0.0), 0.6)],
                faces: vec![f(0.0)],
            },
        ];
        let c = roc_curve(&images).unwrap();
        let last = c.points.last().unwrap();
        assert_eq!((last.false_positives, last.y_discrete), (1, 0.8));
        assert_eq!(c.points.len(), 5);
        assert!(c.points.windows(2).all(|w| w[0].false_positives <= w[1].false_positives
            && w[0].y_discrete <= w[1].y_discrete
            && w[0].y_continuous <= w[1].y_continuous));
    }

    #[test]
    fn continuous_can_trail_discrete() {
        let faces = vec![rect(0.0, 0.0, 10.0, 10.0)];
        let c = roc_curve(&[EvalImage {
            id: "a".into(),
            detections: vec![det(rect(0.0, 0.0, 10.0, 5.5), 0.9)],
            faces,
        }])
        .unwrap();
        assert_eq!(c.points[0].y_discrete, 1.0);
        assert!((c.points[0].y_continuous - 0.55).abs() < 1e-12);
    }

    #[test]
    fn folds_pool() {
        let img = EvalImage {
            id: "a".into(),
            detections: vec![
                det(rect(0.0, 0.0, 10.0, 10.0), 0.9),
                det(rect(50.0, 0.0, 60.0, 10.0), 0.5),
            ],
            faces: vec![rect(0.0, 0.0, 10.0, 10.0), rect(0.0, 30.0, 10.0, 40.0)],
        };
        let one = aggregate_folds(&[vec![img.clone()]], None).unwrap();
        assert_eq!(one.pooled, one.per_fold[0]);
        let two = aggregate_folds(&[vec![img.clone()], vec![img.clone()]], Some(2)).unwrap();
        for (p, q) in two.pooled.points.iter().zip(&one.pooled.points) {
            assert_eq!(p.y_discrete, q.y_discrete);
            assert_eq!(p.false_positives, 2 * q.false_positives);
        }
        assert!(aggregate_folds(&[vec![img]], Some(10)).is_err());
    }

    #[test]
    fn ellipse_conversion() {
        let (k, iou) = optimal_ellipse_factor();
        assert!((k - 1.0989134140153753).abs() < 2e-3, "{k}");
        assert!((iou - 0.8370302902855402).abs() < 1e-3, "{iou}");
        let e = box_to_ellipse(&BBox::new(0.0, 0.0, 20.0, 20.0).unwrap()).unwrap();
        assert_eq!(e.major_r, e.minor_r);
        let e = box_to_ellipse(&BBox::new(0.0, 0.0, 10.0, 30.0).unwrap()).unwrap();
        assert!((e.major_r - 15.0 * k).abs() < 1e-12 && (e.minor_r - 5.0 * k).abs() < 1e-12);
        assert!(box_to_ellipse(&BBox::new(1.0, 1.0, 1.0, 5.0).unwrap()).is_err());
    }

    #[test]
    fn detection_file_roundtrip() {
        let items = vec![
            ("a".to_string(), vec![det(rect(1.5, 2.0, 11.5, 14.0), 0.875)]),
            ("b".to_string(), vec![]),
        ];
        let text = format_detections(&items, DetectionFormat::Rect);
        assert_eq!(text, "a\n1\n1.5 2 10 12 0.875\nb\n0\n");
        assert_eq!(parse_detections(&text).unwrap(), items);
        let ell = format_detections(&items, DetectionFormat::Ellipse);
        let back = parse_detections(&ell).unwrap();
        assert!(matches!(back[0].1[0].region, Region::Ellipse(_)));
        assert!(parse_detections("a\n2\n1 2 3 4 0.5\n").is_err());
        assert!(parse_detections("a\n1\n1 2 3 0.5\n").is_err());
    }

    #[test]
    fn report_files() {
        let c = roc_curve(&[EvalImage {
            id: "a".into(),
            detections: vec![
                det(rect(0.0, 0.0, 10.0, 10.0), 0.9),
                det(rect(30.0, 0.0, 40.0, 10.0), 0.4),
            ],
            faces: vec![rect(0.0, 0.0, 10.0, 10.0)],
        }])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(dir.path(), "roc", &c).unwrap();
        let csv = fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2);
        let again = tempfile::tempdir().unwrap();
        let p2 = emit_report(again.path(), "roc", &c).unwrap();
        for (a, b) in paths.iter().zip(&p2) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
