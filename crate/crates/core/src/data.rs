//! Annotation records, attribute-based difficulty filtering, WIDER/FDDB
//! text formats, fold splits and the synthetic face corpus.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, EllipseRegion, Region};
use crate::net::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid folds: {0}")]
    Folds(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

fn parse_err(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse { line, msg: msg.into() }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blur {
    #[default]
    None,
    Normal,
    Heavy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expression {
    #[default]
    Typical,
    Extreme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Illumination {
    #[default]
    Normal,
    Extreme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Occlusion {
    #[default]
    None,
    Partial,
    Heavy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pose {
    #[default]
    Typical,
    Atypical,
}

/// Per-face labels in the WIDER attribute scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceAttributes {
    pub blur: Blur,
    pub expression: Expression,
    pub illumination: Illumination,
    pub occlusion: Occlusion,
    pub pose: Pose,
    pub invalid: bool,
}

/// Sum of the per-attribute penalties: normal blur 0.5, heavy blur 1,
/// extreme expression 1, extreme illumination 1, partial occlusion 0.5,
/// heavy occlusion 1, atypical pose 1.
pub fn difficulty(attrs: &FaceAttributes) -> f64 {
    let blur = match attrs.blur {
        Blur::None => 0.0,
        Blur::Normal => 0.5,
        Blur::Heavy => 1.0,
    };
    let expression = match attrs.expression {
        Expression::Typical => 0.0,
        Expression::Extreme => 1.0,
    };
    let illumination = match attrs.illumination {
        Illumination::Normal => 0.0,
        Illumination::Extreme => 1.0,
    };
    let occlusion = match attrs.occlusion {
        Occlusion::None => 0.0,
        Occlusion::Partial => 0.5,
        Occlusion::Heavy => 1.0,
    };
    let pose = match attrs.pose {
        Pose::Typical => 0.0,
        Pose::Atypical => 1.0,
    };
    blur + expression + illumination + occlusion + pose
}

/// Annotations above this difficulty are discarded.
pub const MAX_DIFFICULTY: f64 = 2.0;
/// Images with more remaining annotations than this are discarded.
pub const MAX_ANNOTATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub region: Region,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<FaceAttributes>,
}

impl Annotation {
    pub fn rect(b: BBox) -> Self {
        Annotation {
            region: Region::Rect(b),
            attributes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub annotations: Vec<Annotation>,
}

impl ImageRecord {
    /// Smallest integer canvas holding every annotation; at least 1×1.
    /// Text annotations carry no image size, so parsers use this.
    pub fn annotation_extent(annotations: &[Annotation]) -> (usize, usize) {
        let (mut w, mut h) = (1usize, 1usize);
        for a in annotations {
            let b = a.region.bounding_box();
            w = w.max(b.x2.max(0.0).ceil() as usize);
            h = h.max(b.y2.max(0.0).ceil() as usize);
        }
        (w, h)
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.region.bounding_box()).collect()
    }

    pub fn regions(&self) -> Vec<Region> {
        self.annotations.iter().map(|a| a.region).collect()
    }
}

/// Drops annotations harder than [`MAX_DIFFICULTY`] (a sum of exactly 2 is
/// kept), then images left with no annotations or more than
/// [`MAX_ANNOTATIONS`]. Annotations without attributes count as easy.
pub fn filter_records(records: &[ImageRecord]) -> Vec<ImageRecord> {
    records
        .iter()
        .filter_map(|r| {
            let annotations: Vec<Annotation> = r
                .annotations
                .iter()
                .filter(|a| a.attributes.map_or(0.0, |t| difficulty(&t)) <= MAX_DIFFICULTY)
                .copied()
                .collect();
            if annotations.is_empty() || annotations.len() > MAX_ANNOTATIONS {
                None
            } else {
                Some(ImageRecord {
                    annotations,
                    ..r.clone()
                })
            }
        })
        .collect()
}

fn numbers(line: &str, lineno: usize, want: usize) -> Result<Vec<f64>, DataError> {
    let v = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(lineno, format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if v.len() != want {
        return Err(parse_err(lineno, format!("expected {want} fields, found {}", v.len())));
    }
    Ok(v)
}

fn count(line: Option<(usize, &str)>, after: usize) -> Result<(usize, usize), DataError> {
    let (n, text) = line.ok_or_else(|| parse_err(after + 1, "missing face count"))?;
    let c = text
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_err(n, format!("bad face count {:?}", text.trim())))?;
    Ok((n, c))
}

fn code(v: f64, max: u8, lineno: usize, what: &str) -> Result<u8, DataError> {
    if v.fract() != 0.0 || v < 0.0 || v > max as f64 {
        return Err(parse_err(lineno, format!("{what} code {v} out of range 0..={max}")));
    }
    Ok(v as u8)
}

fn wider_attributes(f: &[f64], lineno: usize) -> Result<FaceAttributes, DataError> {
    Ok(FaceAttributes {
        blur: [Blur::None, Blur::Normal, Blur::Heavy][code(f[4], 2, lineno, "blur")? as usize],
        expression: [Expression::Typical, Expression::Extreme][code(f[5], 1, lineno, "expression")? as usize],
        illumination: [Illumination::Normal, Illumination::Extreme][code(f[6], 1, lineno, "illumination")? as usize],
        invalid: code(f[7], 1, lineno, "invalid")? == 1,
        occlusion: [Occlusion::None, Occlusion::Partial, Occlusion::Heavy]
            [code(f[8], 2, lineno, "occlusion")? as usize],
        pose: [Pose::Typical, Pose::Atypical][code(f[9], 1, lineno, "pose")? as usize],
    })
}

/// Parses WIDER face-box annotations: an image path line, a count line,
/// then `x y w h blur expression illumination invalid occlusion pose` per
/// face. Faces flagged invalid are dropped. A count of 0 may be followed by
/// the all-zero placeholder line the official files use.
pub fn parse_wider(text: &str) -> Result<Vec<ImageRecord>, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
        .peekable();
    let mut out = Vec::new();
    while let Some((n, path)) = lines.next() {
        let (n, c) = count(lines.next(), n)?;
        let mut annotations = Vec::with_capacity(c);
        if c == 0 {
            if let Some(&(m, next)) = lines.peek() {
                let f: Vec<&str> = next.split_whitespace().collect();
                if f.len() == 10 && f.iter().all(|t| t.parse::<f64>() == Ok(0.0)) {
                    let _ = m;
                    lines.next();
                }
            }
        }
        for i in 0..c {
            let (m, line) = lines
                .next()
                .ok_or_else(|| parse_err(n + i + 1, format!("expected {c} faces, found {i}")))?;
            let f = numbers(line, m, 10).map_err(|e| match e {
                DataError::Parse { msg, .. } if line.split_whitespace().count() <= 1 => {
                    parse_err(m, format!("expected {c} faces, found {i}: {msg}"))
                }
                other => other,
            })?;
            let attrs = wider_attributes(&f, m)?;
            let b = BBox::from_xywh(f[0], f[1], f[2], f[3]).map_err(|e| parse_err(m, e.to_string()))?;
            if !attrs.invalid {
                annotations.push(Annotation {
                    region: Region::Rect(b),
                    attributes: Some(attrs),
                });
            }
        }
        let (width, height) = ImageRecord::annotation_extent(&annotations);
        out.push(ImageRecord {
            id: path.trim().to_string(),
            width,
            height,
            annotations,
        });
    }
    Ok(out)
}

fn wider_codes(a: &FaceAttributes) -> [u8; 6] {
    [
        a.blur as u8,
        a.expression as u8,
        a.illumination as u8,
        a.invalid as u8,
        a.occlusion as u8,
        a.pose as u8,
    ]
}

/// Inverse of [`parse_wider`] for rectangle annotations. Missing
/// attributes are written as all zeros.
pub fn serialize_wider(records: &[ImageRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&format!("{}\n{}\n", r.id, r.annotations.len()));
        if r.annotations.is_empty() {
            s.push_str("0 0 0 0 0 0 0 0 0 0\n");
        }
        for a in &r.annotations {
            let b = a.region.bounding_box();
            let c = wider_codes(&a.attributes.unwrap_or_default());
            s.push_str(&format!(
                "{} {} {} {} {} {} {} {} {} {}\n",
                b.x1,
                b.y1,
                b.width(),
                b.height(),
                c[0],
                c[1],
                c[2],
                c[3],
                c[4],
                c[5]
            ));
        }
    }
    s
}

/// Parses an FDDB ellipse list: image name, face count, then
/// `major_radius minor_radius angle center_x center_y score` per face. The
/// score column is ignored.
pub fn parse_fddb_ellipses(text: &str) -> Result<Vec<ImageRecord>, DataError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    while let Some((n, name)) = lines.next() {
        let (n, c) = count(lines.next(), n)?;
        let mut annotations = Vec::with_capacity(c);
        for i in 0..c {
            let (m, line) = lines
                .next()
                .ok_or_else(|| parse_err(n + i + 1, format!("expected {c} faces, found {i}")))?;
            let f = numbers(line, m, 6)?;
            let e = EllipseRegion::new(f[3], f[4], f[0], f[1], f[2]).map_err(|e| parse_err(m, e.to_string()))?;
            annotations.push(Annotation {
                region: Region::Ellipse(e),
                attributes: None,
            });
        }
        let (width, height) = ImageRecord::annotation_extent(&annotations);
        out.push(ImageRecord {
            id: name.trim().to_string(),
            width,
            height,
            annotations,
        });
    }
    Ok(out)
}

/// Parses a fold listing (one image name per line) together with its
/// ellipse annotations; records come back in listing order.
pub fn parse_fddb(folds_text: &str, ellipse_text: &str) -> Result<Vec<ImageRecord>, DataError> {
    let mut by_name: BTreeMap<String, ImageRecord> = parse_fddb_ellipses(ellipse_text)?
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    let mut out = Vec::new();
    for (i, line) in folds_text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        let rec = by_name
            .remove(name)
            .ok_or_else(|| parse_err(i + 1, format!("image {name} listed in folds has no annotations")))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes FDDB ellipse-list text. Rectangle annotations are skipped.
pub fn serialize_fddb(records: &[ImageRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let ellipses: Vec<&EllipseRegion> = r
            .annotations
            .iter()
            .filter_map(|a| match &a.region {
                Region::Ellipse(e) => Some(e),
                Region::Rect(_) => None,
            })
            .collect();
        s.push_str(&format!("{}\n{}\n", r.id, ellipses.len()));
        for e in ellipses {
            s.push_str(&format!(
                "{} {} {} {} {} 1\n",
                e.major_r, e.minor_r, e.angle, e.cx, e.cy
            ));
        }
    }
    s
}

/// One cross-validation split. `fold` counts from 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

fn splits_from_tests(ids: &[String], tests: Vec<Vec<String>>) -> Vec<FoldSplit> {
    tests
        .into_iter()
        .enumerate()
        .map(|(i, test)| {
            let held: HashSet<&String> = test.iter().collect();
            FoldSplit {
                fold: i + 1,
                train: ids.iter().filter(|id| !held.contains(id)).cloned().collect(),
                test,
            }
        })
        .collect()
}

/// Shuffles image ids and deals them into `k` test sets whose sizes differ
/// by at most one.
pub fn make_folds<R: Rng>(records: &[ImageRecord], k: usize, rng: &mut R) -> Result<Vec<FoldSplit>, DataError> {
    if k < 2 {
        return Err(DataError::Folds(format!("need at least 2 folds, got {k}")));
    }
    if k > records.len() {
        return Err(DataError::Folds(format!(
            "{k} folds requested for {} images",
            records.len()
        )));
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let mut order = ids.clone();
    order.shuffle(rng);
    let mut tests = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        tests[i % k].push(id);
    }
    Ok(splits_from_tests(&ids, tests))
}

/// Builds splits from externally supplied fold listings, kept verbatim.
/// Every listed id must exist and no id may appear in two folds.
pub fn folds_from_lists(records: &[ImageRecord], lists: &[Vec<String>]) -> Result<Vec<FoldSplit>, DataError> {
    let known: HashSet<&String> = records.iter().map(|r| &r.id).collect();
    let mut seen = HashSet::new();
    for id in lists.iter().flatten() {
        if !known.contains(id) {
            return Err(DataError::Folds(format!("fold lists unknown image {id}")));
        }
        if !seen.insert(id) {
            return Err(DataError::Folds(format!("image {id} appears in two folds")));
        }
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    Ok(splits_from_tests(&ids, lists.to_vec()))
}

/// Settings for the synthetic face corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub images: usize,
    pub width: usize,
    pub height: usize,
    pub min_faces: usize,
    pub max_faces: usize,
    /// Face width range in pixels; height is 1.15–1.4 times the width.
    pub min_face: f64,
    pub max_face: f64,
    /// Chance that an image receives each of up to `max_distractors`
    /// featureless bright blobs.
    pub distractor_rate: f64,
    pub max_distractors: usize,
    /// Amplitude of per-pixel noise.
    pub noise: f64,
    /// Assign random WIDER-style attributes and render their effects.
    pub attributes: bool,
    /// Prefix for generated image ids.
    pub prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            images: 200,
            width: 128,
            height: 128,
            min_faces: 1,
            max_faces: 3,
            min_face: 18.0,
            max_face: 56.0,
            distractor_rate: 0.5,
            max_distractors: 2,
            noise: 0.06,
            attributes: false,
            prefix: "img".into(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.into()));
        if self.width < 16 || self.height < 16 {
            return bad("images must be at least 16×16");
        }
        if self.min_faces > self.max_faces {
            return bad("min_faces exceeds max_faces");
        }
        if !(self.min_face > 2.0 && self.min_face <= self.max_face) {
            return bad("face size range must be increasing and above 2 px");
        }
        if self.max_face * 1.4 >= self.width.min(self.height) as f64 {
            return bad("largest face does not fit the image");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) || !(0.0..=0.5).contains(&self.noise) {
            return bad("distractor_rate must lie in [0, 1] and noise in [0, 0.5]");
        }
        Ok(())
    }
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Paints `value` with 2×2 supersampled coverage of `inside`.
    fn paint(&mut self, bbox: &BBox, value: f64, inside: impl Fn(f64, f64) -> bool) {
        let x0 = bbox.x1.floor().max(0.0) as usize;
        let y0 = bbox.y1.floor().max(0.0) as usize;
        let x1 = (bbox.x2.ceil() as usize).min(self.w);
        let y1 = (bbox.y2.ceil() as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                let mut hits = 0;
                for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                    if inside(x as f64 + dx, y as f64 + dy) {
                        hits += 1;
                    }
                }
                if hits > 0 {
                    let a = hits as f64 / 4.0;
                    let p = &mut self.px[y * self.w + x];
                    *p = (1.0 - a) * *p + a * value;
                }
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, value: f64) {
        let b = BBox {
            x1: cx - rx,
            y1: cy - ry,
            x2: cx + rx,
            y2: cy + ry,
        };
        self.paint(&b, value, |x, y| {
            let u = (x - cx) / rx;
            let v = (y - cy) / ry;
            u * u + v * v <= 1.0
        });
    }

    fn rect(&mut self, b: &BBox, value: f64) {
        self.paint(b, value, |x, y| b.contains(x, y));
    }

    /// 3×3 box blur restricted to `b`.
    fn blur(&mut self, b: &BBox, passes: usize) {
        let x0 = b.x1.floor().max(0.0) as usize;
        let y0 = b.y1.floor().max(0.0) as usize;
        let x1 = (b.x2.ceil() as usize).min(self.w);
        let y1 = (b.y2.ceil() as usize).min(self.h);
        for _ in 0..passes {
            let src = self.px.clone();
            for y in y0..y1 {
                for x in x0..x1 {
                    let (mut s, mut n) = (0.0, 0.0);
                    for yy in y.saturating_sub(1)..(y + 2).min(self.h) {
                        for xx in x.saturating_sub(1)..(x + 2).min(self.w) {
                            s += src[yy * self.w + xx];
                            n += 1.0;
                        }
                    }
                    self.px[y * self.w + x] = s / n;
                }
            }
        }
    }
}

fn random_attributes<R: Rng>(rng: &mut R) -> FaceAttributes {
    let pick3 = |rng: &mut R| match rng.gen_range(0..10) {
        0..=5 => 0,
        6..=8 => 1,
        _ => 2,
    };
    FaceAttributes {
        blur: [Blur::None, Blur::Normal, Blur::Heavy][pick3(rng)],
        expression: if rng.gen_bool(0.15) {
            Expression::Extreme
        } else {
            Expression::Typical
        },
        illumination: if rng.gen_bool(0.15) {
            Illumination::Extreme
        } else {
            Illumination::Normal
        },
        occlusion: [Occlusion::None, Occlusion::Partial, Occlusion::Heavy][pick3(rng)],
        pose: if rng.gen_bool(0.15) {
            Pose::Atypical
        } else {
            Pose::Typical
        },
        invalid: false,
    }
}

fn place<R: Rng>(rng: &mut R, cfg: &SynthConfig, taken: &[BBox], w: f64, h: f64) -> Option<BBox> {
    for _ in 0..100 {
        let x = rng.gen_range(1.0..(cfg.width as f64 - w - 1.0));
        let y = rng.gen_range(1.0..(cfg.height as f64 - h - 1.0));
        let b = BBox {
            x1: x,
            y1: y,
            x2: x + w,
            y2: y + h,
        };
        let padded = BBox {
            x1: b.x1 - 3.0,
            y1: b.y1 - 3.0,
            x2: b.x2 + 3.0,
            y2: b.y2 + 3.0,
        };
        if taken.iter().all(|t| t.intersection_area(&padded) == 0.0) {
            return Some(b);
        }
    }
    None
}

fn background<R: Rng>(rng: &mut R, w: usize, h: usize) -> Vec<f64> {
    let base = rng.gen_range(0.25..0.45);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.02..0.09),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    let mut px = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut v = base;
            for &(f, a, p, amp) in &waves {
                v += amp * ((x as f64 * a.cos() + y as f64 * a.sin()) * f + p).sin();
            }
            px[y * w + x] = v;
        }
    }
    px
}

/// Generates `cfg.images` grayscale images (tensors of shape `(1,1,H,W)`
/// with values in `[0,1]`, quantized to 8 bits) of bright elliptical faces
/// with dark eyes and mouth on textured noise, plus optional featureless
/// distractor blobs. Each face is annotated with its ellipse's bounding
/// box. Output depends only on `cfg` and `seed`.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Vec<(ImageRecord, Tensor)>, DataError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let (w, h) = (cfg.width, cfg.height);
        let mut canvas = Canvas {
            w,
            h,
            px: background(&mut rng, w, h),
        };
        let mut taken: Vec<BBox> = Vec::new();
        let mut annotations = Vec::new();
        let faces = rng.gen_range(cfg.min_faces..=cfg.max_faces);
        for _ in 0..faces {
            let fw = rng.gen_range(cfg.min_face..=cfg.max_face);
            let fh = fw * rng.gen_range(1.15..1.4);
            let Some(b) = place(&mut rng, cfg, &taken, fw, fh) else {
                continue;
            };
            taken.push(b);
            let attrs = cfg.attributes.then(|| random_attributes(&mut rng));
            let (cx, cy) = b.center();
            let (rx, ry) = (fw / 2.0, fh / 2.0);
            let mut skin = rng.gen_range(0.72..0.92);
            if attrs.is_some_and(|a| a.illumination == Illumination::Extreme) {
                skin *= 0.6;
            }
            let dark = rng.gen_range(0.05..0.2);
            canvas.ellipse(cx, cy, rx, ry, skin);
            let eye_dx = 0.38 * rx;
            let eye_y = cy - 0.22 * ry;
            let (erx, ery) = (0.16 * rx, 0.11 * ry);
            canvas.ellipse(cx - eye_dx, eye_y, erx, ery, dark);
            canvas.ellipse(cx + eye_dx, eye_y, erx, ery, dark);
            let open = attrs.is_some_and(|a| a.expression == Expression::Extreme);
            let mouth = BBox {
                x1: cx - 0.4 * rx,
                y1: cy + 0.38 * ry,
                x2: cx + 0.4 * rx,
                y2: cy + if open { 0.62 } else { 0.5 } * ry,
            };
            canvas.rect(&mouth, dark);
            if let Some(a) = attrs {
                let cover = match a.occlusion {
                    Occlusion::None => 0.0,
                    Occlusion::Partial => 0.3,
                    Occlusion::Heavy => 0.6,
                };
                if cover > 0.0 {
                    let occ = BBox {
                        x1: b.x1,
                        y1: b.y2 - cover * fh,
                        x2: b.x2,
                        y2: b.y2,
                    };
                    canvas.rect(&occ, rng.gen_range(0.25..0.45));
                }
                let passes = match a.blur {
                    Blur::None => 0,
                    Blur::Normal => 1,
                    Blur::Heavy => 3,
                };
                canvas.blur(&b, passes);
            }
            annotations.push(Annotation {
                region: Region::Rect(b),
                attributes: attrs,
            });
        }
        for _ in 0..cfg.max_distractors {
            if !rng.gen_bool(cfg.distractor_rate) {
                continue;
            }
            let dw = rng.gen_range(cfg.min_face..=cfg.max_face);
            let dh = dw * rng.gen_range(0.8..1.5);
            let Some(b) = place(&mut rng, cfg, &taken, dw, dh) else {
                continue;
            };
            taken.push(b);
            let v = rng.gen_range(0.72..0.92);
            if rng.gen_bool(0.5) {
                let (cx, cy) = b.center();
                canvas.ellipse(cx, cy, dw / 2.0, dh / 2.0, v);
            } else {
                canvas.rect(&b, v);
            }
        }
        let data: Vec<f64> = canvas
            .px
            .iter()
            .map(|&v| {
                let n = v + cfg.noise * (rng.gen::<f64>() + rng.gen::<f64>() - 1.0);
                (n.clamp(0.0, 1.0) * 255.0).round() / 255.0
            })
            .collect();
        let record = ImageRecord {
            id: format!("{}_{:05}", cfg.prefix, i),
            width: w,
            height: h,
            annotations,
        };
        out.push((record, Tensor::from_vec(&[1, 1, h, w], data).expect("sized buffer")));
    }
    Ok(out)
}

/// Name of the ground-truth file inside a dataset directory.
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

/// Writes each image as `<id>.pgm` plus one JSON record per line in
/// [`ANNOTATIONS_FILE`].
pub fn save_dataset(dir: &Path, items: &[(ImageRecord, Tensor)]) -> Result<(), DataError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let ann = dir.join(ANNOTATIONS_FILE);
    let mut w = BufWriter::new(File::create(&ann).map_err(|e| io_err(&ann, e))?);
    for (rec, img) in items {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(&ann, e))?;
        save_pgm(&dir.join(format!("{}.pgm", rec.id)), img)?;
    }
    w.flush().map_err(|e| io_err(&ann, e))
}

pub fn save_pgm(path: &Path, img: &Tensor) -> Result<(), DataError> {
    let (_, _, h, w) = img.dims4().map_err(|e| io_err(path, e))?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .take(h * w)
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Pnm)
        .map_err(|e| io_err(path, e))
}

/// Loads a PGM/PPM file as a `(1,1,H,W)` grayscale tensor in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor, DataError> {
    let img = image::open(path).map_err(|e| io_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&[1, 1, h, w], data).expect("sized buffer"))
}

pub fn read_records(path: &Path) -> Result<Vec<ImageRecord>, DataError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<(ImageRecord, Tensor)>, DataError> {
    read_records(&dir.join(ANNOTATIONS_FILE))?
        .into_iter()
        .map(|r| {
            let img = load_image(&dir.join(format!("{}.pgm", r.id)))?;
            let (_, _, h, w) = img.dims4().expect("4-d image");
            if (w, h) != (r.width, r.height) {
                return Err(DataError::Io {
                    path: r.id.clone(),
                    msg: format!("image is {w}×{h} but record says {}×{}", r.width, r.height),
                });
            }
            Ok((r, img))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attrs() -> FaceAttributes {
        FaceAttributes::default()
    }

    #[test]
    fn difficulty_examples() {
        assert_eq!(difficulty(&attrs()), 0.0);
        let a = FaceAttributes {
            blur: Blur::Heavy,
            occlusion: Occlusion::Partial,
            ..attrs()
        };
        assert_eq!(difficulty(&a), 1.5);
        let a = FaceAttributes {
            expression: Expression::Extreme,
            illumination: Illumination::Extreme,
            pose: Pose::Atypical,
            ..attrs()
        };
        assert_eq!(difficulty(&a), 3.0);
    }

    fn rec(id: &str, diffs: &[FaceAttributes]) -> ImageRecord {
        ImageRecord {
            id: id.into(),
            width: 100,
            height: 100,
            annotations: diffs
                .iter()
                .map(|a| Annotation {
                    region: Region::Rect(BBox::new(0.0, 0.0, 10.0, 10.0).unwrap()),
                    attributes: Some(*a),
                })
                .collect(),
        }
    }

    #[test]
    fn filter_boundaries() {
        let two = FaceAttributes {
            pose: Pose::Atypical,
            blur: Blur::Normal,
            occlusion: Occlusion::Partial,
            ..attrs()
        };
        let two_and_half = FaceAttributes {
            blur: Blur::Normal,
            ..FaceAttributes {
                pose: Pose::Atypical,
                expression: Expression::Extreme,
                ..attrs()
            }
        };
        assert_eq!(difficulty(&two), 2.0);
        assert_eq!(difficulty(&two_and_half), 2.5);
        let kept = filter_records(&[rec("a", &[two, two_and_half]), rec("b", &[two_and_half])]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].annotations.len(), 1);

        let crowd = rec("c", &vec![attrs(); 1001]);
        assert!(filter_records(&[crowd]).is_empty());
        let ok = rec("d", &vec![attrs(); 1000]);
        assert_eq!(filter_records(std::slice::from_ref(&ok)), vec![ok]);
    }

    #[test]
    fn wider_examples() {
        let r = parse_wider("img.jpg\n1\n10 10 20 20 0 0 0 0 0 0\n").unwrap();
        assert_eq!(r.len(), 1);
        let a = r[0].annotations[0];
        assert_eq!(a.region, Region::Rect(BBox::new(10.0, 10.0, 30.0, 30.0).unwrap()));
        assert_eq!(difficulty(&a.attributes.unwrap()), 0.0);
        assert_eq!((r[0].width, r[0].height), (30, 30));

        let r = parse_wider("a\n1\n1 1 5 5 2 0 0 0 0 0\n").unwrap();
        assert_eq!(r[0].annotations[0].attributes.unwrap().blur, Blur::Heavy);

        let err = parse_wider("a\n2\n1 1 5 5 0 0 0 0 0 0\n").unwrap_err();
        assert!(
            err.to_string().contains("line 3") || err.to_string().contains("line 4"),
            "{err}"
        );
        let err = parse_wider("a\n2\n1 1 5 5 0 0 0 0 0 0\nb\n1\n1 1 5 5 0 0 0 0 0 0\n").unwrap_err();
        assert!(err.to_string().starts_with("line 4"), "{err}");

        let r = parse_wider("a\n0\n0 0 0 0 0 0 0 0 0 0\nb\n1\n1 1 5 5 0 0 0 1 0 0\n").unwrap();
        assert_eq!(r.len(), 2);
        assert!(r[0].annotations.is_empty() && r[1].annotations.is_empty());
    }

    #[test]
    fn fddb_examples() {
        let ell = "img_a\n1\n50.0 30.0 1.57 100.0 120.0 1\nimg_b\n0\n";
        let r = parse_fddb("img_b\nimg_a\n", ell).unwrap();
        assert_eq!(r[0].id, "img_b");
        assert!(r[0].annotations.is_empty());
        let Region::Ellipse(e) = r[1].annotations[0].region else {
            panic!("expected ellipse")
        };
        assert_eq!((e.major_r, e.minor_r, e.cx, e.cy), (50.0, 30.0, 100.0, 120.0));
        assert!((e.angle - 1.57).abs() < 1e-12);
        assert!(parse_fddb("missing\n", ell).is_err());
        assert!(parse_fddb_ellipses("x\n1\n1 2 3\n")
            .unwrap_err()
            .to_string()
            .starts_with("line 3"));
    }

    #[test]
    fn folds_partition() {
        let recs: Vec<ImageRecord> = (0..10).map(|i| rec(&format!("r{i}"), &[attrs()])).collect();
        let f = make_folds(&recs, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(f.iter().all(|s| s.test.len() == 1 && s.train.len() == 9));
        let mut all: Vec<String> = f.iter().flat_map(|s| s.test.clone()).collect();
        all.sort();
        let mut ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
        ids.sort();
        assert_eq!(all, ids);
        assert!(make_folds(&recs, 11, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let lists = vec![vec!["r3".to_string(), "r1".to_string()], vec!["r0".to_string()]];
        let ext = folds_from_lists(&recs, &lists).unwrap();
        assert_eq!(ext[0].test, lists[0]);
        assert_eq!(ext[1].fold, 2);
    }

    #[test]
    fn synthetic_is_deterministic_and_persistent() {
        let cfg = SynthConfig {
            images: 4,
            ..Default::default()
        };
        let a = gen_synthetic(&cfg, 7).unwrap();
        let b = gen_synthetic(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|(r, _)| !r.annotations.is_empty()));
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &a).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, a);
    }
}
