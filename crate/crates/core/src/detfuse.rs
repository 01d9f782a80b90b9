//! Detection fusion: ingest external RGB detections, attach pattern,
//! spectral and class-probability features, georeference them and lay them
//! out in a 2D image field for review.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::csvio::read_text;
use crate::error::{Error, Result};
use crate::hypercube::HyperCube;
use crate::nav::{pixel_to_world, uhi_line_footprint, uhi_sample_to_world, CameraModel, NavTrack};
use crate::raster::read_rgb;
use crate::review::ReviewState;
use crate::specmatch::interpolate;

/// Score threshold applied at ingest.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.35;

pub const HUE_BINS: usize = 16;
pub const GRADIENT_BINS: usize = 32;
pub const PATTERN_LEN: usize = HUE_BINS + GRADIENT_BINS;
pub const SPECTRAL_LEN: usize = 16;
pub const PROBABILITY_LEN: usize = DebrisClass::ALL.len();
pub const FEATURE_LEN: usize = PATTERN_LEN + SPECTRAL_LEN + PROBABILITY_LEN;

/// Fixed wavelengths the spectral feature is resampled to (400–700 nm, 20 nm steps).
pub fn feature_bands_nm() -> [f64; SPECTRAL_LEN] {
    std::array::from_fn(|i| 400.0 + 20.0 * i as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DebrisClass {
    Bottle,
    Plastic,
    Anchor,
    Tire,
    Metal,
    Other,
    Starfish,
}

impl DebrisClass {
    /// Enumeration order; also the tie-break order for argmax.
    pub const ALL: [DebrisClass; 7] = [
        DebrisClass::Bottle,
        DebrisClass::Plastic,
        DebrisClass::Anchor,
        DebrisClass::Tire,
        DebrisClass::Metal,
        DebrisClass::Other,
        DebrisClass::Starfish,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            DebrisClass::Bottle => "bottle",
            DebrisClass::Plastic => "plastic",
            DebrisClass::Anchor => "anchor",
            DebrisClass::Tire => "tire",
            DebrisClass::Metal => "metal",
            DebrisClass::Other => "other",
            DebrisClass::Starfish => "starfish",
        }
    }

    /// Fauna rather than debris.
    pub fn is_fauna(self) -> bool {
        self == DebrisClass::Starfish
    }
}

impl fmt::Display for DebrisClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DebrisClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        let key = match key.as_str() {
            "bottles" => "bottle",
            "plastics" => "plastic",
            "anchors" => "anchor",
            "tires" | "tyre" | "tyres" => "tire",
            "others" => "other",
            k => k,
        };
        DebrisClass::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| Error::Format(format!("unknown class {s:?}")))
    }
}

/// One score per class, serialized as a `{class: score}` map.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScores(pub [f64; 7]);

impl ClassScores {
    pub fn get(&self, class: DebrisClass) -> f64 {
        self.0[class.index()]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Highest-scoring class; ties resolve to the earliest in enumeration order.
    pub fn argmax(&self) -> DebrisClass {
        let mut best = 0;
        for i in 1..self.0.len() {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        DebrisClass::ALL[best]
    }

    pub fn from_map(map: &BTreeMap<String, f64>) -> Result<Self> {
        let mut out = [0.0; 7];
        for (k, v) in map {
            let class: DebrisClass = k.parse()?;
            if !v.is_finite() || !(0.0..=1.0).contains(v) {
                return Err(Error::Invalid(format!("score {v} for {k} outside [0, 1]")));
            }
            out[class.index()] = *v;
        }
        Ok(Self(out))
    }
}

impl Serialize for ClassScores {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let map: BTreeMap<&str, f64> = DebrisClass::ALL
            .iter()
            .map(|c| (c.name(), self.0[c.index()]))
            .collect();
        map.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ClassScores {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, f64>::deserialize(d)?;
        ClassScores::from_map(&map).map_err(serde::de::Error::custom)
    }
}

/// A detection as produced by the external RGB detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub frame_id: String,
    pub t: f64,
    /// `[x, y, w, h]` in image pixels, top-left origin.
    pub bbox: [f64; 4],
    pub scores: ClassScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Vec<[f64; 2]>>,
    pub class: DebrisClass,
}

impl RawDetection {
    pub fn bbox_center(&self) -> (f64, f64) {
        let [x, y, w, h] = self.bbox;
        (x + w / 2.0, y + h / 2.0)
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum FrameRef {
    Text(String),
    Number(serde_json::Number),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    frame_id: FrameRef,
    t: f64,
    bbox: [f64; 4],
    scores: BTreeMap<String, f64>,
    #[serde(default)]
    mask: Option<Vec<[f64; 2]>>,
}

/// Record-level problem in a detection file; ingestion continues past it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub kept: Vec<RawDetection>,
    pub below_threshold: usize,
    pub errors: Vec<RecordError>,
}

fn parse_record(line: &str) -> Result<RawDetection> {
    let rec: DetectionRecord = serde_json::from_str(line)?;
    if !rec.t.is_finite() {
        return Err(Error::Invalid("timestamp must be finite".into()));
    }
    let [x, y, w, h] = rec.bbox;
    if rec.bbox.iter().any(|v| !v.is_finite()) || x < 0.0 || y < 0.0 || w <= 0.0 || h <= 0.0 {
        return Err(Error::Invalid(format!("bad bbox {:?}", rec.bbox)));
    }
    let scores = ClassScores::from_map(&rec.scores)?;
    let frame_id = match rec.frame_id {
        FrameRef::Text(s) => s,
        FrameRef::Number(n) => n.to_string(),
    };
    Ok(RawDetection {
        frame_id,
        t: rec.t,
        bbox: rec.bbox,
        class: scores.argmax(),
        scores,
        mask: rec.mask,
    })
}

/// Parses newline-delimited JSON detections and keeps those whose maximum
/// class score is at least `threshold`.
pub fn ingest_detections(ndjson: &str, threshold: f64) -> Result<IngestReport> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Precondition(format!(
            "score threshold {threshold} outside [0, 1]"
        )));
    }
    let mut report = IngestReport::default();
    for (i, line) in ndjson.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match parse_record(line) {
            Ok(det) if det.scores.max() >= threshold => report.kept.push(det),
            Ok(_) => report.below_threshold += 1,
            Err(e) => report.errors.push(RecordError {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok(report)
}

pub fn ingest_file(path: &Path, threshold: f64) -> Result<IngestReport> {
    ingest_detections(&read_text(path)?, threshold)
}

/// 16-bin hue histogram followed by a 32-bin gradient-orientation histogram,
/// each L1-normalized (all-zero when nothing votes).
///
/// Achromatic pixels carry no hue and are left out of the hue histogram.
/// Gradients use central differences on interior pixels of the mean
/// intensity, with unsigned orientation in `[0, pi)` and magnitude-weighted
/// votes.
pub fn extract_pattern_features(patch: &RgbImage) -> [f64; PATTERN_LEN] {
    let mut out = [0.0; PATTERN_LEN];
    let (w, h) = patch.dimensions();

    for px in patch.pixels() {
        if let Some(hue) = hue_deg(px.0) {
            let bin = ((hue / (360.0 / HUE_BINS as f64)) as usize).min(HUE_BINS - 1);
            out[bin] += 1.0;
        }
    }

    let gray = |x: u32, y: u32| {
        let p = patch.get_pixel(x, y).0;
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0
    };
    let step = std::f64::consts::PI / GRADIENT_BINS as f64;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let gx = (gray(x + 1, y) - gray(x - 1, y)) / 2.0;
            let gy = (gray(x, y + 1) - gray(x, y - 1)) / 2.0;
            let mag = gx.hypot(gy);
            if mag > 0.0 {
                let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                let bin = ((theta / step) as usize).min(GRADIENT_BINS - 1);
                out[HUE_BINS + bin] += mag;
            }
        }
    }

    l1_normalize(&mut out[..HUE_BINS]);
    l1_normalize(&mut out[HUE_BINS..]);
    out
}

fn hue_deg(rgb: [u8; 3]) -> Option<f64> {
    let [r, g, b] = rgb.map(|v| v as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d <= 0.0 {
        return None;
    }
    let h = if max == r {
        60.0 * ((g - b) / d)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    Some(h.rem_euclid(360.0))
}

fn l1_normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// World footprint of a detection: projected box center plus the radius
/// reaching its farthest projected corner.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

pub fn detection_footprint(
    det: &RawDetection,
    track: &NavTrack<f64>,
    cam: &CameraModel<f64>,
) -> Result<Footprint> {
    let pose = track.pose_at(det.t)?;
    let [x, y, w, h] = det.bbox;
    let (cx, cy) = pixel_to_world(&pose, cam, det.bbox_center())?;
    let mut radius: f64 = 0.0;
    for corner in [(x, y), (x + w, y), (x + w, y + h), (x, y + h)] {
        let (px, py) = pixel_to_world(&pose, cam, corner)?;
        radius = radius.max((px - cx).hypot(py - cy));
    }
    Ok(Footprint {
        x: cx,
        y: cy,
        radius,
    })
}

/// Spectral part of a feature vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralPart {
    pub values: [f64; SPECTRAL_LEN],
    /// False when no UHI pixel falls inside the footprint.
    pub covered: bool,
    pub pixels: usize,
}

impl SpectralPart {
    pub fn uncovered() -> Self {
        Self {
            values: [0.0; SPECTRAL_LEN],
            covered: false,
            pixels: 0,
        }
    }
}

/// Resamples a spectrum onto the fixed feature bands, holding the edge
/// values outside the source grid, and L2-normalizes it.
pub fn spectral_feature(grid_nm: &[f64], spectrum: &[f64]) -> [f64; SPECTRAL_LEN] {
    let (lo, hi) = (grid_nm[0], grid_nm[grid_nm.len() - 1]);
    let mut out = feature_bands_nm()
        .map(|nm| interpolate(grid_nm, spectrum, nm.clamp(lo, hi)).unwrap_or(0.0));
    l2_normalize(&mut out);
    out
}

/// Mean UHI spectrum over the pixels whose ground points fall inside the
/// detection's world footprint.
pub fn coregister_spectrum(
    det: &RawDetection,
    cube: &HyperCube<f64>,
    track: &NavTrack<f64>,
    cam: &CameraModel<f64>,
    uhi_fov_deg: f64,
) -> Result<SpectralPart> {
    let fp = detection_footprint(det, track, cam)?;
    Ok(coregister_footprint(&fp, cube, track, uhi_fov_deg))
}

pub fn coregister_footprint(
    fp: &Footprint,
    cube: &HyperCube<f64>,
    track: &NavTrack<f64>,
    uhi_fov_deg: f64,
) -> SpectralPart {
    let samples = cube.samples();
    let mut sum = vec![0.0; cube.bands()];
    let mut n = 0usize;
    for (line, &t) in cube.timestamps().iter().enumerate() {
        let Ok(pose) = track.pose_at(t) else { continue };
        // the line's ground trace is a segment; skip lines that cannot reach the circle
        let mid = (samples as f64 - 1.0) / 2.0;
        let (Ok(c), Ok(e)) = (
            uhi_sample_to_world(&pose, uhi_fov_deg, samples, mid),
            uhi_sample_to_world(&pose, uhi_fov_deg, samples, 0.0),
        ) else {
            continue;
        };
        let half = (e.0 - c.0).hypot(e.1 - c.1);
        if (c.0 - fp.x).hypot(c.1 - fp.y) > fp.radius + half {
            continue;
        }
        let Ok(points) = uhi_line_footprint(&pose, uhi_fov_deg, samples) else {
            continue;
        };
        for (s, (x, y)) in points.iter().enumerate() {
            if (x - fp.x).hypot(y - fp.y) <= fp.radius {
                for (acc, v) in sum.iter_mut().zip(cube.pixel(line, s)) {
                    *acc += v;
                }
                n += 1;
            }
        }
    }
    if n == 0 {
        return SpectralPart::uncovered();
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
    SpectralPart {
        values: spectral_feature(cube.grid().as_slice(), &mean),
        covered: true,
        pixels: n,
    }
}

/// Which slice of the feature vector drives the image field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeatureView {
    #[default]
    All,
    Pattern,
    Spectrum,
    Probability,
}

impl FeatureView {
    pub fn range(self) -> std::ops::Range<usize> {
        match self {
            FeatureView::All => 0..FEATURE_LEN,
            FeatureView::Pattern => 0..PATTERN_LEN,
            FeatureView::Spectrum => PATTERN_LEN..PATTERN_LEN + SPECTRAL_LEN,
            FeatureView::Probability => PATTERN_LEN + SPECTRAL_LEN..FEATURE_LEN,
        }
    }
}

impl FromStr for FeatureView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FeatureView::All),
            "pattern" => Ok(FeatureView::Pattern),
            "spectrum" => Ok(FeatureView::Spectrum),
            "probability" => Ok(FeatureView::Probability),
            other => Err(Error::Format(format!("unknown view {other:?}"))),
        }
    }
}

/// Pattern (48) + spectral (16) + class probabilities (7).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn assemble(
        pattern: &[f64; PATTERN_LEN],
        spectral: &[f64; SPECTRAL_LEN],
        scores: &ClassScores,
    ) -> Self {
        let mut v = Vec::with_capacity(FEATURE_LEN);
        v.extend_from_slice(pattern);
        v.extend_from_slice(spectral);
        v.extend_from_slice(&scores.0);
        Self(v)
    }

    pub fn view(&self, view: FeatureView) -> &[f64] {
        &self.0[view.range()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub points: Vec<[f64; 2]>,
    /// Fewer than three items: the layout is at most a line.
    pub degenerate: bool,
}

/// Projects mean-centered features onto their top two principal components
/// and scales the result uniformly into `[-1, 1]²`.
///
/// Components are ordered by descending eigenvalue and oriented so that
/// their largest-magnitude loading is positive. A single uniform scale keeps
/// relative distances intact.
pub fn embed_2d<V: AsRef<[f64]>>(features: &[V]) -> Result<Embedding> {
    let n = features.len();
    if n == 0 {
        return Ok(Embedding {
            points: Vec::new(),
            degenerate: true,
        });
    }
    let d = features[0].as_ref().len();
    if features.iter().any(|f| f.as_ref().len() != d) {
        return Err(Error::Precondition("feature vectors differ in length".into()));
    }
    if features.iter().flat_map(|f| f.as_ref()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite feature value".into()));
    }
    let degenerate = n < 3;

    let mut x = DMatrix::from_fn(n, d, |i, j| features[i].as_ref()[j]);
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut points = vec![[0.0; 2]; n];
    for (k, &idx) in order.iter().take(2).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        let lead = (0..d)
            .reduce(|best, j| if v[j].abs() > v[best].abs() { j } else { best })
            .unwrap_or(0);
        if v[lead] < 0.0 {
            v.neg_mut();
        }
        let proj = &x * v;
        for i in 0..n {
            points[i][k] = proj[i];
        }
    }

    let max = points
        .iter()
        .flat_map(|p| p.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        for p in &mut points {
            p[0] /= max;
            p[1] /= max;
        }
    }
    Ok(Embedding { points, degenerate })
}

/// A detection after fusion, as handed to review.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedDetection {
    pub id: u32,
    pub raw: RawDetection,
    pub features: FeatureVector,
    pub footprint: Option<Footprint>,
    pub spectral_covered: bool,
    pub class: DebrisClass,
    pub state: ReviewState,
    pub embedding: [f64; 2],
}

impl FusedDetection {
    /// `1 - max score`.
    pub fn uncertainty(&self) -> f64 {
        1.0 - self.raw.scores.max()
    }
}

/// Context shared by all detections during fusion.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs<'a> {
    pub track: &'a NavTrack<f64>,
    pub camera_fov_deg: f64,
    /// Frame size used when the frame image itself is unavailable.
    pub frame_size: (u32, u32),
    /// Directory with `<frame_id>.ppm` images.
    pub frames_dir: Option<&'a Path>,
    pub cube: Option<&'a HyperCube<f64>>,
    pub uhi_fov_deg: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FusionOutput {
    pub detections: Vec<FusedDetection>,
    pub warnings: Vec<String>,
}

/// Crop of `bbox` clamped to the image; `None` when the box misses it.
pub fn crop_patch(image: &RgbImage, bbox: [f64; 4]) -> Option<RgbImage> {
    let [x, y, w, h] = bbox;
    let x0 = x.floor().max(0.0) as u32;
    let y0 = y.floor().max(0.0) as u32;
    let x1 = ((x + w).ceil() as u32).min(image.width());
    let y1 = ((y + h).ceil() as u32).min(image.height());
    (x1 > x0 && y1 > y0)
        .then(|| image::imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image())
}

/// Builds fused detections with ids `1..=n` in input order.
pub fn fuse_detections(raws: &[RawDetection], inputs: &FusionInputs<'_>) -> Result<FusionOutput> {
    let mut frames: HashMap<&str, RgbImage> = HashMap::new();
    let mut warnings = Vec::new();
    if let Some(dir) = inputs.frames_dir {
        for det in raws {
            if frames.contains_key(det.frame_id.as_str()) {
                continue;
            }
            let path = dir.join(format!("{}.ppm", det.frame_id));
            match read_rgb(&path) {
                Ok(img) => {
                    frames.insert(det.frame_id.as_str(), img);
                }
                Err(e) => warnings.push(format!("frame {}: {e}", det.frame_id)),
            }
        }
    }

    let parts: Vec<(FeatureVector, Option<Footprint>, bool, Option<String>)> = raws
        .par_iter()
        .map(|det| {
            let frame = frames.get(det.frame_id.as_str());
            let (w, h) = frame.map(|f| f.dimensions()).unwrap_or(inputs.frame_size);
            let pattern = frame
                .and_then(|f| crop_patch(f, det.bbox))
                .map(|p| extract_pattern_features(&p))
                .unwrap_or([0.0; PATTERN_LEN]);
            let mut warning = None;
            let footprint = CameraModel::new(inputs.camera_fov_deg, w, h)
                .and_then(|cam| detection_footprint(det, inputs.track, &cam));
            let footprint = match footprint {
                Ok(fp) => Some(fp),
                Err(e) => {
                    warning = Some(format!("detection at t={} not georeferenced: {e}", det.t));
                    None
                }
            };
            let spectral = match (inputs.cube, footprint) {
                (Some(cube), Some(fp)) => {
                    coregister_footprint(&fp, cube, inputs.track, inputs.uhi_fov_deg)
                }
                _ => SpectralPart::uncovered(),
            };
            (
                FeatureVector::assemble(&pattern, &spectral.values, &det.scores),
                footprint,
                spectral.covered,
                warning,
            )
        })
        .collect();

    let embedding = embed_2d(&parts.iter().map(|p| p.0 .0.as_slice()).collect::<Vec<_>>())?;
    let mut detections = Vec::with_capacity(raws.len());
    for (i, ((det, (features, footprint, covered, warning)), point)) in raws
        .iter()
        .zip(parts)
        .zip(embedding.points)
        .enumerate()
    {
        warnings.extend(warning);
        detections.push(FusedDetection {
            id: i as u32 + 1,
            raw: det.clone(),
            features,
            footprint,
            spectral_covered: covered,
            class: det.class,
            state: ReviewState::Unverified,
            embedding: point,
        });
    }
    Ok(FusionOutput {
        detections,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::{CubeKind, WavelengthGrid};
    use crate::nav::NavSample;
    use image::Rgb;

    fn record(scores: &str) -> String {
        format!(r#"{{"frame_id":"12.5","t":12.5,"bbox":[10,20,30,40],"scores":{scores}}}"#)
    }

    #[test]
    fn threshold_is_inclusive() {
        let text = [
            record(r#"{"bottle":0.34}"#),
            record(r#"{"bottle":0.35}"#),
            record(r#"{"tire":0.349,"metal":0.1}"#),
        ]
        .join("\n");
        let r = ingest_detections(&text, DEFAULT_SCORE_THRESHOLD).unwrap();
        assert_eq!(r.kept.len(), 1);
        assert_eq!(r.kept[0].scores.get(DebrisClass::Bottle), 0.35);
        assert_eq!(r.below_threshold, 2);
    }

    #[test]
    fn ties_follow_enumeration_order() {
        let r = ingest_detections(&record(r#"{"tire":0.5,"bottle":0.5}"#), 0.35).unwrap();
        assert_eq!(r.kept[0].class, DebrisClass::Bottle);
    }

    #[test]
    fn malformed_records_are_reported_and_skipped() {
        let text = [
            "not json".to_string(),
            record(r#"{"spaceship":0.9}"#),
            record(r#"{"plastic":1.5}"#),
            r#"{"frame_id":3,"t":1,"bbox":[0,0,-1,2],"scores":{"tire":0.9}}"#.to_string(),
            record(r#"{"plastic":0.9}"#),
            r#"{"frame_id":3,"t":1,"bbox":[0,0,4,2],"scores":{"tire":0.9}}"#.to_string(),
        ]
        .join("\n");
        let r = ingest_detections(&text, 0.35).unwrap();
        assert_eq!(r.kept.len(), 2);
        assert_eq!(r.kept[1].frame_id, "3");
        assert_eq!(
            r.errors.iter().map(|e| e.line).collect::<Vec<_>>(),
            vec![1, 2, 3, 4]
        );
        assert!(ingest_detections("", 1.2).is_err());
    }

    #[test]
    fn class_names_parse() {
        assert_eq!("Tyres".parse::<DebrisClass>().unwrap(), DebrisClass::Tire);
        assert_eq!("starfish".parse::<DebrisClass>().unwrap(), DebrisClass::Starfish);
        assert!("whale".parse::<DebrisClass>().is_err());
    }

    #[test]
    fn single_hue_patch_is_one_hot() {
        let patch = RgbImage::from_pixel(5, 5, Rgb([200, 40, 40]));
        let f = extract_pattern_features(&patch);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[..HUE_BINS].iter().sum::<f64>(), 1.0);
        let green = RgbImage::from_pixel(5, 5, Rgb([40, 200, 40]));
        let f = extract_pattern_features(&green);
        // hue 120 -> bin 5
        assert_eq!(f[5], 1.0);
    }

    #[test]
    fn constant_patch_has_no_gradient() {
        let patch = RgbImage::from_pixel(6, 6, Rgb([90, 90, 90]));
        let f = extract_pattern_features(&patch);
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vertical_step_edge_votes_horizontal_gradient() {
        // columns 0-1 dark, 2-3 bright: interior pixels (1..3, 1..3)
        // have gx = 50, gy = 0 -> orientation 0 -> bin 0
        let patch = RgbImage::from_fn(4, 4, |x, _| if x < 2 { Rgb([0; 3]) } else { Rgb([100; 3]) });
        let f = extract_pattern_features(&patch);
        assert_eq!(f[HUE_BINS], 1.0);
        assert_eq!(f[HUE_BINS..].iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn horizontal_edge_votes_vertical_bin() {
        let patch = RgbImage::from_fn(4, 4, |_, y| if y < 2 { Rgb([100; 3]) } else { Rgb([0; 3]) });
        let f = extract_pattern_features(&patch);
        // gy < 0 -> orientation pi/2 after folding -> bin 16
        assert_eq!(f[HUE_BINS + 16], 1.0);
    }

    #[test]
    fn pattern_is_translation_invariant() {
        let content = RgbImage::from_fn(7, 5, |x, y| Rgb([(x * 30) as u8, (y * 40) as u8, 90]));
        let place = |ox: u32, oy: u32| {
            let mut canvas = RgbImage::from_pixel(20, 20, Rgb([3, 200, 9]));
            image::imageops::replace(&mut canvas, &content, ox as i64, oy as i64);
            crop_patch(&canvas, [ox as f64, oy as f64, 7.0, 5.0]).unwrap()
        };
        assert_eq!(
            extract_pattern_features(&place(1, 2)),
            extract_pattern_features(&place(11, 9))
        );
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let s = ClassScores([0.1, 0.3, 0.3, 0.05, 0.2, 0.0, 0.25]);
        for k in [0.5, 2.0, 3.3] {
            assert_eq!(ClassScores(s.0.map(|v| v * k)).argmax(), s.argmax());
        }
        assert_eq!(s.argmax(), DebrisClass::Plastic);
    }

    #[test]
    fn identical_features_embed_at_origin() {
        let f = vec![vec![0.3, 0.1, 0.9]; 5];
        let e = embed_2d(&f).unwrap();
        assert!(e.points.iter().all(|p| *p == [0.0, 0.0]));
        assert!(!e.degenerate);
    }

    #[test]
    fn one_axis_variation_is_collinear_and_ordered() {
        let xs = [3.0, -1.0, 0.5, 7.0, 2.0];
        let f: Vec<Vec<f64>> = xs.iter().map(|x| vec![1.0, *x, 4.0, 0.0]).collect();
        let e = embed_2d(&f).unwrap();
        // 1-D PCA oracle: coordinate is (x - mean) / max|x - mean|
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let scale = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        for (p, x) in e.points.iter().zip(xs) {
            assert!((p[0] - (x - mean) / scale).abs() < 1e-12);
            assert!(p[1].abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_fits_unit_square_and_is_deterministic() {
        let f: Vec<Vec<f64>> = (0..12)
            .map(|i| (0..9).map(|j| ((i * 7 + j * 3) % 11) as f64 / 3.0).collect())
            .collect();
        let a = embed_2d(&f).unwrap();
        let b = embed_2d(&f).unwrap();
        assert_eq!(a, b);
        let max = a.points.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((max - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tiny_inputs_are_degenerate() {
        let e = embed_2d(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(e.degenerate);
        assert_eq!(e.points.len(), 2);
        assert!(e.points.iter().all(|p| p[1].abs() < 1e-12));
    }

    fn straight_track() -> NavTrack<f64> {
        NavTrack::new(
            vec![
                NavSample::level(0.0, 0.0, 0.0, 0.0, 2.0),
                NavSample::level(10.0, 0.0, 12.0, 0.0, 2.0),
            ],
            None,
        )
        .unwrap()
    }

    fn det_at(t: f64, bbox: [f64; 4]) -> RawDetection {
        RawDetection {
            frame_id: "f".into(),
            t,
            bbox,
            scores: ClassScores([0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            mask: None,
            class: DebrisClass::Bottle,
        }
    }

    #[test]
    fn coregistration_averages_covered_pixels() {
        let track = straight_track();
        let cam = CameraModel::new(70.0, 100, 100).unwrap();
        let grid = WavelengthGrid::uniform(380.0, 740.0, 10.0).unwrap();
        // lines every 0.1 s => 0.12 m along track; 21 samples across 2.31 m
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let cube = HyperCube::from_fn(100, 21, grid.clone(), times.clone(), CubeKind::Reflectance, |l, s| {
            let v = (l * 21 + s) as f64 / 2100.0;
            vec![v + 0.1; grid.len()]
        })
        .unwrap();
        let det = det_at(5.0, [45.0, 45.0, 10.0, 10.0]);
        let fp = detection_footprint(&det, &track, &cam).unwrap();
        assert!(fp.x.abs() < 1e-12 && (fp.y - 6.0).abs() < 1e-12);
        let part = coregister_spectrum(&det, &cube, &track, &cam, 60.0).unwrap();
        assert!(part.covered);

        // geometry oracle: flat level track heading north, so sample s of line l
        // sits at x = (2 s / 20 - 1) * 2 tan 30°, y = 1.2 t_l
        let half = 2.0 * 30f64.to_radians().tan();
        let mut sum = 0.0;
        let mut n = 0;
        for (l, t) in times.iter().enumerate() {
            for s in 0..21 {
                let x = (2.0 * s as f64 / 20.0 - 1.0) * half;
                let y = 1.2 * t;
                if (x - fp.x).hypot(y - fp.y) <= fp.radius {
                    sum += cube.value(l, s, 0);
                    n += 1;
                }
            }
        }
        assert_eq!(part.pixels, n);
        // flat spectra normalize to 1/4 per band regardless of the mean
        assert!(part.values.iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!(sum / n as f64 > 0.1);
    }

    #[test]
    fn reference_spectrum_survives_coregistration() {
        let track = straight_track();
        let cam = CameraModel::new(70.0, 100, 100).unwrap();
        let grid = WavelengthGrid::uniform(380.0, 740.0, 10.0).unwrap();
        let r: Vec<f64> = grid.as_slice().iter().map(|w| 0.1 + (w - 380.0) / 1000.0).collect();
        let times: Vec<f64> = (0..100).map(|i| i as f64 * 0.1).collect();
        let cube =
            HyperCube::from_fn(100, 21, grid.clone(), times, CubeKind::Reflectance, |_, _| r.clone()).unwrap();
        let part = coregister_spectrum(&det_at(5.0, [40.0, 40.0, 20.0, 20.0]), &cube, &track, &cam, 60.0).unwrap();
        let expected = spectral_feature(grid.as_slice(), &r);
        for (a, b) in part.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let norm: f64 = part.values.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detection_outside_swath_is_uncovered() {
        let track = straight_track();
        let cam = CameraModel::new(70.0, 100, 100).unwrap();
        let grid = WavelengthGrid::uniform(380.0, 740.0, 10.0).unwrap();
        // cube only covers the first second of the track
        let times: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let cube = HyperCube::from_fn(10, 21, grid, times, CubeKind::Reflectance, |_, _| vec![0.5; 37]).unwrap();
        let part = coregister_spectrum(&det_at(8.0, [45.0, 45.0, 10.0, 10.0]), &cube, &track, &cam, 60.0).unwrap();
        assert!(!part.covered);
        assert!(part.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn fusion_assigns_ids_and_features() {
        let track = straight_track();
        let raws = vec![
            det_at(2.0, [10.0, 10.0, 5.0, 5.0]),
            det_at(4.0, [20.0, 10.0, 5.0, 5.0]),
            det_at(20.0, [20.0, 10.0, 5.0, 5.0]),
        ];
        let out = fuse_detections(
            &raws,
            &FusionInputs {
                track: &track,
                camera_fov_deg: 70.0,
                frame_size: (100, 100),
                frames_dir: None,
                cube: None,
                uhi_fov_deg: 60.0,
            },
        )
        .unwrap();
        assert_eq!(out.detections.iter().map(|d| d.id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(out.detections[2].footprint.is_none());
        assert_eq!(out.warnings.len(), 1);
        assert!(out.detections.iter().all(|d| d.features.0.len() == FEATURE_LEN));
        assert_eq!(out.detections[0].features.view(FeatureView::Probability)[0], 0.9);
    }
}
