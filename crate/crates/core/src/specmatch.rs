//! Spectral angle mapping against a reference library, threshold
//! segmentation into detections, and anomaly scoring.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use image::RgbImage;
use rayon::prelude::*;
use serde::Serialize;

use crate::csvio::{self, read_text};
use crate::error::{Error, Result};
use crate::hypercube::{CubeKind, HyperCube, WavelengthGrid};
use crate::scalar::Real;

/// Components smaller than this are treated as turbidity noise.
pub const DEFAULT_MIN_AREA: usize = 8;

/// Named reflectance spectrum used as a matching target.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSpectrum<T> {
    pub name: String,
    pub grid: WavelengthGrid<T>,
    values: Vec<T>,
}

impl<T: Real> ReferenceSpectrum<T> {
    pub fn new(name: impl Into<String>, grid: WavelengthGrid<T>, values: Vec<T>) -> Result<Self> {
        let name = name.into();
        if values.len() != grid.len() {
            return Err(Error::IncompatibleGrid(format!(
                "reference {name:?} has {} values for {} bands",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Invalid(format!(
                "reference {name:?} must be finite and non-negative"
            )));
        }
        if norm(&values) <= T::zero() {
            return Err(Error::DegenerateSpectrum(format!("reference {name:?} is all zero")));
        }
        Ok(Self { name, grid, values })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Linear interpolation of the spectrum at `nm`; no extrapolation.
    pub fn value_at(&self, nm: T) -> Result<T> {
        interpolate(self.grid.as_slice(), &self.values, nm).ok_or_else(|| {
            Error::OutOfRange(format!(
                "reference {:?} covers [{}, {}] nm, asked for {nm}",
                self.name,
                self.grid.first(),
                self.grid.last()
            ))
        })
    }

    /// Values at each wavelength in `nm`.
    pub fn resample(&self, nm: &[T]) -> Result<Vec<T>> {
        nm.iter().map(|w| self.value_at(*w)).collect()
    }

    /// Reads a `wavelength_nm,reflectance` CSV; the file stem names the spectrum.
    pub fn load(path: &Path) -> Result<Self> {
        let (wl, vals) = csvio::spectrum_columns(&read_text(path)?)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, WavelengthGrid::new(wl)?, vals)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("wavelength_nm,reflectance\n");
        for (w, v) in self.grid.as_slice().iter().zip(&self.values) {
            out.push_str(&format!("{w},{v}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Loads every `*.csv` in `dir` as a reference, keyed by name.
pub fn load_library<T: Real>(dir: &Path) -> Result<BTreeMap<String, ReferenceSpectrum<T>>> {
    let mut lib = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            let r = ReferenceSpectrum::load(&path)?;
            lib.insert(r.name.clone(), r);
        }
    }
    Ok(lib)
}

/// Piecewise-linear interpolation of `(xs, ys)` at `x`; `None` outside `[xs[0], xs[n-1]]`.
pub(crate) fn interpolate<T: Real>(xs: &[T], ys: &[T], x: T) -> Option<T> {
    let n = xs.len();
    if n == 0 || x < xs[0] || x > xs[n - 1] {
        return None;
    }
    let i = xs.partition_point(|v| *v < x);
    if i < n && xs[i] == x {
        return Some(ys[i]);
    }
    let (x0, x1) = (xs[i - 1], xs[i]);
    let f = (x - x0) / (x1 - x0);
    Some(ys[i - 1] + (ys[i] - ys[i - 1]) * f)
}

fn norm<T: Real>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

/// Angle between two spectra, `arccos(<s,r> / (|s| |r|))`.
///
/// Evaluated as `2 atan2(|ŝ - r̂|, |ŝ + r̂|)`, which equals the arccos form but
/// stays accurate for nearly parallel spectra.
pub fn spectral_angle<T: Real>(s: &[T], r: &[T]) -> Result<T> {
    if s.len() != r.len() {
        return Err(Error::Precondition(format!(
            "spectra of length {} and {}",
            s.len(),
            r.len()
        )));
    }
    let (ns, nr) = (norm(s), norm(r));
    if !(ns > T::zero()) || !(nr > T::zero()) {
        return Err(Error::DegenerateSpectrum("zero-norm spectrum".into()));
    }
    Ok(angle_between_unit(s, ns, r, nr))
}

fn angle_between_unit<T: Real>(s: &[T], ns: T, r: &[T], nr: T) -> T {
    let mut diff = T::zero();
    let mut sum = T::zero();
    for (a, b) in s.iter().zip(r) {
        let (ua, ub) = (*a / ns, *b / nr);
        diff += (ua - ub) * (ua - ub);
        sum += (ua + ub) * (ua + ub);
    }
    T::lit(2.0) * diff.sqrt().atan2(sum.sqrt())
}

/// Per-pixel spectral angles of a cube against one reference.
#[derive(Debug, Clone, PartialEq)]
pub struct SamMap<T> {
    pub lines: usize,
    pub samples: usize,
    pub reference: String,
    angles: Vec<T>,
}

impl<T: Real> SamMap<T> {
    pub fn from_angles(
        lines: usize,
        samples: usize,
        reference: impl Into<String>,
        angles: Vec<T>,
    ) -> Result<Self> {
        if angles.len() != lines * samples {
            return Err(Error::Invalid(format!(
                "{} angles for a {lines}x{samples} map",
                angles.len()
            )));
        }
        let max = T::FRAC_PI_2();
        if angles
            .iter()
            .any(|a| !a.is_finite() || *a < T::zero() || *a > max)
        {
            return Err(Error::Invalid("angles must lie in [0, pi/2]".into()));
        }
        Ok(Self {
            lines,
            samples,
            reference: reference.into(),
            angles,
        })
    }

    pub fn angles(&self) -> &[T] {
        &self.angles
    }

    pub fn get(&self, line: usize, sample: usize) -> T {
        self.angles[line * self.samples + sample]
    }

    /// Heatmap with red at angle 0 (similar) grading linearly to blue at pi/2.
    pub fn heatmap(&self) -> RgbImage {
        let mut img = RgbImage::new(self.samples as u32, self.lines as u32);
        let span = T::FRAC_PI_2().as_f64();
        for (px, a) in img.pixels_mut().zip(&self.angles) {
            let t = (a.as_f64() / span).clamp(0.0, 1.0);
            px.0 = [
                ((1.0 - t) * 255.0).round() as u8,
                0,
                (t * 255.0).round() as u8,
            ];
        }
        img
    }
}

/// Inclusive wavelength range restricting which bands enter the angle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandWindow<T> {
    pub min_nm: T,
    pub max_nm: T,
}

/// Spectral angle of every pixel against `reference`.
///
/// The reference is linearly resampled onto the cube's band centers inside
/// `window`. Zero-norm pixels score pi/2.
pub fn sam_map<T: Real>(
    cube: &HyperCube<T>,
    reference: &ReferenceSpectrum<T>,
    window: Option<BandWindow<T>>,
) -> Result<SamMap<T>> {
    if cube.kind() != CubeKind::Reflectance {
        return Err(Error::Precondition(
            "spectral angle mapping expects a reflectance cube".into(),
        ));
    }
    let bands: Vec<usize> = cube
        .grid()
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, w)| window.is_none_or(|win| **w >= win.min_nm && **w <= win.max_nm))
        .map(|(i, _)| i)
        .collect();
    if bands.is_empty() {
        return Err(Error::Precondition("band window selects no bands".into()));
    }
    let nm: Vec<T> = bands.iter().map(|&b| cube.grid().as_slice()[b]).collect();
    let r = reference.resample(&nm)?;
    let nr = norm(&r);
    if !(nr > T::zero()) {
        return Err(Error::DegenerateSpectrum(format!(
            "reference {:?} is zero inside the band window",
            reference.name
        )));
    }

    let nb = cube.bands();
    let all_bands = bands.len() == nb;
    let angles: Vec<T> = cube
        .data()
        .par_chunks_exact(nb)
        .map_init(
            || Vec::with_capacity(bands.len()),
            |buf, px| {
                let s: &[T] = if all_bands {
                    px
                } else {
                    buf.clear();
                    buf.extend(bands.iter().map(|&b| px[b]));
                    buf
                };
                let ns = norm(s);
                if ns > T::zero() {
                    // non-negative spectra; trims rounding above pi/2
                    angle_between_unit(s, ns, &r, nr).min(T::FRAC_PI_2())
                } else {
                    T::FRAC_PI_2()
                }
            },
        )
        .collect();

    SamMap::from_angles(cube.lines(), cube.samples(), reference.name.clone(), angles)
}

/// Angle map against a background spectrum; large angles flag anomalies.
/// Segment it with [`anomaly_segment`].
pub fn anomaly_score<T: Real>(
    cube: &HyperCube<T>,
    background: &ReferenceSpectrum<T>,
    window: Option<BandWindow<T>>,
) -> Result<SamMap<T>> {
    sam_map(cube, background, window)
}

/// Connected group of matching pixels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralDetection {
    pub line_min: usize,
    pub line_max: usize,
    pub sample_min: usize,
    pub sample_max: usize,
    pub pixel_count: usize,
    pub mean_angle: f64,
    pub reference: String,
}

impl SpectralDetection {
    /// Box center in (line, sample) coordinates.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.line_min + self.line_max) as f64 / 2.0,
            (self.sample_min + self.sample_max) as f64 / 2.0,
        )
    }

    pub fn box_area(&self) -> usize {
        (self.line_max - self.line_min + 1) * (self.sample_max - self.sample_min + 1)
    }
}

fn check_segment_args<T: Real>(threshold: T, min_area: usize) -> Result<()> {
    if !(threshold > T::zero()) || threshold > T::FRAC_PI_2() {
        return Err(Error::Precondition(format!(
            "threshold {threshold} outside (0, pi/2]"
        )));
    }
    if min_area == 0 {
        return Err(Error::Precondition("min_area must be at least 1".into()));
    }
    Ok(())
}

/// 4-connected components of pixels with angle `<= threshold`, keeping those
/// of at least `min_area` pixels, ordered by (min line, min sample).
pub fn threshold_segment<T: Real>(
    map: &SamMap<T>,
    threshold: T,
    min_area: usize,
) -> Result<Vec<SpectralDetection>> {
    check_segment_args(threshold, min_area)?;
    Ok(segment_where(map, |a| a <= threshold, min_area))
}

/// Like [`threshold_segment`] but selects pixels with angle `>= threshold`.
pub fn anomaly_segment<T: Real>(
    map: &SamMap<T>,
    threshold: T,
    min_area: usize,
) -> Result<Vec<SpectralDetection>> {
    check_segment_args(threshold, min_area)?;
    Ok(segment_where(map, |a| a >= threshold, min_area))
}

/// Labels 4-connected components of pixels satisfying `keep`.
pub fn label_components<T: Real>(map: &SamMap<T>, keep: impl Fn(T) -> bool) -> Vec<u32> {
    let (h, w) = (map.lines, map.samples);
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != 0 || !keep(map.angles[start]) {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (l, s) = (i / w, i % w);
            let mut visit = |j: usize| {
                if labels[j] == 0 && keep(map.angles[j]) {
                    labels[j] = next;
                    queue.push_back(j);
                }
            };
            if l > 0 {
                visit(i - w);
            }
            if l + 1 < h {
                visit(i + w);
            }
            if s > 0 {
                visit(i - 1);
            }
            if s + 1 < w {
                visit(i + 1);
            }
        }
    }
    labels
}

fn segment_where<T: Real>(
    map: &SamMap<T>,
    keep: impl Fn(T) -> bool,
    min_area: usize,
) -> Vec<SpectralDetection> {
    let labels = label_components(map, keep);
    let w = map.samples;
    let mut comps: BTreeMap<u32, (SpectralDetection, f64)> = BTreeMap::new();
    for (i, &lab) in labels.iter().enumerate() {
        if lab == 0 {
            continue;
        }
        let (l, s) = (i / w, i % w);
        let a = map.angles[i].as_f64();
        let entry = comps.entry(lab).or_insert_with(|| {
            (
                SpectralDetection {
                    line_min: l,
                    line_max: l,
                    sample_min: s,
                    sample_max: s,
                    pixel_count: 0,
                    mean_angle: 0.0,
                    reference: map.reference.clone(),
                },
                0.0,
            )
        });
        let d = &mut entry.0;
        d.line_min = d.line_min.min(l);
        d.line_max = d.line_max.max(l);
        d.sample_min = d.sample_min.min(s);
        d.sample_max = d.sample_max.max(s);
        d.pixel_count += 1;
        entry.1 += a;
    }
    let mut out: Vec<SpectralDetection> = comps
        .into_values()
        .filter(|(d, _)| d.pixel_count >= min_area)
        .map(|(mut d, sum)| {
            d.mean_angle = sum / d.pixel_count as f64;
            d
        })
        .collect();
    out.sort_by_key(|d| (d.line_min, d.sample_min));
    out
}
