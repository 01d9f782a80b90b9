//! Push-broom hyperspectral cubes: data model, BIL file I/O, band lookup and
//! pseudo-RGB rendering.
//!
//! On disk a cube is a UTF-8 `key: value` header plus a sibling `.bil`
//! payload of little-endian `f32` values in band-interleaved-by-line order.
//! In memory the values are stored pixel-major (`[line][sample][band]`) so
//! that every pixel spectrum is a contiguous slice.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::csvio::join;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Sanity bounds for band centers, in nanometers.
pub const MIN_WAVELENGTH_NM: f64 = 300.0;
pub const MAX_WAVELENGTH_NM: f64 = 1000.0;

/// Upper bound accepted for reflectance values (specular outliers exceed 1).
pub const MAX_REFLECTANCE: f64 = 4.0;

/// Band centers used for the pseudo-RGB composite (red, green, blue).
pub const PSEUDO_RGB_NM: [f64; 3] = [630.0, 532.0, 465.0];

pub const LAYOUT_BIL_F32LE: &str = "bil-f32le";

/// Strictly increasing band-center wavelengths in nanometers.
#[derive(Debug, Clone, PartialEq)]
pub struct WavelengthGrid<T> {
    nm: Vec<T>,
}

impl<T: Real> WavelengthGrid<T> {
    pub fn new(nm: Vec<T>) -> Result<Self> {
        if nm.len() < 3 {
            return Err(Error::Format(format!(
                "wavelength grid needs at least 3 bands, got {}",
                nm.len()
            )));
        }
        let (lo, hi) = (T::lit(MIN_WAVELENGTH_NM), T::lit(MAX_WAVELENGTH_NM));
        if let Some(bad) = nm.iter().find(|w| !w.is_finite() || **w < lo || **w > hi) {
            return Err(Error::Format(format!(
                "wavelength {bad} nm outside [{MIN_WAVELENGTH_NM}, {MAX_WAVELENGTH_NM}]"
            )));
        }
        if let Some(i) = nm.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Format(format!(
                "wavelengths not strictly increasing at band {}: {} then {}",
                i + 1,
                nm[i],
                nm[i + 1]
            )));
        }
        Ok(Self { nm })
    }

    /// `start, start + step, ...` up to and including `stop` (within half a step).
    pub fn uniform(start: T, stop: T, step: T) -> Result<Self> {
        if step <= T::zero() {
            return Err(Error::Format("grid step must be positive".into()));
        }
        let n = ((stop - start) / step + T::lit(0.5)).floor();
        let n = n.to_usize().unwrap_or(0) + 1;
        Self::new(
            (0..n)
                .map(|i| start + step * T::from_usize_lossy(i))
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[T] {
        &self.nm
    }

    pub fn len(&self) -> usize {
        self.nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nm.is_empty()
    }

    pub fn first(&self) -> T {
        self.nm[0]
    }

    pub fn last(&self) -> T {
        self.nm[self.nm.len() - 1]
    }

    pub fn mean_spacing(&self) -> T {
        (self.last() - self.first()) / T::from_usize_lossy(self.nm.len() - 1)
    }

    /// Index of the band center nearest `target_nm`; ties go to the lower index.
    ///
    /// Targets further than half the mean band spacing outside the grid are
    /// rejected.
    pub fn band_index(&self, target_nm: T) -> Result<usize> {
        let half = self.mean_spacing() / T::lit(2.0);
        if !target_nm.is_finite()
            || target_nm < self.first() - half
            || target_nm > self.last() + half
        {
            return Err(Error::OutOfRange(format!(
                "{target_nm} nm outside grid [{}, {}]",
                self.first(),
                self.last()
            )));
        }
        // First index whose center is >= target; the answer is it or its predecessor.
        let upper = self.nm.partition_point(|w| *w < target_nm);
        if upper == 0 {
            return Ok(0);
        }
        if upper == self.nm.len() {
            return Ok(upper - 1);
        }
        let below = target_nm - self.nm[upper - 1];
        let above = self.nm[upper] - target_nm;
        Ok(if above < below { upper } else { upper - 1 })
    }

    pub fn cast<U: Real>(&self) -> WavelengthGrid<U> {
        WavelengthGrid {
            nm: self.nm.iter().map(|w| U::lit(w.as_f64())).collect(),
        }
    }
}

/// Nearest band to `target_nm`; see [`WavelengthGrid::band_index`].
pub fn band_index_for_wavelength<T: Real>(grid: &WavelengthGrid<T>, target_nm: T) -> Result<usize> {
    grid.band_index(target_nm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CubeKind {
    Radiance,
    Reflectance,
}

impl fmt::Display for CubeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CubeKind::Radiance => "radiance",
            CubeKind::Reflectance => "reflectance",
        })
    }
}

impl FromStr for CubeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "radiance" => Ok(CubeKind::Radiance),
            "reflectance" => Ok(CubeKind::Reflectance),
            other => Err(Error::Format(format!("unknown cube kind {other:?}"))),
        }
    }
}

/// Free-form metadata carried through the header.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CubeMeta {
    pub sensor_id: Option<String>,
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperCube<T> {
    lines: usize,
    samples: usize,
    grid: WavelengthGrid<T>,
    data: Vec<T>,
    timestamps: Vec<f64>,
    kind: CubeKind,
    pub meta: CubeMeta,
}

impl<T: Real> HyperCube<T> {
    /// Builds a cube from pixel-major data (`[line][sample][band]`).
    pub fn new(
        lines: usize,
        samples: usize,
        grid: WavelengthGrid<T>,
        data: Vec<T>,
        timestamps: Vec<f64>,
        kind: CubeKind,
    ) -> Result<Self> {
        let cube = Self {
            lines,
            samples,
            grid,
            data,
            timestamps,
            kind,
            meta: CubeMeta::default(),
        };
        cube.validate()?;
        Ok(cube)
    }

    /// Cube whose every pixel is produced by `f(line, sample)`.
    pub fn from_fn(
        lines: usize,
        samples: usize,
        grid: WavelengthGrid<T>,
        timestamps: Vec<f64>,
        kind: CubeKind,
        mut f: impl FnMut(usize, usize) -> Vec<T>,
    ) -> Result<Self> {
        let bands = grid.len();
        let mut data = Vec::with_capacity(lines * samples * bands);
        for l in 0..lines {
            for s in 0..samples {
                let px = f(l, s);
                if px.len() != bands {
                    return Err(Error::Precondition(format!(
                        "pixel ({l},{s}) has {} bands, grid has {bands}",
                        px.len()
                    )));
                }
                data.extend(px);
            }
        }
        Self::new(lines, samples, grid, data, timestamps, kind)
    }

    fn validate(&self) -> Result<()> {
        let expected = self.lines * self.samples * self.grid.len();
        if self.data.len() != expected {
            return Err(Error::Invalid(format!(
                "data holds {} values, extents need {expected}",
                self.data.len()
            )));
        }
        if self.timestamps.len() != self.lines {
            return Err(Error::Invalid(format!(
                "{} line timestamps for {} lines",
                self.timestamps.len(),
                self.lines
            )));
        }
        if self.timestamps.iter().any(|t| !t.is_finite())
            || self.timestamps.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::Invalid(
                "line timestamps must be finite and non-decreasing".into(),
            ));
        }
        let max = match self.kind {
            CubeKind::Reflectance => T::lit(MAX_REFLECTANCE),
            CubeKind::Radiance => T::infinity(),
        };
        if let Some(i) = self
            .data
            .iter()
            .position(|v| !v.is_finite() || *v < T::zero() || *v > max)
        {
            return Err(Error::Invalid(format!(
                "value {} at flat index {i} is not a valid {}",
                self.data[i], self.kind
            )));
        }
        Ok(())
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn bands(&self) -> usize {
        self.grid.len()
    }

    pub fn grid(&self) -> &WavelengthGrid<T> {
        &self.grid
    }

    pub fn kind(&self) -> CubeKind {
        self.kind
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// Pixel-major values.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn pixel(&self, line: usize, sample: usize) -> &[T] {
        let b = self.bands();
        let start = (line * self.samples + sample) * b;
        &self.data[start..start + b]
    }

    pub fn value(&self, line: usize, sample: usize, band: usize) -> T {
        self.pixel(line, sample)[band]
    }

    /// All pixel spectra of one line, concatenated.
    pub fn line(&self, line: usize) -> &[T] {
        let n = self.samples * self.bands();
        &self.data[line * n..(line + 1) * n]
    }

    /// Values of one band as a `lines × samples` raster.
    pub fn band(&self, band: usize) -> Vec<T> {
        self.data
            .chunks_exact(self.bands())
            .map(|px| px[band])
            .collect()
    }

    /// Same geometry and timing, new values and kind.
    pub fn with_data(&self, data: Vec<T>, kind: CubeKind) -> Result<Self> {
        let mut out = Self::new(
            self.lines,
            self.samples,
            self.grid.clone(),
            data,
            self.timestamps.clone(),
            kind,
        )?;
        out.meta = self.meta.clone();
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> HyperCube<U> {
        HyperCube {
            lines: self.lines,
            samples: self.samples,
            grid: self.grid.cast(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            timestamps: self.timestamps.clone(),
            kind: self.kind,
            meta: self.meta.clone(),
        }
    }

    pub fn header(&self) -> CubeHeader<T> {
        CubeHeader {
            lines: self.lines,
            samples: self.samples,
            bands: self.bands(),
            grid: self.grid.clone(),
            kind: self.kind,
            layout: LAYOUT_BIL_F32LE.to_string(),
            timestamps: self.timestamps.clone(),
            sensor_id: self.meta.sensor_id.clone(),
            comment: self.meta.comment.clone(),
        }
    }
}

/// Parsed text header of a cube file.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeHeader<T> {
    pub lines: usize,
    pub samples: usize,
    pub bands: usize,
    pub grid: WavelengthGrid<T>,
    pub kind: CubeKind,
    pub layout: String,
    pub timestamps: Vec<f64>,
    pub sensor_id: Option<String>,
    pub comment: Option<String>,
}

impl<T: Real> CubeHeader<T> {
    pub fn payload_bytes(&self) -> usize {
        self.lines * self.samples * self.bands * 4
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = None;
        let mut samples = None;
        let mut bands = None;
        let mut wavelengths = None;
        let mut kind = None;
        let mut layout = LAYOUT_BIL_F32LE.to_string();
        let mut timestamps = None;
        let mut sensor_id = None;
        let mut comment = None;

        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| Error::Format(format!("header line without ':' {line:?}")))?;
            let value = value.trim();
            match key.trim() {
                "lines" => lines = Some(parse_count(key, value)?),
                "samples" => samples = Some(parse_count(key, value)?),
                "bands" => bands = Some(parse_count(key, value)?),
                "wavelengths_nm" => wavelengths = Some(parse_list::<T>(value)?),
                "kind" => kind = Some(value.parse()?),
                "layout" => layout = value.to_string(),
                "timestamps" => timestamps = Some(parse_list::<f64>(value)?),
                "sensor_id" => sensor_id = Some(value.to_string()),
                "comment" => comment = Some(value.to_string()),
                other => log::debug!("ignoring unknown header key {other:?}"),
            }
        }

        let missing = |k: &str| Error::Format(format!("header missing `{k}`"));
        let lines = lines.ok_or_else(|| missing("lines"))?;
        let samples = samples.ok_or_else(|| missing("samples"))?;
        let bands = bands.ok_or_else(|| missing("bands"))?;
        let grid = WavelengthGrid::new(wavelengths.ok_or_else(|| missing("wavelengths_nm"))?)?;
        let kind = kind.ok_or_else(|| missing("kind"))?;
        let timestamps = timestamps.ok_or_else(|| missing("timestamps"))?;

        if layout != LAYOUT_BIL_F32LE {
            return Err(Error::Format(format!("unsupported layout {layout:?}")));
        }
        if grid.len() != bands {
            return Err(Error::Format(format!(
                "header declares {bands} bands but lists {} wavelengths",
                grid.len()
            )));
        }
        if timestamps.len() != lines {
            return Err(Error::Format(format!(
                "header declares {lines} lines but lists {} timestamps",
                timestamps.len()
            )));
        }
        Ok(Self {
            lines,
            samples,
            bands,
            grid,
            kind,
            layout,
            timestamps,
            sensor_id,
            comment,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("lines: {}\n", self.lines));
        out.push_str(&format!("samples: {}\n", self.samples));
        out.push_str(&format!("bands: {}\n", self.bands));
        out.push_str(&format!("layout: {}\n", self.layout));
        out.push_str(&format!("kind: {}\n", self.kind));
        if let Some(s) = &self.sensor_id {
            out.push_str(&format!("sensor_id: {}\n", s.replace('\n', " ")));
        }
        out.push_str(&format!("wavelengths_nm: {}\n", join(self.grid.as_slice())));
        out.push_str(&format!("timestamps: {}\n", join(&self.timestamps)));
        if let Some(c) = &self.comment {
            out.push_str(&format!("comment: {}\n", c.replace('\n', " ")));
        }
        out
    }
}

fn parse_count(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Format(format!("`{}` is not a count: {value:?}", key.trim())))
}

fn parse_list<T: FromStr>(value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::Format(format!("not a number: {s:?}")))
        })
        .collect()
}

/// Payload path belonging to a header path.
pub fn payload_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bil")
}

pub fn read_header<T: Real>(header_path: &Path) -> Result<CubeHeader<T>> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    CubeHeader::parse(&text)
}

/// Loads a cube from its header and the sibling `.bil` payload.
pub fn load_cube<T: Real>(header_path: &Path) -> Result<HyperCube<T>> {
    let header: CubeHeader<T> = read_header(header_path)?;
    let payload = payload_path(header_path);
    let bytes = fs::read(&payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CorruptFile {
            path: payload.clone(),
            reason: "payload missing".into(),
        },
        _ => Error::io(&payload, e),
    })?;
    if bytes.len() != header.payload_bytes() {
        return Err(Error::CorruptFile {
            path: payload,
            reason: format!(
                "payload has {} bytes, header implies {}",
                bytes.len(),
                header.payload_bytes()
            ),
        });
    }

    let (lines, samples, bands) = (header.lines, header.samples, header.bands);
    let mut data = vec![T::zero(); lines * samples * bands];
    // BIL: for each line, `bands` rows of `samples` values.
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        let line = i / (bands * samples);
        let rem = i % (bands * samples);
        let (band, sample) = (rem / samples, rem % samples);
        data[(line * samples + sample) * bands + band] = T::lit(v as f64);
    }

    let mut cube = HyperCube::new(lines, samples, header.grid, data, header.timestamps, header.kind)
        .map_err(|e| Error::CorruptFile {
            path: payload.clone(),
            reason: e.to_string(),
        })?;
    cube.meta = CubeMeta {
        sensor_id: header.sensor_id,
        comment: header.comment,
    };
    Ok(cube)
}

/// Writes the header to `header_path` and the payload next to it.
///
/// Values are stored as `f32`; an `f64` cube is narrowed.
pub fn save_cube<T: Real>(cube: &HyperCube<T>, header_path: &Path) -> Result<()> {
    let (lines, samples, bands) = (cube.lines, cube.samples, cube.bands());
    let mut bytes = Vec::with_capacity(lines * samples * bands * 4);
    for line in 0..lines {
        for band in 0..bands {
            for sample in 0..samples {
                let v = cube.value(line, sample, band).to_f32().unwrap_or(f32::NAN);
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(header_path, cube.header().render()).map_err(|e| Error::io(header_path, e))?;
    let payload = payload_path(header_path);
    let mut f = fs::File::create(&payload).map_err(|e| Error::io(&payload, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&payload, e))?;
    Ok(())
}

/// Value at percentile `p` (0–100) of sorted data, linearly interpolated
/// between order statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

/// Percentile window used to stretch each pseudo-RGB channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stretch {
    pub low_pct: f64,
    pub high_pct: f64,
}

impl Default for Stretch {
    fn default() -> Self {
        Self {
            low_pct: 1.0,
            high_pct: 99.0,
        }
    }
}

/// Pseudo-RGB composite from the bands nearest 630, 532 and 465 nm.
pub fn pseudo_rgb<T: Real>(cube: &HyperCube<T>) -> Result<RgbImage> {
    pseudo_rgb_with(cube, PSEUDO_RGB_NM, Stretch::default())
}

/// Composite from the bands nearest `targets_nm` (R, G, B), each channel
/// percentile-stretched independently onto 0–255.
///
/// A channel whose stretch window collapses (constant band) is instead scaled
/// by the maximum over all three selected bands, so flat scenes keep their
/// relative channel levels.
pub fn pseudo_rgb_with<T: Real>(
    cube: &HyperCube<T>,
    targets_nm: [f64; 3],
    stretch: Stretch,
) -> Result<RgbImage> {
    let idx = targets_nm
        .iter()
        .map(|t| cube.grid.band_index(T::lit(*t)))
        .collect::<Result<Vec<_>>>()?;
    let channels: Vec<Vec<f64>> = idx
        .iter()
        .map(|&b| cube.band(b).into_iter().map(Real::as_f64).collect())
        .collect();
    let global_max = channels
        .iter()
        .flatten()
        .copied()
        .fold(0.0_f64, f64::max);

    let maps: Vec<Box<dyn Fn(f64) -> u8>> = channels
        .iter()
        .map(|ch| {
            let mut sorted = ch.clone();
            sorted.sort_by(f64::total_cmp);
            let lo = percentile(&sorted, stretch.low_pct);
            let hi = percentile(&sorted, stretch.high_pct);
            let f: Box<dyn Fn(f64) -> u8> = if hi > lo {
                Box::new(move |v| to_byte((v - lo) / (hi - lo)))
            } else if global_max > 0.0 {
                Box::new(move |v| to_byte(v / global_max))
            } else {
                Box::new(|_| 0)
            };
            f
        })
        .collect();

    let (w, h) = (cube.samples as u32, cube.lines as u32);
    let mut img = RgbImage::new(w, h);
    for (i, px) in img.pixels_mut().enumerate() {
        for c in 0..3 {
            px.0[c] = maps[c](channels[c][i]);
        }
    }
    Ok(img)
}

fn to_byte(unit: f64) -> u8 {
    (unit.clamp(0.0, 1.0) * 255.0).round() as u8
}
