//! Radiance to reflectance conversion.
//!
//! The forward model is `L = R · I0 · exp(-2 · c · d)`: light travels from the
//! source to the seafloor and back over the same distance `d`, attenuated by
//! the per-band coefficient `c`. `I0` is the effective source intensity at zero
//! path length, recovered from a calibration plate of known reflectance.

use std::path::Path;

use crate::csvio::{self, field, read_text, records};
use crate::error::{Error, Result};
use crate::hypercube::{CubeKind, HyperCube, WavelengthGrid, MAX_REFLECTANCE};
use crate::scalar::Real;

/// Per-band attenuation coefficient `c(λ)` in 1/m.
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationProfile<T> {
    pub grid: WavelengthGrid<T>,
    c: Vec<T>,
}

impl<T: Real> AttenuationProfile<T> {
    pub fn new(grid: WavelengthGrid<T>, c: Vec<T>) -> Result<Self> {
        check_len(&grid, c.len(), "attenuation")?;
        if c.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Invalid(
                "attenuation coefficients must be finite and non-negative".into(),
            ));
        }
        Ok(Self { grid, c })
    }

    pub fn uniform(grid: WavelengthGrid<T>, c: T) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![c; n])
    }

    pub fn coefficients(&self) -> &[T] {
        &self.c
    }

    /// Reads `wavelength_nm,value` rows.
    pub fn load(path: &Path) -> Result<Self> {
        let (wl, c) = csvio::spectrum_columns(&read_text(path)?)?;
        Self::new(WavelengthGrid::new(wl)?, c)
    }
}

/// Reference target of known reflectance imaged at a known distance.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationPlate<T> {
    pub grid: WavelengthGrid<T>,
    pub plate_reflectance: Vec<T>,
    pub measured_radiance: Vec<T>,
    pub plate_distance_m: T,
}

impl<T: Real> CalibrationPlate<T> {
    pub fn new(
        grid: WavelengthGrid<T>,
        plate_reflectance: Vec<T>,
        measured_radiance: Vec<T>,
        plate_distance_m: T,
    ) -> Result<Self> {
        check_len(&grid, plate_reflectance.len(), "plate reflectance")?;
        check_len(&grid, measured_radiance.len(), "plate radiance")?;
        if plate_reflectance
            .iter()
            .any(|r| !r.is_finite() || *r < T::zero() || *r > T::one())
        {
            return Err(Error::Invalid("plate reflectance must lie in [0, 1]".into()));
        }
        if measured_radiance
            .iter()
            .any(|l| !l.is_finite() || *l < T::zero())
        {
            return Err(Error::Invalid("plate radiance must be finite and >= 0".into()));
        }
        if !(plate_distance_m > T::zero()) || !plate_distance_m.is_finite() {
            return Err(Error::Invalid("plate distance must be positive".into()));
        }
        Ok(Self {
            grid,
            plate_reflectance,
            measured_radiance,
            plate_distance_m,
        })
    }

    /// Reads a plate file: a `distance_m` line (`distance_m,2.0`,
    /// `distance_m=2.0` or `distance_m: 2.0`) followed by
    /// `wavelength_nm,reflectance,radiance` rows.
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut distance = None;
        let mut body = String::new();
        for line in text.lines() {
            let trimmed = line.trim().trim_start_matches('#').trim();
            if let Some(rest) = trimmed.strip_prefix("distance_m") {
                let value = rest.trim_start_matches([',', '=', ':', ' ']).trim();
                distance = Some(value.parse::<T>().map_err(|_| {
                    Error::Format(format!("bad plate distance {value:?}"))
                })?);
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let distance =
            distance.ok_or_else(|| Error::Format("plate file missing distance_m".into()))?;
        let mut wl = Vec::new();
        let mut refl = Vec::new();
        let mut rad = Vec::new();
        for rec in records(&body)? {
            wl.push(field(&rec, 0)?);
            refl.push(field(&rec, 1)?);
            rad.push(field(&rec, 2)?);
        }
        Self::new(WavelengthGrid::new(wl)?, refl, rad, distance)
    }
}

/// Effective per-band source intensity `I0(λ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IlluminantSpectrum<T> {
    pub grid: WavelengthGrid<T>,
    intensity: Vec<T>,
}

impl<T: Real> IlluminantSpectrum<T> {
    pub fn new(grid: WavelengthGrid<T>, intensity: Vec<T>) -> Result<Self> {
        check_len(&grid, intensity.len(), "illuminant")?;
        if intensity.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Invalid("illuminant must be finite and >= 0".into()));
        }
        Ok(Self { grid, intensity })
    }

    pub fn uniform(grid: WavelengthGrid<T>, i0: T) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![i0; n])
    }

    pub fn intensity(&self) -> &[T] {
        &self.intensity
    }
}

fn check_len<T: Real>(grid: &WavelengthGrid<T>, n: usize, what: &str) -> Result<()> {
    if n != grid.len() {
        return Err(Error::IncompatibleGrid(format!(
            "{what} has {n} values for a {}-band grid",
            grid.len()
        )));
    }
    Ok(())
}

fn same_grid<T: Real>(a: &WavelengthGrid<T>, b: &WavelengthGrid<T>, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::IncompatibleGrid(format!(
            "{what}: {} bands [{}..{}] vs {} bands [{}..{}]",
            a.len(),
            a.first(),
            a.last(),
            b.len(),
            b.first(),
            b.last()
        )));
    }
    Ok(())
}

/// Two-way transmission `exp(-2 c d)` per band.
fn transmission<T: Real>(att: &AttenuationProfile<T>, distance_m: T) -> Vec<T> {
    let two = T::lit(2.0);
    att.c.iter().map(|c| (-two * *c * distance_m).exp()).collect()
}

/// Recovers `I0 = L_plate / (R_plate · exp(-2 c d_plate))` per band.
pub fn calibrate_illuminant<T: Real>(
    plate: &CalibrationPlate<T>,
    att: &AttenuationProfile<T>,
) -> Result<IlluminantSpectrum<T>> {
    same_grid(&plate.grid, &att.grid, "plate vs attenuation")?;
    if let Some(band) = plate.plate_reflectance.iter().position(|r| *r == T::zero()) {
        return Err(Error::DegeneratePlate { band });
    }
    let tau = transmission(att, plate.plate_distance_m);
    let intensity = plate
        .measured_radiance
        .iter()
        .zip(&plate.plate_reflectance)
        .zip(&tau)
        .map(|((l, r), t)| *l / (*r * *t))
        .collect();
    IlluminantSpectrum::new(plate.grid.clone(), intensity)
}

/// Counters reported by [`correct_to_reflectance`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct CorrectionReport {
    pub clamped_low: usize,
    pub clamped_high: usize,
}

impl CorrectionReport {
    pub fn clamped(&self) -> usize {
        self.clamped_low + self.clamped_high
    }
}

/// Unclamped reflectance of one radiance spectrum at distance `distance_m`.
pub fn correct_spectrum<T: Real>(
    radiance: &[T],
    illum: &IlluminantSpectrum<T>,
    att: &AttenuationProfile<T>,
    distance_m: T,
) -> Result<Vec<T>> {
    same_grid(&illum.grid, &att.grid, "illuminant vs attenuation")?;
    check_len(&illum.grid, radiance.len(), "radiance")?;
    check_illuminant(illum)?;
    let tau = transmission(att, distance_m);
    Ok(radiance
        .iter()
        .zip(&illum.intensity)
        .zip(&tau)
        .map(|((l, i0), t)| *l / (*i0 * *t))
        .collect())
}

fn check_illuminant<T: Real>(illum: &IlluminantSpectrum<T>) -> Result<()> {
    if let Some(b) = illum.intensity.iter().position(|v| *v <= T::zero()) {
        return Err(Error::Precondition(format!(
            "illuminant is zero at band {b}; cannot invert"
        )));
    }
    Ok(())
}

fn check_distances<T: Real>(cube_lines: usize, distance_m: &[T]) -> Result<()> {
    if distance_m.len() != cube_lines {
        return Err(Error::Precondition(format!(
            "{} distances for {cube_lines} lines",
            distance_m.len()
        )));
    }
    if let Some(i) = distance_m
        .iter()
        .position(|d| !(*d > T::zero()) || !d.is_finite())
    {
        return Err(Error::Precondition(format!(
            "distance at line {i} must be positive"
        )));
    }
    Ok(())
}

/// Converts a radiance cube to reflectance with one sensor–seafloor distance
/// per line. Results are clamped to `[0, 4]` and the clamps counted.
pub fn correct_to_reflectance<T: Real>(
    cube: &HyperCube<T>,
    illum: &IlluminantSpectrum<T>,
    att: &AttenuationProfile<T>,
    distance_m: &[T],
) -> Result<(HyperCube<T>, CorrectionReport)> {
    if cube.kind() != CubeKind::Radiance {
        return Err(Error::Precondition(
            "reflectance correction expects a radiance cube".into(),
        ));
    }
    same_grid(cube.grid(), &illum.grid, "cube vs illuminant")?;
    same_grid(cube.grid(), &att.grid, "cube vs attenuation")?;
    check_distances(cube.lines(), distance_m)?;
    check_illuminant(illum)?;

    let max = T::lit(MAX_REFLECTANCE);
    let mut report = CorrectionReport::default();
    let mut data = Vec::with_capacity(cube.data().len());
    for (line, d) in distance_m.iter().enumerate() {
        // gain per band for this line
        let gain: Vec<T> = transmission(att, *d)
            .iter()
            .zip(&illum.intensity)
            .map(|(t, i0)| *i0 * *t)
            .collect();
        for px in cube.line(line).chunks_exact(cube.bands()) {
            for (l, g) in px.iter().zip(&gain) {
                let r = *l / *g;
                data.push(if r < T::zero() {
                    report.clamped_low += 1;
                    T::zero()
                } else if r > max {
                    report.clamped_high += 1;
                    max
                } else {
                    r
                });
            }
        }
    }
    Ok((cube.with_data(data, CubeKind::Reflectance)?, report))
}

/// Radiance a reflectance cube would produce: the exact inverse of
/// [`correct_to_reflectance`] (without clamping).
pub fn forward_model<T: Real>(
    reflectance: &HyperCube<T>,
    illum: &IlluminantSpectrum<T>,
    att: &AttenuationProfile<T>,
    distance_m: &[T],
) -> Result<HyperCube<T>> {
    if reflectance.kind() != CubeKind::Reflectance {
        return Err(Error::Precondition(
            "forward model expects a reflectance cube".into(),
        ));
    }
    same_grid(reflectance.grid(), &illum.grid, "cube vs illuminant")?;
    same_grid(reflectance.grid(), &att.grid, "cube vs attenuation")?;
    check_distances(reflectance.lines(), distance_m)?;

    let mut data = Vec::with_capacity(reflectance.data().len());
    for (line, d) in distance_m.iter().enumerate() {
        let gain: Vec<T> = transmission(att, *d)
            .iter()
            .zip(&illum.intensity)
            .map(|(t, i0)| *i0 * *t)
            .collect();
        for px in reflectance.line(line).chunks_exact(reflectance.bands()) {
            data.extend(px.iter().zip(&gain).map(|(r, g)| *r * *g));
        }
    }
    reflectance.with_data(data, CubeKind::Radiance)
}
