//! Stage functions shared by the command-line tool and the end-to-end tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::density::{aggregate_density, export_geojson, ClassWeights, DensityGrid, GeoSpectralDetection};
use crate::detfuse::{fuse_detections, ingest_file, FusionInputs, FusionOutput, IngestReport};
use crate::error::{Error, Result};
use crate::hypercube::{load_cube, HyperCube};
use crate::nav::{uhi_sample_to_world, GeoOrigin, NavTrack};
use crate::radiometry::{
    calibrate_illuminant, correct_to_reflectance, AttenuationProfile, CalibrationPlate, CorrectionReport,
};
use crate::review::{ExportRecord, ReviewSession};
use crate::specmatch::{load_library, sam_map, threshold_segment, BandWindow, ReferenceSpectrum, SamMap, SpectralDetection};

pub const DEFAULT_SAM_THRESHOLD: f64 = 0.1;

/// Seafloor distance for every cube line: the interpolated altitude at its timestamp.
pub fn line_distances(cube: &HyperCube<f64>, track: &NavTrack<f64>) -> Result<Vec<f64>> {
    cube.timestamps()
        .iter()
        .map(|t| track.pose_at(*t).map(|p| p.altitude))
        .collect()
}

/// Calibrates the illuminant from the plate and converts radiance to reflectance.
pub fn correct_cube(
    radiance: &HyperCube<f64>,
    plate: &CalibrationPlate<f64>,
    att: &AttenuationProfile<f64>,
    track: &NavTrack<f64>,
) -> Result<(HyperCube<f64>, CorrectionReport)> {
    let illum = calibrate_illuminant(plate, att)?;
    let distances = line_distances(radiance, track)?;
    let (mut out, report) = correct_to_reflectance(radiance, &illum, att, &distances)?;
    out.meta = radiance.meta.clone();
    Ok((out, report))
}

/// Timestamp at fractional line index, interpolated between line timestamps.
pub fn line_time(cube: &HyperCube<f64>, line: f64) -> Result<f64> {
    let ts = cube.timestamps();
    if ts.is_empty() || !(0.0..=(ts.len() - 1) as f64).contains(&line) {
        return Err(Error::OutOfRange(format!("line {line} outside the cube")));
    }
    let i = line.floor() as usize;
    if i + 1 >= ts.len() {
        return Ok(ts[i]);
    }
    Ok(ts[i] + (ts[i + 1] - ts[i]) * (line - i as f64))
}

/// World position of a spectral detection's box center.
pub fn georeference_spectral(
    det: &SpectralDetection,
    cube: &HyperCube<f64>,
    track: &NavTrack<f64>,
    uhi_fov_deg: f64,
) -> Result<GeoSpectralDetection> {
    let (line, sample) = det.center();
    let pose = track.pose_at(line_time(cube, line)?)?;
    let (x, y) = uhi_sample_to_world(&pose, uhi_fov_deg, cube.samples(), sample)?;
    Ok(GeoSpectralDetection {
        reference: det.reference.clone(),
        x,
        y,
        line_min: det.line_min,
        line_max: det.line_max,
        sample_min: det.sample_min,
        sample_max: det.sample_max,
        pixel_count: det.pixel_count,
        mean_angle: det.mean_angle,
    })
}

#[derive(Debug, Clone)]
pub struct SamRun {
    pub map: SamMap<f64>,
    pub detections: Vec<SpectralDetection>,
}

pub fn spectral_search(
    cube: &HyperCube<f64>,
    reference: &ReferenceSpectrum<f64>,
    threshold: f64,
    min_area: usize,
    window: Option<BandWindow<f64>>,
) -> Result<SamRun> {
    let map = sam_map(cube, reference, window)?;
    let detections = threshold_segment(&map, threshold, min_area)?;
    Ok(SamRun { map, detections })
}

/// Tunable parameters of a full survey run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyParams {
    pub sam_threshold: f64,
    pub min_area: usize,
    pub score_threshold: f64,
    pub camera_fov_deg: f64,
    pub uhi_fov_deg: f64,
    pub density_cell_m: f64,
    pub mosaic_cell_m: f64,
    /// Reference names to search for; empty means the whole library.
    pub targets: Vec<String>,
}

impl Default for SurveyParams {
    fn default() -> Self {
        Self {
            sam_threshold: DEFAULT_SAM_THRESHOLD,
            min_area: crate::specmatch::DEFAULT_MIN_AREA,
            score_threshold: crate::detfuse::DEFAULT_SCORE_THRESHOLD,
            camera_fov_deg: crate::nav::DEFAULT_CAMERA_FOV_DEG,
            uhi_fov_deg: crate::nav::DEFAULT_UHI_FOV_DEG,
            density_cell_m: crate::density::DEFAULT_CELL_SIZE_M,
            mosaic_cell_m: crate::mosaic::DEFAULT_CELL_SIZE_M,
            targets: Vec::new(),
        }
    }
}

impl SurveyParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::Invalid(format!("{what}, got {v}")));
        if !(self.sam_threshold > 0.0 && self.sam_threshold <= std::f64::consts::FRAC_PI_2) {
            return bad("sam_threshold must lie in (0, pi/2]", self.sam_threshold);
        }
        if self.min_area == 0 {
            return Err(Error::Invalid("min_area must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return bad("score_threshold must lie in [0, 1]", self.score_threshold);
        }
        for (name, fov) in [("camera_fov_deg", self.camera_fov_deg), ("uhi_fov_deg", self.uhi_fov_deg)] {
            if !(fov > 0.0 && fov < 180.0) {
                return bad(&format!("{name} must lie in (0, 180)"), fov);
            }
        }
        for (name, cell) in [("density_cell_m", self.density_cell_m), ("mosaic_cell_m", self.mosaic_cell_m)] {
            if !(cell > 0.0 && cell.is_finite()) {
                return bad(&format!("{name} must be positive"), cell);
            }
        }
        Ok(())
    }
}

/// Input files of a survey.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyPaths {
    pub cube: PathBuf,
    pub nav: PathBuf,
    pub plate: PathBuf,
    pub attenuation: PathBuf,
    pub references: PathBuf,
    pub detections: PathBuf,
    pub frames: Option<PathBuf>,
    pub weights: Option<PathBuf>,
}

impl SurveyPaths {
    /// Layout written by [`crate::synth::generate_scene`].
    pub fn scene(dir: &Path) -> Self {
        use crate::synth::*;
        Self {
            cube: dir.join(CUBE_FILE),
            nav: dir.join(NAV_FILE),
            plate: dir.join(PLATE_FILE),
            attenuation: dir.join(ATTENUATION_FILE),
            references: dir.join(REFERENCES_DIR),
            detections: dir.join(DETECTIONS_FILE),
            frames: Some(dir.join(FRAMES_DIR)),
            weights: Some(dir.join(WEIGHTS_FILE)),
        }
    }
}

#[derive(Debug)]
pub struct SurveyProducts {
    pub reflectance: HyperCube<f64>,
    pub correction: CorrectionReport,
    pub sam: Vec<SamRun>,
    pub spectral: Vec<GeoSpectralDetection>,
    pub ingest: IngestReport,
    pub fusion: FusionOutput,
    pub export: Vec<ExportRecord>,
    pub density: DensityGrid,
    pub geojson: Value,
}

/// Runs every stage in memory: correction, spectral search, detection fusion,
/// an unreviewed export, density and GeoJSON.
pub fn run_survey(paths: &SurveyPaths, params: &SurveyParams) -> Result<SurveyProducts> {
    params.validate()?;
    let radiance = load_cube::<f64>(&paths.cube)?;
    let track = NavTrack::<f64>::load(&paths.nav)?;
    let plate = CalibrationPlate::load(&paths.plate)?;
    let att = AttenuationProfile::load(&paths.attenuation)?;
    let (reflectance, correction) = correct_cube(&radiance, &plate, &att, &track)?;

    let library = load_library::<f64>(&paths.references)?;
    let mut sam = Vec::new();
    let mut spectral = Vec::new();
    for (name, reference) in &library {
        if !params.targets.is_empty() && !params.targets.contains(name) {
            continue;
        }
        let run = spectral_search(&reflectance, reference, params.sam_threshold, params.min_area, None)?;
        for d in &run.detections {
            spectral.push(georeference_spectral(d, &reflectance, &track, params.uhi_fov_deg)?);
        }
        sam.push(run);
    }
    if let Some(missing) = params.targets.iter().find(|t| !library.contains_key(*t)) {
        return Err(Error::Precondition(format!("reference {missing:?} not in library")));
    }

    let ingest = ingest_file(&paths.detections, params.score_threshold)?;
    let fusion = fuse_detections(
        &ingest.kept,
        &FusionInputs {
            track: &track,
            camera_fov_deg: params.camera_fov_deg,
            frame_size: (1, 1),
            frames_dir: paths.frames.as_deref(),
            cube: Some(&reflectance),
            uhi_fov_deg: params.uhi_fov_deg,
        },
    )?;
    let session = ReviewSession::in_memory("survey", fusion.detections.clone())?;
    let export = session.export_final();
    let weights = match &paths.weights {
        Some(p) => ClassWeights::load(p)?,
        None => ClassWeights::default(),
    };
    let density = aggregate_density(&export, &weights, params.density_cell_m)?;
    let origin = track.origin.unwrap_or(GeoOrigin { lat: 0.0, lon: 0.0 });
    let geojson = export_geojson(&export, Some(&density), &spectral, origin);
    Ok(SurveyProducts {
        reflectance,
        correction,
        sam,
        spectral,
        ingest,
        fusion,
        export,
        density,
        geojson,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::{CubeKind, WavelengthGrid};

    #[test]
    fn line_time_interpolates() {
        let grid = WavelengthGrid::uniform(400.0, 420.0, 10.0).unwrap();
        let cube = HyperCube::from_fn(3, 1, grid, vec![1.0, 2.0, 4.0], CubeKind::Reflectance, |_, _| vec![0.1; 3])
            .unwrap();
        assert_eq!(line_time(&cube, 0.5).unwrap(), 1.5);
        assert_eq!(line_time(&cube, 1.25).unwrap(), 2.5);
        assert_eq!(line_time(&cube, 2.0).unwrap(), 4.0);
        assert!(line_time(&cube, 2.5).is_err());
    }

    #[test]
    fn params_are_checked() {
        assert!(SurveyParams::default().validate().is_ok());
        for p in [
            SurveyParams { sam_threshold: 0.0, ..Default::default() },
            SurveyParams { min_area: 0, ..Default::default() },
            SurveyParams { score_threshold: 1.5, ..Default::default() },
            SurveyParams { uhi_fov_deg: 180.0, ..Default::default() },
            SurveyParams { density_cell_m: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(p.validate(), Err(Error::Invalid(_))), "{p:?}");
        }
    }
}
