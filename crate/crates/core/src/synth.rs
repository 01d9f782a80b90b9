//! Deterministic synthetic survey: a straight north-bound transect over sand
//! with one planted reflectance patch and a handful of RGB-visible objects.
//!
//! [`generate_scene`] writes every input the pipeline consumes (radiance
//! cube, navigation, plate, attenuation, references, frames, detections,
//! class weights) plus `truth.json` with the planted ground truth.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::density::ClassWeights;
use crate::detfuse::DebrisClass;
use crate::error::{Error, Result};
use crate::hypercube::{save_cube, CubeKind, HyperCube, WavelengthGrid};
use crate::mosaic::placement_for;
use crate::nav::{pixel_to_world, uhi_sample_to_world, CameraModel, GeoOrigin, NavSample, NavTrack};
use crate::radiometry::{forward_model, AttenuationProfile, IlluminantSpectrum};
use crate::raster::write_ppm;
use crate::specmatch::ReferenceSpectrum;

pub const CUBE_FILE: &str = "cube.hdr";
pub const NAV_FILE: &str = "nav.csv";
pub const PLATE_FILE: &str = "plate.csv";
pub const ATTENUATION_FILE: &str = "attenuation.csv";
pub const REFERENCES_DIR: &str = "references";
pub const FRAMES_DIR: &str = "frames";
pub const DETECTIONS_FILE: &str = "detections.ndjson";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const TRUTH_FILE: &str = "truth.json";

pub const PLANTED_REFERENCE: &str = "plastic";
pub const BACKGROUND_REFERENCE: &str = "sand";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub lines: usize,
    pub samples: usize,
    pub line_interval_s: f64,
    pub first_line_s: f64,
    /// Standard deviation of the multiplicative reflectance noise.
    pub noise: f64,
    /// `(first line, first sample, lines, samples)` of the planted patch.
    pub planted: (usize, usize, usize, usize),
    pub speed_mps: f64,
    pub altitude_m: f64,
    pub camera_fov_deg: f64,
    pub uhi_fov_deg: f64,
    pub frame_size: (u32, u32),
    pub frame_interval_s: f64,
    pub origin: GeoOrigin,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            lines: 200,
            samples: 40,
            line_interval_s: 0.05,
            first_line_s: 0.5,
            noise: 0.02,
            planted: (94, 16, 12, 9),
            speed_mps: crate::nav::DEFAULT_SPEED_MPS,
            altitude_m: crate::nav::DEFAULT_ALTITUDE_M,
            camera_fov_deg: crate::nav::DEFAULT_CAMERA_FOV_DEG,
            uhi_fov_deg: crate::nav::DEFAULT_UHI_FOV_DEG,
            frame_size: (160, 120),
            frame_interval_s: 1.0,
            origin: GeoOrigin {
                lat: 59.91,
                lon: 10.73,
            },
        }
    }
}

impl SceneSpec {
    pub fn line_time(&self, line: f64) -> f64 {
        self.first_line_s + line * self.line_interval_s
    }

    pub fn survey_end_s(&self) -> f64 {
        self.line_time(self.lines as f64) + 4.0
    }

    pub fn grid(&self) -> Result<WavelengthGrid<f64>> {
        WavelengthGrid::uniform(380.0, 750.0, 10.0)
    }

    /// Ground position of fractional UHI pixel `(line, sample)`.
    pub fn uhi_ground(&self, line: f64, sample: f64) -> (f64, f64) {
        let half = self.altitude_m * (self.uhi_fov_deg.to_radians() / 2.0).tan();
        let u = 2.0 * sample / (self.samples as f64 - 1.0) - 1.0;
        (half * u, self.speed_mps * self.line_time(line))
    }
}

pub fn sand_reflectance(nm: f64) -> f64 {
    0.12 + 0.3 * (nm - 380.0) / 370.0
}

pub fn plastic_reflectance(nm: f64) -> f64 {
    0.2 + 0.5 * (-((nm - 470.0) / 60.0).powi(2)).exp()
}

fn attenuation(nm: f64) -> f64 {
    0.04 + 0.5 * ((nm - 380.0) / 370.0).powi(2)
}

fn illuminant(nm: f64) -> f64 {
    900.0 + 300.0 * ((nm - 380.0) / 120.0).sin()
}

const PLATE_REFLECTANCE: f64 = 0.95;
const PLATE_DISTANCE_M: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disc { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
}

/// An object visible in the RGB frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: DebrisClass,
    pub x: f64,
    pub y: f64,
    pub shape: Shape,
    pub color: [u8; 3],
    /// Detector score for `class`.
    pub score: f64,
}

impl SceneObject {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self.shape {
            Shape::Disc { radius } => (x - self.x).hypot(y - self.y) <= radius,
            Shape::Rect { half_w, half_h } => (x - self.x).abs() <= half_w && (y - self.y).abs() <= half_h,
        }
    }

    fn corners(&self) -> [(f64, f64); 4] {
        let (hw, hh) = match self.shape {
            Shape::Disc { radius } => (radius, radius),
            Shape::Rect { half_w, half_h } => (half_w, half_h),
        };
        [
            (self.x - hw, self.y + hh),
            (self.x + hw, self.y + hh),
            (self.x + hw, self.y - hh),
            (self.x - hw, self.y - hh),
        ]
    }
}

/// Ground truth written to `truth.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: SceneSpec,
    pub reference: String,
    pub planted_lines: (usize, usize),
    pub planted_samples: (usize, usize),
    /// World position of the planted patch center.
    pub planted_world: (f64, f64),
    pub objects: Vec<SceneObject>,
}

fn scene_objects(spec: &SceneSpec) -> Vec<SceneObject> {
    let (l0, s0, nl, ns) = spec.planted;
    let (x0, y0) = spec.uhi_ground(l0 as f64 - 0.5, s0 as f64 - 0.5);
    let (x1, y1) = spec.uhi_ground((l0 + nl) as f64 - 0.5, (s0 + ns) as f64 - 0.5);
    let obj = |class, x, y, shape, color, score| SceneObject {
        class,
        x,
        y,
        shape,
        color,
        score,
    };
    vec![
        obj(
            DebrisClass::Plastic,
            (x0 + x1) / 2.0,
            (y0 + y1) / 2.0,
            Shape::Rect {
                half_w: (x1 - x0) / 2.0,
                half_h: (y1 - y0) / 2.0,
            },
            [40, 90, 200],
            0.81,
        ),
        obj(DebrisClass::Metal, 0.35, 1.9, Shape::Rect { half_w: 0.15, half_h: 0.1 }, [150, 150, 160], 0.5),
        obj(DebrisClass::Tire, -0.75, 3.1, Shape::Disc { radius: 0.22 }, [30, 30, 30], 0.9),
        obj(DebrisClass::Other, 0.5, 4.6, Shape::Disc { radius: 0.08 }, [120, 60, 90], 0.349),
        obj(DebrisClass::Bottle, 0.6, 8.3, Shape::Rect { half_w: 0.05, half_h: 0.14 }, [20, 140, 40], 0.62),
        obj(DebrisClass::Starfish, -0.45, 10.2, Shape::Disc { radius: 0.1 }, [230, 110, 30], 0.77),
        obj(DebrisClass::Anchor, 0.7, 11.6, Shape::Rect { half_w: 0.3, half_h: 0.08 }, [90, 70, 60], 0.55),
    ]
}

fn texture(objects: &[SceneObject], x: f64, y: f64) -> Rgb<u8> {
    if let Some(o) = objects.iter().find(|o| o.contains(x, y)) {
        return Rgb(o.color);
    }
    let ripple = 14.0 * (9.0 * x + (3.0 * y).sin()).sin() + 6.0 * (23.0 * y).cos();
    let base = [194.0, 178.0, 128.0];
    Rgb(base.map(|b: f64| (b + ripple).round().clamp(0.0, 255.0) as u8))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn track(spec: &SceneSpec) -> Result<NavTrack<f64>> {
    let n = (spec.survey_end_s() / 0.5).ceil() as usize;
    let samples = (0..=n)
        .map(|i| {
            let t = i as f64 * 0.5;
            NavSample {
                depth: 20.0,
                ..NavSample::level(t, 0.0, spec.speed_mps * t, 0.0, spec.altitude_m)
            }
        })
        .collect();
    NavTrack::new(samples, Some(spec.origin))
}

/// Writes the scene into `dir` and returns its ground truth.
pub fn generate_scene(dir: &Path, spec: &SceneSpec) -> Result<Truth> {
    let (l0, s0, nl, ns) = spec.planted;
    if l0 + nl > spec.lines || s0 + ns > spec.samples || spec.samples < 2 {
        return Err(Error::Precondition("planted patch does not fit the cube".into()));
    }
    for sub in [REFERENCES_DIR, FRAMES_DIR] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let grid = spec.grid()?;
    let nm = grid.as_slice().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let track = track(spec)?;
    track.save(&dir.join(NAV_FILE))?;

    let sand: Vec<f64> = nm.iter().map(|w| sand_reflectance(*w)).collect();
    let plastic: Vec<f64> = nm.iter().map(|w| plastic_reflectance(*w)).collect();
    ReferenceSpectrum::new(BACKGROUND_REFERENCE, grid.clone(), sand.clone())?
        .save(&dir.join(REFERENCES_DIR).join(format!("{BACKGROUND_REFERENCE}.csv")))?;
    ReferenceSpectrum::new(PLANTED_REFERENCE, grid.clone(), plastic.clone())?
        .save(&dir.join(REFERENCES_DIR).join(format!("{PLANTED_REFERENCE}.csv")))?;

    let noise = Normal::new(1.0, spec.noise).map_err(|e| Error::Precondition(e.to_string()))?;
    let times: Vec<f64> = (0..spec.lines).map(|l| spec.line_time(l as f64)).collect();
    let reflectance = HyperCube::from_fn(
        spec.lines,
        spec.samples,
        grid.clone(),
        times.clone(),
        CubeKind::Reflectance,
        |l, s| {
            let inside = (l0..l0 + nl).contains(&l) && (s0..s0 + ns).contains(&s);
            let base = if inside { &plastic } else { &sand };
            base.iter().map(|r| (r * noise.sample(&mut rng)).max(0.0)).collect()
        },
    )?;

    let att = AttenuationProfile::new(grid.clone(), nm.iter().map(|w| attenuation(*w)).collect())?;
    let i0 = IlluminantSpectrum::new(grid.clone(), nm.iter().map(|w| illuminant(*w)).collect())?;
    let distances = times
        .iter()
        .map(|t| track.pose_at(*t).map(|p| p.altitude))
        .collect::<Result<Vec<_>>>()?;
    let mut radiance = forward_model(&reflectance, &i0, &att, &distances)?;
    radiance.meta.sensor_id = Some("synthetic-uhi".into());
    radiance.meta.comment = Some(format!("synthetic scene, seed {}", spec.seed));
    save_cube(&radiance, &dir.join(CUBE_FILE))?;

    let mut att_csv = String::from("wavelength_nm,c_per_m\n");
    let mut plate_csv = format!("distance_m,{PLATE_DISTANCE_M}\nwavelength_nm,reflectance,radiance\n");
    for (k, w) in nm.iter().enumerate() {
        let c = att.coefficients()[k];
        att_csv.push_str(&format!("{w},{c}\n"));
        let l = PLATE_REFLECTANCE * i0.intensity()[k] * (-2.0 * c * PLATE_DISTANCE_M).exp();
        plate_csv.push_str(&format!("{w},{PLATE_REFLECTANCE},{l}\n"));
    }
    write(&dir.join(ATTENUATION_FILE), &att_csv)?;
    write(&dir.join(PLATE_FILE), &plate_csv)?;
    write(&dir.join(WEIGHTS_FILE), &ClassWeights::default().render())?;

    let objects = scene_objects(spec);
    let (w, h) = spec.frame_size;
    let cam = CameraModel::new(spec.camera_fov_deg, w, h)?;
    let mut frame_times = Vec::new();
    let mut t = spec.frame_interval_s;
    while t <= times[times.len() - 1] + spec.frame_interval_s {
        frame_times.push(t);
        t += spec.frame_interval_s;
    }
    for &ft in &frame_times {
        let pose = track.pose_at(ft)?;
        let mut img = RgbImage::new(w, h);
        for (c, r, px) in img.enumerate_pixels_mut() {
            let (x, y) = pixel_to_world(&pose, &cam, (c as f64 + 0.5, r as f64 + 0.5))?;
            *px = texture(&objects, x, y);
        }
        write_ppm(&img, &dir.join(FRAMES_DIR).join(format!("{}.ppm", frame_id(ft))))?;
    }

    let mut ndjson = String::new();
    for o in &objects {
        let ft = frame_times
            .iter()
            .copied()
            .min_by(|a, b| {
                let d = |t: f64| (track.pose_at(t).map(|p| p.y).unwrap_or(f64::INFINITY) - o.y).abs();
                d(*a).total_cmp(&d(*b))
            })
            .expect("frames exist");
        let placement = placement_for(&frame_id(ft), ft, w, h, &track, spec.camera_fov_deg)?;
        let px: Vec<(f64, f64)> = o.corners().iter().map(|(x, y)| placement.to_source(w, h, *x, *y)).collect();
        let min_c = px.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).max(0.0).floor();
        let min_r = px.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(0.0).floor();
        let max_c = px.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).min(w as f64).ceil();
        let max_r = px.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).min(h as f64).ceil();
        let scores: serde_json::Map<String, serde_json::Value> = DebrisClass::ALL
            .iter()
            .map(|c| {
                let v = if *c == o.class {
                    o.score
                } else {
                    (rng.random::<f64>() * o.score * 0.5 * 1000.0).round() / 1000.0
                };
                (c.name().to_string(), serde_json::json!(v))
            })
            .collect();
        let rec = serde_json::json!({
            "frame_id": frame_id(ft),
            "t": ft,
            "bbox": [min_c, min_r, max_c - min_c, max_r - min_r],
            "scores": scores,
        });
        ndjson.push_str(&rec.to_string());
        ndjson.push('\n');
    }
    write(&dir.join(DETECTIONS_FILE), &ndjson)?;

    let truth = Truth {
        spec: spec.clone(),
        reference: PLANTED_REFERENCE.into(),
        planted_lines: (l0, l0 + nl - 1),
        planted_samples: (s0, s0 + ns - 1),
        planted_world: {
            let pose = track.pose_at(spec.line_time(l0 as f64 + (nl as f64 - 1.0) / 2.0))?;
            uhi_sample_to_world(&pose, spec.uhi_fov_deg, spec.samples, s0 as f64 + (ns as f64 - 1.0) / 2.0)?
        },
        objects,
    };
    write(&dir.join(TRUTH_FILE), &serde_json::to_string_pretty(&truth)?)?;
    Ok(truth)
}

/// Frame id (and file stem) for a capture time.
pub fn frame_id(t: f64) -> String {
    format!("{t:.3}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypercube::load_cube;

    #[test]
    fn scene_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ta = generate_scene(a.path(), &SceneSpec::default()).unwrap();
        let tb = generate_scene(b.path(), &SceneSpec::default()).unwrap();
        assert_eq!(ta, tb);
        for f in ["cube.bil", DETECTIONS_FILE, NAV_FILE, PLATE_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap());
        }
        let cube = load_cube::<f64>(&a.path().join(CUBE_FILE)).unwrap();
        assert_eq!((cube.lines(), cube.samples(), cube.bands()), (200, 40, 38));
        assert_eq!(cube.kind(), CubeKind::Radiance);
    }

    #[test]
    fn planted_world_matches_closed_form() {
        let spec = SceneSpec::default();
        let dir = tempfile::tempdir().unwrap();
        let truth = generate_scene(dir.path(), &spec).unwrap();
        // heading north, level: x = alt tan(fov/2) u, y = v t
        let half = 2.0 * 30f64.to_radians().tan();
        let x = half * (2.0 * 20.0 / 39.0 - 1.0);
        let y = 1.2 * (0.5 + 99.5 * 0.05);
        assert!((truth.planted_world.0 - x).abs() < 1e-12);
        assert!((truth.planted_world.1 - y).abs() < 1e-12);
    }
}
