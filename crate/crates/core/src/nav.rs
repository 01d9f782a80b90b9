//! Vehicle navigation tracks, pose interpolation and flat-seafloor projection.
//!
//! Conventions: world frame is local ENU (x east, y north, meters). Heading
//! is measured clockwise from north in degrees. The body frame is x forward,
//! y starboard, z down, and attitude applies as yaw(heading) · pitch · roll.
//! Cameras look straight down; image columns run to starboard and image rows
//! run aft, so the top of a frame faces the direction of travel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csvio::{comment_lines, field, read_text, records};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Survey speed and altitude the synthetic scenes default to.
pub const DEFAULT_SPEED_MPS: f64 = 1.2;
pub const DEFAULT_ALTITUDE_M: f64 = 2.0;

/// Stereo-camera and UHI across-track fields of view. At 2 m altitude they
/// give swaths of about 2.8 m and 2.3 m.
pub const DEFAULT_CAMERA_FOV_DEG: f64 = 70.0;
pub const DEFAULT_UHI_FOV_DEG: f64 = 60.0;

/// One navigation fix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavSample<T> {
    pub t: f64,
    pub x: T,
    pub y: T,
    pub depth: T,
    pub roll: T,
    pub pitch: T,
    pub heading: T,
    pub altitude: T,
}

impl<T: Real> NavSample<T> {
    /// Level pose at `(x, y)` with the given heading and altitude.
    pub fn level(t: f64, x: T, y: T, heading: T, altitude: T) -> Self {
        Self {
            t,
            x,
            y,
            depth: T::zero(),
            roll: T::zero(),
            pitch: T::zero(),
            heading,
            altitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ninety = T::lit(90.0);
        let all = [
            self.x,
            self.y,
            self.depth,
            self.roll,
            self.pitch,
            self.heading,
            self.altitude,
        ];
        if !self.t.is_finite() || all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite nav sample at t={}", self.t)));
        }
        if self.heading < T::zero() || self.heading >= T::lit(360.0) {
            return Err(Error::Invalid(format!("heading {} outside [0, 360)", self.heading)));
        }
        if self.roll.abs() > ninety || self.pitch.abs() > ninety {
            return Err(Error::Invalid(format!(
                "roll/pitch ({}, {}) beyond 90 degrees",
                self.roll, self.pitch
            )));
        }
        if !(self.altitude > T::zero()) {
            return Err(Error::Invalid(format!("altitude {} must be positive", self.altitude)));
        }
        Ok(())
    }
}

/// Geodetic anchor of the local ENU frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoOrigin {
    pub lat: f64,
    pub lon: f64,
}

/// Time-ordered navigation fixes.
#[derive(Debug, Clone, PartialEq)]
pub struct NavTrack<T> {
    samples: Vec<NavSample<T>>,
    pub origin: Option<GeoOrigin>,
}

impl<T: Real> NavTrack<T> {
    pub fn new(samples: Vec<NavSample<T>>, origin: Option<GeoOrigin>) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Invalid("a track needs at least two samples".into()));
        }
        for s in &samples {
            s.validate()?;
        }
        if let Some(w) = samples.windows(2).find(|w| w[1].t <= w[0].t) {
            return Err(Error::Invalid(format!(
                "timestamps not strictly increasing: {} then {}",
                w[0].t, w[1].t
            )));
        }
        Ok(Self { samples, origin })
    }

    pub fn samples(&self) -> &[NavSample<T>] {
        &self.samples
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start() && t <= self.end()
    }

    /// Interpolated pose at time `t`; see [`pose_at`].
    pub fn pose_at(&self, t: f64) -> Result<NavSample<T>> {
        pose_at(self, t)
    }

    /// Reads `t,x,y,depth,roll,pitch,heading,altitude` rows with an optional
    /// `# origin_lat=..., origin_lon=...` comment.
    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let origin = parse_origin(text)?;
        let mut samples = Vec::new();
        for rec in records(text)? {
            let heading: T = field(&rec, 6)?;
            samples.push(NavSample {
                t: field(&rec, 0)?,
                x: field(&rec, 1)?,
                y: field(&rec, 2)?,
                depth: field(&rec, 3)?,
                roll: field(&rec, 4)?,
                pitch: field(&rec, 5)?,
                heading: normalize_heading(heading),
                altitude: field(&rec, 7)?,
            });
        }
        Self::new(samples, origin)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(o) = self.origin {
            let _ = writeln!(out, "# origin_lat={}, origin_lon={}", o.lat, o.lon);
        }
        out.push_str("t,x,y,depth,roll,pitch,heading,altitude\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.t, s.x, s.y, s.depth, s.roll, s.pitch, s.heading, s.altitude
            );
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

fn parse_origin(text: &str) -> Result<Option<GeoOrigin>> {
    let mut lat = None;
    let mut lon = None;
    for line in comment_lines(text) {
        for part in line.split([',', ';']) {
            let Some((k, v)) = part.split_once('=') else { continue };
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad origin value {v:?}")))
            };
            match k.trim() {
                "origin_lat" => lat = Some(parse(v)?),
                "origin_lon" => lon = Some(parse(v)?),
                _ => {}
            }
        }
    }
    match (lat, lon) {
        (Some(lat), Some(lon)) => Ok(Some(GeoOrigin { lat, lon })),
        (None, None) => Ok(None),
        _ => Err(Error::Format("origin needs both origin_lat and origin_lon".into())),
    }
}

/// Maps any angle in degrees into `[0, 360)`.
pub fn normalize_heading<T: Real>(deg: T) -> T {
    let full = T::lit(360.0);
    let h = deg % full;
    let h = if h < T::zero() { h + full } else { h };
    // -1e-17 % 360 + 360 rounds to 360
    if h >= full {
        T::zero()
    } else {
        h
    }
}

/// Signed shortest rotation from `from` to `to`, in `(-180, 180]` degrees.
pub fn heading_delta<T: Real>(from: T, to: T) -> T {
    let full = T::lit(360.0);
    let half = T::lit(180.0);
    let mut d = (to - from) % full;
    if d > half {
        d -= full;
    } else if d <= -half {
        d += full;
    }
    d
}

/// Pose at time `t`: linear in position, depth, altitude, roll and pitch;
/// heading follows the shorter arc. Times outside the track are rejected.
pub fn pose_at<T: Real>(track: &NavTrack<T>, t: f64) -> Result<NavSample<T>> {
    if !track.contains(t) {
        return Err(Error::OutOfRange(format!(
            "t={t} outside track [{}, {}]",
            track.start(),
            track.end()
        )));
    }
    let s = &track.samples;
    let i = s.partition_point(|p| p.t < t);
    if s[i].t == t {
        return Ok(s[i]);
    }
    let (a, b) = (&s[i - 1], &s[i]);
    let f = T::lit((t - a.t) / (b.t - a.t));
    let lerp = |u: T, v: T| u + (v - u) * f;
    Ok(NavSample {
        t,
        x: lerp(a.x, b.x),
        y: lerp(a.y, b.y),
        depth: lerp(a.depth, b.depth),
        roll: lerp(a.roll, b.roll),
        pitch: lerp(a.pitch, b.pitch),
        heading: normalize_heading(a.heading + heading_delta(a.heading, b.heading) * f),
        altitude: lerp(a.altitude, b.altitude),
    })
}

/// Nadir-looking pinhole camera with square pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel<T> {
    pub hfov_deg: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraModel<T> {
    pub fn new(hfov_deg: T, width: u32, height: u32) -> Result<Self> {
        if !(hfov_deg > T::zero() && hfov_deg < T::lit(180.0)) {
            return Err(Error::Invalid(format!("horizontal FOV {hfov_deg} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Invalid("camera dimensions must be positive".into()));
        }
        Ok(Self {
            hfov_deg,
            width,
            height,
        })
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> T {
        T::lit(self.width as f64 / 2.0) / half_fov_tan(self.hfov_deg)
    }

    /// Across-track ground coverage at `altitude`.
    pub fn swath(&self, altitude: T) -> T {
        swath_width(self.hfov_deg, altitude)
    }

    /// Ground size of one pixel at `altitude`.
    pub fn ground_sample(&self, altitude: T) -> T {
        self.swath(altitude) / T::lit(self.width as f64)
    }

    /// Image-plane coordinates of the image center.
    pub fn center(&self) -> (T, T) {
        (
            T::lit(self.width as f64 / 2.0),
            T::lit(self.height as f64 / 2.0),
        )
    }
}

fn half_fov_tan<T: Real>(fov_deg: T) -> T {
    (fov_deg.to_radians() / T::lit(2.0)).tan()
}

/// `2 · altitude · tan(fov / 2)`.
pub fn swath_width<T: Real>(fov_deg: T, altitude: T) -> T {
    T::lit(2.0) * altitude * half_fov_tan(fov_deg)
}

/// Body-to-world rotation applied to `(forward, starboard, down)`; returns
/// `(north, east, down)`.
fn rotate_body<T: Real>(pose: &NavSample<T>, v: [T; 3]) -> [T; 3] {
    let (sr, cr) = pose.roll.to_radians().sin_cos();
    let (sp, cp) = pose.pitch.to_radians().sin_cos();
    let (sh, ch) = pose.heading.to_radians().sin_cos();
    let [f, s, d] = v;
    // Rz(heading) · Ry(pitch) · Rx(roll)
    let y1 = cr * s - sr * d;
    let z1 = sr * s + cr * d;
    let x2 = cp * f + sp * z1;
    let z2 = -sp * f + cp * z1;
    [ch * x2 - sh * y1, sh * x2 + ch * y1, z2]
}

/// Intersects the body-frame ray `(forward, starboard, 1)` with the seafloor
/// plane `altitude` below the vehicle.
pub fn project_body_ray<T: Real>(pose: &NavSample<T>, forward: T, starboard: T) -> Result<(T, T)> {
    if !(pose.altitude > T::zero()) {
        return Err(Error::Precondition("altitude must be positive".into()));
    }
    let [n, e, d] = rotate_body(pose, [forward, starboard, T::one()]);
    // rays within ~0.06 degrees of the horizon are treated as parallel
    if !(d > T::lit(1e-3)) {
        return Err(Error::NoIntersection);
    }
    let k = pose.altitude / d;
    Ok((pose.x + e * k, pose.y + n * k))
}

/// World position of image-plane point `px = (column, row)`.
///
/// Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`, so its center is at
/// `(i + 0.5, j + 0.5)` and the image edges sit at 0 and `width`/`height`.
pub fn pixel_to_world<T: Real>(
    pose: &NavSample<T>,
    cam: &CameraModel<T>,
    px: (T, T),
) -> Result<(T, T)> {
    let f = cam.focal_px();
    let (cx, cy) = cam.center();
    project_body_ray(pose, -(px.1 - cy) / f, (px.0 - cx) / f)
}

/// World position of fractional UHI sample `sample` on a line of `samples`
/// points whose first and last points sit on the swath edges.
pub fn uhi_sample_to_world<T: Real>(
    pose: &NavSample<T>,
    fov_deg: T,
    samples: usize,
    sample: T,
) -> Result<(T, T)> {
    let u = if samples <= 1 {
        T::zero()
    } else {
        T::lit(2.0) * sample / T::from_usize_lossy(samples - 1) - T::one()
    };
    project_body_ray(pose, T::zero(), u * half_fov_tan(fov_deg))
}

/// Ground points of one push-broom line.
pub fn uhi_line_footprint<T: Real>(
    pose: &NavSample<T>,
    fov_deg: T,
    samples: usize,
) -> Result<Vec<(T, T)>> {
    (0..samples)
        .map(|k| uhi_sample_to_world(pose, fov_deg, samples, T::from_usize_lossy(k)))
        .collect()
}

/// Local tangent-plane offset to latitude/longitude in degrees.
pub fn to_geodetic(origin: GeoOrigin, x: f64, y: f64) -> (f64, f64) {
    let deg = 180.0 / std::f64::consts::PI;
    let lat = origin.lat + y / EARTH_RADIUS_M * deg;
    let lon = origin.lon + x / (EARTH_RADIUS_M * origin.lat.to_radians().cos()) * deg;
    (lat, lon)
}

/// Inverse of [`to_geodetic`].
pub fn from_geodetic(origin: GeoOrigin, lat: f64, lon: f64) -> (f64, f64) {
    let rad = std::f64::consts::PI / 180.0;
    let y = (lat - origin.lat) * rad * EARTH_RADIUS_M;
    let x = (lon - origin.lon) * rad * EARTH_RADIUS_M * origin.lat.to_radians().cos();
    (x, y)
}
