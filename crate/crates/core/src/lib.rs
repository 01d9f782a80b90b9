//! Post-processing toolkit for autonomous underwater debris surveys.
//!
//! The crate turns push-broom hyperspectral cubes, navigation logs and
//! external RGB detections into corrected reflectance, spectral-match
//! detections, georeferenced object maps, orthomosaics, reviewed
//! classifications and per-class debris-density grids.
//!
//! The numerical modules ([`hypercube`], [`radiometry`], [`specmatch`],
//! [`nav`]) are generic over a [`Real`] scalar; the aliases below pin the
//! usual `f64` and `f32` instantiations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod density;
pub mod detfuse;
pub mod error;
pub mod hypercube;
pub mod mosaic;
pub mod nav;
pub mod pipeline;
pub mod radiometry;
pub mod raster;
pub mod review;
pub mod scalar;
pub mod specmatch;
pub mod synth;

mod csvio;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Grid = hypercube::WavelengthGrid<f64>;
pub type Cube = hypercube::HyperCube<f64>;
pub type Cube32 = hypercube::HyperCube<f32>;
pub type Reference = specmatch::ReferenceSpectrum<f64>;
pub type AngleMap = specmatch::SamMap<f64>;
pub type Attenuation = radiometry::AttenuationProfile<f64>;
pub type Plate = radiometry::CalibrationPlate<f64>;
pub type Illuminant = radiometry::IlluminantSpectrum<f64>;
pub type Pose = nav::NavSample<f64>;
pub type Track = nav::NavTrack<f64>;
pub type Camera = nav::CameraModel<f64>;
