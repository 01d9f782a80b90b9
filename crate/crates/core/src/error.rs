use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },
    #[error("format error: {0}")]
    Format(String),
    #[error("out of range: {0}")]
    OutOfRange(String),
    #[error("incompatible wavelength grids: {0}")]
    IncompatibleGrid(String),
    #[error("degenerate calibration plate at band {band}: reflectance is zero")]
    DegeneratePlate { band: usize },
    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("ray does not intersect the seafloor plane")]
    NoIntersection,
    #[error("unknown detection id {0}")]
    UnknownDetection(u32),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by the filesystem rather than by bad input.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Image(image::ImageError::IoError(_))
        )
    }
}
