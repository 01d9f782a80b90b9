//! Optional TOML run configuration. Command-line flags take precedence.

use std::net::IpAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use benthos_core::pipeline::SurveyParams;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub paths: Paths,
    pub params: SurveyParams,
    pub serve: Serve,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cube: Option<PathBuf>,
    pub nav: Option<PathBuf>,
    pub plate: Option<PathBuf>,
    pub attenuation: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub frames: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub session: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Serve {
    pub host: Option<IpAddr>,
    pub port: Option<u16>,
    pub static_dir: Option<PathBuf>,
}

impl Config {
    /// Reads `path`; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    fn rebase(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.cube,
            &mut p.nav,
            &mut p.plate,
            &mut p.attenuation,
            &mut p.references,
            &mut p.detections,
            &mut p.frames,
            &mut p.weights,
            &mut p.session,
            &mut p.output,
            &mut self.serve.static_dir,
        ] {
            if let Some(path) = slot.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        }
    }
}
