//! `benthos`: survey post-processing from the command line.
//!
//! Every stage writes into `--out` together with `<command>_summary.json`.
//! Exit status is 0 on success, 1 for invalid input or usage and 2 for I/O
//! failures.

mod config;

use std::fmt;
use std::fs;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use benthos_api::{ServeOptions, DEFAULT_PORT};
use benthos_core::density::{aggregate_density, export_geojson, ClassWeights, GeoSpectralDetection};
use benthos_core::detfuse::{fuse_detections, ingest_file, DebrisClass, FusionInputs};
use benthos_core::hypercube::{load_cube, pseudo_rgb, save_cube, CubeKind, HyperCube};
use benthos_core::mosaic::{build_mosaic, color_correct, load_frames};
use benthos_core::nav::{GeoOrigin, NavTrack};
use benthos_core::pipeline::{correct_cube, georeference_spectral, spectral_search, SurveyParams};
use benthos_core::radiometry::{AttenuationProfile, CalibrationPlate};
use benthos_core::raster::write_ppm;
use benthos_core::review::{export_session_dir, load_events, ReviewSession, SessionInit, EVENTS_FILE, INITIAL_FILE};
use benthos_core::specmatch::{load_library, BandWindow, ReferenceSpectrum};
use benthos_core::synth::{
    generate_scene, SceneSpec, ATTENUATION_FILE, CUBE_FILE, DETECTIONS_FILE, FRAMES_DIR, NAV_FILE, PLATE_FILE,
    REFERENCES_DIR, TRUTH_FILE, WEIGHTS_FILE,
};
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use config::Config;

const SESSION_DIR: &str = "session";

#[derive(Debug, Parser)]
#[command(name = "benthos", version, about = "Post-processing for AUV debris surveys")]
struct Cli {
    /// TOML file with `[paths]`, `[params]` and `[serve]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Radiance cube to reflectance.
    Correct(CorrectArgs),
    /// Spectral angle maps and matches against reference spectra.
    Sam(SamArgs),
    /// Pseudo-RGB preview of a cube.
    Pseudorgb(PseudoArgs),
    /// Georeferenced mosaic of RGB frames.
    Mosaic(MosaicArgs),
    /// Ingests detector output and creates a review session.
    Fuse(FuseArgs),
    /// Serves a review session over HTTP.
    Serve(ServeArgs),
    /// Per-class density grid and GeoJSON from a review session.
    Density(DensityArgs),
    /// Final reviewed detections of a session.
    Export(ExportArgs),
    /// Writes the synthetic test survey.
    Synth(SynthArgs),
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Correct(_) => "correct",
            Cmd::Sam(_) => "sam",
            Cmd::Pseudorgb(_) => "pseudorgb",
            Cmd::Mosaic(_) => "mosaic",
            Cmd::Fuse(_) => "fuse",
            Cmd::Serve(_) => "serve",
            Cmd::Density(_) => "density",
            Cmd::Export(_) => "export",
            Cmd::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Args)]
struct OutArg {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorrectArgs {
    /// Radiance cube header.
    #[arg(long)]
    cube: Option<PathBuf>,
    #[arg(long)]
    nav: Option<PathBuf>,
    #[arg(long)]
    plate: Option<PathBuf>,
    #[arg(long)]
    attenuation: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct SamArgs {
    /// Reflectance cube header.
    #[arg(long)]
    cube: Option<PathBuf>,
    /// Reference spectrum CSV; repeatable. Defaults to every CSV in `--references`.
    #[arg(long = "ref")]
    refs: Vec<PathBuf>,
    #[arg(long)]
    references: Option<PathBuf>,
    /// Maximum spectral angle in radians.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    /// Restrict the angle to bands within `MIN MAX` nanometres.
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    window_nm: Option<Vec<f64>>,
    /// Navigation log; when given, matches are also georeferenced.
    #[arg(long)]
    nav: Option<PathBuf>,
    #[arg(long)]
    uhi_fov: Option<f64>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct PseudoArgs {
    #[arg(long)]
    cube: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct MosaicArgs {
    /// Directory of `<seconds>.ppm` frames.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long)]
    nav: Option<PathBuf>,
    #[arg(long)]
    camera_fov: Option<f64>,
    /// Mosaic cell size in metres.
    #[arg(long)]
    cell_size: Option<f64>,
    /// Gray-world balance the finished mosaic.
    #[arg(long)]
    color_correct: bool,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct FuseArgs {
    /// Detector output, one JSON record per line.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    nav: Option<PathBuf>,
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Reflectance cube for the spectral part of the features.
    #[arg(long)]
    cube: Option<PathBuf>,
    /// Minimum top class score.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    camera_fov: Option<f64>,
    #[arg(long)]
    uhi_fov: Option<f64>,
    /// Frame size `WIDTHxHEIGHT` used for frames that cannot be read.
    #[arg(long, value_parser = parse_size)]
    frame_size: Option<(u32, u32)>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    session: Option<PathBuf>,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    host: Option<IpAddr>,
    /// Built UI to serve next to the API.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DensityArgs {
    #[arg(long)]
    session: Option<PathBuf>,
    /// Per-class mean mass CSV; placeholder masses are used without it.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Grid cell size in metres.
    #[arg(long)]
    cell_size: Option<f64>,
    /// Navigation log carrying the geographic origin.
    #[arg(long)]
    nav: Option<PathBuf>,
    /// Geographic origin `LAT,LON`; overrides the one in `--nav`.
    #[arg(long, value_parser = parse_origin)]
    origin: Option<GeoOrigin>,
    /// Georeferenced spectral matches written by `sam`; repeatable.
    #[arg(long)]
    spectral: Vec<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    session: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArg,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: u32 = w.trim().parse().map_err(|_| format!("bad width {w:?}"))?;
    let h: u32 = h.trim().parse().map_err(|_| format!("bad height {h:?}"))?;
    if w == 0 || h == 0 {
        return Err("frame size must be positive".into());
    }
    Ok((w, h))
}

fn parse_origin(s: &str) -> Result<GeoOrigin, String> {
    let (lat, lon) = s.split_once(',').ok_or("expected LAT,LON")?;
    let lat: f64 = lat.trim().parse().map_err(|_| format!("bad latitude {lat:?}"))?;
    let lon: f64 = lon.trim().parse().map_err(|_| format!("bad longitude {lon:?}"))?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(format!("origin {lat},{lon} out of range"));
    }
    Ok(GeoOrigin { lat, lon })
}

/// A required input given neither as a flag nor in the config.
#[derive(Debug)]
struct Missing {
    flag: &'static str,
    key: &'static str,
}

impl fmt::Display for Missing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing {} (or {} in the config file)", self.flag, self.key)
    }
}

impl std::error::Error for Missing {}

fn need<T>(value: Option<T>, flag: &'static str, key: &'static str) -> anyhow::Result<T> {
    value.ok_or_else(|| Missing { flag, key }.into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BENTHOS_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.downcast_ref::<Missing>().is_some() {
                let mut cmd = Cli::command();
                cmd.build();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(core) = cause.downcast_ref::<benthos_core::Error>() {
            return if core.is_io() { 2 } else { 1 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Cmd::Correct(a) => correct(a, cfg),
        Cmd::Sam(a) => sam(a, cfg),
        Cmd::Pseudorgb(a) => pseudorgb(a, cfg),
        Cmd::Mosaic(a) => mosaic(a, cfg),
        Cmd::Fuse(a) => fuse(a, cfg),
        Cmd::Serve(a) => serve(a, cfg, cli.jobs),
        Cmd::Density(a) => density(a, cfg),
        Cmd::Export(a) => export(a, cfg),
        Cmd::Synth(a) => synth(a, cfg),
    }
}

/// Output directory and the files written into it.
struct Out {
    dir: PathBuf,
    written: Vec<String>,
}

impl Out {
    fn new(arg: OutArg, cfg: &Config) -> anyhow::Result<Self> {
        let dir = need(arg.out.or(cfg.paths.output.clone()), "--out", "paths.output")?;
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let path = self.path(name);
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }

    /// Writes `<command>_summary.json`. Holds no timestamps so reruns are
    /// byte-identical.
    fn finish(mut self, command: &str, inputs: Value, params: Value, stats: Value) -> anyhow::Result<()> {
        let name = format!("{command}_summary.json");
        let mut outputs = std::mem::take(&mut self.written);
        outputs.sort();
        let summary = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "inputs": inputs,
            "params": params,
            "outputs": outputs,
            "stats": stats,
        });
        self.json(&name, &summary)?;
        log::info!("{command}: wrote {}", self.dir.display());
        Ok(())
    }
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn validated(params: SurveyParams) -> anyhow::Result<SurveyParams> {
    params.validate()?;
    Ok(params)
}

fn load_track(path: &Path) -> anyhow::Result<NavTrack<f64>> {
    Ok(NavTrack::<f64>::load(path)?)
}

fn correct(a: CorrectArgs, cfg: Config) -> anyhow::Result<()> {
    let p = &cfg.paths;
    let cube_path = need(a.cube.or(p.cube.clone()), "--cube", "paths.cube")?;
    let nav = need(a.nav.or(p.nav.clone()), "--nav", "paths.nav")?;
    let plate = need(a.plate.or(p.plate.clone()), "--plate", "paths.plate")?;
    let att = need(a.attenuation.or(p.attenuation.clone()), "--attenuation", "paths.attenuation")?;
    let mut out = Out::new(a.out, &cfg)?;

    let radiance = load_cube::<f64>(&cube_path)?;
    if radiance.kind() != CubeKind::Radiance {
        bail!("{} is not a radiance cube", cube_path.display());
    }
    let track = load_track(&nav)?;
    let plate_data = CalibrationPlate::load(&plate)?;
    let att_data = AttenuationProfile::load(&att)?;
    let (refl, report) = correct_cube(&radiance, &plate_data, &att_data, &track)?;
    if report.clamped() > 0 {
        log::warn!("{} reflectance values clamped", report.clamped());
    }
    save_cube(&refl, &out.path("reflectance.hdr"))?;
    out.written.push("reflectance.bil".into());
    out.finish(
        "correct",
        json!({"cube": display(&cube_path), "nav": display(&nav), "plate": display(&plate), "attenuation": display(&att)}),
        json!({}),
        json!({
            "lines": refl.lines(),
            "samples": refl.samples(),
            "bands": refl.bands(),
            "clamped_low": report.clamped_low,
            "clamped_high": report.clamped_high,
        }),
    )
}

fn sam(a: SamArgs, cfg: Config) -> anyhow::Result<()> {
    let mut params = cfg.params.clone();
    params.sam_threshold = a.threshold.unwrap_or(params.sam_threshold);
    params.min_area = a.min_area.unwrap_or(params.min_area);
    params.uhi_fov_deg = a.uhi_fov.unwrap_or(params.uhi_fov_deg);
    let params = validated(params)?;
    let window = match a.window_nm.as_deref() {
        None => None,
        Some(&[lo, hi]) if lo < hi => Some(BandWindow { min_nm: lo, max_nm: hi }),
        Some(w) => bail!("--window-nm needs MIN < MAX, got {w:?}"),
    };
    let cube_path = need(a.cube.or(cfg.paths.cube.clone()), "--cube", "paths.cube")?;
    let nav = a.nav.or(cfg.paths.nav.clone());

    let references: Vec<ReferenceSpectrum<f64>> = if !a.refs.is_empty() {
        a.refs
            .iter()
            .map(|p| ReferenceSpectrum::load(p))
            .collect::<Result<_, _>>()?
    } else {
        let dir = need(a.references.or(cfg.paths.references.clone()), "--ref", "paths.references")?;
        let lib = load_library::<f64>(&dir)?;
        lib.into_values()
            .filter(|r| params.targets.is_empty() || params.targets.contains(&r.name))
            .collect()
    };
    if references.is_empty() {
        bail!("no reference spectra selected");
    }
    let mut names: Vec<&str> = references.iter().map(|r| r.name.as_str()).collect();
    names.sort();
    if names.windows(2).any(|w| w[0] == w[1]) {
        bail!("reference names must be unique, got {names:?}");
    }

    let mut out = Out::new(a.out, &cfg)?;
    let cube = load_cube::<f64>(&cube_path)?;
    let track = nav.as_deref().map(load_track).transpose()?;
    let mut matches = Vec::new();
    let mut georef: Vec<GeoSpectralDetection> = Vec::new();
    let mut per_ref = serde_json::Map::new();
    for r in &references {
        let run = spectral_search(&cube, r, params.sam_threshold, params.min_area, window)?;
        write_ppm(&run.map.heatmap(), &out.path(&format!("sam_{}.ppm", r.name)))?;
        if let Some(track) = &track {
            for d in &run.detections {
                georef.push(georeference_spectral(d, &cube, track, params.uhi_fov_deg)?);
            }
        }
        per_ref.insert(r.name.clone(), json!(run.detections.len()));
        matches.extend(run.detections);
    }
    out.json("sam_detections.json", &matches)?;
    if track.is_some() {
        out.json("sam_georef.json", &georef)?;
    }
    out.finish(
        "sam",
        json!({
            "cube": display(&cube_path),
            "references": references.iter().map(|r| r.name.clone()).collect::<Vec<_>>(),
            "nav": nav.as_deref().map(display),
        }),
        json!({
            "threshold": params.sam_threshold,
            "min_area": params.min_area,
            "uhi_fov_deg": params.uhi_fov_deg,
            "window_nm": window.map(|w| [w.min_nm, w.max_nm]),
        }),
        json!({"matches": per_ref}),
    )
}

fn pseudorgb(a: PseudoArgs, cfg: Config) -> anyhow::Result<()> {
    let cube_path = need(a.cube.or(cfg.paths.cube.clone()), "--cube", "paths.cube")?;
    let mut out = Out::new(a.out, &cfg)?;
    let cube: HyperCube<f64> = load_cube(&cube_path)?;
    let img = pseudo_rgb(&cube)?;
    write_ppm(&img, &out.path("pseudorgb.ppm"))?;
    out.finish(
        "pseudorgb",
        json!({"cube": display(&cube_path)}),
        json!({}),
        json!({"width": img.width(), "height": img.height()}),
    )
}

fn mosaic(a: MosaicArgs, cfg: Config) -> anyhow::Result<()> {
    let mut params = cfg.params.clone();
    params.camera_fov_deg = a.camera_fov.unwrap_or(params.camera_fov_deg);
    params.mosaic_cell_m = a.cell_size.unwrap_or(params.mosaic_cell_m);
    let params = validated(params)?;
    let frames_dir = need(a.frames.or(cfg.paths.frames.clone()), "--frames", "paths.frames")?;
    let nav = need(a.nav.or(cfg.paths.nav.clone()), "--nav", "paths.nav")?;
    let mut out = Out::new(a.out, &cfg)?;

    let frames = load_frames(&frames_dir)?;
    let track = load_track(&nav)?;
    let m = build_mosaic(&frames, &track, params.camera_fov_deg, params.mosaic_cell_m)?;
    let (grid, gains) = if a.color_correct {
        let (g, gains) = color_correct(&m.grid);
        (g, Some(gains))
    } else {
        (m.grid.clone(), None)
    };
    let ppm = out.path("mosaic.ppm");
    grid.save(&ppm)?;
    out.written.push("mosaic.wld".into());
    out.json("mosaic_placements.json", &m.placements)?;
    out.finish(
        "mosaic",
        json!({"frames": display(&frames_dir), "nav": display(&nav)}),
        json!({
            "camera_fov_deg": params.camera_fov_deg,
            "cell_size_m": params.mosaic_cell_m,
            "color_correct": a.color_correct,
        }),
        json!({
            "frames": frames.len(),
            "cols": grid.cols(),
            "rows": grid.rows(),
            "bounds": grid.bounds(),
            "written_cells": grid.written_cells(),
            "painted": m.painted,
            "color_gains": gains,
        }),
    )
}

fn fuse(a: FuseArgs, cfg: Config) -> anyhow::Result<()> {
    let mut params = cfg.params.clone();
    params.score_threshold = a.threshold.unwrap_or(params.score_threshold);
    params.camera_fov_deg = a.camera_fov.unwrap_or(params.camera_fov_deg);
    params.uhi_fov_deg = a.uhi_fov.unwrap_or(params.uhi_fov_deg);
    let params = validated(params)?;
    let det_path = need(a.detections.or(cfg.paths.detections.clone()), "--detections", "paths.detections")?;
    let nav = need(a.nav.or(cfg.paths.nav.clone()), "--nav", "paths.nav")?;
    let frames = a.frames.or(cfg.paths.frames.clone());
    let cube_path = a.cube.or(cfg.paths.cube.clone());
    let frame_size = match (a.frame_size, &frames) {
        (Some(s), _) => s,
        (None, Some(_)) => (1, 1),
        (None, None) => return Err(Missing { flag: "--frames or --frame-size", key: "paths.frames" }.into()),
    };
    let mut out = Out::new(a.out, &cfg)?;
    let session_dir = out.dir.join(SESSION_DIR);
    prepare_session_dir(&session_dir)?;

    let track = load_track(&nav)?;
    let cube = match &cube_path {
        Some(p) => {
            let c = load_cube::<f64>(p)?;
            if c.kind() != CubeKind::Reflectance {
                bail!("{} is not a reflectance cube; run `correct` first", p.display());
            }
            Some(c)
        }
        None => None,
    };
    let frames_abs = frames
        .as_deref()
        .map(|f| fs::canonicalize(f).with_context(|| format!("frames directory {}", f.display())))
        .transpose()?;
    let ingest = ingest_file(&det_path, params.score_threshold)?;
    for e in &ingest.errors {
        log::warn!("{}:{}: {}", det_path.display(), e.line, e.message);
    }
    let fusion = fuse_detections(
        &ingest.kept,
        &FusionInputs {
            track: &track,
            camera_fov_deg: params.camera_fov_deg,
            frame_size,
            frames_dir: frames_abs.as_deref(),
            cube: cube.as_ref(),
            uhi_fov_deg: params.uhi_fov_deg,
        },
    )?;
    for w in &fusion.warnings {
        log::warn!("{w}");
    }
    let located = fusion.detections.iter().filter(|d| d.footprint.is_some()).count();
    let covered = fusion.detections.iter().filter(|d| d.spectral_covered).count();
    let n = fusion.detections.len();
    ReviewSession::create(
        &session_dir,
        SessionInit {
            detections: fusion.detections,
            frames_dir: frames_abs,
        },
    )?;
    out.written.push(format!("{SESSION_DIR}/{INITIAL_FILE}"));
    out.written.push(format!("{SESSION_DIR}/{EVENTS_FILE}"));
    out.finish(
        "fuse",
        json!({
            "detections": display(&det_path),
            "nav": display(&nav),
            "frames": frames.as_deref().map(display),
            "cube": cube_path.as_deref().map(display),
        }),
        json!({
            "score_threshold": params.score_threshold,
            "camera_fov_deg": params.camera_fov_deg,
            "uhi_fov_deg": params.uhi_fov_deg,
        }),
        json!({
            "detections": n,
            "below_threshold": ingest.below_threshold,
            "record_errors": ingest.errors,
            "georeferenced": located,
            "spectral_covered": covered,
            "warnings": fusion.warnings,
        }),
    )
}

/// A rerun may replace a session nobody has reviewed yet, never one with events.
fn prepare_session_dir(dir: &Path) -> anyhow::Result<()> {
    if !dir.join(INITIAL_FILE).exists() {
        return Ok(());
    }
    if !load_events(dir)?.is_empty() {
        bail!(
            "{} already holds a reviewed session; choose another --out",
            dir.display()
        );
    }
    for f in [INITIAL_FILE, EVENTS_FILE] {
        let p = dir.join(f);
        if p.exists() {
            fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    Ok(())
}

fn serve(a: ServeArgs, cfg: Config, jobs: Option<usize>) -> anyhow::Result<()> {
    let session_dir = need(a.session.or(cfg.paths.session.clone()), "--session", "paths.session")?;
    let host = a
        .host
        .or(cfg.serve.host)
        .unwrap_or(IpAddr::V4(Ipv4Addr::LOCALHOST));
    let port = a.port.or(cfg.serve.port).unwrap_or(DEFAULT_PORT);
    let opts = ServeOptions {
        session_dir,
        addr: SocketAddr::new(host, port),
        static_dir: a.static_dir.or(cfg.serve.static_dir.clone()),
    };
    let mut rt = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = jobs {
        rt.worker_threads(n);
    }
    let rt = rt.enable_all().build()?;
    eprintln!("serving {} on http://{}", opts.session_dir.display(), opts.addr);
    rt.block_on(benthos_api::serve(opts))?;
    Ok(())
}

fn density(a: DensityArgs, cfg: Config) -> anyhow::Result<()> {
    let mut params = cfg.params.clone();
    params.density_cell_m = a.cell_size.unwrap_or(params.density_cell_m);
    let params = validated(params)?;
    let session_dir = need(a.session.or(cfg.paths.session.clone()), "--session", "paths.session")?;
    let weights_path = a.weights.or(cfg.paths.weights.clone());
    let nav = a.nav.or(cfg.paths.nav.clone());
    let origin = match (a.origin, &nav) {
        (Some(o), _) => o,
        (None, Some(n)) => load_track(n)?.origin.with_context(|| {
            format!("{} has no origin comment; pass --origin LAT,LON", n.display())
        })?,
        (None, None) => return Err(Missing { flag: "--origin or --nav", key: "paths.nav" }.into()),
    };
    let mut out = Out::new(a.out, &cfg)?;

    let weights = match &weights_path {
        Some(p) => ClassWeights::load(p)?,
        None => {
            log::warn!("no --weights given; using placeholder class masses");
            ClassWeights::default()
        }
    };
    let mut spectral: Vec<GeoSpectralDetection> = Vec::new();
    for p in &a.spectral {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let mut part: Vec<GeoSpectralDetection> =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
        spectral.append(&mut part);
    }
    let records = export_session_dir(&session_dir)?;
    let grid = aggregate_density(&records, &weights, params.density_cell_m)?;
    let geojson = export_geojson(&records, Some(&grid), &spectral, origin);
    out.json("density.geojson", &geojson)?;
    out.json("density_grid.json", &grid)?;
    let totals = grid.totals();
    out.finish(
        "density",
        json!({
            "session": display(&session_dir),
            "weights": weights_path.as_deref().map(display),
            "nav": nav.as_deref().map(display),
            "spectral": a.spectral.iter().map(|p| display(p)).collect::<Vec<_>>(),
        }),
        json!({
            "cell_size_m": params.density_cell_m,
            "origin": {"lat": origin.lat, "lon": origin.lon},
            "class_mass_kg": DebrisClass::ALL.iter().map(|c| (c.to_string(), json!(weights.get(*c)))).collect::<serde_json::Map<_, _>>(),
            "placeholder_weights": weights_path.is_none(),
        }),
        json!({
            "records": records.len(),
            "cells": grid.cells.len(),
            "skipped": grid.skipped,
            "counts": totals,
            "mass_kg": totals.mass_kg(&weights),
            "spectral_matches": spectral.len(),
        }),
    )
}

fn export(a: ExportArgs, cfg: Config) -> anyhow::Result<()> {
    let session_dir = need(a.session.or(cfg.paths.session.clone()), "--session", "paths.session")?;
    let mut out = Out::new(a.out, &cfg)?;
    let records = export_session_dir(&session_dir)?;
    let events = load_events(&session_dir)?.len();
    out.json("export.json", &records)?;
    out.finish(
        "export",
        json!({"session": display(&session_dir)}),
        json!({}),
        json!({"records": records.len(), "events": events}),
    )
}

fn synth(a: SynthArgs, cfg: Config) -> anyhow::Result<()> {
    let mut spec = SceneSpec::default();
    spec.seed = a.seed.unwrap_or(spec.seed);
    let mut out = Out::new(a.out, &cfg)?;
    let truth = generate_scene(&out.dir, &spec)?;
    out.written.extend(
        [CUBE_FILE, NAV_FILE, PLATE_FILE, ATTENUATION_FILE, REFERENCES_DIR, FRAMES_DIR, DETECTIONS_FILE, WEIGHTS_FILE, TRUTH_FILE]
            .map(String::from),
    );
    out.finish(
        "synth",
        json!({}),
        json!({"seed": spec.seed}),
        json!({
            "reference": truth.reference,
            "planted_world": truth.planted_world,
            "objects": truth.objects.len(),
        }),
    )
}
