//! Nav-driven orthomosaic: frames are scaled from altitude, rotated by
//! heading and painted onto a world-aligned grid in timestamp order.
//!
//! The grid's cell `(col, row)` covers `[min_x + col·s, min_x + (col+1)·s)`
//! east and `(max_y - (row+1)·s, max_y - row·s]` north; row 0 is the
//! northern edge. Cells are filled by inverse mapping: each cell center is
//! carried back into the frame and takes the nearest source pixel.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nav::{pixel_to_world, CameraModel, NavTrack};
use crate::raster::{read_rgb, write_ppm};

/// Half a centimeter: the resolution the survey mosaics reach.
pub const DEFAULT_CELL_SIZE_M: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FramePlacement {
    pub frame_id: String,
    pub timestamp: f64,
    pub center_x: f64,
    pub center_y: f64,
    /// Clockwise from north; 0 keeps the frame top pointing north.
    pub rotation_deg: f64,
    /// Meters per source pixel.
    pub scale: f64,
}

impl FramePlacement {
    /// Maps a source image-plane point `(col, row)` to world coordinates.
    pub fn to_world(&self, width: u32, height: u32, col: f64, row: f64) -> (f64, f64) {
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let u = (col - width as f64 / 2.0) * self.scale;
        let up = (height as f64 / 2.0 - row) * self.scale;
        (
            self.center_x + u * cos + up * sin,
            self.center_y - u * sin + up * cos,
        )
    }

    /// Inverse of [`FramePlacement::to_world`].
    pub fn to_source(&self, width: u32, height: u32, x: f64, y: f64) -> (f64, f64) {
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center_x, y - self.center_y);
        let u = dx * cos - dy * sin;
        let up = dx * sin + dy * cos;
        (
            u / self.scale + width as f64 / 2.0,
            height as f64 / 2.0 - up / self.scale,
        )
    }

    /// World corners of a `width × height` frame (TL, TR, BR, BL).
    pub fn footprint(&self, width: u32, height: u32) -> [(f64, f64); 4] {
        let (w, h) = (width as f64, height as f64);
        [
            self.to_world(width, height, 0.0, 0.0),
            self.to_world(width, height, w, 0.0),
            self.to_world(width, height, w, h),
            self.to_world(width, height, 0.0, h),
        ]
    }
}

/// Axis-aligned world rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Bounds {
    pub fn of_points(points: impl IntoIterator<Item = (f64, f64)>) -> Option<Self> {
        points.into_iter().fold(None, |acc, (x, y)| {
            Some(match acc {
                None => Bounds {
                    min_x: x,
                    min_y: y,
                    max_x: x,
                    max_y: y,
                },
                Some(b) => Bounds {
                    min_x: b.min_x.min(x),
                    min_y: b.min_y.min(y),
                    max_x: b.max_x.max(x),
                    max_y: b.max_y.max(y),
                },
            })
        })
    }

    pub fn union(&self, other: &Bounds) -> Bounds {
        Bounds {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    pub fn intersects(&self, other: &Bounds) -> bool {
        self.min_x < other.max_x
            && other.min_x < self.max_x
            && self.min_y < other.max_y
            && other.min_y < self.max_y
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }
}

/// RGB accumulation raster with a per-cell write counter.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicGrid {
    pub min_x: f64,
    pub max_y: f64,
    pub cell_size: f64,
    image: RgbImage,
    counts: Vec<u32>,
}

impl MosaicGrid {
    /// Empty grid anchored at the top-left of `bounds`, large enough to
    /// cover them.
    pub fn new(bounds: Bounds, cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(Error::Precondition("cell size must be positive".into()));
        }
        // small slack so exact multiples do not grow an extra cell
        let cells = |extent: f64| ((extent / cell_size - 1e-9).ceil().max(1.0)) as u32;
        let (cols, rows) = (cells(bounds.width()), cells(bounds.height()));
        Ok(Self {
            min_x: bounds.min_x,
            max_y: bounds.max_y,
            cell_size,
            image: RgbImage::new(cols, rows),
            counts: vec![0; cols as usize * rows as usize],
        })
    }

    pub fn cols(&self) -> u32 {
        self.image.width()
    }

    pub fn rows(&self) -> u32 {
        self.image.height()
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            min_x: self.min_x,
            max_x: self.min_x + self.cols() as f64 * self.cell_size,
            min_y: self.max_y - self.rows() as f64 * self.cell_size,
            max_y: self.max_y,
        }
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn count(&self, col: u32, row: u32) -> u32 {
        self.counts[(row * self.cols() + col) as usize]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Number of cells painted at least once.
    pub fn written_cells(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }

    pub fn cell_center(&self, col: u32, row: u32) -> (f64, f64) {
        (
            self.min_x + (col as f64 + 0.5) * self.cell_size,
            self.max_y - (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing a world point, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(u32, u32)> {
        let c = ((x - self.min_x) / self.cell_size).floor();
        let r = ((self.max_y - y) / self.cell_size).floor();
        (c >= 0.0 && r >= 0.0 && c < self.cols() as f64 && r < self.rows() as f64)
            .then_some((c as u32, r as u32))
    }

    /// Six-line world file: cell size, two rotation terms, negative cell
    /// size, then the center of the top-left cell.
    pub fn world_file(&self) -> String {
        let (x, y) = self.cell_center(0, 0);
        format!(
            "{}\n0\n0\n{}\n{}\n{}\n",
            self.cell_size, -self.cell_size, x, y
        )
    }

    pub fn save(&self, ppm_path: &Path) -> Result<PathBuf> {
        write_ppm(&self.image, ppm_path)?;
        let wld = ppm_path.with_extension("wld");
        fs::write(&wld, self.world_file()).map_err(|e| Error::io(&wld, e))?;
        Ok(wld)
    }
}

/// Paints `image` at `placement`, overwriting earlier content.
/// Returns the number of cells painted.
pub fn place_frame(grid: &mut MosaicGrid, image: &RgbImage, placement: &FramePlacement) -> Result<usize> {
    if !(placement.scale > 0.0) || !placement.scale.is_finite() {
        return Err(Error::Precondition(format!(
            "frame {} has non-positive scale",
            placement.frame_id
        )));
    }
    let (w, h) = image.dimensions();
    let fp = Bounds::of_points(placement.footprint(w, h)).expect("four corners");
    let gb = grid.bounds();
    if !fp.intersects(&gb) {
        return Err(Error::Precondition(format!(
            "frame {} falls outside the mosaic bounds",
            placement.frame_id
        )));
    }

    let s = grid.cell_size;
    let col0 = ((fp.min_x - grid.min_x) / s).floor().max(0.0) as u32;
    let col1 = (((fp.max_x - grid.min_x) / s).ceil().max(0.0) as u32).min(grid.cols());
    let row0 = ((grid.max_y - fp.max_y) / s).floor().max(0.0) as u32;
    let row1 = (((grid.max_y - fp.min_y) / s).ceil().max(0.0) as u32).min(grid.rows());

    let cols = grid.cols();
    let mut painted = 0;
    for row in row0..row1 {
        for col in col0..col1 {
            let (x, y) = grid.cell_center(col, row);
            let (u, v) = placement.to_source(w, h, x, y);
            if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                continue;
            }
            let px = *image.get_pixel(u as u32, v as u32);
            grid.image.put_pixel(col, row, px);
            grid.counts[(row * cols + col) as usize] += 1;
            painted += 1;
        }
    }
    Ok(painted)
}

/// One camera frame with its capture time.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub timestamp: f64,
    pub image: RgbImage,
}

/// Loads `<t_seconds>.ppm` files from `dir`, sorted by time.
pub fn load_frames(dir: &Path) -> Result<Vec<Frame>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            continue;
        }
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Ok(timestamp) = stem.parse::<f64>() else {
            log::warn!("skipping {}: name is not a timestamp", path.display());
            continue;
        };
        frames.push(Frame {
            id: stem,
            timestamp,
            image: read_rgb(&path)?,
        });
    }
    frames.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(frames)
}

/// Placement of a frame from the interpolated pose at its timestamp.
pub fn placement_for(
    frame_id: &str,
    timestamp: f64,
    width: u32,
    height: u32,
    track: &NavTrack<f64>,
    hfov_deg: f64,
) -> Result<FramePlacement> {
    let pose = track.pose_at(timestamp)?;
    let cam = CameraModel::new(hfov_deg, width, height)?;
    let (cx, cy) = pixel_to_world(&pose, &cam, cam.center())?;
    Ok(FramePlacement {
        frame_id: frame_id.to_string(),
        timestamp,
        center_x: cx,
        center_y: cy,
        rotation_deg: pose.heading,
        scale: cam.ground_sample(pose.altitude),
    })
}

#[derive(Debug, Clone)]
pub struct Mosaic {
    pub grid: MosaicGrid,
    pub placements: Vec<FramePlacement>,
    /// Cells painted by each frame, in placement order.
    pub painted: Vec<usize>,
}

/// Places all frames in timestamp order on a grid sized to their union.
pub fn build_mosaic(
    frames: &[Frame],
    track: &NavTrack<f64>,
    hfov_deg: f64,
    cell_size: f64,
) -> Result<Mosaic> {
    if frames.is_empty() {
        return Err(Error::Precondition("no frames to mosaic".into()));
    }
    let mut order: Vec<&Frame> = frames.iter().collect();
    order.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

    let placements = order
        .iter()
        .map(|f| {
            placement_for(
                &f.id,
                f.timestamp,
                f.image.width(),
                f.image.height(),
                track,
                hfov_deg,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let bounds = order
        .iter()
        .zip(&placements)
        .filter_map(|(f, p)| Bounds::of_points(p.footprint(f.image.width(), f.image.height())))
        .reduce(|a, b| a.union(&b))
        .expect("at least one frame");

    let mut grid = MosaicGrid::new(bounds, cell_size)?;
    let mut painted = Vec::with_capacity(order.len());
    for (f, p) in order.iter().zip(&placements) {
        painted.push(place_frame(&mut grid, &f.image, p)?);
    }
    Ok(Mosaic {
        grid,
        placements,
        painted,
    })
}

/// Per-channel gains applied by [`color_correct`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColorGains {
    pub gains: [f64; 3],
    pub channel_means: [f64; 3],
}

/// Gray-world balance: each channel is scaled so its mean over written cells
/// equals the mean of the three channel means.
pub fn color_correct(grid: &MosaicGrid) -> (MosaicGrid, ColorGains) {
    let mut sums = [0.0f64; 3];
    let mut n = 0usize;
    for (px, c) in grid.image.pixels().zip(&grid.counts) {
        if *c > 0 {
            for (sum, v) in sums.iter_mut().zip(px.0) {
                *sum += v as f64;
            }
            n += 1;
        }
    }
    if n == 0 {
        log::warn!("color correction skipped: mosaic has no written cells");
        return (
            grid.clone(),
            ColorGains {
                gains: [1.0; 3],
                channel_means: [0.0; 3],
            },
        );
    }
    let means = sums.map(|s| s / n as f64);
    let common = means.iter().sum::<f64>() / 3.0;
    let gains = means.map(|m| if m > 0.0 { common / m } else { 1.0 });

    let mut out = grid.clone();
    for (px, c) in out.image.pixels_mut().zip(&grid.counts) {
        if *c > 0 {
            for (v, g) in px.0.iter_mut().zip(gains) {
                *v = (*v as f64 * g).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (
        out,
        ColorGains {
            gains,
            channel_means: means,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([x as u8 * 10, y as u8 * 10, 7]))
    }

    fn unit_grid(cols: u32, rows: u32) -> MosaicGrid {
        MosaicGrid::new(
            Bounds {
                min_x: 0.0,
                min_y: 0.0,
                max_x: cols as f64,
                max_y: rows as f64,
            },
            1.0,
        )
        .unwrap()
    }

    fn placement(cx: f64, cy: f64, rot: f64, scale: f64) -> FramePlacement {
        FramePlacement {
            frame_id: "f".into(),
            timestamp: 0.0,
            center_x: cx,
            center_y: cy,
            rotation_deg: rot,
            scale,
        }
    }

    #[test]
    fn identity_placement_copies_cells() {
        let img = gradient(6, 4);
        let mut grid = unit_grid(6, 4);
        let n = place_frame(&mut grid, &img, &placement(3.0, 2.0, 0.0, 1.0)).unwrap();
        assert_eq!(n, 24);
        assert_eq!(grid.image(), &img);
        assert!(grid.counts().iter().all(|c| *c == 1));
    }

    #[test]
    fn quarter_turn_matches_rotation_oracle() {
        let w = 5;
        let img = gradient(w, w);
        let mut grid = unit_grid(w, w);
        place_frame(&mut grid, &img, &placement(2.5, 2.5, 90.0, 1.0)).unwrap();
        for r in 0..w {
            for c in 0..w {
                // clockwise quarter turn: (r, c) -> (c, w - 1 - r)
                assert_eq!(grid.image().get_pixel(w - 1 - r, c), img.get_pixel(c, r));
            }
        }
    }

    #[test]
    fn later_frames_overwrite() {
        let mut grid = unit_grid(4, 2);
        let red = RgbImage::from_pixel(2, 2, Rgb([255, 0, 0]));
        let blue = RgbImage::from_pixel(2, 2, Rgb([0, 0, 255]));
        place_frame(&mut grid, &red, &placement(1.0, 1.0, 0.0, 1.0)).unwrap();
        place_frame(&mut grid, &blue, &placement(2.0, 1.0, 0.0, 1.0)).unwrap();
        assert_eq!(grid.image().get_pixel(0, 0).0, [255, 0, 0]);
        assert_eq!(grid.image().get_pixel(1, 0).0, [0, 0, 255]);
        assert_eq!(grid.count(1, 0), 2);
        assert_eq!(grid.count(2, 1), 1);
        assert_eq!(grid.count(3, 1), 0);
    }

    #[test]
    fn placement_preconditions() {
        let mut grid = unit_grid(2, 2);
        let img = gradient(2, 2);
        assert!(place_frame(&mut grid, &img, &placement(1.0, 1.0, 0.0, 0.0)).is_err());
        assert!(place_frame(&mut grid, &img, &placement(50.0, 50.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn world_source_round_trip() {
        let p = placement(10.0, -4.0, 37.0, 0.01);
        let (x, y) = p.to_world(640, 480, 12.5, 400.25);
        let (u, v) = p.to_source(640, 480, x, y);
        assert!((u - 12.5).abs() < 1e-9 && (v - 400.25).abs() < 1e-9);
    }

    fn grid_with(values: &[[u8; 3]]) -> MosaicGrid {
        let mut g = unit_grid(2, 2);
        for (i, v) in values.iter().enumerate() {
            g.image.put_pixel(i as u32 % 2, i as u32 / 2, Rgb(*v));
            g.counts[i] = 1;
        }
        g
    }

    #[test]
    fn gray_world_balanced_input_is_unchanged() {
        let g = grid_with(&[[10, 10, 10], [20, 20, 20], [30, 30, 30], [40, 40, 40]]);
        let (out, gains) = color_correct(&g);
        assert_eq!(gains.gains, [1.0; 3]);
        assert_eq!(out, g);
    }

    #[test]
    fn gray_world_blue_cast() {
        // means: R = 40, G = 40, B = 80; common = 160/3
        let g = grid_with(&[[20, 20, 40], [40, 40, 80], [60, 60, 120], [40, 40, 80]]);
        let (out, gains) = color_correct(&g);
        let common = 160.0 / 3.0;
        assert!((gains.gains[2] - common / 80.0).abs() < 1e-12);
        assert!((gains.gains[2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((gains.gains[0] - common / 40.0).abs() < 1e-12);
        assert_eq!(out.image().get_pixel(1, 0).0, [53, 53, 53]);
    }

    #[test]
    fn empty_mosaic_is_a_noop() {
        let g = unit_grid(3, 3);
        let (out, gains) = color_correct(&g);
        assert_eq!(out, g);
        assert_eq!(gains.gains, [1.0; 3]);
    }

    #[test]
    fn world_file_layout() {
        let g = unit_grid(3, 2);
        assert_eq!(g.world_file(), "1\n0\n0\n-1\n0.5\n1.5\n");
    }
}
