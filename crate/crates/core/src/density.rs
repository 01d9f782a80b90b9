//! Per-class counts, weight-density grids and GeoJSON map products.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::csvio::{read_text, records};
use crate::detfuse::DebrisClass;
use crate::error::{Error, Result};
use crate::nav::{to_geodetic, GeoOrigin};
use crate::review::{ExportRecord, ReviewState};

pub const DEFAULT_CELL_SIZE_M: f64 = 10.0;
pub const SQUARE_METERS_PER_HECTARE: f64 = 10_000.0;

/// Average mass per object of each class, in kilograms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights(pub [f64; 7]);

impl Default for ClassWeights {
    /// Placeholder values; survey operators are expected to supply their own.
    fn default() -> Self {
        let mut w = [0.0; 7];
        for (class, kg) in [
            (DebrisClass::Bottle, 0.5),
            (DebrisClass::Plastic, 0.2),
            (DebrisClass::Anchor, 15.0),
            (DebrisClass::Tire, 8.0),
            (DebrisClass::Metal, 5.0),
            (DebrisClass::Other, 1.0),
            (DebrisClass::Starfish, 0.0),
        ] {
            w[class.index()] = kg;
        }
        Self(w)
    }
}

impl ClassWeights {
    pub fn get(&self, class: DebrisClass) -> f64 {
        self.0[class.index()]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.map(|w| w * k))
    }

    /// Parses `class,kg` rows; every class must appear exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut w = [None; 7];
        for row in records(text)? {
            if row.len() < 2 {
                return Err(Error::Format(format!("weights row needs class,kg: {row:?}")));
            }
            let class: DebrisClass = row[0].parse()?;
            let kg: f64 = row[1]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad weight {:?}", &row[1])))?;
            if !kg.is_finite() || kg < 0.0 {
                return Err(Error::Invalid(format!("weight {kg} for {class}")));
            }
            if w[class.index()].replace(kg).is_some() {
                return Err(Error::Format(format!("duplicate weight for {class}")));
            }
        }
        let mut out = [0.0; 7];
        for class in DebrisClass::ALL {
            out[class.index()] =
                w[class.index()].ok_or_else(|| Error::Format(format!("no weight for {class}")))?;
        }
        Ok(Self(out))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("# average weight per object, operator-supplied\nclass,kg\n");
        for class in DebrisClass::ALL {
            s.push_str(&format!("{class},{}\n", self.get(class)));
        }
        s
    }
}

/// Number of objects per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(from = "BTreeMap<DebrisClass, u64>")]
pub struct ClassCounts(pub [u64; 7]);

impl ClassCounts {
    pub fn get(&self, class: DebrisClass) -> u64 {
        self.0[class.index()]
    }

    pub fn add(&mut self, class: DebrisClass) {
        self.0[class.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    /// Σ count · weight, in kilograms.
    pub fn mass_kg(&self, weights: &ClassWeights) -> f64 {
        DebrisClass::ALL
            .iter()
            .map(|c| self.get(*c) as f64 * weights.get(*c))
            .sum()
    }
}

impl From<BTreeMap<DebrisClass, u64>> for ClassCounts {
    fn from(m: BTreeMap<DebrisClass, u64>) -> Self {
        let mut c = ClassCounts::default();
        for (k, v) in m {
            c.0[k.index()] = v;
        }
        c
    }
}

impl Serialize for ClassCounts {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m: BTreeMap<&str, u64> = DebrisClass::ALL.iter().map(|c| (c.name(), self.get(*c))).collect();
        m.serialize(s)
    }
}

pub fn class_counts(records: &[ExportRecord]) -> ClassCounts {
    let mut c = ClassCounts::default();
    for r in records {
        c.add(r.class);
    }
    c
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityCell {
    pub col: i64,
    pub row: i64,
    pub counts: ClassCounts,
    pub kg_per_ha: f64,
}

/// Occupied cells of a world-anchored square grid. Cell `(col, row)` covers
/// `[col·s, (col+1)·s) × [row·s, (row+1)·s)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub cell_size: f64,
    pub cells: Vec<DensityCell>,
    /// Detections skipped for lack of a world position.
    pub skipped: usize,
}

impl DensityGrid {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, col: i64, row: i64) -> Option<&DensityCell> {
        self.cells.iter().find(|c| c.col == col && c.row == row)
    }

    pub fn cell_area(&self) -> f64 {
        self.cell_size * self.cell_size
    }

    /// `(x_min, y_min, x_max, y_max)` of a cell.
    pub fn cell_bounds(&self, col: i64, row: i64) -> (f64, f64, f64, f64) {
        let s = self.cell_size;
        (col as f64 * s, row as f64 * s, (col + 1) as f64 * s, (row + 1) as f64 * s)
    }

    /// `(min_col, min_row, max_col, max_row)` over occupied cells.
    pub fn index_bounds(&self) -> Option<(i64, i64, i64, i64)> {
        let first = self.cells.first()?;
        Some(self.cells.iter().fold(
            (first.col, first.row, first.col, first.row),
            |(a, b, c, d), cell| (a.min(cell.col), b.min(cell.row), c.max(cell.col), d.max(cell.row)),
        ))
    }

    pub fn totals(&self) -> ClassCounts {
        let mut t = ClassCounts::default();
        for c in &self.cells {
            for (a, b) in t.0.iter_mut().zip(c.counts.0) {
                *a += b;
            }
        }
        t
    }
}

pub fn cell_index(x: f64, y: f64, cell_size: f64) -> (i64, i64) {
    ((x / cell_size).floor() as i64, (y / cell_size).floor() as i64)
}

/// Bins exported detections by world center and converts counts to kg/ha.
pub fn aggregate_density(
    records: &[ExportRecord],
    weights: &ClassWeights,
    cell_size: f64,
) -> Result<DensityGrid> {
    if !(cell_size > 0.0) || !cell_size.is_finite() {
        return Err(Error::Precondition(format!("cell size {cell_size} must be positive")));
    }
    if let Some(r) = records.iter().find(|r| r.state == ReviewState::Rejected) {
        return Err(Error::Precondition(format!("detection {} is rejected", r.id)));
    }
    let mut bins: BTreeMap<(i64, i64), ClassCounts> = BTreeMap::new();
    let mut skipped = 0;
    for r in records {
        match r.footprint {
            Some(fp) if fp.x.is_finite() && fp.y.is_finite() => {
                let (col, row) = cell_index(fp.x, fp.y, cell_size);
                bins.entry((row, col)).or_default().add(r.class);
            }
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} detections without a world position left out of the density grid");
    }
    let area = cell_size * cell_size;
    let cells = bins
        .into_iter()
        .map(|((row, col), counts)| DensityCell {
            col,
            row,
            kg_per_ha: counts.mass_kg(weights) * SQUARE_METERS_PER_HECTARE / area,
            counts,
        })
        .collect();
    Ok(DensityGrid {
        cell_size,
        cells,
        skipped,
    })
}

/// A spectral-match detection placed in the world frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoSpectralDetection {
    pub reference: String,
    pub x: f64,
    pub y: f64,
    pub line_min: usize,
    pub line_max: usize,
    pub sample_min: usize,
    pub sample_max: usize,
    pub pixel_count: usize,
    pub mean_angle: f64,
}

fn lon_lat(origin: GeoOrigin, x: f64, y: f64) -> Value {
    let (lat, lon) = to_geodetic(origin, x, y);
    json!([lon, lat])
}

fn feature(geometry: Value, properties: Map<String, Value>) -> Value {
    json!({"type": "Feature", "geometry": geometry, "properties": properties})
}

fn props(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

/// RFC 7946 feature collection: one Point per detection with a world
/// position, one Polygon per occupied grid cell, and one Point per spectral
/// match. Coordinates are `[lon, lat]`.
pub fn export_geojson(
    records: &[ExportRecord],
    grid: Option<&DensityGrid>,
    spectral: &[GeoSpectralDetection],
    origin: GeoOrigin,
) -> Value {
    let mut features = Vec::new();
    for r in records {
        let Some(fp) = r.footprint else { continue };
        features.push(feature(
            json!({"type": "Point", "coordinates": lon_lat(origin, fp.x, fp.y)}),
            props(json!({
                "kind": "detection",
                "id": r.id,
                "class": r.class,
                "detector_class": r.detector_class,
                "state": r.state,
                "scores": r.scores,
                "frame_id": r.frame_id,
                "t": r.t,
                "radius_m": fp.radius,
            })),
        ));
    }
    if let Some(grid) = grid {
        for c in &grid.cells {
            let (x0, y0, x1, y1) = grid.cell_bounds(c.col, c.row);
            let ring: Vec<Value> = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
                .into_iter()
                .map(|(x, y)| lon_lat(origin, x, y))
                .collect();
            features.push(feature(
                json!({"type": "Polygon", "coordinates": [ring]}),
                props(json!({
                    "kind": "cell",
                    "col": c.col,
                    "row": c.row,
                    "cell_size_m": grid.cell_size,
                    "kg_per_ha": c.kg_per_ha,
                    "counts": c.counts,
                    "total": c.counts.total(),
                })),
            ));
        }
    }
    for s in spectral {
        features.push(feature(
            json!({"type": "Point", "coordinates": lon_lat(origin, s.x, s.y)}),
            props(json!({
                "kind": "spectral_match",
                "reference": s.reference,
                "pixel_count": s.pixel_count,
                "mean_angle_rad": s.mean_angle,
                "lines": [s.line_min, s.line_max],
                "samples": [s.sample_min, s.sample_max],
            })),
        ));
    }
    json!({"type": "FeatureCollection", "features": features})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detfuse::{ClassScores, Footprint};
    use crate::nav::from_geodetic;

    fn rec(id: u32, class: DebrisClass, x: f64, y: f64) -> ExportRecord {
        ExportRecord {
            id,
            frame_id: "0".into(),
            t: 0.0,
            bbox: [0.0, 0.0, 1.0, 1.0],
            class,
            detector_class: class,
            state: ReviewState::Verified,
            scores: ClassScores::default(),
            footprint: Some(Footprint { x, y, radius: 0.1 }),
        }
    }

    #[test]
    fn empty_input_gives_empty_grid() {
        let g = aggregate_density(&[], &ClassWeights::default(), 10.0).unwrap();
        assert!(g.is_empty());
        assert_eq!(class_counts(&[]), ClassCounts::default());
    }

    #[test]
    fn one_tire_in_ten_meter_cell() {
        let g = aggregate_density(&[rec(1, DebrisClass::Tire, 3.0, 4.0)], &ClassWeights::default(), 10.0).unwrap();
        assert_eq!(g.cells.len(), 1);
        assert_eq!(g.cells[0].kg_per_ha, 800.0);
    }

    #[test]
    fn boundary_goes_to_upper_cell() {
        let g = aggregate_density(&[rec(1, DebrisClass::Tire, 10.0, -10.0)], &ClassWeights::default(), 10.0).unwrap();
        assert_eq!((g.cells[0].col, g.cells[0].row), (1, -1));
        assert_eq!(cell_index(-0.0, 9.999, 10.0), (0, 0));
        assert_eq!(cell_index(-1e-9, 0.0, 10.0), (-1, 0));
    }

    #[test]
    fn starfish_counted_not_weighed() {
        let g = aggregate_density(&[rec(1, DebrisClass::Starfish, 1.0, 1.0)], &ClassWeights::default(), 10.0).unwrap();
        assert_eq!(g.cells[0].counts.get(DebrisClass::Starfish), 1);
        assert_eq!(g.cells[0].kg_per_ha, 0.0);
    }

    #[test]
    fn missing_footprint_is_skipped() {
        let mut r = rec(1, DebrisClass::Tire, 0.0, 0.0);
        r.footprint = None;
        let g = aggregate_density(&[r, rec(2, DebrisClass::Metal, 0.0, 0.0)], &ClassWeights::default(), 10.0).unwrap();
        assert_eq!(g.skipped, 1);
        assert_eq!(g.totals().total(), 1);
    }

    #[test]
    fn rejected_input_and_bad_cell_are_errors() {
        let mut r = rec(1, DebrisClass::Tire, 0.0, 0.0);
        r.state = ReviewState::Rejected;
        assert!(aggregate_density(&[r], &ClassWeights::default(), 10.0).is_err());
        assert!(aggregate_density(&[], &ClassWeights::default(), 0.0).is_err());
    }

    #[test]
    fn counts_match_brute_force() {
        let classes = [
            DebrisClass::Bottle,
            DebrisClass::Tire,
            DebrisClass::Bottle,
            DebrisClass::Tire,
            DebrisClass::Bottle,
        ];
        let recs: Vec<_> = classes.iter().enumerate().map(|(i, c)| rec(i as u32, *c, 0.0, 0.0)).collect();
        let c = class_counts(&recs);
        assert_eq!(c.get(DebrisClass::Bottle), 3);
        assert_eq!(c.get(DebrisClass::Tire), 2);
        assert_eq!(c.total(), 5);
        for class in DebrisClass::ALL {
            assert_eq!(c.get(class), classes.iter().filter(|k| **k == class).count() as u64);
        }
    }

    #[test]
    fn weights_file_round_trip() {
        let w = ClassWeights::default();
        assert_eq!(ClassWeights::parse(&w.render()).unwrap(), w);
        assert!(ClassWeights::parse("class,kg\nbottle,1\n").is_err());
        let mut text = w.render();
        text.push_str("tire,3\n");
        assert!(ClassWeights::parse(&text).is_err());
    }

    #[test]
    fn detection_at_origin_is_origin_point() {
        let origin = GeoOrigin { lat: 59.9, lon: 10.7 };
        let doc = export_geojson(&[rec(1, DebrisClass::Bottle, 0.0, 0.0)], None, &[], origin);
        let c = &doc["features"][0]["geometry"]["coordinates"];
        assert_eq!(c[0].as_f64().unwrap(), 10.7);
        assert_eq!(c[1].as_f64().unwrap(), 59.9);
    }

    #[test]
    fn geojson_parses_and_round_trips() {
        let origin = GeoOrigin { lat: 59.9, lon: 10.7 };
        let recs = vec![
            rec(1, DebrisClass::Bottle, 3.5, -2.0),
            rec(2, DebrisClass::Tire, 25.0, 14.0),
            rec(3, DebrisClass::Tire, 26.0, 14.0),
        ];
        let grid = aggregate_density(&recs, &ClassWeights::default(), 10.0).unwrap();
        let doc = export_geojson(&recs, Some(&grid), &[], origin);
        let text = serde_json::to_string(&doc).unwrap();
        let parsed: geojson::GeoJson = text.parse().unwrap();
        let geojson::GeoJson::FeatureCollection(fc) = parsed else { panic!("not a collection") };
        assert_eq!(fc.features.len(), recs.len() + grid.cells.len());
        for (f, r) in fc.features.iter().zip(&recs) {
            let Some(geojson::Value::Point(p)) = f.geometry.as_ref().map(|g| &g.value) else {
                panic!("expected point")
            };
            let fp = r.footprint.unwrap();
            let (lat, lon) = to_geodetic(origin, fp.x, fp.y);
            assert!((p[0] - lon).abs() < 1e-9 && (p[1] - lat).abs() < 1e-9);
            let (x, y) = from_geodetic(origin, p[1], p[0]);
            assert!((x - fp.x).abs() < 1e-6 && (y - fp.y).abs() < 1e-6);
        }
    }
}
