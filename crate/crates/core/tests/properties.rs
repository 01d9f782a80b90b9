use benthos_core::density::{aggregate_density, ClassWeights};
use benthos_core::detfuse::{
    embed_2d, extract_pattern_features, ingest_detections, ClassScores, DebrisClass, Footprint,
};
use benthos_core::hypercube::{load_cube, save_cube, CubeKind, HyperCube, WavelengthGrid};
use benthos_core::mosaic::FramePlacement;
use benthos_core::nav::{heading_delta, normalize_heading, pose_at, NavSample, NavTrack};
use benthos_core::review::{ExportRecord, ReviewState};
use benthos_core::specmatch::{sam_map, ReferenceSpectrum};
use image::{Rgb, RgbImage};
use proptest::prelude::*;

fn grid(bands: usize) -> WavelengthGrid<f64> {
    WavelengthGrid::new((0..bands).map(|i| 400.0 + 25.0 * i as f64).collect()).unwrap()
}

fn record(id: u32, class: DebrisClass, x: f64, y: f64) -> ExportRecord {
    ExportRecord {
        id,
        frame_id: String::new(),
        t: 0.0,
        bbox: [0.0, 0.0, 1.0, 1.0],
        class,
        detector_class: class,
        state: ReviewState::Unverified,
        scores: ClassScores::default(),
        footprint: Some(Footprint { x, y, radius: 0.0 }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn f32_cube_survives_save_and_load(
        lines in 1usize..5,
        samples in 1usize..5,
        bands in 3usize..7,
        seed in any::<u64>(),
    ) {
        let n = lines * samples * bands;
        let data: Vec<f32> = (0..n)
            .map(|i| ((seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) >> 40) as f32) / 16_777_216.0 * 3.0)
            .collect();
        let times: Vec<f64> = (0..lines).map(|l| l as f64 * 0.1).collect();
        let cube = HyperCube::new(lines, samples, grid(bands).cast(), data, times, CubeKind::Reflectance).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hdr");
        save_cube(&cube, &path).unwrap();
        let back: HyperCube<f32> = load_cube(&path).unwrap();
        prop_assert_eq!(back, cube);
    }

    #[test]
    fn raising_threshold_keeps_a_subset(
        scores in prop::collection::vec(0.0f64..=1.0, 1..30),
        lo in 0.0f64..=1.0,
        hi in 0.0f64..=1.0,
    ) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let text: String = scores
            .iter()
            .enumerate()
            .map(|(i, s)| format!("{{\"frame_id\":\"{i}\",\"t\":0,\"bbox\":[0,0,1,1],\"scores\":{{\"metal\":{s}}}}}\n"))
            .collect();
        let low = ingest_detections(&text, lo).unwrap();
        let high = ingest_detections(&text, hi).unwrap();
        let low_ids: Vec<&str> = low.kept.iter().map(|d| d.frame_id.as_str()).collect();
        prop_assert!(high.kept.iter().all(|d| low_ids.contains(&d.frame_id.as_str())));
    }

    #[test]
    fn argmax_ignores_common_positive_scale(
        scores in prop::array::uniform7(0.0f64..=1.0),
        k in 0.01f64..1.0,
    ) {
        let s = ClassScores(scores);
        prop_assert_eq!(ClassScores(scores.map(|v| v * k)).argmax(), s.argmax());
    }

    #[test]
    fn pattern_ignores_whole_pixel_shifts(
        pixels in prop::collection::vec(any::<[u8; 3]>(), 30),
        ox in 0u32..10,
        oy in 0u32..10,
    ) {
        let content = RgbImage::from_fn(6, 5, |x, y| Rgb(pixels[(y * 6 + x) as usize]));
        let mut canvas = RgbImage::from_pixel(20, 20, Rgb([1, 2, 3]));
        image::imageops::replace(&mut canvas, &content, ox as i64, oy as i64);
        let patch = image::imageops::crop_imm(&canvas, ox, oy, 6, 5).to_image();
        prop_assert_eq!(extract_pattern_features(&patch), extract_pattern_features(&content));
    }

    #[test]
    fn spectral_angle_is_scale_invariant(
        px in prop::collection::vec(0.01f64..1.0, 6),
        r in prop::collection::vec(0.01f64..1.0, 6),
        alpha in 0.1f64..3.0,
    ) {
        let g = grid(6);
        let reference = ReferenceSpectrum::new("r", g.clone(), r).unwrap();
        let a = HyperCube::new(1, 1, g.clone(), px.clone(), vec![0.0], CubeKind::Reflectance).unwrap();
        let b = HyperCube::new(1, 1, g, px.iter().map(|v| v * alpha).collect(), vec![0.0], CubeKind::Reflectance).unwrap();
        let (ma, mb) = (sam_map(&a, &reference, None).unwrap(), sam_map(&b, &reference, None).unwrap());
        prop_assert!((ma.get(0, 0) - mb.get(0, 0)).abs() < 1e-12);
        prop_assert!(ma.get(0, 0) >= 0.0 && ma.get(0, 0) <= std::f64::consts::FRAC_PI_2);
    }

    #[test]
    fn heading_interpolation_takes_short_way(h0 in 0.0f64..360.0, h1 in 0.0f64..360.0) {
        let track = NavTrack::new(
            vec![NavSample::level(0.0, 0.0, 0.0, h0, 2.0), NavSample::level(1.0, 0.0, 0.0, h1, 2.0)],
            None,
        )
        .unwrap();
        let mid = pose_at(&track, 0.5).unwrap().heading;
        let expected = normalize_heading(h0 + heading_delta(h0, h1) / 2.0);
        let diff = heading_delta(expected, mid).abs();
        prop_assert!(diff < 1e-9, "mid {} expected {}", mid, expected);
        prop_assert!((0.0..360.0).contains(&mid));
    }

    #[test]
    fn placement_maps_are_inverse(
        cx in -50.0f64..50.0,
        cy in -50.0f64..50.0,
        rot in 0.0f64..360.0,
        scale in 0.001f64..0.1,
        col in 0.0f64..200.0,
        row in 0.0f64..100.0,
    ) {
        let p = FramePlacement { frame_id: "f".into(), timestamp: 0.0, center_x: cx, center_y: cy, rotation_deg: rot, scale };
        let (x, y) = p.to_world(200, 100, col, row);
        let (c, r) = p.to_source(200, 100, x, y);
        prop_assert!((c - col).abs() < 1e-8 && (r - row).abs() < 1e-8);
    }

    #[test]
    fn density_cells_account_for_every_detection(
        pts in prop::collection::vec((-400i32..400, -400i32..400, 0usize..7), 0..40),
        k in 1u32..5,
    ) {
        let recs: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y, c))| record(i as u32, DebrisClass::ALL[*c], *x as f64 / 4.0, *y as f64 / 4.0))
            .collect();
        let w = ClassWeights::default();
        let g = aggregate_density(&recs, &w, 10.0).unwrap();
        prop_assert_eq!(g.totals().total() as usize, recs.len());
        let scaled = aggregate_density(&recs, &w.scaled(k as f64), 10.0).unwrap();
        for (a, b) in g.cells.iter().zip(&scaled.cells) {
            prop_assert!((b.kg_per_ha - k as f64 * a.kg_per_ha).abs() <= 1e-9 * b.kg_per_ha.max(1.0));
        }
        let shifted: Vec<_> = recs
            .iter()
            .map(|r| {
                let fp = r.footprint.unwrap();
                record(r.id, r.class, fp.x + 10.0, fp.y)
            })
            .collect();
        let moved = aggregate_density(&shifted, &w, 10.0).unwrap();
        for (a, b) in g.cells.iter().zip(&moved.cells) {
            prop_assert_eq!((a.col + 1, a.row), (b.col, b.row));
        }
    }

    #[test]
    fn embedding_stays_in_unit_square(
        feats in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 5), 1..20),
    ) {
        let e = embed_2d(&feats).unwrap();
        prop_assert_eq!(e.points.len(), feats.len());
        prop_assert!(e.points.iter().flatten().all(|v| v.abs() <= 1.0 + 1e-12));
        prop_assert_eq!(e.degenerate, feats.len() < 3);
    }
}
