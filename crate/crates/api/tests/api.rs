use std::path::Path;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::http::{Request, StatusCode};
use axum::Router;
use benthos_api::{field_view, router, AppState, FieldView, MutationResponse, SessionView};
use benthos_core::detfuse::{DebrisClass, FeatureView};
use benthos_core::pipeline::{run_survey, SurveyParams, SurveyPaths};
use benthos_core::review::{export_session_dir, ExportRecord, ReviewSession, ReviewState, SessionInit, EVENTS_FILE};
use benthos_core::synth::{generate_scene, SceneSpec, FRAMES_DIR};
use http_body_util::BodyExt;
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    session_dir: std::path::PathBuf,
    state: Arc<AppState>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    generate_scene(&scene, &SceneSpec::default()).unwrap();
    let out = run_survey(&SurveyPaths::scene(&scene), &SurveyParams::default()).unwrap();
    let session_dir = dir.path().join("session");
    ReviewSession::create(
        &session_dir,
        SessionInit {
            detections: out.fusion.detections,
            frames_dir: Some(scene.join(FRAMES_DIR)),
        },
    )
    .unwrap();
    let state = AppState::open(&session_dir).unwrap();
    Fixture {
        _dir: dir,
        session_dir,
        state,
    }
}

fn app(f: &Fixture) -> Router {
    router(f.state.clone(), None)
}

async fn send(app: Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn session(f: &Fixture) -> SessionView {
    let (status, body) = send(app(f), "GET", "/api/session", None).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

fn event_lines(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join(EVENTS_FILE)).unwrap().lines().count()
}

#[tokio::test]
async fn fresh_session_is_unverified() {
    let f = fixture();
    let s = session(&f).await;
    assert_eq!(s.detections.len(), 6);
    assert!(s.detections.iter().all(|d| d.state == ReviewState::Unverified));
    assert_eq!(s.classes.len(), 7);
    assert_eq!(s.audit_cursor, 0);
    assert_eq!(s.detections[0].thumbnail, "/api/thumb/1");
}

#[tokio::test]
async fn field_views_follow_feature_slices() {
    let f = fixture();
    for view in ["pattern", "spectrum", "probability", "all"] {
        let (status, body) = send(app(&f), "GET", &format!("/api/field?view={view}"), None).await;
        assert_eq!(status, StatusCode::OK, "{view}");
        let field: FieldView = serde_json::from_slice(&body).unwrap();
        let parsed: FeatureView = view.parse().unwrap();
        let expected = field_view(&ReviewSession::open(&f.session_dir).unwrap(), parsed).unwrap();
        assert_eq!(field, expected);
        assert!(field.points.iter().all(|p| p.x.abs() <= 1.0 && p.y.abs() <= 1.0));
    }
    let (status, _) = send(app(&f), "GET", "/api/field?view=smell", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn thumbnails_are_cropped_and_cached() {
    let f = fixture();
    let (status, body) = send(app(&f), "GET", "/api/thumb/1", None).await;
    assert_eq!(status, StatusCode::OK);
    let img = image::load_from_memory_with_format(&body, image::ImageFormat::Png).unwrap();
    let det = ReviewSession::open(&f.session_dir).unwrap().detection(1).cloned().unwrap();
    assert_eq!(img.width() as f64, det.raw.bbox[2].ceil());
    assert_eq!(img.height() as f64, det.raw.bbox[3].ceil());
    assert!(f.session_dir.join("thumbs/1.png").exists());
    let (status, again) = send(app(&f), "GET", "/api/thumb/1", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again, body);

    assert_eq!(send(app(&f), "GET", "/api/thumb/99", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(app(&f), "GET", "/api/thumb/abc", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_id_in_batch_is_404_and_changes_nothing() {
    let f = fixture();
    let before = session(&f).await;
    let (status, _) = send(app(&f), "POST", "/api/reclassify", Some(r#"{"ids":[1,99],"class":"tire"}"#)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(session(&f).await, before);
    assert_eq!(event_lines(&f.session_dir), 0);
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let f = fixture();
    for (uri, body) in [
        ("/api/reclassify", "not json"),
        ("/api/reclassify", r#"{"ids":[1]}"#),
        ("/api/reclassify", r#"{"ids":[1],"class":"whale"}"#),
        ("/api/reject", r#"{"ids":"1"}"#),
        ("/api/reject", r#"{"ids":[]}"#),
        ("/api/restore", r#"{"ids":[1],"extra":true}"#),
    ] {
        let (status, _) = send(app(&f), "POST", uri, Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri} {body}");
    }
    assert_eq!(event_lines(&f.session_dir), 0);
}

#[tokio::test]
async fn concurrent_write_is_409() {
    let f = fixture();
    let guard = f.state.try_begin_write().unwrap();
    let (status, _) = send(app(&f), "POST", "/api/reject", Some(r#"{"ids":[1]}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    // reads still work during a write
    assert_eq!(send(app(&f), "GET", "/api/session", None).await.0, StatusCode::OK);
    drop(guard);
    let (status, _) = send(app(&f), "POST", "/api/reject", Some(r#"{"ids":[1]}"#)).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn rejected_detection_cannot_be_reclassified() {
    let f = fixture();
    send(app(&f), "POST", "/api/reject", Some(r#"{"ids":[2]}"#)).await;
    let (status, _) = send(app(&f), "POST", "/api/reclassify", Some(r#"{"ids":[2],"class":"metal"}"#)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn mutations_log_one_event_each_and_export_matches_replay() {
    let f = fixture();
    let steps = [
        ("/api/reclassify", r#"{"ids":[1,3],"class":"tire","actor":"ana"}"#),
        ("/api/verify", r#"{"ids":[2]}"#),
        ("/api/reject", r#"{"ids":[4,5]}"#),
        ("/api/restore", r#"{"ids":[5]}"#),
        ("/api/reclassify", r#"{"ids":[6],"class":"starfish"}"#),
    ];
    for (i, (uri, body)) in steps.iter().enumerate() {
        let (status, resp) = send(app(&f), "POST", uri, Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        let m: MutationResponse = serde_json::from_slice(&resp).unwrap();
        assert_eq!(m.event.seq, i as u64 + 1);
        assert_eq!(m.audit_cursor, i + 1);
        assert_eq!(event_lines(&f.session_dir), i + 1);
    }
    let (status, body) = send(app(&f), "GET", "/api/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let export: Vec<ExportRecord> = serde_json::from_slice(&body).unwrap();
    assert_eq!(export, export_session_dir(&f.session_dir).unwrap());
    assert_eq!(export.len(), 5);
    assert_eq!(export[0].class, DebrisClass::Tire);
    assert!(export.iter().all(|r| r.id != 4));
    let s = session(&f).await;
    assert_eq!(s.rejected, 1);
    assert_eq!(s.audit_cursor, 5);
}

#[tokio::test]
async fn cors_allows_only_localhost() {
    let f = fixture();
    for (origin, allowed) in [("http://localhost:5173", true), ("http://example.org", false)] {
        let req = Request::builder()
            .uri("/api/session")
            .header("origin", origin)
            .body(Body::empty())
            .unwrap();
        let resp = app(&f).oneshot(req).await.unwrap();
        assert_eq!(resp.headers().contains_key("access-control-allow-origin"), allowed, "{origin}");
    }
}

#[tokio::test]
async fn static_assets_are_served_when_configured() {
    let f = fixture();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html></html>").unwrap();
    let app = router(f.state.clone(), Some(ui.path()));
    let (status, body) = send(app.clone(), "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&body[..], b"<html></html>");
    assert_eq!(send(app, "GET", "/api/session", None).await.0, StatusCode::OK);
}
