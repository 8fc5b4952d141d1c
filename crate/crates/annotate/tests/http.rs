mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use chickface::parallel::Execution;
use chickface_annotate::export::read_bundle;
use chickface_annotate::http::{router, AppState, TaskView};
use chickface_annotate::*;
use common::*;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn parse(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn api_round_trip() {
    let fx = Fixture::new(4, 8);
    let models = tempfile::tempdir().unwrap();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html></html>").unwrap();
    let state = AppState {
        service: Arc::new(fx.service()),
        advance: fx.advance_config(models.path()),
        detector: Arc::new(detector()),
        detector_cfg: detector_cfg(),
        exec: Execution::Parallel,
        ui_dir: Some(ui.path().to_path_buf()),
    };
    let app = router(state);
    let ids = fx.frame_ids();

    let seeds: Vec<ManualAnnotation> = ids[..4].iter().map(|f| fx.seed(f)).collect();
    let (s, b) = call(&app, "POST", "/api/rounds/seed", Some(json!({ "annotations": seeds }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse(&b)["round"]["counts"]["seeded"], 4);

    let (s, b) = call(&app, "POST", "/api/rounds/propose", Some(json!({ "frame_ids": [ids[4]] }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["code"], "bad_request");

    let (s, b) = call(&app, "POST", "/api/rounds/advance", None).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    assert_eq!(parse(&b)["outcome"], "advanced");
    let (_, b) = call(&app, "POST", "/api/rounds/advance", None).await;
    assert_eq!(parse(&b)["outcome"], "no_new_data");

    let (s, _) = call(&app, "POST", "/api/rounds/propose", Some(json!({ "frame_ids": [ids[4], ids[5]] }))).await;
    assert_eq!(s, StatusCode::OK);

    let (s, b) = call(&app, "GET", "/api/tasks/next?editor=ana", None).await;
    assert_eq!(s, StatusCode::OK);
    let view: TaskView = serde_json::from_slice(&b).unwrap();
    assert_eq!(view.task.frame_id, ids[4]);
    let (s, png) = call(&app, "GET", &view.image_url, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");

    let task = view.task;
    let mut c = Correction {
        revised_box: task.draft_box,
        revised_keypoints: task.draft_keypoints.map(|k| nudge(&k)),
        quality: SubmitQuality::Ok,
        version: task.version,
        editor: Some("ana".into()),
        gender_confirmation: None,
    };
    let uri = format!("/api/tasks/{}/correction", task.task_id);
    let (s, b) = call(&app, "POST", &uri, Some(serde_json::to_value(&c).unwrap())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse(&b)["status"], "revised");

    let (s, b) = call(&app, "POST", &uri, Some(serde_json::to_value(&c).unwrap())).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(parse(&b)["code"], "version_conflict");

    c.version += 1;
    c.revised_box = Some(chickface::geometry::BoundingBox { x: -5.0, y: 0.0, w: 10.0, h: 10.0 });
    let (s, b) = call(&app, "POST", &uri, Some(serde_json::to_value(&c).unwrap())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["code"], "invalid_geometry");

    let seed_task = AnnotationTask::task_id_for(&ids[0]);
    let (s, b) = call(&app, "GET", &format!("/api/tasks/{seed_task}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let seeded: TaskView = serde_json::from_slice(&b).unwrap();
    let accept = Correction { version: seeded.task.version, revised_box: seeded.task.revised_box, revised_keypoints: seeded.task.revised_keypoints, ..c.clone() };
    let (s, b) = call(&app, "POST", &format!("/api/tasks/{seed_task}/correction"), Some(serde_json::to_value(&accept).unwrap())).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(parse(&b)["code"], "illegal_transition");

    let (s, b) = call(&app, "GET", "/api/tasks/task-nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(parse(&b)["code"], "not_found");

    let (s, b) = call(&app, "GET", "/api/rounds", None).await;
    assert_eq!(s, StatusCode::OK);
    let rounds: Vec<AnnotationRound> = serde_json::from_slice(&b).unwrap();
    assert_eq!(rounds.len(), 2);
    assert_eq!(rounds[1].counts.revised, 1);

    let (s, zip_a) = call(&app, "GET", "/api/export", None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, zip_b) = call(&app, "GET", "/api/export", None).await;
    assert_eq!(zip_a, zip_b);
    assert_eq!(read_bundle(&zip_a).unwrap().iter().filter(|(n, _)| n.starts_with("labels/")).count(), 5);
    let (_, zip_0) = call(&app, "GET", "/api/export?rounds=0", None).await;
    assert_eq!(read_bundle(&zip_0).unwrap().iter().filter(|(n, _)| n.starts_with("labels/")).count(), 4);
    let (s, _) = call(&app, "GET", "/api/export?rounds=x", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, b) = call(&app, "GET", "/openapi.json", None).await;
    assert_eq!(s, StatusCode::OK);
    let doc = parse(&b);
    for path in ["/api/rounds", "/api/rounds/seed", "/api/tasks/next", "/api/tasks/{id}", "/api/tasks/{id}/correction", "/api/rounds/advance", "/api/export"] {
        assert!(doc["paths"].get(path).is_some(), "{path}");
    }

    let (s, b) = call(&app, "GET", "/", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, b"<html></html>");
    let (s, _) = call(&app, "GET", "/../Cargo.toml", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
