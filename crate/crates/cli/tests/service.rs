mod common;

use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use common::Workspace;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sketchguide_cli::commands::Run;
use sketchguide_cli::config::RunConfig;
use sketchguide_cli::jobs::{JobInput, JobKind, JobStatus, JobStore, SketchRequest};
use sketchguide_cli::service;
use sketchguide_cli::strokes::{rasterize, Stroke};
use tower::ServiceExt;

fn app(ws: &Workspace) -> Router {
    let cfg = RunConfig::load(&ws.config()).unwrap();
    service::start(Run::start(cfg, "serve").unwrap()).unwrap().0
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn post_raw(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let req = Request::builder()
        .method("POST")
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_done(app: &Router, id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, v) = call(app, "GET", &format!("/job/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        match v["status"].as_str().unwrap() {
            "done" => return v,
            "failed" => panic!("job {id} failed: {v}"),
            _ => {}
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {id} timed out");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

fn images(v: &Value) -> Vec<Vec<f64>> {
    v["images"]
        .as_array()
        .unwrap()
        .iter()
        .map(|im| im.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

fn drawn_square() -> Vec<Stroke> {
    vec![Stroke {
        points: vec![[8.0, 8.0], [24.0, 8.0], [24.0, 24.0], [8.0, 24.0], [8.0, 8.0]],
    }]
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_classes_and_rejections() {
    let ws = Workspace::new();
    ws.train();
    let app = app(&ws);
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}));

    let (_, v) = call(&app, "GET", "/classes", None).await;
    let names: Vec<&str> = v["classes"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["ellipse", "rectangle", "triangle", "annulus"]);

    for (body, needle) in [
        (json!({"raster": vec![0.0; 1000]}), "1024"),
        (json!({"raster": vec![2.0; 1024]}), "outside"),
        (json!({"raster": vec![0.0; 1024], "target_class": 7}), "target_class"),
        (json!({"raster": vec![0.0; 1024], "lambda": 1.5}), "lambda"),
        (json!({"raster": vec![0.0; 1024], "guidance_scale": -2.0}), "guidance_scale"),
        (json!({"raster": vec![0.0; 1024], "colour": "red"}), "unknown field"),
        (json!({"pixels": []}), "raster"),
    ] {
        let (s, v) = call(&app, "POST", "/sketch", Some(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST);
        let reason = v["error"].as_str().unwrap();
        assert!(reason.contains(needle), "`{reason}` lacks `{needle}`");
    }
    let (s, v) = post_raw(&app, "/sketch", "{not json").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());

    let (s, _) = call(&app, "GET", "/job/j999999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    for body in [
        json!({"a": "j999999/0", "b": "j999999/0", "steps": 4}),
        json!({"a": "nonsense", "b": "j1/0", "steps": 4}),
        json!({"a": "j000001/0", "b": "j000001/0", "steps": 1}),
    ] {
        let (s, v) = call(&app, "POST", "/interpolate", Some(body)).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sketch_jobs_complete_and_interpolate() {
    let ws = Workspace::new();
    ws.train();
    let app = app(&ws);

    // degenerate all-zero sketch is accepted
    let (s, v) = call(&app, "POST", "/sketch", Some(json!({"raster": vec![0.0; 1024]}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let zero_id = v["id"].as_str().unwrap().to_string();

    // the same drawing submitted under two classes gives two jobs on one raster
    let raster = rasterize(&drawn_square());
    let mut ids = Vec::new();
    for class in [1, 3] {
        let body = json!({"raster": raster, "target_class": class, "lambda": 0.5, "guidance_scale": 1.0});
        let (s, v) = call(&app, "POST", "/sketch", Some(body)).await;
        assert_eq!(s, StatusCode::ACCEPTED);
        assert_eq!(v["status"], "queued");
        ids.push(v["id"].as_str().unwrap().to_string());
    }
    assert_ne!(ids[0], ids[1]);

    let zero = wait_done(&app, &zero_id).await;
    let a = wait_done(&app, &ids[0]).await;
    let b = wait_done(&app, &ids[1]).await;
    for job in [&zero, &a, &b] {
        let imgs = images(job);
        assert_eq!(imgs.len(), 2);
        assert!(imgs.iter().all(|im| im.len() == 1024 && im.iter().all(|v| v.is_finite())));
        assert_eq!(job["latents"].as_array().unwrap().len(), 2);
    }
    assert_eq!((a["target_class"].as_u64(), b["target_class"].as_u64()), (Some(1), Some(3)));
    let store_dir = ws.path("run");
    let (store, _) = JobStore::open(&store_dir).unwrap();
    for id in &ids {
        match store.get(id).unwrap().input {
            JobInput::Sketch(r) => assert_eq!(r.raster, raster),
            other => panic!("unexpected input {other:?}"),
        }
    }
    drop(store);

    // strip endpoints equal the source thumbnails, across jobs and within one
    let (la, lb) = (format!("{}/0", ids[0]), format!("{}/1", ids[1]));
    let (s, strip) = call(&app, "POST", "/interpolate", Some(json!({"a": la, "b": lb, "steps": 5}))).await;
    assert_eq!(s, StatusCode::OK, "{strip}");
    assert_eq!(strip["kind"], "interpolate");
    assert_eq!(strip["status"], "done");
    let frames = images(&strip);
    assert_eq!(frames.len(), 5);
    assert_eq!(frames[0], images(&a)[0]);
    assert_eq!(frames[4], images(&b)[1]);
    assert_ne!(frames[2], frames[0]);

    let (s, strip) = call(
        &app,
        "POST",
        "/interpolate",
        Some(json!({"a": format!("{}/1", ids[0]), "b": format!("{}/0", ids[0]), "steps": 3})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let frames = images(&strip);
    assert_eq!(frames[0], images(&a)[1]);
    assert_eq!(frames[2], images(&a)[0]);
    let (_, again) = call(&app, "GET", &format!("/job/{}", strip["id"].as_str().unwrap()), None).await;
    assert_eq!(images(&again), frames);

    let (s, _) = call(&app, "POST", "/interpolate", Some(json!({"a": format!("{}/9", ids[0]), "b": la, "steps": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_requeues_and_fails_interrupted() {
    let ws = Workspace::new();
    ws.train();
    let cfg = RunConfig::load(&ws.config()).unwrap();
    let req = || {
        JobInput::Sketch(SketchRequest {
            raster: vec![0.25; 1024],
            target_class: None,
            lambda: None,
            guidance_scale: None,
        })
    };
    let (running, queued) = {
        // state as left by a service killed mid-job
        let (store, _) = JobStore::open(&cfg.run_dir).unwrap();
        let running = store.create(JobKind::Finetune, req(), &cfg.hash()).unwrap().id;
        let queued = store.create(JobKind::Finetune, req(), &cfg.hash()).unwrap().id;
        store.update(&running, |j| j.status = JobStatus::Running).unwrap();
        (running, queued)
    };
    let app = app(&ws);
    let (_, v) = call(&app, "GET", &format!("/job/{running}"), None).await;
    assert_eq!(v["status"], "failed");
    assert!(v["error"].as_str().unwrap().contains("restart"));
    assert!(v.get("images").is_none());
    let done = wait_done(&app, &queued).await;
    assert_eq!(images(&done).len(), 2);
    assert!(done["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn drawn_strokes_rasterize_to_golden() {
    let raster = rasterize(&drawn_square());
    let golden = include_str!("golden/square_strokes.txt");
    let want: Vec<f64> = golden.split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(want.len(), 1024);
    assert_eq!(raster, want);
    assert_eq!(rasterize(&drawn_square()), raster);
    assert!(raster.iter().all(|v| (0.0..=1.0).contains(v)));
}
