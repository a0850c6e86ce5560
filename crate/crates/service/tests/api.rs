use std::io::Cursor;
use std::time::Instant;

use axum::body::{Body, Bytes};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use dinoiser_core::denoiser::Heads;
use dinoiser_core::featurizer::DenseEncoder;
use dinoiser_core::synthetic::{scene, tiny_backbone, tiny_backbone_with, tiny_teacher, TinyVit};
use dinoiser_core::templates::TemplateSet;
use dinoiser_core::training::Checkpoint;
use dinoiser_service::rle::decode;
use dinoiser_service::{router, AppState, Health, Model, SegmentResponse, ServiceConfig, SessionCreated};
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

fn model(short_side: u32, heads: bool, teacher: bool) -> Model {
    let backbone = tiny_backbone(3, 2, short_side).unwrap();
    let ck = heads.then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Heads::init(backbone.embed_dim(), 8, 2, &mut rng).unwrap();
        Checkpoint::from_heads(h, backbone.backbone_id())
    });
    Model::new(backbone, ck, teacher.then(|| tiny_teacher(5).unwrap())).unwrap()
}

fn app_with(config: ServiceConfig, m: Model) -> (AppState, Router) {
    let state = AppState::ready(config, m);
    (state.clone(), router(state))
}

fn app() -> (AppState, Router) {
    app_with(ServiceConfig::default(), model(64, true, true))
}

fn png(w: u32, h: u32, seed: u64) -> Vec<u8> {
    let (img, _) = scene(seed, w, h);
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Bytes) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

async fn upload(app: &Router, bytes: Vec<u8>) -> (StatusCode, Bytes) {
    let req = Request::post("/v1/sessions")
        .header(header::CONTENT_TYPE, "image/png")
        .body(Body::from(bytes))
        .unwrap();
    send(app, req).await
}

async fn new_session(app: &Router) -> SessionCreated {
    let (status, body) = upload(app, png(80, 64, 1)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn segment(app: &Router, id: &str, body: Value) -> (StatusCode, Bytes) {
    let req = Request::post(format!("/v1/sessions/{id}/segment"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    send(app, req).await
}

async fn segment_ok(app: &Router, id: &str, body: Value) -> (SegmentResponse, Bytes) {
    let (status, bytes) = segment(app, id, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    (serde_json::from_slice(&bytes).unwrap(), bytes)
}

#[tokio::test]
async fn health_reports_loading_then_ok() {
    let state = AppState::loading(ServiceConfig::default());
    let app = router(state.clone());
    let (status, body) = send(&app, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "loading");
    assert_eq!(h.config_hash.len(), 64);
    let (status, _) = upload(&app, png(32, 32, 0)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let m = model(64, true, false);
    let backbone_id = m.backbone().backbone_id();
    state.set_model(m);
    let (status, body) = send(&app, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.backbone_id, Some(backbone_id));
    assert_eq!(h.checkpoint_id.unwrap().len(), 16);
    assert_eq!(h.config_hash, state.config_hash());
}

#[tokio::test]
async fn upload_examples() {
    let vit = TinyVit {
        patch_size: 16,
        ..TinyVit::default()
    };
    let backbone = tiny_backbone_with(vit, 3, 2, 448).unwrap();
    let (state, app) = app_with(ServiceConfig::default(), Model::new(backbone, None, None).unwrap());
    let a = {
        let (status, body) = upload(&app, png(448, 448, 2)).await;
        assert_eq!(status, StatusCode::CREATED);
        serde_json::from_slice::<SessionCreated>(&body).unwrap()
    };
    assert_eq!((a.grid.rows, a.grid.cols, a.grid.patch_size), (28, 28, 16));
    assert_eq!((a.width, a.height), (448, 448));
    let b = {
        let (_, body) = upload(&app, png(448, 448, 2)).await;
        serde_json::from_slice::<SessionCreated>(&body).unwrap()
    };
    assert_ne!(a.session_id, b.session_id);
    assert_eq!(state.model().unwrap().backbone_passes(), 2);
    assert_eq!(state.sessions().len(), 2);

    let (status, body) = upload(&app, b"definitely not an image".to_vec()).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE, "{}", String::from_utf8_lossy(&body));
    let truncated = png(64, 64, 3)[..60].to_vec();
    assert_eq!(upload(&app, truncated).await.0, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn oversized_upload_is_rejected() {
    let config = ServiceConfig {
        max_upload_bytes: 1000,
        ..ServiceConfig::default()
    };
    let (state, app) = app_with(config, model(64, false, false));
    let big = png(256, 256, 4);
    assert!(big.len() > 1000);
    assert_eq!(upload(&app, big).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(state.model().unwrap().backbone_passes(), 0);
}

#[tokio::test]
async fn segmenting_never_runs_the_backbone() {
    let (state, app) = app();
    let s = new_session(&app).await;
    let passes = state.model().unwrap().backbone_passes();
    assert_eq!(passes, 1);
    segment_ok(&app, &s.session_id, json!({"prompts": ["cat", "dog"]})).await;
    segment_ok(&app, &s.session_id, json!({"prompts": ["tree", "sky", "grass"], "delta": 0.5, "background": true})).await;
    segment_ok(&app, &s.session_id, json!({"prompts": ["car"], "pooling": "teacher", "gamma": 0.0})).await;
    assert_eq!(state.model().unwrap().backbone_passes(), passes);
}

#[tokio::test]
async fn responses_are_byte_identical() {
    let (_, app) = app();
    let s = new_session(&app).await;
    let body = json!({"prompts": ["cat", "sky", "grass"], "gamma": 0.3, "background": true});
    let (_, a) = segment_ok(&app, &s.session_id, body.clone()).await;
    let (_, b) = segment_ok(&app, &s.session_id, body).await;
    assert_eq!(a, b);
}

#[tokio::test]
async fn gamma_one_matches_baseline() {
    let (_, app) = app();
    let s = new_session(&app).await;
    let prompts = json!(["cat", "dog", "sky", "person"]);
    let (base, _) = segment_ok(&app, &s.session_id, json!({"prompts": prompts, "pooling": "none"})).await;
    for pooling in ["learned", "teacher"] {
        let (r, _) = segment_ok(&app, &s.session_id, json!({"prompts": prompts, "gamma": 1.0, "pooling": pooling})).await;
        assert_eq!(r.labels, base.labels, "{pooling}");
        assert_eq!(r.scores, base.scores, "{pooling}");
        assert_eq!(r.overlay_png_base64, base.overlay_png_base64, "{pooling}");
    }
}

#[tokio::test]
async fn response_contents() {
    let (_, app) = app();
    let s = new_session(&app).await;
    let (r, _) = segment_ok(&app, &s.session_id, json!({"prompts": [" cat ", "dog"], "background": true})).await;
    assert_eq!(r.prompts, vec!["cat", "dog", "background"]);
    assert!(r.background_appended);
    let labels = decode(&r.labels);
    assert_eq!(labels.len(), s.grid.rows * s.grid.cols);
    assert!(labels.iter().all(|&l| l < 3));
    let cov: f64 = r.scores.iter().map(|p| p.coverage).sum();
    assert!((cov - 1.0).abs() < 1e-12);
    for (k, p) in r.scores.iter().enumerate() {
        let share = labels.iter().filter(|&&l| l == k).count() as f64 / labels.len() as f64;
        assert_eq!(p.coverage, share);
        assert_eq!(p.color, r.palette[k]);
        assert!(p.mean_score <= p.max_score);
    }
    let png = base64::Engine::decode(&base64::engine::general_purpose::STANDARD, &r.overlay_png_base64).unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width() as usize, img.height() as usize), (s.grid.cols, s.grid.rows));

    let (r, _) = segment_ok(&app, &s.session_id, json!({"prompts": ["cat", "Background"], "background": true})).await;
    assert!(!r.background_appended);
    assert_eq!(r.prompts.len(), 2);
    let (r, _) = segment_ok(&app, &s.session_id, json!({"prompts": ["cat", "dog"], "background": true, "delta": 0.0})).await;
    assert_eq!(r.reassigned, 0);
}

#[tokio::test]
async fn delta_grows_background_monotonically() {
    let (_, app) = app();
    let s = new_session(&app).await;
    let mut prev: Option<Vec<usize>> = None;
    for delta in [0.0, 0.3, 0.6, 0.9, 0.98, 1.0] {
        let (r, _) = segment_ok(
            &app,
            &s.session_id,
            json!({"prompts": ["cat", "dog", "sky"], "background": true, "delta": delta}),
        )
        .await;
        let bg: Vec<usize> = decode(&r.labels)
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == 3)
            .map(|(i, _)| i)
            .collect();
        if let Some(p) = &prev {
            assert!(p.iter().all(|i| bg.contains(i)), "delta {delta}");
        }
        prev = Some(bg);
    }
}

#[tokio::test]
async fn segment_errors() {
    let (_, app) = app();
    let s = new_session(&app).await;
    assert_eq!(segment(&app, "nope", json!({"prompts": ["cat"]})).await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        segment(&app, &s.session_id, json!({"prompts": []})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        segment(&app, &s.session_id, json!({"prompts": ["  "]})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        segment(&app, &s.session_id, json!({"prompts": ["cat"], "gamma": 2.0})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        segment(&app, &s.session_id, json!({"prompts": ["cat"], "delta": -0.1})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        segment(&app, &s.session_id, json!({"prompt": ["cat"]})).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );

    let (_, bare) = app_with(ServiceConfig::default(), model(64, false, false));
    let s = new_session(&bare).await;
    let (r, _) = segment_ok(&bare, &s.session_id, json!({"prompts": ["cat", "dog"]})).await;
    assert_eq!(r.config.pooling, dinoiser_core::denoiser::pipeline::PoolingSource::None);
    for body in [
        json!({"prompts": ["cat"], "pooling": "learned"}),
        json!({"prompts": ["cat"], "pooling": "teacher"}),
        json!({"prompts": ["cat"], "background": true}),
    ] {
        assert_eq!(segment(&bare, &s.session_id, body).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    }
}

#[tokio::test]
async fn expired_sessions_are_gone() {
    let config = ServiceConfig {
        session_ttl_secs: 0,
        ..ServiceConfig::default()
    };
    let (_, app) = app_with(config, model(64, true, false));
    let s = new_session(&app).await;
    assert_eq!(
        segment(&app, &s.session_id, json!({"prompts": ["cat"]})).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn lru_eviction() {
    let config = ServiceConfig {
        max_sessions: 2,
        ..ServiceConfig::default()
    };
    let (_, app) = app_with(config, model(64, true, false));
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    segment_ok(&app, &a.session_id, json!({"prompts": ["cat"]})).await;
    let c = new_session(&app).await;
    let body = json!({"prompts": ["cat"]});
    assert_eq!(segment(&app, &b.session_id, body.clone()).await.0, StatusCode::NOT_FOUND);
    assert_eq!(segment(&app, &a.session_id, body.clone()).await.0, StatusCode::OK);
    assert_eq!(segment(&app, &c.session_id, body).await.0, StatusCode::OK);
}

#[tokio::test]
async fn openapi_and_cors() {
    let (_, app) = app();
    let (status, body) = send(&app, Request::get("/v1/spec").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let doc: Value = serde_json::from_slice(&body).unwrap();
    for path in ["/v1/health", "/v1/sessions", "/v1/sessions/{id}/segment", "/v1/spec"] {
        assert!(doc["paths"].get(path).is_some(), "{path}");
    }
    let req = Request::get("/v1/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test]
async fn latency_is_flat_in_prompt_count() {
    let config = ServiceConfig {
        template_set: TemplateSet::Single,
        ..ServiceConfig::default()
    };
    let (_, app) = app_with(config, model(256, true, false));
    let (status, body) = upload(&app, png(256, 256, 6)).await;
    assert_eq!(status, StatusCode::CREATED);
    let s: SessionCreated = serde_json::from_slice(&body).unwrap();
    let words = ["cat", "dog", "car", "tree", "sky", "grass", "person"];
    let many: Vec<String> = (0..50).map(|i| format!("{} {}", words[i % 7], words[(i / 7) % 7])).collect();
    let one = json!({"prompts": ["cat"]});
    let fifty = json!({"prompts": many});
    // warm the text cache
    segment_ok(&app, &s.session_id, one.clone()).await;
    segment_ok(&app, &s.session_id, fifty.clone()).await;
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut t1 = Vec::new();
    let mut t50 = Vec::new();
    for _ in 0..7 {
        let start = Instant::now();
        segment_ok(&app, &s.session_id, one.clone()).await;
        t1.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        segment_ok(&app, &s.session_id, fifty.clone()).await;
        t50.push(start.elapsed().as_secs_f64());
    }
    let (a, b) = (median(t1), median(t50));
    assert!(b <= 2.0 * a, "1 prompt {a:.4}s, 50 prompts {b:.4}s");
}
