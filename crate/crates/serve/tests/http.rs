use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use dermanet::backbone::{init_weights, ModelSpec};
use dermanet::data::Preprocessing;
use dermanet::export::{read_labels, write_frozen, Bundle, LABELS_FILE};
use dermanet::synth::{render_texture, DISEASE_CLASSES};
use dermanet::Tensor;
use dermanet_serve::{router, AppState, ClassifyResponse, Health, LoadedModel, MAX_UPLOAD_BYTES};
use http_body_util::BodyExt;
use rand::SeedableRng;
use sha2::{Digest, Sha256};
use tower::ServiceExt;

fn write_bundle(dir: &Path, alpha: f32, seed: u64) -> PathBuf {
    let spec = ModelSpec::new(alpha, if alpha < 1.0 { 32 } else { 224 }, 7);
    let bundle = Bundle {
        weights: init_weights(&spec, seed).unwrap(),
        spec,
        labels: DISEASE_CLASSES.iter().map(|s| s.to_string()).collect(),
        preprocessing: Preprocessing::Default,
    };
    let path = dir.join("model.mbbd");
    write_frozen(&bundle, &path).unwrap();
    path
}

fn jpeg(class: usize, seed: u64) -> Vec<u8> {
    let img = render_texture(class, 48, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Jpeg).unwrap();
    out.into_inner()
}

fn app(path: Option<&Path>) -> (Router, Arc<AppState>) {
    let model = path.map(|p| LoadedModel::load(p).unwrap());
    let state = AppState::new(model, path.map(Path::to_path_buf));
    (router(state.clone(), None), state)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_raw(uri: &str, bytes: Vec<u8>) -> Request<Body> {
    Request::post(uri)
        .header(header::CONTENT_TYPE, "application/octet-stream")
        .body(Body::from(bytes))
        .unwrap()
}

fn post_multipart(uri: &str, bytes: &[u8]) -> Request<Body> {
    let boundary = "XdermanetBoundaryX";
    let mut body = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"lesion.jpg\"\r\nContent-Type: image/jpeg\r\n\r\n"
    )
    .into_bytes();
    body.extend_from_slice(bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    Request::post(uri)
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

fn parse(body: &[u8]) -> ClassifyResponse {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn classify_returns_a_sorted_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Some(&write_bundle(dir.path(), 0.25, 1)));
    let (status, body) = send(&app, post_raw("/api/classify", jpeg(0, 1))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r = parse(&body);
    assert_eq!(r.predictions.len(), 7);
    let sum: f32 = r.predictions.iter().map(|p| p.probability).sum();
    assert!((sum - 1.0).abs() <= 1e-5, "{sum}");
    assert!(r.predictions.windows(2).all(|w| w[0].probability >= w[1].probability));
    assert_eq!(r.top_label, r.predictions[0].label);
    assert!(r.saliency_png.is_none());
    let mut labels: Vec<&str> = r.predictions.iter().map(|p| p.label.as_str()).collect();
    labels.sort();
    assert_eq!(labels, DISEASE_CLASSES);
}

#[tokio::test]
async fn service_matches_library_inference_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), 0.25, 2);
    let (app, _) = app(Some(&path));
    let image = jpeg(3, 2);
    let r = parse(&send(&app, post_raw("/api/classify", image.clone())).await.1);

    let (bundle, _) = dermanet::export::load_bundle(&path).unwrap();
    let raw = dermanet::data::decode_image(&image, 32, Path::new("x")).unwrap();
    let input = bundle.preprocessing.apply(&raw);
    let probs = bundle.model().unwrap().probabilities(&Tensor::stack(&[input]).unwrap()).unwrap();
    for p in &r.predictions {
        let i = bundle.labels.iter().position(|l| *l == p.label).unwrap();
        assert_eq!(p.probability.to_bits(), probs.data()[i].to_bits(), "{}", p.label);
    }
}

#[tokio::test]
async fn repeated_and_multipart_requests_agree() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Some(&write_bundle(dir.path(), 0.25, 3)));
    let image = jpeg(5, 3);
    let mut a = parse(&send(&app, post_raw("/api/classify", image.clone())).await.1);
    let mut b = parse(&send(&app, post_raw("/api/classify", image.clone())).await.1);
    let (status, body) = send(&app, post_multipart("/api/classify", &image)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let mut c = parse(&body);
    for r in [&mut a, &mut b, &mut c] {
        r.inference_ms = 0.0;
    }
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[tokio::test]
async fn concurrent_requests_see_one_model() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Some(&write_bundle(dir.path(), 0.25, 4)));
    let image = jpeg(1, 4);
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let (app, image) = (app.clone(), image.clone());
            tokio::spawn(async move { parse(&send(&app, post_raw("/api/classify", image)).await.1) })
        })
        .collect();
    let mut results = Vec::new();
    for t in tasks {
        let mut r = t.await.unwrap();
        r.inference_ms = 0.0;
        results.push(r);
    }
    assert!(results.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn saliency_is_returned_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Some(&write_bundle(dir.path(), 0.25, 5)));
    let (status, body) = send(&app, post_raw("/api/classify?saliency=1", jpeg(2, 5))).await;
    assert_eq!(status, StatusCode::OK);
    let png = base64::engine::general_purpose::STANDARD
        .decode(parse(&body).saliency_png.expect("saliency requested"))
        .unwrap();
    let img = image::load_from_memory(&png).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    let (_, body) = send(&app, post_raw("/api/classify?saliency=0", jpeg(2, 5))).await;
    assert!(parse(&body).saliency_png.is_none());
}

#[tokio::test]
async fn bad_uploads_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Some(&write_bundle(dir.path(), 0.25, 6)));
    let (status, body) = send(&app, post_raw("/api/classify", b"just some text\n".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert!(err["error"].as_str().unwrap().contains("decode"));
    assert_eq!(send(&app, post_raw("/api/classify", Vec::new())).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        send(&app, post_multipart("/api/classify", b"not an image")).await.0,
        StatusCode::BAD_REQUEST
    );
    let huge = vec![0u8; MAX_UPLOAD_BYTES + 1];
    assert_eq!(send(&app, post_raw("/api/classify", huge.clone())).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(send(&app, post_multipart("/api/classify", &huge)).await.0, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn labels_follow_labels_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), 0.25, 7);
    let (app, _) = app(Some(&path));
    let want = read_labels(dir.path().join(LABELS_FILE)).unwrap();
    for _ in 0..3 {
        let (status, body) = send(&app, get("/api/labels")).await;
        assert_eq!(status, StatusCode::OK);
        let got: Vec<String> = serde_json::from_slice(&body).unwrap();
        assert_eq!(got, want);
        assert_eq!(got.len(), 7);
    }
}

#[tokio::test]
async fn health_reports_bundle_stats() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), 0.25, 8);
    let (app, state) = app(Some(&path));
    let (status, body) = send(&app, get("/healthz")).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_slice(&body).unwrap();
    assert_eq!(h.status, "ready");
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(h.model_id.as_deref(), Some(hex::encode(Sha256::digest(&bytes)).as_str()));
    assert_eq!(h.weight_size_bytes, Some(bytes.len() as u64));
    let loaded = state.current().await.unwrap();
    // Reported time is the loader's own measurement.
    assert_eq!(h.load_time_seconds, Some(loaded.stats.load_time_seconds));
    assert!(loaded.stats.load_time_seconds > 0.0);
    let independent = dermanet::export::bundle_stats(&path).unwrap();
    assert_eq!(independent.weight_size_bytes, bytes.len() as u64);
}

#[tokio::test]
async fn unloaded_service_is_unavailable() {
    let (app, _) = app(None);
    assert_eq!(send(&app, get("/healthz")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(send(&app, get("/api/labels")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(
        send(&app, post_raw("/api/classify", jpeg(0, 0))).await.0,
        StatusCode::SERVICE_UNAVAILABLE
    );
    assert_eq!(send(&app, Request::post("/api/admin/reload").body(Body::empty()).unwrap()).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn reload_swaps_the_model_and_keeps_it_on_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_bundle(dir.path(), 0.25, 9);
    let (app, _) = app(Some(&path));
    let reload = || Request::post("/api/admin/reload").body(Body::empty()).unwrap();
    let before: Health = serde_json::from_slice(&send(&app, get("/healthz")).await.1).unwrap();

    write_bundle(dir.path(), 0.25, 10);
    let (status, body) = send(&app, reload()).await;
    assert_eq!(status, StatusCode::OK);
    let after: Health = serde_json::from_slice(&body).unwrap();
    assert_ne!(after.model_id, before.model_id);

    std::fs::write(&path, b"garbage").unwrap();
    assert_eq!(send(&app, reload()).await.0, StatusCode::INTERNAL_SERVER_ERROR);
    let still: Health = serde_json::from_slice(&send(&app, get("/healthz")).await.1).unwrap();
    assert_eq!(still.model_id, after.model_id);
}

#[tokio::test]
async fn static_files_are_served() {
    let dir = tempfile::tempdir().unwrap();
    let web = dir.path().join("web");
    std::fs::create_dir(&web).unwrap();
    std::fs::write(web.join("index.html"), "<h1>dermanet</h1>").unwrap();
    let state = AppState::new(None, None);
    let app = router(state, Some(&web));
    let (status, body) = send(&app, get("/index.html")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<h1>dermanet</h1>");
    assert_eq!(send(&app, get("/missing.js")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn full_width_model_answers_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = app(Some(&write_bundle(dir.path(), 1.0, 11)));
    let start = std::time::Instant::now();
    let (status, body) = send(&app, post_raw("/api/classify", jpeg(4, 11))).await;
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(status, StatusCode::OK);
    assert_eq!(parse(&body).predictions.len(), 7);
    assert!(elapsed < 2.0, "{elapsed} s");
}
