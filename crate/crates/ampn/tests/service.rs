use ampn::service::{router, AppState, MASK_HEADER, MASK_SOURCE_HEADER};
use ampn_core::checkpoint::Checkpoint;
use ampn_core::config::ModelConfig;
use ampn_core::io::{decode_png, encode_png};
use ampn_core::model::Model;
use ampn_core::render::{render_png, RenderRequest};
use ampn_core::tensor::Tensor;
use ampn_core::types::{FocusMask, ImageTensor};
use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::response::Response;
use axum::Router;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use tower::ServiceExt;

const BOUNDARY: &str = "ampn-test-boundary";

fn multipart(fields: &[(&str, &[u8])]) -> Body {
    let mut body = Vec::new();
    for (name, value) in fields {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"").as_bytes());
        if matches!(*name, "image" | "mask") {
            body.extend_from_slice(b"; filename=\"f.png\"\r\nContent-Type: image/png");
        }
        body.extend_from_slice(b"\r\n\r\n");
        body.extend_from_slice(value);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Body::from(body)
}

fn post(fields: &[(&str, &[u8])]) -> Request<Body> {
    Request::post("/api/render")
        .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(multipart(fields))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (Response, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let (parts, body) = resp.into_parts();
    let bytes = to_bytes(body, usize::MAX).await.unwrap().to_vec();
    (Response::from_parts(parts, Body::empty()), bytes)
}

fn checkpoint_bytes() -> Vec<u8> {
    Checkpoint::from_model(&Model::new(&ModelConfig::default(), 9).unwrap(), 0, None).to_bytes()
}

fn image_png(h: usize, w: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = Tensor::from_fn([1, 3, h, w], |_, _, _, _| rng.gen_range(0..=255) as f32 / 255.0);
    encode_png(&ImageTensor::new(t).unwrap()).unwrap()
}

fn mask_png(h: usize, w: usize, v: f32) -> Vec<u8> {
    encode_png(&FocusMask::filled(h, w, v).unwrap().to_image()).unwrap()
}

fn app(max_pixels: usize) -> Router {
    router(AppState::from_checkpoint_bytes(&checkpoint_bytes(), max_pixels).unwrap(), None)
}

fn json(bytes: &[u8]) -> serde_json::Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn health_reports_checkpoint_hash() {
    let (resp, body) = send(&app(1 << 20), Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model"], hex::encode(Sha256::digest(checkpoint_bytes())));
}

#[tokio::test]
async fn render_without_mask_uses_g1() {
    let (resp, body) = send(&app(1 << 20), post(&[("image", &image_png(64, 64))])).await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(resp.headers()[MASK_SOURCE_HEADER], "g1");
    assert!(!resp.headers().contains_key(MASK_HEADER));
    let img = decode_png(&body).unwrap();
    assert_eq!((img.height(), img.width()), (64, 64));
}

#[tokio::test]
async fn white_mask_returns_the_input_and_the_mask() {
    let input = image_png(64, 64);
    let (resp, body) = send(
        &app(1 << 20),
        post(&[("image", &input), ("mask", &mask_png(64, 64, 1.0)), ("return_mask", b"1")]),
    )
    .await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[MASK_SOURCE_HEADER], "external");
    assert_eq!(decode_png(&body).unwrap(), decode_png(&input).unwrap());
    let mask_b64 = resp.headers()[MASK_HEADER].to_str().unwrap();
    let mask = decode_png(&base64::engine::general_purpose::STANDARD.decode(mask_b64).unwrap()).unwrap();
    assert_eq!((mask.height(), mask.width()), (16, 16));
}

#[tokio::test]
async fn error_statuses() {
    let app = app(64 * 64);
    let (resp, body) = send(&app, post(&[("image", &image_png(64, 64)), ("mask", &mask_png(10, 10, 1.0))])).await;
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(resp.headers()["content-type"], "application/json");
    assert_eq!(json(&body)["error"], "shape_mismatch");

    let (resp, body) = send(&app, post(&[("image", b"not a png")])).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    assert_eq!(json(&body)["error"], "bad_request");

    let (resp, _) = send(&app, post(&[("mask", &mask_png(64, 64, 1.0))])).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let (resp, _) = send(&app, post(&[("image", &image_png(64, 64)), ("background_level", b"0.95")])).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let (resp, _) = send(&app, post(&[("image", &image_png(64, 64)), ("background_level", b"abc")])).await;
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);

    let (resp, body) = send(&app, post(&[("image", &image_png(64, 96))])).await;
    assert_eq!(resp.status(), StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(json(&body)["error"], "payload_too_large");

    let unloaded = router(AppState::unloaded(1 << 20), None);
    let (resp, body) = send(&unloaded, post(&[("image", &image_png(64, 64))])).await;
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(json(&body)["error"], "model_not_loaded");
    let (resp, _) = send(&unloaded, Request::get("/api/health").body(Body::empty()).unwrap()).await;
    assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn service_matches_library_bytes() {
    let input = image_png(64, 64);
    let (resp, body) = send(&app(1 << 20), post(&[("image", &input), ("background_level", b"0.3")])).await;
    assert_eq!(resp.status(), StatusCode::OK);
    let model = Checkpoint::from_bytes(&checkpoint_bytes()).unwrap().to_model().unwrap();
    let mut req = RenderRequest::new(decode_png(&input).unwrap());
    req.background_level = Some(0.3);
    assert_eq!(render_png(&model, &req).unwrap().0, body);
}

#[tokio::test]
async fn static_ui_is_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let state = AppState::from_checkpoint_bytes(&checkpoint_bytes(), 1 << 20).unwrap();
    let app = router(state, Some(dir.path().to_path_buf()));
    let (resp, body) = send(&app, Request::get("/").body(Body::empty()).unwrap()).await;
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(body, b"<html>ui</html>");
}
