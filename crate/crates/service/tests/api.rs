use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use candle_core::{DType, Device};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use textcolor::colorspace::RgbImage;
use textcolor::imageio;
use textcolor::models::{Generator, GeneratorConfig};
use textcolor::pipeline::Colorizer;
use textcolor::text::TextEncoderSpec;
use textcolor_service::{build_state, router, AppState, ServiceConfig, VERSION};
use tower::ServiceExt;

const SIZE: usize = 16;

fn write_checkpoint(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let g = Generator::new(&GeneratorConfig::scaled(SIZE, 4, 4, 8), seed, DType::F32, &Device::Cpu).unwrap();
    let spec = TextEncoderSpec::seeded_from(["a red bird", "a blue circle"], 3);
    let path = dir.join(format!("{name}.safetensors"));
    Colorizer::save(&g, &spec, &path).unwrap();
    path
}

fn gray_png(w: usize, h: usize) -> Vec<u8> {
    let data: Vec<f32> = (0..w * h).flat_map(|i| [((i * 7) % 255) as f32 / 255.0; 3]).collect();
    imageio::encode_png(&RgbImage::new(w, h, data).unwrap()).unwrap()
}

fn app_with(paths: &[&Path]) -> Router {
    let state = Arc::new(AppState::new(Device::Cpu));
    for p in paths {
        state.register(p).unwrap();
    }
    router(state, 1 << 20)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_req(method: &str, uri: &str, body: Value) -> Request<Body> {
    Request::builder()
        .method(method)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::builder().uri(uri).body(Body::empty()).unwrap()
}

fn colorize_req(png: &[u8], description: &str) -> Request<Body> {
    json_req("POST", "/api/colorize", json!({ "image": B64.encode(png), "description": description }))
}

fn parse(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn health_reflects_registry() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&[]);
    let (status, body) = send(&app, get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
    let v = parse(&body);
    assert_eq!(v["status"], "degraded");
    assert_eq!(v["version"], VERSION);
    assert_eq!(v["models"], json!([]));

    let path = write_checkpoint(dir.path(), "toy", 1);
    let (status, body) = send(&app, json_req("POST", "/api/models", json!({ "path": path }))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    assert_eq!(parse(&body)["id"], "toy");
    let v = parse(&send(&app, get("/api/health")).await.1);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["models"], json!(["toy"]));
}

#[tokio::test]
async fn colorize_returns_a_png_of_model_size() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&[&write_checkpoint(dir.path(), "toy", 1)]);
    let (status, body) = send(&app, colorize_req(&gray_png(24, 20), "a red bird")).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let v = parse(&body);
    assert_eq!(v["model"], "toy");
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(16), Some(16)));
    assert!(v["elapsed_ms"].is_u64());
    let png = B64.decode(v["image"].as_str().unwrap()).unwrap();
    let img = imageio::decode(&png).unwrap();
    assert_eq!((img.width(), img.height()), (SIZE, SIZE));
}

#[tokio::test]
async fn identical_requests_give_identical_images() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&[&write_checkpoint(dir.path(), "toy", 1)]);
    let png = gray_png(16, 16);
    let a = parse(&send(&app, colorize_req(&png, "a red bird")).await.1);
    let b = parse(&send(&app, colorize_req(&png, "a red bird")).await.1);
    assert_eq!(a["image"], b["image"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn parallel_requests_agree() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&[&write_checkpoint(dir.path(), "toy", 1)]);
    let png = gray_png(16, 16);
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (app, png) = (app.clone(), png.clone());
            tokio::spawn(async move { send(&app, colorize_req(&png, "a red bird")).await })
        })
        .collect();
    let mut images = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        images.push(parse(&body)["image"].clone());
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn error_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let empty = app_with(&[]);
    let png = gray_png(16, 16);
    assert_eq!(send(&empty, colorize_req(&png, "a red bird")).await.0, StatusCode::SERVICE_UNAVAILABLE);

    let app = app_with(&[&write_checkpoint(dir.path(), "toy", 1)]);
    let (status, body) = send(&app, colorize_req(b"definitely not an image", "a red bird")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(parse(&body)["error"].as_str().unwrap().contains("undecodable"));

    let missing = json_req("POST", "/api/colorize", json!({ "image": B64.encode(&png) }));
    let (status, body) = send(&app, missing).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(parse(&body)["error"].as_str().unwrap().contains("description"));

    // Empty description is the ablation path, not an error.
    assert_eq!(send(&app, colorize_req(&png, "")).await.0, StatusCode::OK);

    let long = "red ".repeat(300);
    assert_eq!(send(&app, colorize_req(&png, &long)).await.0, StatusCode::BAD_REQUEST);
    let at_limit = "r".repeat(1024);
    assert_eq!(send(&app, colorize_req(&png, &at_limit)).await.0, StatusCode::OK);

    let unknown = json_req(
        "POST",
        "/api/colorize",
        json!({ "image": B64.encode(&png), "description": "a red bird", "checkpoint": "nope" }),
    );
    assert_eq!(send(&app, unknown).await.0, StatusCode::NOT_FOUND);

    let text = Request::builder()
        .method("POST")
        .uri("/api/colorize")
        .header(header::CONTENT_TYPE, "text/plain")
        .body(Body::from("hi"))
        .unwrap();
    assert_eq!(send(&app, text).await.0, StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn model_registration() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_checkpoint(dir.path(), "alpha", 1);
    let app = app_with(&[]);
    for _ in 0..2 {
        let (status, body) = send(&app, json_req("POST", "/api/models", json!({ "path": a }))).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(parse(&body)["id"], "alpha");
    }
    let sub = dir.path().join("other");
    std::fs::create_dir(&sub).unwrap();
    let b = write_checkpoint(&sub, "alpha", 2);
    let v = parse(&send(&app, json_req("POST", "/api/models", json!({ "path": b }))).await.1);
    assert_eq!(v["id"], "alpha-2");

    let v = parse(&send(&app, get("/api/models")).await.1);
    assert_eq!(v["default"], "alpha");
    let ids: Vec<&str> = v["models"].as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["alpha", "alpha-2"]);
    assert_eq!(v["models"][0]["image_size"], 16);

    // Both checkpoints are addressable and differ.
    let png = gray_png(16, 16);
    let req = |id: &str| {
        json_req(
            "POST",
            "/api/colorize",
            json!({ "image": B64.encode(&png), "description": "a red bird", "checkpoint": id }),
        )
    };
    let x = parse(&send(&app, req("alpha")).await.1);
    let y = parse(&send(&app, req("alpha-2")).await.1);
    assert_eq!(y["model"], "alpha-2");
    assert_ne!(x["image"], y["image"]);

    let corrupt = dir.path().join("corrupt.safetensors");
    std::fs::write(&corrupt, b"\x08\x00\x00\x00\x00\x00\x00\x00{}garbage").unwrap();
    let (status, body) = send(&app, json_req("POST", "/api/models", json!({ "path": corrupt }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(!parse(&body)["error"].as_str().unwrap().is_empty());
    let missing = dir.path().join("missing.safetensors");
    assert_eq!(
        send(&app, json_req("POST", "/api/models", json!({ "path": missing }))).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(send(&app, json_req("POST", "/api/models", json!({}))).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn multipart_and_raw_png() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(&[&write_checkpoint(dir.path(), "toy", 1)]);
    let png = gray_png(16, 16);
    let boundary = "XBOUNDARYX";
    let mut body = Vec::new();
    body.extend(format!("--{boundary}\r\nContent-Disposition: form-data; name=\"description\"\r\n\r\na red bird\r\n").bytes());
    body.extend(
        format!("--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"g.png\"\r\nContent-Type: image/png\r\n\r\n")
            .bytes(),
    );
    body.extend(&png);
    body.extend(format!("\r\n--{boundary}--\r\n").bytes());
    let req = Request::builder()
        .method("POST")
        .uri("/api/colorize")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={boundary}"))
        .header(header::ACCEPT, "image/png")
        .body(Body::from(body))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    assert_eq!(resp.headers()["x-model-id"], "toy");
    let raw = resp.into_body().collect().await.unwrap().to_bytes().to_vec();

    let json_body = parse(&send(&app, colorize_req(&png, "a red bird")).await.1);
    assert_eq!(B64.decode(json_body["image"].as_str().unwrap()).unwrap(), raw);
}

#[tokio::test]
async fn startup_scans_checkpoint_dir() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), "b", 1);
    write_checkpoint(dir.path(), "a", 2);
    std::fs::write(dir.path().join("broken.safetensors"), b"nope").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
    let config = ServiceConfig {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    };
    let state = build_state(&config, Device::Cpu).unwrap();
    assert_eq!(state.registry.read().unwrap().ids(), ["a", "b"]);
}

#[tokio::test]
async fn serve_binds_the_configured_port() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let config = ServiceConfig {
        port,
        ..ServiceConfig::default()
    };
    let server = tokio::spawn(textcolor_service::serve(config));
    let mut ok = false;
    for _ in 0..100 {
        if tokio::net::TcpStream::connect(("127.0.0.1", port)).await.is_ok() {
            ok = true;
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
    }
    server.abort();
    assert!(ok, "nothing listening on {port}");
}
