use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use image::RgbImage;
use lri2i::checkpoint;
use lri2i::config::TrainConfig;
use lri2i::data::Dataset;
use lri2i::eval::{downscale_consistency_on, eval_pairs};
use lri2i::imaging::{downscale_consistency, downscale_tensor, encode_png, image_to_tensor, tensor_to_image};
use lri2i::training::{load_splits, run_steps, TrainState};
use lri2i::Tensor;
use lri2i_service::{
    router, tensor_to_values, AppState, DownscaleResponse, ErrorBody, GenerateResponse, InfoResponse, LoadedModel,
};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

struct Fixture {
    _dir: TempDir,
    checkpoint: PathBuf,
    val: Dataset,
}

fn config() -> TrainConfig {
    TrainConfig {
        hr_size: 32,
        lr_size: 8,
        base_channels: 8,
        max_channels: 16,
        num_scales: 2,
        disc_base_channels: 4,
        disc_max_channels: 8,
        batch_size: 4,
        synthetic_count: 60,
        val_fraction: 0.25,
        seed: 3,
        ..TrainConfig::default()
    }
}

/// A briefly trained 32x32 / 8x8 model, shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let mut state = TrainState::<f32>::new(config()).unwrap();
        let (train, val) = load_splits(&state.config).unwrap();
        run_steps(&mut state, &train, 200, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let checkpoint = dir.path().join("model.ckpt");
        checkpoint::save(&state, &checkpoint).unwrap();
        Fixture {
            _dir: dir,
            checkpoint,
            val,
        }
    })
}

fn state() -> AppState {
    AppState::with_model(LoadedModel::from_checkpoint(&fixture().checkpoint).unwrap())
}

fn png_b64(img: &RgbImage) -> String {
    B64.encode(encode_png(img).unwrap())
}

fn val_image(i: usize) -> RgbImage {
    fixture().val.images[i].clone()
}

fn lr_values(img: &RgbImage, factor: usize) -> Vec<f64> {
    tensor_to_values(&downscale_tensor(&image_to_tensor::<f64>(img), factor).unwrap()).unwrap()
}

async fn call(app: axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(v.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn post_raw(app: axum::Router, uri: &str, body: &str) -> (StatusCode, Vec<u8>) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn error_field(body: &[u8]) -> Option<String> {
    serde_json::from_slice::<ErrorBody>(body).unwrap().field
}

fn generate_body(source: usize, target: usize) -> Value {
    json!({
        "source": png_b64(&val_image(source)),
        "lr_target": lr_values(&val_image(target), 4),
        "seed": 11,
    })
}

#[tokio::test]
async fn info_echoes_checkpoint_metadata() {
    let f = fixture();
    let app = router(state());
    let (status, body) = call(app.clone(), "GET", "/api/info", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: InfoResponse = serde_json::from_slice(&body).unwrap();
    let disk = checkpoint::info(&f.checkpoint).unwrap();
    assert_eq!(info.lr_size, 8);
    assert_eq!(info.hr_size, 32);
    assert_eq!(info.downscale_factor, 4);
    assert_eq!(info.config_hash, disk.config.hash());
    assert_eq!(info.checkpoint_hash, disk.file_hash);
    let (_, again) = call(app, "GET", "/api/info", None).await;
    assert_eq!(body, again);
}

#[tokio::test]
async fn generate_is_deterministic_and_reports_consistency() {
    let app = router(state());
    let (s1, b1) = call(app.clone(), "POST", "/api/generate", Some(generate_body(0, 1))).await;
    let (s2, b2) = call(app, "POST", "/api/generate", Some(generate_body(0, 1))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let r1: GenerateResponse = serde_json::from_slice(&b1).unwrap();
    let r2: GenerateResponse = serde_json::from_slice(&b2).unwrap();
    assert_eq!(r1.image, r2.image);
    assert_eq!(r1.seed, Some(11));
    assert!(r1.consistency >= 0.0);

    let png = B64.decode(&r1.image).unwrap();
    let decoded = image::load_from_memory(&png).unwrap().to_rgb8();
    assert_eq!(decoded.dimensions(), (32, 32));

    // the reported scalar is the evaluation metric on this single pair
    let model = LoadedModel::from_checkpoint(&fixture().checkpoint).unwrap();
    let x = image_to_tensor::<f64>(&val_image(0));
    let y = downscale_tensor(&image_to_tensor::<f64>(&val_image(1)), 4).unwrap();
    let direct = downscale_consistency(&model.generate(&x, &y).unwrap(), &y).unwrap();
    assert!((r1.consistency - direct).abs() < 1e-6);
    let expected = encode_png(&tensor_to_image(&model.generate(&x, &y).unwrap(), 0).unwrap()).unwrap();
    assert_eq!(png, expected);
}

#[tokio::test]
async fn png_and_array_targets_agree() {
    let target = val_image(2);
    let lr_img = tensor_to_image(&downscale_tensor(&image_to_tensor::<f64>(&target), 4).unwrap(), 0).unwrap();
    // the array carries exactly what the 8-bit LR image encodes
    let as_values = tensor_to_values(&image_to_tensor::<f64>(&lr_img)).unwrap();
    let app = router(state());
    let source = png_b64(&val_image(3));
    let (_, a) = call(app.clone(), "POST", "/api/generate", Some(json!({"source": source, "lr_target": png_b64(&lr_img)}))).await;
    let (_, b) = call(app, "POST", "/api/generate", Some(json!({"source": source, "lr_target": as_values}))).await;
    let a: GenerateResponse = serde_json::from_slice(&a).unwrap();
    let b: GenerateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.consistency, b.consistency);
}

#[tokio::test]
async fn out_of_range_values_are_clamped() {
    let app = router(state());
    let source = png_b64(&val_image(0));
    let big: Vec<f64> = (0..8 * 8 * 3).map(|i| if i % 2 == 0 { 5.0 } else { -3.0 }).collect();
    let clipped: Vec<f64> = big.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let (sa, a) = call(app.clone(), "POST", "/api/generate", Some(json!({"source": source, "lr_target": big}))).await;
    let (_, b) = call(app, "POST", "/api/generate", Some(json!({"source": source, "lr_target": clipped}))).await;
    assert_eq!(sa, StatusCode::OK);
    let a: GenerateResponse = serde_json::from_slice(&a).unwrap();
    let b: GenerateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(a.image, b.image);
}

#[tokio::test]
async fn self_conditioning_tracks_evaluation_consistency() {
    let f = fixture();
    let pairs = eval_pairs(&f.val, f.val.len(), 7).unwrap();
    let model = LoadedModel::from_checkpoint(&f.checkpoint).unwrap();
    let generate = |x: &Tensor<f64>, y: &Tensor<f64>| model.generate(x, y);
    let eval_mean = downscale_consistency_on(&generate, &f.val, &pairs, 4, 4).unwrap();
    let untrained = TrainState::<f32>::new(config()).unwrap().generator;
    let untrained_mean = downscale_consistency_on(&untrained, &f.val, &pairs, 4, 4).unwrap();
    assert!(eval_mean < 0.5 * untrained_mean, "trained {eval_mean} vs untrained {untrained_mean}");

    let app = router(state());
    let mut probe = 0.0;
    for i in 0..f.val.len() {
        let img = val_image(i);
        let body = json!({"source": png_b64(&img), "lr_target": lr_values(&img, 4)});
        let (status, b) = call(app.clone(), "POST", "/api/generate", Some(body)).await;
        assert_eq!(status, StatusCode::OK);
        probe += serde_json::from_slice::<GenerateResponse>(&b).unwrap().consistency;
    }
    probe /= f.val.len() as f64;
    // both cases are trained towards the target, so they agree closely rather than strictly ordering
    assert!(probe <= 1.05 * eval_mean, "self-conditioned {probe} vs evaluation {eval_mean}");
}

#[tokio::test]
async fn concurrent_requests_match_serial_ones() {
    let app = router(state());
    let bodies: Vec<Value> = (0..4).map(|i| generate_body(i, (i + 1) % 4)).collect();
    let mut serial = Vec::new();
    for b in &bodies {
        serial.push(call(app.clone(), "POST", "/api/generate", Some(b.clone())).await.1);
    }
    let handles: Vec<_> = bodies
        .iter()
        .map(|b| tokio::spawn(call(app.clone(), "POST", "/api/generate", Some(b.clone()))))
        .collect();
    for (h, s) in handles.into_iter().zip(&serial) {
        let c: GenerateResponse = serde_json::from_slice(&h.await.unwrap().1).unwrap();
        let s: GenerateResponse = serde_json::from_slice(s).unwrap();
        assert_eq!(c.image, s.image);
        assert_eq!(c.consistency, s.consistency);
    }
}

#[tokio::test]
async fn wrong_lr_dimensions_are_unprocessable() {
    let app = router(state());
    let source = png_b64(&val_image(0));
    let seven = RgbImage::new(7, 7);
    let (status, body) = call(app.clone(), "POST", "/api/generate", Some(json!({"source": source, "lr_target": png_b64(&seven)}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_field(&body).as_deref(), Some("lr_target"));
    let short = vec![0.0; 7 * 7 * 3];
    let (status, _) = call(app.clone(), "POST", "/api/generate", Some(json!({"source": source, "lr_target": short}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, body) = call(
        app,
        "POST",
        "/api/generate",
        Some(json!({"source": png_b64(&RgbImage::new(16, 16)), "lr_target": lr_values(&val_image(1), 4)})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_field(&body).as_deref(), Some("source"));
}

#[tokio::test]
async fn malformed_payloads_name_the_field() {
    let app = router(state());
    let lr = lr_values(&val_image(1), 4);
    let cases = [
        (json!({"lr_target": lr}), "source"),
        (json!({"source": "not base64 !!", "lr_target": lr}), "source"),
        (json!({"source": B64.encode(b"not a png"), "lr_target": lr}), "source"),
        (json!({"source": png_b64(&val_image(0))}), "lr_target"),
        (json!({"source": png_b64(&val_image(0)), "lr_target": ["a"]}), "lr_target"),
        (json!({"source": png_b64(&val_image(0)), "lr_target": 3}), "lr_target"),
        (json!({"source": png_b64(&val_image(0)), "lr_target": lr, "seed": -1}), "seed"),
        (json!([1, 2]), "body"),
    ];
    for (body, field) in cases {
        let (status, reply) = call(app.clone(), "POST", "/api/generate", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{field}");
        assert_eq!(error_field(&reply).as_deref(), Some(field));
    }
    let (status, reply) = post_raw(app, "/api/generate", "{not json").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_field(&reply).as_deref(), Some("body"));
}

#[tokio::test]
async fn missing_model_is_unavailable() {
    let app = router(AppState::default());
    let (status, _) = call(app.clone(), "POST", "/api/generate", Some(generate_body(0, 1))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(app.clone(), "GET", "/api/info", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    // downscaling needs no model when the factor is explicit
    let (status, _) = call(app.clone(), "POST", "/api/downscale", Some(json!({"source": png_b64(&val_image(0)), "factor": 4}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = call(app, "POST", "/api/downscale", Some(json!({"source": png_b64(&val_image(0))}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_field(&body).as_deref(), Some("factor"));
}

#[tokio::test]
async fn downscale_matches_the_core_implementation() {
    let app = router(state());
    let img = val_image(4);
    let (status, body) = call(app.clone(), "POST", "/api/downscale", Some(json!({"source": png_b64(&img)}))).await;
    assert_eq!(status, StatusCode::OK);
    let r: DownscaleResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.width, r.height, r.factor), (8, 8, 4));
    let expected = lr_values(&img, 4);
    assert_eq!(r.values.len(), expected.len());
    for (a, b) in r.values.iter().zip(&expected) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[tokio::test]
async fn constant_image_downscales_to_constant() {
    let app = router(AppState::default());
    let img = RgbImage::from_pixel(12, 12, image::Rgb([200, 10, 90]));
    let (_, body) = call(app, "POST", "/api/downscale", Some(json!({"source": png_b64(&img), "factor": 3}))).await;
    let r: DownscaleResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.width, r.height), (4, 4));
    let px = image_to_tensor::<f64>(&RgbImage::from_pixel(1, 1, image::Rgb([200, 10, 90])));
    for chunk in r.values.chunks(3) {
        assert_eq!(chunk, &r.values[..3]);
        for (a, b) in chunk.iter().zip(px.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[tokio::test]
async fn non_dividing_factor_is_unprocessable() {
    let app = router(state());
    let (status, body) = call(app.clone(), "POST", "/api/downscale", Some(json!({"source": png_b64(&val_image(0)), "factor": 3}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_field(&body).as_deref(), Some("factor"));
    let (status, _) = call(app, "POST", "/api/downscale", Some(json!({"source": png_b64(&val_image(0)), "factor": 0}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn static_bundle_is_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>editor</html>").unwrap();
    let mut s = state();
    s.static_dir = Some(dir.path().to_path_buf());
    let app = router(s);
    let (status, body) = call(app.clone(), "GET", "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>editor</html>");
    let (status, _) = call(app.clone(), "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(app, "GET", "/api/info", None).await;
    assert_eq!(status, StatusCode::OK);
}

#[test]
fn loaded_model_is_shareable_across_threads() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Arc<LoadedModel>>();
}
