use std::sync::OnceLock;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use streetscape::corpus::{encode_mask_png, encode_rgb_png};
use streetscape::pipeline::{train_all, Models, PipelineConfig};
use streetscape::scene::synth_corpus;
use streetscape::taxonomy::RoadMask;
use streetscape_service::{router, AppState, ErrorBody, GenerateResponse, ServiceConfig};

fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = PipelineConfig::tiny(3);
        let corpus = synth_corpus(&cfg.corpus).unwrap();
        train_all(&cfg, &corpus).unwrap().0
    })
}

fn app() -> axum::Router {
    router(AppState::ready(models().clone(), &ServiceConfig::default()))
}

async fn call(app: axum::Router, method: &str, path: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(path).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn gen_body(road: f64, mask: Option<String>, seed: u64) -> Value {
    json!({
        "city_style": "Chicago",
        "proportions": {"road": road, "sidewalk": 8.0, "building": 30.0, "sky": 15.0, "tree": 10.0, "person": 1.0},
        "counts": {"cars": 2, "persons": 1, "bicycles": 0, "buses": 0},
        "road_mask": mask,
        "seed": seed
    })
}

fn half_mask(res: usize) -> String {
    let bits = (0..res * res).map(|i| u8::from(i / res >= res / 2)).collect();
    B64.encode(encode_mask_png(&RoadMask::new(res, res, bits)))
}

#[tokio::test]
async fn health_reports_ok_with_hashes() {
    let (status, body) = call(app(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["model_hashes"].as_object().unwrap().len(), 4);
}

#[tokio::test]
async fn loading_state_returns_503() {
    let app = router(AppState::loading(&ServiceConfig::default()));
    let (status, body) = call(app.clone(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["code"], "loading");
    let (status, _) = call(app, "POST", "/generate", Some(gen_body(20.0, None, 1))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn out_of_range_percent_is_422_naming_the_class() {
    let (status, body) = call(app(), "POST", "/generate", Some(gen_body(110.0, None, 1))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let err: ErrorBody = serde_json::from_value(body).unwrap();
    assert_eq!(err.field.as_deref(), Some("proportions.road"));
    assert!(err.message.contains("road"));
}

#[tokio::test]
async fn malformed_json_and_unknown_style_are_422() {
    let req = Request::builder().method("POST").uri("/generate").body(Body::from("{not json")).unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNPROCESSABLE_ENTITY);
    let mut body = gen_body(20.0, None, 1);
    body["city_style"] = json!("Atlantis");
    let (status, body) = call(app(), "POST", "/generate", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "city_style");
}

#[tokio::test]
async fn fixed_seed_is_byte_identical() {
    let (s1, a) = call(app(), "POST", "/generate", Some(gen_body(20.0, None, 42))).await;
    let (s2, b) = call(app(), "POST", "/generate", Some(gen_body(20.0, None, 42))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let a: GenerateResponse = serde_json::from_value(a).unwrap();
    let b: GenerateResponse = serde_json::from_value(b).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.seg_map, b.seg_map);
    assert!((a.realized_proportions.sum() - 100.0).abs() <= 0.01);
    assert_eq!(a.road_iou_vs_mask, None);
    assert_eq!(a.seed, 42);
}

#[tokio::test]
async fn mask_gives_road_iou_and_wrong_size_conflicts() {
    let res = models().resolution();
    let (status, body) = call(app(), "POST", "/generate", Some(gen_body(20.0, Some(half_mask(res)), 5))).await;
    assert_eq!(status, StatusCode::OK);
    let r: GenerateResponse = serde_json::from_value(body).unwrap();
    let iou = r.road_iou_vs_mask.expect("mask supplied");
    assert!((0.0..=1.0).contains(&iou));

    let (status, body) = call(app(), "POST", "/generate", Some(gen_body(20.0, Some(half_mask(res * 2)), 5))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["field"], "road_mask");

    let (status, body) = call(app(), "POST", "/generate", Some(gen_body(20.0, Some("%%%".into()), 5))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["field"], "road_mask");
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let reqs = (0..4).map(|_| call(app(), "POST", "/generate", Some(gen_body(25.0, None, 9))));
    let out = futures_join(reqs.collect()).await;
    for (s, b) in &out {
        assert_eq!(*s, StatusCode::OK);
        assert_eq!(b["image"], out[0].1["image"]);
    }
}

async fn futures_join<F: std::future::Future<Output = (StatusCode, Value)> + Send + 'static>(fs: Vec<F>) -> Vec<(StatusCode, Value)> {
    let handles: Vec<_> = fs.into_iter().map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn evaluate_identical_pair() {
    let res = models().resolution() as u32;
    let img = image::RgbImage::from_fn(res, res, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 90]));
    let b = B64.encode(encode_rgb_png(&img));
    let (status, body) = call(app(), "POST", "/evaluate", Some(json!({"image": b, "reference": b}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!((body["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(body["fid"].as_f64().unwrap().abs() < 1e-9);
    assert!(body["perceptual_distance"].as_f64().unwrap().abs() < 1e-9);
    assert_eq!(body["miou"].as_f64().unwrap(), 1.0);

    let small = B64.encode(encode_rgb_png(&image::RgbImage::new(8, 8)));
    let (status, _) = call(app(), "POST", "/evaluate", Some(json!({"image": small, "reference": b}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn palette_lists_all_labels() {
    let (status, body) = call(app(), "GET", "/palette", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["entries"].as_array().unwrap().len(), 10);
}

#[test]
fn env_overrides_config() {
    let cfg = ServiceConfig::default()
        .apply_env(|k| match k {
            "STUDIO_PORT" => Some("9123".into()),
            "STUDIO_CKPT_DIR" => Some("/tmp/ck".into()),
            _ => None,
        })
        .unwrap();
    assert_eq!(cfg.port, 9123);
    assert_eq!(cfg.ckpt_dir, std::path::PathBuf::from("/tmp/ck"));
    assert!(ServiceConfig::default().apply_env(|_| Some("x".into())).is_err());
}
