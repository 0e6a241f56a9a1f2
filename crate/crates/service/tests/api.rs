use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tempfile::TempDir;
use tower::ServiceExt;

use xres_core::dataset::{RatingEvent, TierName, TierSet};
use xres_core::imaging::{build_pyramid, Raster};
use xres_core::protocol::{write_training, TrainingItem};
use xres_core::store;
use xres_service::study::{PYRAMID_DIR, RATINGS_LOG, SESSIONS_LOG, STUDY_FILE, TOKENS_FILE, TRAINING_FILE};
use xres_service::{router, AppState, Study};

const MAIN: [&str; 5] = ["img-a", "img-b", "img-c", "img-d", "img-e"];
const TRAINING: [(&str, f64, f64); 2] = [("train-1", 60.0, 80.0), ("train-2", 10.0, 30.0)];

fn study_dir(n_tokens: usize) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let tiers = TierSet::from_base(16, 12).unwrap();
    let pyr_dir = dir.path().join(PYRAMID_DIR);
    let mut entries = Vec::new();
    let ids = MAIN.iter().copied().chain(TRAINING.iter().map(|t| t.0));
    for (k, id) in ids.enumerate() {
        let crop = Raster::<f64>::from_fn(64, 48, 3, |x, y, c| ((x * 7 + y * 3 + c * 11 + k * 5) % 17) as f64 / 16.0).unwrap();
        let p = build_pyramid(&crop, &tiers).unwrap();
        entries.extend(store::write_pyramid(&pyr_dir, id, &p).unwrap());
    }
    store::write_index(&pyr_dir, &entries).unwrap();
    let training: Vec<TrainingItem> = TRAINING
        .iter()
        .map(|&(id, lo, hi)| TrainingItem {
            image_id: id.to_string(),
            tier: TierName::S,
            lo,
            hi,
        })
        .collect();
    write_training(std::fs::File::create(dir.path().join(TRAINING_FILE)).unwrap(), &training).unwrap();
    let tokens: String = (0..n_tokens).map(|i| format!("tok{i}\n")).collect();
    std::fs::write(dir.path().join(TOKENS_FILE), tokens).unwrap();
    std::fs::write(dir.path().join(STUDY_FILE), r#"{"seed": 3, "tiers": ["S"]}"#).unwrap();
    dir
}

fn app(dir: &Path) -> Router {
    router(AppState::new(Study::load(dir).unwrap()).unwrap())
}

fn device(measured: (u32, u32), diag: f64) -> Value {
    json!({
        "reported": {"diagonal_inches": diag, "physical_width": 3840, "physical_height": 2160,
                     "virtual_width": 3840, "virtual_height": 2160},
        "measured": {"virtual_width": measured.0, "virtual_height": measured.1,
                     "pixel_ratio": 1.0, "window_maximized": true}
    })
}

struct Reply {
    status: StatusCode,
    body: Vec<u8>,
    headers: axum::http::HeaderMap,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap()
    }

    fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

async fn send(app: &Router, method: &str, uri: &str, body: Option<String>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, body, headers }
}

async fn create(app: &Router, token: &str, dev: Value) -> Reply {
    send(app, "POST", "/sessions", Some(json!({"token": token, "device": dev}).to_string())).await
}

async fn rate(app: &Router, sid: &str, current: &Value, value: f64, at: u64) -> Reply {
    let item = &current["item"];
    let mut sub = json!({
        "image_id": item["image_id"],
        "tier": item["tier"],
        "value": value,
        "submitted_at": at,
        "window_maximized": true,
    });
    if item["phase"] == "main" {
        sub["batch_id"] = item["batch_id"].clone();
        sub["slot"] = item["slot"].clone();
    }
    send(app, "POST", &format!("/sessions/{sid}/ratings"), Some(sub.to_string())).await
}

/// Per-image rating that is perfectly consistent across repetitions.
fn consistent_value(image_id: &str, offset: f64) -> f64 {
    let k = MAIN.iter().position(|&m| m == image_id).unwrap() as f64;
    10.0 + 15.0 * k + offset
}

/// Walks a freshly created session to the end; returns every response body.
async fn complete(app: &Router, sid: &str, mut current: Value, offset: f64) -> Vec<String> {
    let mut bodies = Vec::new();
    let mut at = 1_700_000_000_000;
    loop {
        let item = current["item"].clone();
        let value = match item["phase"].as_str().unwrap() {
            "training" => {
                let (_, lo, hi) = TRAINING.iter().find(|t| t.0 == item["image_id"]).unwrap();
                (lo + hi) / 2.0
            }
            "main" => consistent_value(item["image_id"].as_str().unwrap(), offset),
            "done" => return bodies,
            other => panic!("unexpected phase {other}"),
        };
        at += 1000;
        let r = rate(app, sid, &current, value, at).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        bodies.push(r.text());
        current = r.json()["current"].clone();
    }
}

#[tokio::test]
async fn session_creation_rules() {
    let dir = study_dir(2);
    let app = app(dir.path());
    let r = create(&app, "tok0", device((1366, 768), 15.6)).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN);
    assert_eq!(r.json()["accepted"], false);
    let r = create(&app, "tok0", device((1280, 720), 15.6)).await;
    assert_eq!(r.status, StatusCode::FORBIDDEN, "measured geometry governs");
    let r = create(&app, "nope", device((1920, 1080), 15.0)).await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);

    let r = create(&app, "tok0", device((1920, 1080), 15.0)).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
    let v = r.json();
    assert_eq!(v["accepted"], true);
    assert_eq!(v["participant_id"], "p001");
    assert_eq!(v["current"]["item"]["phase"], "training");
    let sid = v["session_id"].as_str().unwrap().to_string();

    let r = create(&app, "tok0", device((1920, 1080), 15.0)).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(create(&app, "tok1", device((2560, 1440), 27.0)).await.status, StatusCode::CREATED);

    let p = send(&app, "GET", &format!("/sessions/{sid}/progress"), None).await.json();
    assert_eq!(p["phase"], "training");
    assert_eq!(p["batches_done"], 0);
    assert_eq!(p["batches_total"], 1);
    assert_eq!(send(&app, "GET", "/sessions/unknown/progress", None).await.status, StatusCode::NOT_FOUND);

    let log = std::fs::read_to_string(dir.path().join(SESSIONS_LOG)).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    assert!(log.contains("\"device_check\""));
}

#[tokio::test]
async fn images_are_byte_exact_and_only_current() {
    let dir = study_dir(1);
    let app = app(dir.path());
    let v = create(&app, "tok0", device((1920, 1080), 15.0)).await.json();
    let sid = v["session_id"].as_str().unwrap().to_string();
    let mut current = v["current"].clone();

    let url = current["image"]["url"].as_str().unwrap().to_string();
    let r = send(&app, "GET", &url, None).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers["content-type"], "image/png");
    let image_id = current["item"]["image_id"].as_str().unwrap();
    let stored = std::fs::read(dir.path().join(PYRAMID_DIR).join(store::tier_file(image_id, TierName::S))).unwrap();
    assert_eq!(Sha256::digest(&r.body), Sha256::digest(&stored));
    assert_eq!(r.headers["x-image-width"], "16");
    assert_eq!(r.headers["x-image-height"], "12");
    assert_eq!(current["image"]["width"], 16);

    let future = format!("/images/img-a/S?session={sid}");
    assert_eq!(send(&app, "GET", &future, None).await.status, StatusCode::CONFLICT);
    assert_eq!(send(&app, "GET", "/images/img-a/S", None).await.status, StatusCode::BAD_REQUEST);

    // Finish training, then rate the first main slot and try to revisit it.
    for _ in 0..TRAINING.len() {
        let (_, lo, hi) = TRAINING.iter().find(|t| t.0 == current["item"]["image_id"]).unwrap();
        current = rate(&app, &sid, &current, (lo + hi) / 2.0, 1).await.json()["current"].clone();
    }
    assert_eq!(current["item"]["phase"], "main");
    let rated_url = current["image"]["url"].as_str().unwrap().to_string();
    let rated_id = current["item"]["image_id"].as_str().unwrap().to_string();
    current = rate(&app, &sid, &current, 40.0, 2).await.json()["current"].clone();
    assert_ne!(current["item"]["image_id"].as_str().unwrap(), rated_id);
    assert_eq!(send(&app, "GET", &rated_url, None).await.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn training_retry_then_main_batch() {
    let dir = study_dir(1);
    let app = app(dir.path());
    let v = create(&app, "tok0", device((1920, 1080), 15.0)).await.json();
    let sid = v["session_id"].as_str().unwrap().to_string();
    let current = v["current"].clone();
    let (_, lo, hi) = *TRAINING.iter().find(|t| t.0 == current["item"]["image_id"]).unwrap();

    let r = rate(&app, &sid, &current, if lo > 50.0 { 5.0 } else { 95.0 }, 1).await;
    assert_eq!(r.status, StatusCode::OK);
    let out = r.json();
    assert_eq!(out["outcome"], "training_retry");
    assert_eq!(out["lo"], lo);
    assert_eq!(out["hi"], hi);
    assert_eq!(out["current"]["item"], current["item"], "same item is shown again");

    let r = rate(&app, &sid, &current, 150.0, 2).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let mut bad = json!({"image_id": current["item"]["image_id"], "tier": "S", "value": 50.0,
                         "submitted_at": "yesterday"});
    let uri = format!("/sessions/{sid}/ratings");
    let r = send(&app, "POST", &uri, Some(bad.to_string())).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    bad["submitted_at"] = json!(-5);
    assert_eq!(send(&app, "POST", &uri, Some(bad.to_string())).await.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(send(&app, "POST", &uri, Some("{not json".into())).await.status, StatusCode::BAD_REQUEST);
    let wrong = json!({"image_id": "img-a", "tier": "S", "value": 50.0, "submitted_at": 3});
    assert_eq!(send(&app, "POST", &uri, Some(wrong.to_string())).await.status, StatusCode::CONFLICT);

    let bodies = complete(&app, &sid, current, 0.0).await;
    let last: Value = serde_json::from_str(bodies.last().unwrap()).unwrap();
    assert_eq!(last["outcome"], "batch_accepted");
    assert_eq!(last["phase"], "done");
    assert_eq!(last["current"]["item"]["phase"], "done");
    assert_eq!(bodies.len(), TRAINING.len() + 2 * MAIN.len());

    let p = send(&app, "GET", &format!("/sessions/{sid}/progress"), None).await.json();
    assert_eq!(p["batches_done"], 1);
    assert_eq!(p["accepted_ratings"], 10);
    assert_eq!(p["phase"], "done");

    let tiers = TierSet::from_base(16, 12).unwrap();
    let ratings = std::fs::read_to_string(dir.path().join(RATINGS_LOG)).unwrap();
    let events: Vec<RatingEvent> = ratings.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), 10);
    for e in &events {
        e.validate(&tiers).unwrap();
        assert_eq!(e.value, consistent_value(&e.image_id, 0.0));
        assert_eq!(e.window_maximized, Some(true));
    }

    // The finished token may start over.
    assert_eq!(create(&app, "tok0", device((1920, 1080), 15.0)).await.status, StatusCode::CREATED);
}

#[tokio::test]
async fn responses_never_echo_ratings() {
    let dir = study_dir(1);
    let app = app(dir.path());
    let v = create(&app, "tok0", device((1920, 1080), 15.0)).await.json();
    let sid = v["session_id"].as_str().unwrap().to_string();
    // Offsets give main values like 13.37, which nothing else in a response contains.
    let mut bodies = complete(&app, &sid, v["current"].clone(), 0.37).await;
    bodies.push(send(&app, "GET", &format!("/sessions/{sid}/progress"), None).await.text());
    bodies.push(send(&app, "GET", &format!("/sessions/{sid}/current"), None).await.text());
    for b in &bodies {
        assert!(!b.contains("\"value\""), "{b}");
        assert!(!b.contains(".37"), "{b}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_raters_do_not_interleave() {
    const RATERS: usize = 10;
    let dir = study_dir(RATERS);
    let app = Arc::new(app(dir.path()));
    let mut tasks = Vec::new();
    for i in 0..RATERS {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let v = create(&app, &format!("tok{i}"), device((1920, 1080), 15.0)).await.json();
            let sid = v["session_id"].as_str().unwrap().to_string();
            complete(&app, &sid, v["current"].clone(), i as f64 / 10.0).await;
            sid
        }));
    }
    let mut sids = Vec::new();
    for t in tasks {
        sids.push(t.await.unwrap());
    }
    sids.sort();
    sids.dedup();
    assert_eq!(sids.len(), RATERS);

    let ratings = std::fs::read_to_string(dir.path().join(RATINGS_LOG)).unwrap();
    let events: Vec<RatingEvent> = ratings.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.len(), RATERS * 2 * MAIN.len());
    for block in events.chunks(2 * MAIN.len()) {
        let pid = &block[0].participant_id;
        let i: usize = pid[1..].parse::<usize>().unwrap() - 1;
        for e in block {
            assert_eq!(&e.participant_id, pid, "accepted batches are written contiguously");
            assert!((e.value - consistent_value(&e.image_id, i as f64 / 10.0)).abs() < 1e-9);
        }
    }
    let log = std::fs::read_to_string(dir.path().join(SESSIONS_LOG)).unwrap();
    for line in log.lines() {
        let rec: Value = serde_json::from_str(line).unwrap();
        if let Some(e) = rec["event"].get("event") {
            assert_eq!(e["participant_id"], rec["participant_id"]);
        }
    }
}
