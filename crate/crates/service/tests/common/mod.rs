#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use fewloop_service::{router, Service, ServiceConfig};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const LABELS: [(&str, &str); 3] = [
    ("sports", "sports games teams players and matches"),
    ("politics", "politics elections government and parliament"),
    ("tech", "technology software computers and gadgets"),
];

const VOCAB: [&[&str]; 3] = [
    &["football", "match", "goal", "team", "league", "coach", "players", "score", "stadium", "season"],
    &["election", "vote", "parliament", "minister", "policy", "party", "senate", "campaign", "law", "debate"],
    &["software", "laptop", "code", "chip", "startup", "app", "cloud", "server", "robot", "browser"],
];
const FILLER: [&str; 6] = ["the", "news", "today", "about", "new", "big"];

/// Deterministic three-topic pool. Every instance carries its gold label;
/// the last `test` instances are test-marked.
pub fn pool_instances(n: usize, test: usize) -> Vec<Value> {
    (0..n)
        .map(|i| {
            let c = i % 3;
            let v = VOCAB[c];
            let words = [
                FILLER[i % FILLER.len()],
                v[(i * 7) % v.len()],
                v[(i * 3 + 1) % v.len()],
                FILLER[(i / 3) % FILLER.len()],
                v[(i / 7) % v.len()],
            ];
            json!({
                "id": format!("doc-{i:05}"),
                "text": format!("{} {i}", words.join(" ")),
                "label": LABELS[c].0,
                "test": i >= n - test,
            })
        })
        .collect()
}

pub fn gold_label(id: &str) -> &'static str {
    let i: usize = id.trim_start_matches("doc-").parse().unwrap();
    LABELS[i % 3].0
}

pub fn label_set() -> Value {
    Value::Array(
        LABELS
            .iter()
            .map(|(n, d)| json!({ "name": n, "description": d }))
            .collect(),
    )
}

pub fn config(dir: &Path) -> ServiceConfig {
    ServiceConfig {
        data_dir: dir.to_path_buf(),
        encoder_dim: 128,
        sample_t: 200,
        ..Default::default()
    }
}

pub fn open(config: ServiceConfig) -> Client {
    Client::new(Arc::new(Service::open(config).unwrap()))
}

#[derive(Clone)]
pub struct Client {
    pub service: Arc<Service>,
    router: Router,
}

pub struct Reply {
    pub status: StatusCode,
    pub body: Value,
    pub retry_after: Option<String>,
}

impl Client {
    pub fn new(service: Arc<Service>) -> Self {
        let router = router(Arc::clone(&service));
        Self { service, router }
    }

    pub async fn raw(&self, method: &str, path: &str, body: Option<String>) -> Reply {
        let req = Request::builder()
            .method(method)
            .uri(path)
            .header("content-type", "application/json")
            .body(body.map(Body::from).unwrap_or_else(Body::empty))
            .unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let body = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        Reply {
            status,
            body,
            retry_after,
        }
    }

    pub async fn get(&self, path: &str) -> Reply {
        self.raw("GET", path, None).await
    }

    pub async fn post(&self, path: &str, body: Value) -> Reply {
        self.raw("POST", path, Some(body.to_string())).await
    }

    /// Registers a pool and returns its id.
    pub async fn pool(&self, n: usize, test: usize) -> String {
        let r = self.post("/pools", json!({ "name": "news", "instances": pool_instances(n, test) })).await;
        assert!(r.status.is_success(), "{}", r.body);
        r.body["pool_id"].as_str().unwrap().to_string()
    }

    /// Creates a zero-shot model and returns its id.
    pub async fn model(&self, pool_id: &str, extra: Value) -> String {
        let mut body = json!({ "name": "m", "label_set": label_set(), "pool_id": pool_id });
        if let Value::Object(map) = extra {
            body.as_object_mut().unwrap().extend(map);
        }
        let r = self.post("/models", body).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.body);
        r.body["model_id"].as_str().unwrap().to_string()
    }

    pub async fn request(&self, model: &str, body: Value) -> Reply {
        self.post(&format!("/models/{model}/request-instances"), body).await
    }

    /// Requests a batch and annotates it with gold labels.
    pub async fn annotate_next(&self, model: &str, k: usize) -> Reply {
        let batch = self.request(model, json!({ "k": k })).await;
        assert_eq!(batch.status, StatusCode::OK, "{}", batch.body);
        let annotations: Vec<Value> = batch.body["instances"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| {
                let id = i["id"].as_str().unwrap();
                json!({ "id": id, "label": gold_label(id) })
            })
            .collect();
        self.post(&format!("/models/{model}/update"), json!({ "annotations": annotations }))
            .await
    }
}

pub fn ids(batch: &Value) -> Vec<String> {
    batch["instances"]
        .as_array()
        .unwrap()
        .iter()
        .map(|i| i["id"].as_str().unwrap().to_string())
        .collect()
}
