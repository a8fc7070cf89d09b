//! Checks `docs/api-schema.json` against the router and against live
//! request and response bodies.

mod common;

use std::collections::BTreeSet;

use axum::http::StatusCode;
use common::{config, gold_label, label_set, open, pool_instances, Client, Reply};
use fewloop_service::{ServiceConfig, ROUTES};
use serde_json::{json, Value};

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/api-schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn resolve<'a>(root: &'a Value, s: &'a Value) -> &'a Value {
    match s.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let target = root.pointer(r.trim_start_matches('#')).unwrap_or_else(|| panic!("dangling {r}"));
            resolve(root, target)
        }
        None => s,
    }
}

/// Validates `v` against the subset of JSON schema the document uses.
fn validate(root: &Value, schema: &Value, v: &Value, at: &str, errors: &mut Vec<String>) {
    let s = resolve(root, schema);
    if v.is_null() && s.get("nullable") == Some(&Value::Bool(true)) {
        return;
    }
    if let Some(ty) = s.get("type").and_then(Value::as_str) {
        let ok = match ty {
            "object" => v.is_object(),
            "array" => v.is_array(),
            "string" => v.is_string(),
            "integer" => v.is_i64() || v.is_u64(),
            "number" => v.is_number(),
            "boolean" => v.is_boolean(),
            other => panic!("unsupported type {other}"),
        };
        if !ok {
            errors.push(format!("{at}: expected {ty}, got {v}"));
            return;
        }
    }
    if let Some(options) = s.get("enum").and_then(Value::as_array) {
        if !options.contains(v) {
            errors.push(format!("{at}: {v} not in enum"));
        }
    }
    if let (Some(min), Some(x)) = (s.get("minimum").and_then(Value::as_f64), v.as_f64()) {
        if x < min {
            errors.push(format!("{at}: {x} below minimum {min}"));
        }
    }
    if let (Some(items), Some(arr)) = (s.get("items"), v.as_array()) {
        for (i, x) in arr.iter().enumerate() {
            validate(root, items, x, &format!("{at}[{i}]"), errors);
        }
    }
    if let Some(obj) = v.as_object() {
        let props = s.get("properties").and_then(Value::as_object);
        for req in s.get("required").and_then(Value::as_array).into_iter().flatten() {
            if !obj.contains_key(req.as_str().unwrap()) {
                errors.push(format!("{at}: missing required `{}`", req.as_str().unwrap()));
            }
        }
        for (k, x) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(p) => validate(root, p, x, &format!("{at}.{k}"), errors),
                None => match s.get("additionalProperties") {
                    Some(Value::Bool(false)) => errors.push(format!("{at}: unexpected property `{k}`")),
                    Some(extra @ Value::Object(_)) => validate(root, extra, x, &format!("{at}.{k}"), errors),
                    _ => {}
                },
            }
        }
    }
}

fn assert_valid(root: &Value, schema: &Value, v: &Value, what: &str) {
    let mut errors = Vec::new();
    validate(root, schema, v, "$", &mut errors);
    assert!(errors.is_empty(), "{what} does not match the schema:\n{}\n{v:#}", errors.join("\n"));
}

/// Sends a request through the router and checks both bodies against the
/// operation documented for `template`.
struct Checked {
    client: Client,
    root: Value,
    seen: BTreeSet<(String, String, u16)>,
}

impl Checked {
    async fn call(&mut self, method: &str, template: &str, id: &str, body: Option<Value>) -> Reply {
        let op = self.root["paths"][template][method].clone();
        assert!(op.is_object(), "{method} {template} is not documented");
        if let Some(b) = &body {
            let s = &op["requestBody"]["content"]["application/json"]["schema"];
            assert!(s.is_object(), "{method} {template} has no request body schema");
            assert_valid(&self.root, s, b, &format!("request to {method} {template}"));
        }
        let path = template.replace("{id}", id);
        let reply = self.client.raw(&method.to_uppercase(), &path, body.map(|b| b.to_string())).await;
        let code = reply.status.as_u16().to_string();
        let resp = &op["responses"][&code];
        assert!(resp.is_object(), "{method} {template} does not document status {code}: {}", reply.body);
        let s = &resp["content"]["application/json"]["schema"];
        assert_valid(&self.root, s, &reply.body, &format!("{code} from {method} {template}"));
        self.seen.insert((method.into(), template.into(), reply.status.as_u16()));
        reply
    }
}

#[test]
fn documented_paths_match_the_router() {
    let s = schema();
    let mut documented = BTreeSet::new();
    for (path, ops) in s["paths"].as_object().unwrap() {
        for method in ops.as_object().unwrap().keys().filter(|m| *m != "parameters") {
            documented.insert((method.clone(), path.clone()));
        }
    }
    let routed: BTreeSet<_> = ROUTES.iter().map(|(m, p)| (m.to_string(), p.to_string())).collect();
    assert_eq!(documented, routed);
}

#[test]
fn every_reference_resolves_and_objects_are_closed() {
    let s = schema();
    fn walk(root: &Value, v: &Value, at: &str) {
        match v {
            Value::Object(map) => {
                if let Some(r) = map.get("$ref").and_then(Value::as_str) {
                    assert!(root.pointer(r.trim_start_matches('#')).is_some(), "{at}: dangling {r}");
                }
                if map.get("type") == Some(&json!("object")) && map.contains_key("properties") {
                    assert_eq!(map.get("additionalProperties"), Some(&json!(false)), "{at} is open");
                }
                for (k, x) in map {
                    walk(root, x, &format!("{at}/{k}"));
                }
            }
            Value::Array(items) => items.iter().enumerate().for_each(|(i, x)| walk(root, x, &format!("{at}/{i}"))),
            _ => {}
        }
    }
    walk(&s, &s, "#");
}

#[test]
fn validator_rejects_mismatches() {
    let s = schema();
    let summary = json!({ "$ref": "#/components/schemas/PoolSummary" });
    let good = json!({ "pool_id": "p-1", "name": "n", "size": 3, "test_size": 0 });
    assert_valid(&s, &summary, &good, "good summary");
    for bad in [
        json!({ "pool_id": "p-1", "name": "n", "size": 3 }),
        json!({ "pool_id": "p-1", "name": "n", "size": -3, "test_size": 0 }),
        json!({ "pool_id": "p-1", "name": "n", "size": 3, "test_size": 0, "extra": 1 }),
        json!({ "pool_id": 1, "name": "n", "size": 3, "test_size": 0 }),
    ] {
        let mut errors = Vec::new();
        validate(&s, &summary, &bad, "$", &mut errors);
        assert!(!errors.is_empty(), "accepted {bad}");
    }
    let mut errors = Vec::new();
    validate(&s, &json!({ "$ref": "#/components/schemas/Strategy" }), &json!("psychic"), "$", &mut errors);
    assert_eq!(errors.len(), 1);
}

#[tokio::test]
async fn live_traffic_matches_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Checked {
        client: open(ServiceConfig {
            max_run_batch: 2,
            ..config(dir.path())
        }),
        root: schema(),
        seen: BTreeSet::new(),
    };
    c.call("get", "/health", "", None).await;
    let pool_body = json!({ "name": "news", "instances": pool_instances(40, 6) });
    let pool = c.call("post", "/pools", "", Some(pool_body.clone())).await;
    let pool_id = pool.body["pool_id"].as_str().unwrap().to_string();
    assert_eq!(c.call("post", "/pools", "", Some(pool_body)).await.status, StatusCode::OK);
    c.call("post", "/pools", "", Some(json!({ "instances": [] }))).await;
    c.call("post", "/pools", "", Some(json!({ "instances": [{"id": "a", "text": "x"}, {"id": "a", "text": "y"}] })))
        .await;
    c.call("get", "/pools", "", None).await;
    c.call("get", "/pools/{id}", &pool_id, None).await;
    c.call("get", "/pools/{id}", "p-none", None).await;

    let create = json!({
        "name": "news", "label_set": label_set(), "pool_id": pool_id, "model_kind": "lr",
        "strategy": "kmedoids+margin", "seed": 3,
        "examples": [{ "id": "doc-00000", "label": "sports" }, { "text": "vote today", "label": "politics" }],
        "train": { "epochs": 50 },
    });
    let model = c.call("post", "/models", "", Some(create)).await;
    assert_eq!(model.status, StatusCode::CREATED, "{}", model.body);
    let id = model.body["model_id"].as_str().unwrap().to_string();
    let unknown = json!({ "name": "x", "label_set": label_set(), "pool_id": pool_id, "examples": [{ "text": "t", "label": "weather" }] });
    c.call("post", "/models", "", Some(unknown)).await;
    c.call("get", "/models", "", None).await;
    c.call("get", "/models/{id}", &id, None).await;
    c.call("get", "/models/{id}", "m-none", None).await;

    let batch = c.call("post", "/models/{id}/request-instances", &id, Some(json!({ "k": 5, "reveal": true }))).await;
    let annotations: Vec<Value> = common::ids(&batch.body)
        .iter()
        .map(|i| json!({ "id": i, "label": gold_label(i) }))
        .collect();
    let update = json!({ "annotations": annotations, "note": "first pass" });
    assert_eq!(c.call("post", "/models/{id}/update", &id, Some(update.clone())).await.status, StatusCode::OK);
    assert_eq!(c.call("post", "/models/{id}/update", &id, Some(update)).await.status, StatusCode::CONFLICT);
    c.call("post", "/models/{id}/update", &id, Some(json!({ "annotations": [{ "id": "doc-00039", "label": "tech" }] })))
        .await;
    let zero = c.client.request(&id, json!({ "k": 0 })).await;
    assert_eq!(zero.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_valid(&c.root, &json!({ "$ref": "#/components/schemas/ErrorBody" }), &zero.body, "k = 0");
    c.call("post", "/models/{id}/run", &id, Some(json!({ "texts": ["goal scored", "new chip"] }))).await;
    c.call("post", "/models/{id}/run", &id, Some(json!({ "texts": ["a", "b", "c"] }))).await;
    c.call("post", "/models/{id}/run", &id, Some(json!({ "texts": [""] }))).await;
    c.call("get", "/models/{id}/evaluate", &id, None).await;

    // Drain the pool so the empty-pool error is exercised too.
    let rest = c.call("post", "/models/{id}/request-instances", &id, Some(json!({ "k": 100, "strategy": "random" }))).await;
    let annotations: Vec<Value> = common::ids(&rest.body)
        .iter()
        .map(|i| json!({ "id": i, "label": gold_label(i) }))
        .collect();
    c.call("post", "/models/{id}/update", &id, Some(json!({ "annotations": annotations }))).await;
    let empty = c.call("post", "/models/{id}/request-instances", &id, Some(json!({}))).await;
    assert_eq!(empty.status, StatusCode::CONFLICT);

    let statuses: BTreeSet<u16> = c.seen.iter().map(|(_, _, s)| *s).collect();
    assert_eq!(statuses, BTreeSet::from([200, 201, 404, 409, 413, 422]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn async_responses_match_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = Checked {
        client: open(ServiceConfig {
            async_training: true,
            sample_t: 1000,
            ..config(dir.path())
        }),
        root: schema(),
        seen: BTreeSet::new(),
    };
    let pool = c.client.pool(3000, 0).await;
    let id = c.client.model(&pool, json!({})).await;
    let batch = c.client.request(&id, json!({ "k": 64 })).await;
    let annotations: Vec<Value> = common::ids(&batch.body)
        .iter()
        .map(|i| json!({ "id": i, "label": gold_label(i) }))
        .collect();
    let accepted = c.call("post", "/models/{id}/update", &id, Some(json!({ "annotations": annotations }))).await;
    assert_eq!(accepted.status, StatusCode::ACCEPTED);
    let busy = c.call("get", "/models/{id}/evaluate", &id, None).await;
    assert_eq!(busy.status, StatusCode::SERVICE_UNAVAILABLE);
    let training = c.call("get", "/models/{id}", &id, None).await;
    assert!(training.status.is_success());
    let bad = c.client.raw("POST", &format!("/models/{id}/run"), Some("{".into())).await;
    assert_eq!(bad.status, StatusCode::BAD_REQUEST);
    assert_valid(&c.root, &json!({ "$ref": "#/components/schemas/ErrorBody" }), &bad.body, "bad request");
}
