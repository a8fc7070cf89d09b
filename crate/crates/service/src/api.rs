//! HTTP routes. Handlers parse JSON bodies themselves so malformed input
//! gets the same `{code, message, details}` error shape as everything else.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use tower_http::cors::CorsLayer;

use crate::error::{Result, ServiceError};
use crate::service::{Service, UpdateOutcome};
use crate::types::{AnnotationBatch, CreateModel, RegisterPool, RequestInstances, RunRequest};

/// Every route as `(method, path)`, in the order the schema lists them.
pub const ROUTES: &[(&str, &str)] = &[
    ("get", "/health"),
    ("get", "/pools"),
    ("post", "/pools"),
    ("get", "/pools/{id}"),
    ("get", "/models"),
    ("post", "/models"),
    ("get", "/models/{id}"),
    ("post", "/models/{id}/request-instances"),
    ("post", "/models/{id}/update"),
    ("post", "/models/{id}/run"),
    ("get", "/models/{id}/evaluate"),
];

type AppState = Arc<Service>;

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

/// Like [`parse`], but an empty body reads as `{}`.
fn parse_or_default<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        parse(body)
    }
}

pub fn router(service: Arc<Service>) -> Router {
    let limit = service.config().max_body_bytes;
    Router::new()
        .route("/health", get(health))
        .route("/pools", get(list_pools).post(register_pool))
        .route("/pools/{id}", get(get_pool))
        .route("/models", get(list_models).post(create_model))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/request-instances", post(request_instances))
        .route("/models/{id}/update", post(update))
        .route("/models/{id}/run", post(run))
        .route("/models/{id}/evaluate", get(evaluate))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(limit))
        .layer(CorsLayer::permissive())
        .with_state(service)
}

async fn fallback() -> ServiceError {
    ServiceError::NotFound("route".into())
}

async fn health(State(s): State<AppState>) -> Response {
    Json(s.health()).into_response()
}

async fn list_pools(State(s): State<AppState>) -> Response {
    Json(s.pools()).into_response()
}

async fn register_pool(State(s): State<AppState>, body: Bytes) -> Result<Response> {
    let req: RegisterPool = parse(&body)?;
    let (created, summary) = s.register_pool(req).await?;
    let status = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(summary)).into_response())
}

async fn get_pool(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(s.pool(&id)?).into_response())
}

async fn list_models(State(s): State<AppState>) -> Response {
    Json(s.models()).into_response()
}

async fn create_model(State(s): State<AppState>, body: Bytes) -> Result<Response> {
    let req: CreateModel = parse(&body)?;
    let summary = s.create_model(req).await?;
    Ok((StatusCode::CREATED, Json(summary)).into_response())
}

async fn get_model(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(s.model(&id)?).into_response())
}

async fn request_instances(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response> {
    let req: RequestInstances = parse_or_default(&body)?;
    Ok(Json(s.request_instances(&id, req).await?).into_response())
}

async fn update(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response> {
    let batch: AnnotationBatch = parse(&body)?;
    Ok(match s.update(&id, batch).await? {
        UpdateOutcome::Applied(summary) => Json(summary).into_response(),
        UpdateOutcome::Accepted(accepted) => (StatusCode::ACCEPTED, Json(accepted)).into_response(),
    })
}

async fn run(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Response> {
    let req: RunRequest = parse(&body)?;
    Ok(Json(s.run(&id, req).await?).into_response())
}

async fn evaluate(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(s.evaluate(&id).await?).into_response())
}
