//! Axum routes over [`Engine`].

use std::path::PathBuf;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::engine::{Engine, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = json!({ "error": self.to_string() });
        if let ServiceError::Invalid(v) = &self {
            body["violations"] = json!(v);
        }
        (status, Json(body)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    engine: Engine,
    token: Option<String>,
}

async fn submit(State(s): State<AppState>, body: Bytes) -> Result<impl IntoResponse, ServiceError> {
    let accepted = s.engine.submit(&body)?;
    Ok((StatusCode::ACCEPTED, Json(accepted)))
}

async fn case(State(s): State<AppState>, Path(id): Path<String>) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(s.engine.case(&id).await?))
}

async fn queue(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.engine.queue().await)
}

async fn review(
    State(s): State<AppState>,
    Path(ticket): Path<String>,
    body: Bytes,
) -> Result<impl IntoResponse, ServiceError> {
    Ok(Json(s.engine.review(&ticket, &body).await?))
}

async fn metrics(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.engine.metrics().await)
}

async fn threshold(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.engine.threshold().await)
}

async fn threshold_csv(State(s): State<AppState>) -> Response {
    match s.engine.threshold_csv().await {
        Ok(csv) => ([(header::CONTENT_TYPE, "text/csv")], csv).into_response(),
        Err(e) => (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "error": e.to_string() })),
        )
            .into_response(),
    }
}

async fn healthz(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.engine.health())
}

async fn require_token(
    State(s): State<AppState>,
    headers: HeaderMap,
    req: Request,
    next: Next,
) -> Response {
    let Some(token) = &s.token else {
        return next.run(req).await;
    };
    let presented = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if presented == Some(token.as_str()) {
        next.run(req).await
    } else {
        (
            StatusCode::UNAUTHORIZED,
            Json(json!({ "error": "missing or invalid bearer token" })),
        )
            .into_response()
    }
}

/// Builds the router. With `token`, every route except `/healthz` and the
/// static files requires `Authorization: Bearer <token>`.
pub fn router(engine: Engine, token: Option<String>, static_dir: Option<PathBuf>) -> Router {
    let state = AppState { engine, token };
    let api = Router::new()
        .route("/cases", post(submit))
        .route("/cases/{id}", get(case))
        .route("/queue", get(queue))
        .route("/queue/{ticket}/review", post(review))
        .route("/metrics", get(metrics))
        .route("/threshold", get(threshold))
        .route("/threshold/trace.csv", get(threshold_csv))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let app = Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}
