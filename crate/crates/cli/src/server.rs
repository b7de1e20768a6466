//! HTTP front for [`Explorer`]. Handlers only translate; all logic and encoding
//! lives in `hicem_core::api`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use hicem_core::api::{error_response, ApiError, ApiResponse, Explorer};

type Shared = Arc<Explorer>;
type Params = Query<HashMap<String, String>>;

fn reply(r: ApiResponse) -> Response {
    let status = StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], r.body).into_response()
}

async fn hierarchy(State(ex): State<Shared>) -> Response {
    reply(ex.hierarchy())
}

async fn samples(State(ex): State<Shared>, Query(q): Params) -> Response {
    let get = |k: &str| q.get(k).map(String::as_str);
    reply(ex.samples(get("split"), get("offset"), get("limit")))
}

async fn prediction(State(ex): State<Shared>, Path(id): Path<String>) -> Response {
    reply(ex.prediction(&id))
}

async fn intervene(State(ex): State<Shared>, Path(id): Path<String>, body: Bytes) -> Response {
    reply(ex.intervene(&id, &body))
}

async fn prototypes(State(ex): State<Shared>, Path(id): Path<String>, Query(q): Params) -> Response {
    reply(ex.prototypes(&id, q.get("n").map(String::as_str)))
}

async fn not_found() -> Response {
    reply(error_response(ApiError::not_found("no such endpoint")))
}

async fn wrong_method() -> Response {
    reply(error_response(ApiError {
        status: 405,
        error: "method not allowed".into(),
        field: None,
    }))
}

pub fn router(explorer: Shared) -> Router {
    Router::new()
        .route("/api/hierarchy", get(hierarchy))
        .route("/api/samples", get(samples))
        .route("/api/samples/{id}/prediction", get(prediction))
        .route("/api/samples/{id}/intervene", axum::routing::post(intervene))
        .route("/api/subconcepts/{id}/prototypes", get(prototypes))
        .fallback(not_found)
        .method_not_allowed_fallback(wrong_method)
        .with_state(explorer)
}

/// Serves until the process is stopped.
pub fn serve_blocking(explorer: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(explorer)).await
    })
}
