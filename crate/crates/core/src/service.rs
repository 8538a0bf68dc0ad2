//! HTTP inference service over one immutable model.
//!
//! `POST /enhance` takes `{"image": <base64 PNG>, "beta": "<decimal>"}` and
//! answers `{"image", "mean_luminance", "millis"}`. `GET /health` answers
//! `ok`; `GET /info` describes the loaded checkpoint.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{Any, CorsLayer};

use crate::color_hvi::RgbImage;
use crate::error::{Error, Result};
use crate::model::{CleRwkvModel, ColorSpace, Variant};

/// Request bodies above this many bytes get 413.
pub const MAX_BODY_BYTES: usize = 4 * 1024 * 1024;
/// Longest accepted image side.
pub const MAX_SIDE: usize = 2048;

struct AppState {
    model: CleRwkvModel,
    digest: String,
    faults: AtomicU64,
}

#[derive(Deserialize)]
struct EnhanceRequest {
    image: String,
    beta: String,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct EnhanceResponse {
    pub image: String,
    pub mean_luminance: f64,
    pub millis: u64,
}

/// Static description served by `GET /info`.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct ModelInfo {
    pub r: usize,
    pub c_model: usize,
    pub num_blocks: usize,
    pub variant: String,
    pub space: String,
    pub digest: String,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl ModelInfo {
    pub fn of(model: &CleRwkvModel, digest: String) -> Self {
        Self {
            r: model.config.r,
            c_model: model.config.c_model,
            num_blocks: model.config.num_blocks,
            variant: match model.config.variant {
                Variant::Conditional => "conditional",
                Variant::Base => "base",
            }
            .into(),
            space: match model.config.space {
                ColorSpace::Hvi => "hvi",
                ColorSpace::Srgb => "srgb",
            }
            .into(),
            digest,
            beta_min: model.meta.beta_range.0,
            beta_max: model.meta.beta_range.1,
        }
    }
}

fn bad_request(msg: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(json!({ "error": msg.into() }))).into_response()
}

fn internal(state: &AppState, detail: &str) -> Response {
    let n = state.faults.fetch_add(1, Ordering::Relaxed);
    let id = format!("{:08x}-{n:04}", std::process::id());
    eprintln!("enhance fault {id}: {detail}");
    (StatusCode::INTERNAL_SERVER_ERROR, Json(json!({ "error": "internal error", "id": id }))).into_response()
}

/// Validates the request body and decodes the image and β.
fn parse_request(body: &[u8]) -> std::result::Result<(RgbImage, f64), String> {
    let req: EnhanceRequest = serde_json::from_slice(body).map_err(|e| format!("malformed body: {e}"))?;
    let beta: f64 = req.beta.trim().parse().map_err(|_| format!("beta {:?} is not a decimal", req.beta))?;
    if !(0.0..=1.0).contains(&beta) {
        return Err(format!("beta {beta} outside [0, 1]"));
    }
    let png = B64.decode(req.image.trim()).map_err(|e| format!("image is not base64: {e}"))?;
    let img = RgbImage::decode_png(&png).map_err(|e| format!("image is not a PNG: {e}"))?;
    if img.height == 0 || img.width == 0 || img.height > MAX_SIDE || img.width > MAX_SIDE {
        return Err(format!("image is {}x{}; sides must be 1..={MAX_SIDE}", img.height, img.width));
    }
    Ok((img, beta))
}

/// Runs one enhancement and encodes the answer.
pub fn enhance_payload(model: &CleRwkvModel, img: &RgbImage, beta: f64) -> Result<EnhanceResponse> {
    let start = Instant::now();
    let out = model.enhance(img, beta)?.quantized();
    let png = out.encode_png()?;
    Ok(EnhanceResponse {
        image: B64.encode(png),
        mean_luminance: out.mean_luma(),
        millis: start.elapsed().as_millis() as u64,
    })
}

async fn enhance(State(state): State<Arc<AppState>>, body: axum::body::Bytes) -> Response {
    let (img, beta) = match parse_request(&body) {
        Ok(v) => v,
        Err(msg) => return bad_request(msg),
    };
    let st = state.clone();
    let job = tokio::task::spawn_blocking(move || enhance_payload(&st.model, &img, beta)).await;
    match job {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => internal(&state, &e.to_string()),
        Err(e) => internal(&state, &e.to_string()),
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn info(State(state): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(ModelInfo::of(&state.model, state.digest.clone()))
}

/// Routes over a shared model. CORS headers are added only when `cors`.
pub fn router(model: CleRwkvModel, cors: bool) -> Router {
    let digest = model.digest();
    let state = Arc::new(AppState {
        model,
        digest,
        faults: AtomicU64::new(0),
    });
    let app = Router::new()
        .route("/enhance", post(enhance))
        .route("/health", get(health))
        .route("/info", get(info))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    if cors {
        app.layer(
            CorsLayer::new()
                .allow_origin(Any)
                .allow_methods([Method::GET, Method::POST])
                .allow_headers([header::CONTENT_TYPE]),
        )
    } else {
        app
    }
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(model: CleRwkvModel, addr: SocketAddr, cors: bool) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("tcp://{addr}"), e))?;
    eprintln!("listening on http://{}", listener.local_addr().map_err(|e| Error::io(format!("tcp://{addr}"), e))?);
    axum::serve(listener, router(model, cors))
        .await
        .map_err(|e| Error::io(format!("tcp://{addr}"), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation() {
        let img = RgbImage::filled(4, 4, [0.2, 0.4, 0.6]);
        let b64 = B64.encode(img.encode_png().unwrap());
        let body = |beta: &str| format!(r#"{{"image":"{b64}","beta":"{beta}"}}"#).into_bytes();
        let (back, beta) = parse_request(&body("0.25")).unwrap();
        assert_eq!((back, beta), (img.quantized(), 0.25));
        assert!(parse_request(&body("2.0")).unwrap_err().contains("outside"));
        assert!(parse_request(&body("-0.1")).is_err());
        assert!(parse_request(&body("NaN")).is_err());
        assert!(parse_request(&body("abc")).unwrap_err().contains("not a decimal"));
        assert!(parse_request(b"{}").unwrap_err().contains("malformed"));
        assert!(parse_request(br#"{"image":"!!","beta":"0.5"}"#).unwrap_err().contains("base64"));
    }
}
