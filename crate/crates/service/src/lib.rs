//! HTTP service: upload an image once, then segment its cached features
//! against any prompts and thresholds.
//!
//! Routes live under `/v1`; `GET /v1/spec` serves the OpenAPI description.

mod api;
pub mod rle;
pub mod session;
pub mod state;

pub use api::{
    router, segment_session, AppliedConfig, GridInfo, Health, PromptSummary, SegmentRequest, SegmentResponse,
    SessionCreated,
};
pub use session::{Session, SessionStore};
pub use state::{AppState, Model, ServiceConfig};

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
