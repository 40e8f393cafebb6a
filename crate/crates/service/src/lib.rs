//! HTTP service: case submission, the escalation queue, clinician review,
//! metrics and threshold state, with cases and the audit log persisted to a
//! data directory and replayed on restart.

pub mod engine;
pub mod http;

use std::net::SocketAddr;
use std::path::PathBuf;

use medroute_core::config::EngineConfig;

pub use engine::{
    CaseStatus, CaseView, Engine, EscalationTicket, EvidenceItem, MetricsView, Resolution,
    ReviewRequest, ReviewResponse, ServiceError, SubmitResponse, ThresholdView, TicketStatus,
    VerdictKind,
};
pub use http::router;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub engine: EngineConfig,
    /// `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub api_token: Option<String>,
    pub static_dir: Option<PathBuf>,
}

/// Opens the engine and serves until the listener fails.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> Result<(), ServiceError> {
    let engine = Engine::open(cfg.engine, cfg.data_dir.as_deref())?;
    let app = router(engine, cfg.api_token, cfg.static_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(%addr, "listening");
    axum::serve(listener, app).await?;
    Ok(())
}
