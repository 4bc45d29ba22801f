//! HTTP front end for the submission buffer.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use pilotsim::bridge::SubmissionBuffer;
use pilotsim::workload::Workload;
use serde::Serialize;
use serde_json::{json, Value};

/// Seconds since some fixed origin.
pub type Clock = Arc<dyn Fn() -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    pub buffer: Arc<Mutex<SubmissionBuffer>>,
    pub clock: Clock,
}

impl AppState {
    pub fn new(buffer: SubmissionBuffer) -> Self {
        let origin = Instant::now();
        Self::with_clock(buffer, Arc::new(move || origin.elapsed().as_secs_f64()))
    }

    pub fn with_clock(buffer: SubmissionBuffer, clock: Clock) -> Self {
        AppState {
            buffer: Arc::new(Mutex::new(buffer)),
            clock,
        }
    }

    fn now(&self) -> f64 {
        (self.clock)()
    }
}

#[derive(Serialize)]
struct FlushedWorkload {
    index: usize,
    task_ids: Vec<String>,
}

fn error(status: StatusCode, msg: String, field: Option<&str>) -> Response {
    (status, Json(json!({ "error": msg, "field": field }))).into_response()
}

async fn submit(State(st): State<AppState>, body: String) -> Response {
    let now = st.now();
    let mut buf = st.buffer.lock().expect("buffer lock poisoned");
    match buf.submit_task(&body, now) {
        Ok(ack) => (StatusCode::ACCEPTED, Json(ack)).into_response(),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string(), e.field()),
    }
}

async fn status(State(st): State<AppState>, Path(id): Path<String>) -> Response {
    let buf = st.buffer.lock().expect("buffer lock poisoned");
    match (buf.status(&id), buf.ack(&id)) {
        (Some(s), Some(ack)) => {
            let mut v = serde_json::to_value(s).unwrap_or(Value::Null);
            v["task_id"] = json!(id);
            v["sequence"] = json!(ack.sequence);
            Json(v).into_response()
        }
        _ => error(StatusCode::NOT_FOUND, format!("unknown task {id}"), None),
    }
}

async fn workloads(State(st): State<AppState>) -> Json<Vec<FlushedWorkload>> {
    let buf = st.buffer.lock().expect("buffer lock poisoned");
    Json(
        buf.flushed()
            .iter()
            .enumerate()
            .map(|(index, w)| FlushedWorkload {
                index,
                task_ids: w.tasks().iter().map(|t| t.id.clone()).collect(),
            })
            .collect(),
    )
}

async fn health(State(st): State<AppState>) -> Json<Value> {
    let buf = st.buffer.lock().expect("buffer lock poisoned");
    Json(json!({
        "status": "ok",
        "pending": buf.pending().len(),
        "flushed": buf.flushed().len(),
    }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/tasks", post(submit))
        .route("/tasks/{id}", get(status))
        .route("/workloads", get(workloads))
        .route("/health", get(health))
        .with_state(state)
}

/// Runs the flush policy once against the current clock.
pub fn flush_tick(state: &AppState) -> Option<Workload> {
    let now = state.now();
    state.buffer.lock().expect("buffer lock poisoned").idle_flush(now)
}

/// Serves until ctrl-c, checking the flush policy every `period`.
pub async fn serve(addr: &str, state: AppState, period: Duration) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    let ticker = state.clone();
    tokio::spawn(async move {
        let mut iv = tokio::time::interval(period);
        loop {
            iv.tick().await;
            if let Some(w) = flush_tick(&ticker) {
                eprintln!("flushed {} tasks", w.len());
            }
        }
    });
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
