use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use opd_core::policy::{score_tokens, TabularPolicy};
use tokio::sync::oneshot;

use crate::error::{Result, ServingError};
use crate::wire::{ErrorBody, HealthResponse, ScoreRequest, ScoreResponse};

struct Teacher {
    name: String,
    policy: TabularPolicy,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: message.into() })).into_response()
}

async fn score(State(teacher): State<Arc<Teacher>>, body: Bytes) -> Response {
    let request: ScoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed score request: {e}")),
    };
    match score_tokens(&teacher.policy, &request.prompt_tokens, &request.response_tokens) {
        Ok(token_logprobs) => Json(ScoreResponse {
            token_logprobs,
            teacher_name: teacher.name.clone(),
        })
        .into_response(),
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
    }
}

async fn health(State(teacher): State<Arc<Teacher>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        teacher_name: teacher.name.clone(),
        vocab_size: teacher.policy.vocab_size(),
    })
}

/// Routes for one teacher. Handlers only read the shared policy.
pub fn router(name: impl Into<String>, policy: TabularPolicy) -> Router {
    let teacher = Arc::new(Teacher {
        name: name.into(),
        policy,
    });
    Router::new()
        .route("/v1/score", post(score))
        .route("/v1/health", get(health))
        .with_state(teacher)
}

fn bind(address: &str) -> Result<TcpListener> {
    let listener = TcpListener::bind(address).map_err(|e| ServingError::Bind {
        address: address.to_string(),
        message: e.to_string(),
    })?;
    listener.set_nonblocking(true).map_err(|e| ServingError::Bind {
        address: address.to_string(),
        message: e.to_string(),
    })?;
    Ok(listener)
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .expect("tokio runtime")
}

/// A teacher service running on its own thread; stopped on drop.
pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// `host:port` form used in routing tables.
    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn stop(mut self) {
        self.shutdown_now();
    }

    fn shutdown_now(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.shutdown_now();
    }
}

/// Binds `address` (use port 0 for an ephemeral port) and serves in the background.
pub fn spawn(name: impl Into<String>, policy: TabularPolicy, address: &str) -> Result<ServiceHandle> {
    let listener = bind(address)?;
    let addr = listener.local_addr().map_err(|e| ServingError::Bind {
        address: address.to_string(),
        message: e.to_string(),
    })?;
    let app = router(name, policy);
    let (tx, rx) = oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = runtime();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener registers with runtime");
            tokio::select! {
                _ = axum::serve(listener, app) => {}
                _ = rx => {}
            }
        });
        // dropping the runtime aborts any open connections
    });
    Ok(ServiceHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until the process is stopped.
pub fn serve_blocking(name: impl Into<String>, policy: TabularPolicy, address: &str) -> Result<()> {
    let listener = bind(address)?;
    let app = router(name, policy);
    let addr = listener.local_addr().ok();
    if let Some(addr) = addr {
        eprintln!("listening on {addr}");
    }
    runtime().block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener).expect("listener registers with runtime");
        axum::serve(listener, app).await.map_err(|e| ServingError::Bind {
            address: address.to_string(),
            message: e.to_string(),
        })
    })
}
