//! HTTP front end for live devices.
//!
//! Each device gets `GET /state`, `POST /command`, `GET /events`,
//! `GET /model` and a server-sent event stream at `GET /events/stream`.
//! The first device is also mounted at the root; every device is mounted
//! under `/devices/<name>`. Commands to one device are handled strictly one
//! at a time; reads never wait for a command in progress.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{broadcast, watch};
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use thoughtful_core::runtime::{CommandEvent, DeviceInstance, RuntimeError};
use thoughtful_core::state_model::{DeviceModel, Snapshot};
use thoughtful_core::wire::{GenerationBackend, PromptKind};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

/// A device instance with its backend and the channels readers use.
pub struct DeviceHandle {
    model: DeviceModel,
    instance: Mutex<DeviceInstance>,
    backend: Arc<dyn GenerationBackend>,
    events: RwLock<Vec<CommandEvent>>,
    state_tx: watch::Sender<Snapshot>,
    event_tx: broadcast::Sender<CommandEvent>,
}

impl DeviceHandle {
    pub fn new(instance: DeviceInstance, backend: Arc<dyn GenerationBackend>) -> Arc<Self> {
        let (state_tx, _) = watch::channel(instance.current().clone());
        let (event_tx, _) = broadcast::channel(256);
        Arc::new(Self {
            model: instance.model().clone(),
            events: RwLock::new(instance.events().to_vec()),
            instance: Mutex::new(instance),
            backend,
            state_tx,
            event_tx,
        })
    }

    pub fn model(&self) -> &DeviceModel {
        &self.model
    }

    pub fn state(&self) -> Snapshot {
        self.state_tx.borrow().clone()
    }

    pub fn subscribe_state(&self) -> watch::Receiver<Snapshot> {
        self.state_tx.subscribe()
    }

    pub fn subscribe_events(&self) -> broadcast::Receiver<CommandEvent> {
        self.event_tx.subscribe()
    }

    pub fn event_count(&self) -> usize {
        self.events.read().expect("event log lock").len()
    }

    /// Runs a command on a blocking thread, serialized with all other
    /// commands to this device, and publishes the result.
    pub async fn command(
        self: &Arc<Self>,
        text: String,
        kind: PromptKind,
    ) -> Result<CommandEvent, RuntimeError> {
        let this = Arc::clone(self);
        tokio::task::spawn_blocking(move || {
            let mut instance = this.instance.lock().unwrap_or_else(|p| p.into_inner());
            let event = instance.handle_command(&text, kind, this.backend.as_ref())?;
            // Publish while still holding the lock so readers see commands in order.
            this.events.write().expect("event log lock").push(event.clone());
            this.state_tx.send_replace(event.after.clone());
            let _ = this.event_tx.send(event.clone());
            Ok(event)
        })
        .await
        .expect("command task panicked")
    }
}

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    pub cors: bool,
    /// Directory served for any path not matched by the API.
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
pub struct CommandRequest {
    pub text: String,
    pub kind: PromptKind,
}

#[derive(Debug, Default, Deserialize)]
pub struct EventsQuery {
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EventPage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub events: Vec<CommandEvent>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DeviceSummary {
    pub name: String,
    pub device_name: String,
    pub state: Snapshot,
}

fn error(status: StatusCode, reason: impl Into<String>) -> Response {
    (status, Json(json!({ "error": reason.into() }))).into_response()
}

async fn get_state(State(h): State<Arc<DeviceHandle>>) -> Json<Snapshot> {
    Json(h.state())
}

async fn get_model(State(h): State<Arc<DeviceHandle>>) -> Json<DeviceModel> {
    Json(h.model().clone())
}

async fn post_command(
    State(h): State<Arc<DeviceHandle>>,
    body: Result<Json<CommandRequest>, JsonRejection>,
) -> Response {
    let req = match body {
        Ok(Json(req)) => req,
        Err(rejection) => return error(rejection.status(), rejection.body_text()),
    };
    match h.command(req.text, req.kind).await {
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(event) => {
            let status = if event.error.as_ref().is_some_and(|e| e.stage == "backend") {
                StatusCode::BAD_GATEWAY
            } else {
                StatusCode::OK
            };
            (status, Json(event)).into_response()
        }
    }
}

async fn get_events(
    State(h): State<Arc<DeviceHandle>>,
    query: Result<Query<EventsQuery>, QueryRejection>,
) -> Response {
    let q = match query {
        Ok(Query(q)) => q,
        Err(rejection) => return error(StatusCode::BAD_REQUEST, rejection.body_text()),
    };
    let limit = q.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return error(
            StatusCode::BAD_REQUEST,
            format!("limit must be between 1 and {MAX_PAGE}"),
        );
    }
    let offset = q.offset.unwrap_or(0);
    let log = h.events.read().expect("event log lock");
    let events = log.iter().skip(offset).take(limit).cloned().collect();
    Json(EventPage {
        total: log.len(),
        offset,
        limit,
        events,
    })
    .into_response()
}

fn sse_event(name: &str, data: &impl Serialize) -> Event {
    Event::default()
        .event(name)
        .json_data(data)
        .expect("payload serializes")
}

/// Sends `state` with the current snapshot on connect, then a `command`
/// event per handled command and a `state` event whenever the snapshot changes.
async fn stream_events(
    State(h): State<Arc<DeviceHandle>>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = h.subscribe_events();
    let initial = h.state();
    let first = stream::once(async move { sse_event("state", &initial) });
    let rest = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => return Some((ev, rx)),
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    log::warn!("event stream subscriber skipped {n} events");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
    .flat_map(|ev| {
        let mut out = vec![sse_event("command", &ev)];
        if ev.before != ev.after {
            out.push(sse_event("state", &ev.after));
        }
        stream::iter(out)
    });
    Sse::new(first.chain(rest).map(Ok)).keep_alive(KeepAlive::default())
}

pub fn device_router(handle: Arc<DeviceHandle>) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/model", get(get_model))
        .route("/command", post(post_command))
        .route("/events", get(get_events))
        .route("/events/stream", get(stream_events))
        .with_state(handle)
}

/// Builds the service. The first device is also served at the root.
pub fn app(devices: Vec<(String, Arc<DeviceHandle>)>, options: &ServerOptions) -> Router {
    let summaries: Vec<(String, Arc<DeviceHandle>)> = devices.clone();
    let list = get(move || {
        let summaries = summaries.clone();
        async move {
            Json(
                summaries
                    .iter()
                    .map(|(name, h)| DeviceSummary {
                        name: name.clone(),
                        device_name: h.model().device_name().to_string(),
                        state: h.state(),
                    })
                    .collect::<Vec<_>>(),
            )
        }
    });
    let mut router = Router::new().route("/devices", list);
    if let Some((_, first)) = devices.first() {
        router = router.merge(device_router(Arc::clone(first)));
    }
    for (name, handle) in devices {
        router = router.nest(&format!("/devices/{name}"), device_router(handle));
    }
    if let Some(dir) = &options.static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    if options.cors {
        router = router.layer(CorsLayer::permissive());
    }
    router
}

/// Serves `router` until interrupted.
pub async fn serve(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
