//! WebSocket realtime transcription service.
//!
//! `/v1/realtime` carries one session per connection; `/v1/status` reports
//! pool occupancy and active sessions.

pub mod protocol;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use dstream_core::decoder::DelaySpec;
use dstream_core::frontend::SAMPLE_RATE;
use dstream_core::paging::{PoolStats, DEFAULT_NUM_BLOCKS};
use dstream_core::session::{Engine, Session};

use protocol::{decode_audio, parse_client, ClientMessage, ErrorCode, ServerMessage};

pub const DEFAULT_AUTH_ENV: &str = "DSTREAM_AUTH_TOKEN";
const INBOUND_QUEUE: usize = 64;

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub port: u16,
    pub checkpoint: Option<PathBuf>,
    pub max_sessions: usize,
    /// Environment variable holding the bearer token; unset or empty disables auth.
    pub auth_env: String,
    pub pool_blocks: usize,
    /// Uncommitted plus unprocessed audio allowed per session.
    pub max_buffer_samples: usize,
    pub idle_timeout: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            port: 8080,
            checkpoint: None,
            max_sessions: 16,
            auth_env: DEFAULT_AUTH_ENV.into(),
            pool_blocks: DEFAULT_NUM_BLOCKS,
            max_buffer_samples: 10 * SAMPLE_RATE as usize,
            idle_timeout: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AppState {
    engine: Engine,
    active: Arc<AtomicUsize>,
    max_sessions: usize,
    max_buffer_samples: usize,
    idle_timeout: Duration,
    auth_token: Option<String>,
}

impl AppState {
    pub fn new(engine: Engine, cfg: &GatewayConfig) -> Self {
        let auth_token = std::env::var(&cfg.auth_env).ok().filter(|t| !t.is_empty());
        Self::with_auth(engine, cfg, auth_token)
    }

    pub fn with_auth(engine: Engine, cfg: &GatewayConfig, auth_token: Option<String>) -> Self {
        Self {
            engine,
            active: Arc::new(AtomicUsize::new(0)),
            max_sessions: cfg.max_sessions,
            max_buffer_samples: cfg.max_buffer_samples,
            idle_timeout: cfg.idle_timeout,
            auth_token,
        }
    }

    pub fn active_sessions(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn status(&self) -> Status {
        Status {
            version: "v1",
            preset: self.engine.model().config().preset.clone(),
            active_sessions: self.active_sessions(),
            max_sessions: self.max_sessions,
            pool: self.engine.pool_stats(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Status {
    pub version: &'static str,
    pub preset: String,
    pub active_sessions: usize,
    pub max_sessions: usize,
    pub pool: PoolStats,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/realtime", get(realtime))
        .route("/v1/status", get(status))
        .with_state(state)
}

/// Serve on an already bound listener until the task is dropped.
pub async fn serve_listener(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

pub async fn serve(engine: Engine, cfg: &GatewayConfig) -> std::io::Result<()> {
    let listener = TcpListener::bind(SocketAddr::from(([0, 0, 0, 0], cfg.port))).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_listener(listener, AppState::new(engine, cfg)).await
}

async fn status(State(state): State<AppState>) -> Json<Status> {
    Json(state.status())
}

fn authorized(state: &AppState, headers: &HeaderMap, query: &HashMap<String, String>) -> bool {
    let Some(want) = &state.auth_token else { return true };
    let bearer = headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    bearer == Some(want.as_str()) || query.get("token") == Some(want)
}

async fn realtime(
    State(state): State<AppState>,
    headers: HeaderMap,
    Query(query): Query<HashMap<String, String>>,
    ws: WebSocketUpgrade,
) -> Response {
    if !authorized(&state, &headers, &query) {
        return (StatusCode::UNAUTHORIZED, "missing or invalid token").into_response();
    }
    ws.on_upgrade(move |socket| connection(socket, state))
}

enum Work {
    Create { delay_ms: u32, left_pad_frames: usize },
    Append(Vec<i16>),
    Commit,
    Finish,
}

/// Reader, session worker and writer run concurrently, so clients may send
/// any number of appends before reading.
async fn connection(socket: WebSocket, state: AppState) {
    let (mut ws_tx, mut ws_rx) = socket.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<ServerMessage>();
    let (work_tx, work_rx) = mpsc::channel::<Work>(INBOUND_QUEUE);

    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            if ws_tx.send(Message::Text(m.to_json().into())).await.is_err() {
                break;
            }
        }
        let _ = ws_tx.close().await;
    });
    let worker = {
        let state = state.clone();
        let out = out_tx.clone();
        tokio::task::spawn_blocking(move || session_worker(state, work_rx, out))
    };

    loop {
        let msg = match tokio::time::timeout(state.idle_timeout, ws_rx.next()).await {
            Err(_) => {
                tracing::info!("idle timeout");
                break;
            }
            Ok(None) | Ok(Some(Err(_))) => break,
            Ok(Some(Ok(m))) => m,
        };
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = out_tx.send(ServerMessage::error(ErrorCode::InvalidMessage, "binary frames are not accepted"));
                continue;
            }
            _ => continue,
        };
        let work = match parse_client(&text) {
            Err(e) => {
                let _ = out_tx.send(e);
                continue;
            }
            Ok(ClientMessage::SessionCreate { delay_ms, left_pad_frames }) => Work::Create { delay_ms, left_pad_frames },
            Ok(ClientMessage::AudioAppend { audio }) => match decode_audio(&audio) {
                Ok(pcm) => Work::Append(pcm),
                Err(e) => {
                    let _ = out_tx.send(e);
                    continue;
                }
            },
            Ok(ClientMessage::AudioCommit {}) => Work::Commit,
            Ok(ClientMessage::SessionFinish {}) => Work::Finish,
        };
        if work_tx.send(work).await.is_err() {
            break;
        }
    }
    drop(work_tx);
    drop(out_tx);
    let _ = worker.await;
    let _ = writer.await;
}

/// Decrements the active-session count when dropped.
struct Slot(Arc<AtomicUsize>);

impl Slot {
    fn acquire(active: &Arc<AtomicUsize>, max: usize) -> Option<Self> {
        active
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| (n < max).then_some(n + 1))
            .ok()
            .map(|_| Slot(active.clone()))
    }
}

impl Drop for Slot {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

struct Live {
    session: Session,
    pending: Vec<i16>,
    _slot: Slot,
}

fn session_worker(state: AppState, mut rx: mpsc::Receiver<Work>, out: mpsc::UnboundedSender<ServerMessage>) {
    let mut live: Option<Live> = None;
    let send = |m: ServerMessage| {
        let _ = out.send(m);
    };
    let fail = |live: &mut Option<Live>, code: ErrorCode, msg: String| {
        if let Some(mut l) = live.take() {
            l.session.close();
        }
        let _ = out.send(ServerMessage::error(code, msg));
    };
    while let Some(work) = rx.blocking_recv() {
        match work {
            Work::Create { delay_ms, left_pad_frames } => {
                if live.is_some() {
                    send(ServerMessage::error(ErrorCode::SessionExists, "connection already has a session"));
                    continue;
                }
                let delay = match DelaySpec::from_ms(delay_ms) {
                    Ok(d) => d,
                    Err(e) => {
                        send(ServerMessage::error(ErrorCode::InvalidDelay, e.to_string()));
                        continue;
                    }
                };
                let Some(slot) = Slot::acquire(&state.active, state.max_sessions) else {
                    send(ServerMessage::error(ErrorCode::TooManySessions, format!("limit is {}", state.max_sessions)));
                    continue;
                };
                match state.engine.create_session(delay, left_pad_frames) {
                    Ok(session) => {
                        send(ServerMessage::SessionCreated { id: session.id() });
                        live = Some(Live { session, pending: Vec::new(), _slot: slot });
                    }
                    Err(e) => send(ServerMessage::error(ErrorCode::SessionError, e.to_string())),
                }
            }
            Work::Append(pcm) => {
                let Some(l) = live.as_mut() else {
                    send(ServerMessage::error(ErrorCode::NoSession, "send session.create first"));
                    continue;
                };
                if l.pending.len() + pcm.len() > state.max_buffer_samples {
                    let msg = format!("more than {} buffered samples", state.max_buffer_samples);
                    fail(&mut live, ErrorCode::BufferOverflow, msg);
                    continue;
                }
                l.pending.extend_from_slice(&pcm);
            }
            Work::Commit | Work::Finish => {
                let finish = matches!(work, Work::Finish);
                let Some(l) = live.as_mut() else {
                    send(ServerMessage::error(ErrorCode::NoSession, "send session.create first"));
                    continue;
                };
                let pcm = std::mem::take(&mut l.pending);
                match l.session.append_pcm16(&pcm) {
                    Ok(events) => events.iter().for_each(|e| send(e.into())),
                    Err(e) => {
                        fail(&mut live, ErrorCode::SessionError, e.to_string());
                        continue;
                    }
                }
                if finish {
                    let mut l = live.take().expect("checked above");
                    match l.session.finish() {
                        Ok(f) => {
                            f.events.iter().for_each(|e| send(e.into()));
                            send(ServerMessage::TranscriptFinal { text: f.transcript });
                        }
                        Err(e) => send(ServerMessage::error(ErrorCode::SessionError, e.to_string())),
                    }
                }
            }
        }
    }
}
