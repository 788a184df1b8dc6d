//! WebSocket driver for the conductor.
//!
//! One actor task owns the [`Conductor`]; each socket forwards decoded frames
//! to it and drains its own outbound queue. The server clock is wall-clock
//! milliseconds, advanced monotonically.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message as WsMessage, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use ensemble_core::conductor::{Conductor, ConductorConfig, ConnId, Outbound, Phase};
use ensemble_core::protocol::{decode_text, encode_text, Message};
use futures::{SinkExt, StreamExt};
use log::{info, warn};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

use crate::commands::ServerCommand;

/// Monotonic wall-clock milliseconds.
#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    base_ms: f64,
    started: Instant,
}

impl WallClock {
    pub fn new() -> Self {
        let base_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64() * 1000.0)
            .unwrap_or(0.0);
        WallClock {
            base_ms,
            started: Instant::now(),
        }
    }

    pub fn now_ms(&self) -> f64 {
        self.base_ms + self.started.elapsed().as_secs_f64() * 1000.0
    }

    pub fn instant_at(&self, ms: f64) -> Instant {
        let offset = (ms - self.base_ms).max(0.0) / 1000.0;
        self.started + std::time::Duration::from_secs_f64(offset)
    }
}

impl Default for WallClock {
    fn default() -> Self {
        Self::new()
    }
}

enum Frame {
    Text(String),
    Close,
}

enum Cmd {
    Open {
        conn: ConnId,
        tx: mpsc::UnboundedSender<Frame>,
    },
    Frame {
        conn: ConnId,
        text: String,
    },
    Closed {
        conn: ConnId,
    },
    Operator(ServerCommand),
}

/// Snapshot published after every actor step.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerStatus {
    pub phase: Phase,
    pub admitted: usize,
    pub connected: usize,
    pub start_epoch_ms: Option<f64>,
}

#[derive(Clone)]
struct AppState {
    cmds: mpsc::UnboundedSender<Cmd>,
    next_conn: Arc<AtomicU64>,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    cmds: mpsc::UnboundedSender<Cmd>,
    status: watch::Receiver<ServerStatus>,
    shutdown: Option<oneshot::Sender<()>>,
    task: JoinHandle<anyhow::Result<()>>,
}

impl ServerHandle {
    pub fn command(&self, cmd: ServerCommand) {
        let _ = self.cmds.send(Cmd::Operator(cmd));
    }

    pub fn status(&self) -> watch::Receiver<ServerStatus> {
        self.status.clone()
    }

    pub async fn shutdown(mut self) -> anyhow::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.task.await?
    }

    /// Waits for the listener task to end on its own.
    pub async fn join(self) -> anyhow::Result<()> {
        self.task.await?
    }
}

fn status_of(c: &Conductor) -> ServerStatus {
    ServerStatus {
        phase: c.phase(),
        admitted: c.sessions().count(),
        connected: c.sessions().filter(|s| s.conn.is_some()).count(),
        start_epoch_ms: c.start_epoch_ms(),
    }
}

async fn actor(
    mut conductor: Conductor,
    clock: WallClock,
    mut rx: mpsc::UnboundedReceiver<Cmd>,
    status: watch::Sender<ServerStatus>,
) {
    let mut peers: HashMap<ConnId, mpsc::UnboundedSender<Frame>> = HashMap::new();
    while let Some(cmd) = rx.recv().await {
        let now = clock.now_ms();
        let out = match cmd {
            Cmd::Open { conn, tx } => {
                peers.insert(conn, tx);
                conductor.connect(conn);
                info!("event=connect conn={conn}");
                Vec::new()
            }
            Cmd::Frame { conn, text } => match decode_text(&text) {
                Ok(msg) => conductor.receive(conn, msg, now),
                Err(e) => {
                    warn!("event=bad_frame conn={conn} reason=\"{e}\"");
                    vec![Outbound::To(
                        conn,
                        Message::Reject {
                            reason: e.to_string(),
                        },
                    )]
                }
            },
            Cmd::Closed { conn } => {
                peers.remove(&conn);
                conductor.disconnect(conn, now)
            }
            Cmd::Operator(op) => operator(&mut conductor, op, now),
        };
        for o in out {
            match o {
                Outbound::To(conn, msg) => {
                    if let Some(tx) = peers.get(&conn) {
                        let _ = tx.send(Frame::Text(encode_text(&msg)));
                    }
                }
                Outbound::Close(conn) => {
                    if let Some(tx) = peers.remove(&conn) {
                        let _ = tx.send(Frame::Close);
                    }
                }
            }
        }
        status.send_replace(status_of(&conductor));
    }
}

fn operator(c: &mut Conductor, op: ServerCommand, now: f64) -> Vec<Outbound> {
    match op {
        ServerCommand::Start => c.start_when_ready(now),
        ServerCommand::Stop => c.stop(now),
        ServerCommand::Tempo { bpm, bar } => c.set_tempo(bpm, bar, now).unwrap_or_else(|e| {
            warn!("event=tempo_rejected reason=\"{e}\"");
            Vec::new()
        }),
        ServerCommand::Control {
            performer_id,
            setting,
        } => c.route_control(
            performer_id,
            Message::Control {
                performer_id,
                setting,
            },
        ),
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| session(socket, state))
}

async fn session(socket: WebSocket, state: AppState) {
    let conn = state.next_conn.fetch_add(1, Ordering::Relaxed);
    let (tx, mut out_rx) = mpsc::unbounded_channel();
    if state.cmds.send(Cmd::Open { conn, tx }).is_err() {
        return;
    }
    let (mut sink, mut stream) = socket.split();
    let writer = tokio::spawn(async move {
        while let Some(frame) = out_rx.recv().await {
            match frame {
                Frame::Text(t) => {
                    if sink.send(WsMessage::Text(t.into())).await.is_err() {
                        break;
                    }
                }
                Frame::Close => {
                    let _ = sink.send(WsMessage::Close(None)).await;
                    break;
                }
            }
        }
    });
    while let Some(Ok(msg)) = stream.next().await {
        match msg {
            WsMessage::Text(t) => {
                let _ = state.cmds.send(Cmd::Frame {
                    conn,
                    text: t.to_string(),
                });
            }
            WsMessage::Close(_) => break,
            _ => {}
        }
    }
    let _ = state.cmds.send(Cmd::Closed { conn });
    writer.abort();
}

async fn index() -> impl IntoResponse {
    "ensemble conductor: connect WebSocket clients to /ws\n"
}

/// Binds, then serves `/ws` plus static files from `static_dir` at `/`.
pub async fn spawn(
    bind: SocketAddr,
    config: ConductorConfig,
    static_dir: Option<PathBuf>,
) -> anyhow::Result<ServerHandle> {
    let conductor = Conductor::new(config)?;
    let listener = TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let (cmds, rx) = mpsc::unbounded_channel();
    let (status_tx, status) = watch::channel(status_of(&conductor));
    tokio::spawn(actor(conductor, WallClock::new(), rx, status_tx));

    let state = AppState {
        cmds: cmds.clone(),
        next_conn: Arc::new(AtomicU64::new(1)),
    };
    let router = Router::new().route("/ws", get(ws_handler));
    let router = match static_dir {
        Some(dir) => router.fallback_service(ServeDir::new(dir)),
        None => router.route("/", get(index)),
    }
    .with_state(state);

    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, router)
            .with_graceful_shutdown(async {
                let _ = shutdown_rx.await;
            })
            .await?;
        Ok(())
    });
    info!("event=listening addr={addr}");
    Ok(ServerHandle {
        addr,
        cmds,
        status,
        shutdown: Some(shutdown_tx),
        task,
    })
}
