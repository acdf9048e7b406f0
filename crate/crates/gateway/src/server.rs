use std::net::{SocketAddr, TcpListener as StdListener};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use axum::extract::ws::{Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::Router;
use futures::{SinkExt, StreamExt};
use log::{debug, info, warn};
use serde_json::Value;
use socket2::SockRef;
use thiserror::Error;
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio::time::{Instant, MissedTickBehavior};
use tower_http::services::ServeDir;

use crate::message::{GatewayCommand, WsEnvelope};
use crate::session::{FrameBus, OperatorSession, SessionFactory};

pub const DEFAULT_BIND: &str = "127.0.0.1:8642";

/// Frame writes faster than this are not treated as backpressure.
const FRAME_WRITE_SLACK: Duration = Duration::from_millis(10);

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub bind: SocketAddr,
    /// Directory holding the built UI. Without one `/` serves a stub page.
    pub ui_dir: Option<PathBuf>,
    pub telemetry_hz: f64,
    /// Frames buffered per operator before the oldest is dropped.
    pub frame_backlog: usize,
    /// Non-emergency commands allowed to wait for execution.
    pub command_backlog: usize,
    /// Kernel send buffer per operator socket. Kept small so a slow link
    /// holds few stale frames ahead of telemetry. `None` leaves the default.
    pub send_buffer: Option<usize>,
}

impl Default for GatewayConfig {
    fn default() -> GatewayConfig {
        GatewayConfig {
            bind: DEFAULT_BIND.parse().expect("literal address"),
            ui_dir: None,
            telemetry_hz: 10.0,
            frame_backlog: 2,
            command_backlog: 64,
            send_buffer: Some(256 * 1024),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("invalid gateway config: {0}")]
    Config(String),
    #[error("gateway runtime: {0}")]
    Runtime(#[from] std::io::Error),
}

struct Shared {
    config: GatewayConfig,
    factory: SessionFactory,
    frames: FrameBus,
    occupied: AtomicBool,
    stopping: watch::Receiver<bool>,
}

/// A running gateway on its own runtime thread. Stops when dropped.
pub struct Gateway {
    addr: SocketAddr,
    frames: FrameBus,
    stop: Option<(oneshot::Sender<()>, watch::Sender<bool>)>,
    thread: Option<JoinHandle<()>>,
}

impl Gateway {
    /// Binds and starts serving. `factory` is asked for a session each time
    /// an operator connects; it decides whether to reuse one.
    pub fn start(config: GatewayConfig, factory: SessionFactory) -> Result<Gateway, GatewayError> {
        let frames = FrameBus::new(config.frame_backlog);
        Gateway::start_with_bus(config, frames, factory)
    }

    /// Like [`Gateway::start`], publishing video from an existing bus.
    pub fn start_with_bus(
        config: GatewayConfig,
        frames: FrameBus,
        factory: SessionFactory,
    ) -> Result<Gateway, GatewayError> {
        if !(config.telemetry_hz > 0.0 && config.telemetry_hz <= 1000.0) {
            return Err(GatewayError::Config(format!("telemetry rate {} Hz", config.telemetry_hz)));
        }
        if config.command_backlog == 0 {
            return Err(GatewayError::Config("command backlog must be positive".into()));
        }
        let listener =
            StdListener::bind(config.bind).map_err(|source| GatewayError::Bind { addr: config.bind, source })?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .thread_name("aerovis-gateway")
            .enable_all()
            .build()?;

        let (shutdown_tx, shutdown_rx) = oneshot::channel();
        let (stopping_tx, stopping_rx) = watch::channel(false);
        let shared = Arc::new(Shared {
            config,
            factory,
            frames: frames.clone(),
            occupied: AtomicBool::new(false),
            stopping: stopping_rx,
        });
        let thread = thread::Builder::new().name("aerovis-gateway".into()).spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => return warn!("gateway listener: {e}"),
                };
                let send_buffer = shared.config.send_buffer;
                let listener = listener.tap_io(move |tcp| {
                    let _ = tcp.set_nodelay(true);
                    if let Some(size) = send_buffer {
                        if let Err(e) = SockRef::from(&*tcp).set_send_buffer_size(size) {
                            debug!("send buffer not set: {e}");
                        }
                    }
                });
                let app = router(shared);
                let serve = axum::serve(listener, app).with_graceful_shutdown(async {
                    let _ = shutdown_rx.await;
                });
                if let Err(e) = serve.await {
                    warn!("gateway stopped: {e}");
                }
            });
            runtime.shutdown_timeout(Duration::from_secs(1));
        })?;
        info!("gateway listening on http://{addr}");
        Ok(Gateway { addr, frames, stop: Some((shutdown_tx, stopping_tx)), thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Where video frames go. Sessions built by the factory get a clone.
    pub fn frames(&self) -> FrameBus {
        self.frames.clone()
    }

    /// Blocks until the gateway stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Closes the operator socket and stops serving.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        if let Some((shutdown, stopping)) = self.stop.take() {
            let _ = stopping.send(true);
            let _ = shutdown.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop_now();
    }
}

const PLACEHOLDER: &str = "<!doctype html>\n<title>aerovis</title>\n\
<p>The aerovis gateway is running. No UI bundle was configured; \
start it with a UI directory to serve the ground station here.</p>\n\
<p>WebSocket endpoint: <code>/ws</code></p>\n";

fn router(shared: Arc<Shared>) -> Router {
    let app = Router::new().route("/healthz", get(|| async { "ok" })).route("/ws", get(upgrade));
    let app = match &shared.config.ui_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(PLACEHOLDER) })),
    };
    app.with_state(shared)
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> Response {
    ws.on_upgrade(move |socket| operator(socket, shared)).into_response()
}

fn text(env: &WsEnvelope) -> Message {
    Message::Text(Utf8Bytes::from(env.to_json()))
}

struct Occupancy(Arc<Shared>);

impl Drop for Occupancy {
    fn drop(&mut self) {
        self.0.occupied.store(false, Ordering::SeqCst);
    }
}

async fn session_for(shared: &Arc<Shared>) -> Result<Arc<dyn OperatorSession>, String> {
    let (factory, frames) = (shared.factory.clone(), shared.frames.clone());
    tokio::task::spawn_blocking(move || factory(frames))
        .await
        .map_err(|e| format!("session setup panicked: {e}"))?
}

async fn operator(mut socket: WebSocket, shared: Arc<Shared>) {
    if shared.occupied.swap(true, Ordering::SeqCst) {
        debug!("refusing second operator");
        let _ = socket.send(text(&WsEnvelope::error(Value::Null, "occupied"))).await;
        let _ = socket.send(Message::Close(None)).await;
        return;
    }
    let _occupancy = Occupancy(shared.clone());
    let session = match session_for(&shared).await {
        Ok(s) => s,
        Err(e) => {
            warn!("session unavailable: {e}");
            let _ = socket.send(text(&WsEnvelope::error(Value::Null, e))).await;
            let _ = socket.send(Message::Close(None)).await;
            return;
        }
    };
    info!("operator connected");

    let (sink, mut stream) = socket.split();
    let (reply_tx, reply_rx) = mpsc::channel::<WsEnvelope>(256);
    let (queue_tx, mut queue_rx) = mpsc::channel::<(Value, GatewayCommand)>(shared.config.command_backlog);

    let writer = tokio::spawn(write_loop(sink, reply_rx, session.clone(), shared.clone()));

    // Ordinary commands run one at a time in arrival order.
    let worker = {
        let (session, replies) = (session.clone(), reply_tx.clone());
        tokio::spawn(async move {
            while let Some((id, cmd)) = queue_rx.recv().await {
                let reply = execute(&session, id, cmd).await;
                if replies.send(reply).await.is_err() {
                    break;
                }
            }
        })
    };

    let mut stopping = shared.stopping.clone();
    loop {
        let msg = tokio::select! {
            m = stream.next() => m,
            _ = stopping.wait_for(|s| *s) => break,
        };
        let reply = match msg {
            None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
            Some(Ok(Message::Text(t))) => match parse_command(t.as_str()) {
                Err(reply) => Some(reply),
                Ok((id, cmd)) if cmd.is_emergency() => {
                    // Skips the queue so it never waits behind other commands.
                    let (session, replies) = (session.clone(), reply_tx.clone());
                    tokio::spawn(async move {
                        let _ = replies.send(execute(&session, id, cmd).await).await;
                    });
                    None
                }
                Ok((id, cmd)) => match queue_tx.try_send((id, cmd)) {
                    Ok(()) => None,
                    Err(mpsc::error::TrySendError::Full((id, _))) => {
                        Some(WsEnvelope::error(id, "command queue full"))
                    }
                    Err(mpsc::error::TrySendError::Closed((id, _))) => {
                        Some(WsEnvelope::error(id, "session closed"))
                    }
                },
            },
            Some(Ok(Message::Binary(_))) => {
                Some(WsEnvelope::error(Value::Null, "binary messages are not accepted"))
            }
            Some(Ok(_)) => None,
        };
        if let Some(reply) = reply {
            if reply_tx.send(reply).await.is_err() {
                break;
            }
        }
    }
    drop(queue_tx);
    writer.abort();
    let _ = writer.await;
    worker.abort();
    info!("operator disconnected");
}

async fn execute(session: &Arc<dyn OperatorSession>, id: Value, cmd: GatewayCommand) -> WsEnvelope {
    let s = session.clone();
    match tokio::task::spawn_blocking(move || s.execute(cmd)).await {
        Ok(Ok(())) => WsEnvelope::ack(id),
        Ok(Err(message)) => WsEnvelope::error(id, message),
        Err(e) => WsEnvelope::error(id, format!("command failed: {e}")),
    }
}

/// Parses one text frame into a command, or the error envelope to send back.
pub fn parse_command(raw: &str) -> Result<(Value, GatewayCommand), WsEnvelope> {
    let value: Value = serde_json::from_str(raw)
        .map_err(|e| WsEnvelope::error(Value::Null, format!("malformed JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(WsEnvelope::error(Value::Null, "expected a JSON object"));
    };
    let id = obj.get("id").cloned().unwrap_or(Value::Null);
    if obj.get("type").and_then(Value::as_str) != Some("command") {
        return Err(WsEnvelope::error(id, "only command envelopes are accepted"));
    }
    if id.is_null() {
        return Err(WsEnvelope::error(id, "command without id"));
    }
    let Some(name) = obj.get("name").and_then(Value::as_str) else {
        return Err(WsEnvelope::error(id, "command without name"));
    };
    let params = obj.get("params").cloned().unwrap_or(Value::Null);
    match GatewayCommand::parse(name, &params) {
        Ok(cmd) => Ok((id, cmd)),
        Err(message) => Err(WsEnvelope::error(id, message)),
    }
}

async fn write_loop(
    mut sink: futures::stream::SplitSink<WebSocket, Message>,
    mut replies: mpsc::Receiver<WsEnvelope>,
    session: Arc<dyn OperatorSession>,
    shared: Arc<Shared>,
) {
    let mut frames = shared.frames.subscribe();
    let mut tick = tokio::time::interval(Duration::from_secs_f64(1.0 / shared.config.telemetry_hz));
    // Ticks missed during a long frame write are made up right after it.
    tick.set_missed_tick_behavior(MissedTickBehavior::Burst);
    // A frame that took `d` to write keeps the next one back for another `d`,
    // so frames never hold the socket more than half the time.
    let mut frame_gate = Instant::now();
    loop {
        // Replies first, then telemetry; frames only when nothing else waits.
        let result = tokio::select! {
            biased;
            reply = replies.recv() => match reply {
                Some(env) => sink.send(text(&env)).await,
                None => break,
            },
            _ = tick.tick() => {
                sink.send(text(&WsEnvelope::Telemetry(session.telemetry()))).await
            }
            frame = frames.recv() => match frame {
                Ok(_) if Instant::now() < frame_gate => Ok(()),
                Ok(p) => {
                    let started = Instant::now();
                    let sent = match sink.send(text(&WsEnvelope::Track(p.track.clone()))).await {
                        Ok(()) => sink.send(Message::Binary(p.frame.clone().into())).await,
                        Err(e) => Err(e),
                    };
                    let took = started.elapsed();
                    if took > FRAME_WRITE_SLACK {
                        frame_gate = Instant::now() + took;
                    }
                    sent
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    debug!("operator behind, dropped {n} frames");
                    Ok(())
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
        };
        if result.is_err() {
            break;
        }
    }
    let _ = sink.close().await;
}
