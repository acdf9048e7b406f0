#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU16, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use aerovis::client::{Drone, DroneEndpoint};
use aerovis::sim::{SimConfig, SimError, SimPorts, SimScene, SimServer};
use aerovis_gateway::*;
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub fn any_port() -> GatewayConfig {
    GatewayConfig { bind: "127.0.0.1:0".parse().unwrap(), ..GatewayConfig::default() }
}

/// Scripted session: records what it was asked to do, refuses moves until
/// a takeoff, and can be made slow.
#[derive(Default)]
pub struct FakeSession {
    pub log: Mutex<Vec<(Instant, GatewayCommand)>>,
    pub delay: Duration,
    pub airborne: Mutex<bool>,
}

impl FakeSession {
    pub fn slow(delay: Duration) -> FakeSession {
        FakeSession { delay, ..FakeSession::default() }
    }

    pub fn commands(&self) -> Vec<GatewayCommand> {
        self.log.lock().unwrap().iter().map(|(_, c)| *c).collect()
    }
}

impl OperatorSession for FakeSession {
    fn execute(&self, command: GatewayCommand) -> Result<(), String> {
        self.log.lock().unwrap().push((Instant::now(), command));
        if !command.is_emergency() {
            std::thread::sleep(self.delay);
        }
        let mut airborne = self.airborne.lock().unwrap();
        match command {
            GatewayCommand::Takeoff => *airborne = true,
            GatewayCommand::Move { .. } if !*airborne => return Err("cannot move while Landed".into()),
            _ => {}
        }
        Ok(())
    }

    fn telemetry(&self) -> TelemetryMessage {
        let state = if *self.airborne.lock().unwrap() { "Flying" } else { "Landed" };
        TelemetryMessage { state: state.into(), battery_percent: 100, link_ok: true, ..Default::default() }
    }
}

pub fn fake_gateway(config: GatewayConfig, session: Arc<FakeSession>) -> Gateway {
    let factory: SessionFactory = Arc::new(move |_| Ok(session.clone() as Arc<dyn OperatorSession>));
    Gateway::start(config, factory).unwrap()
}

pub struct Operator {
    ws: WebSocketStream<MaybeTlsStream<TcpStream>>,
}

pub enum Incoming {
    Envelope(WsEnvelope),
    Frame(FrameMessage),
    Closed,
}

impl Operator {
    pub async fn connect(addr: SocketAddr) -> Operator {
        let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
        Operator { ws }
    }

    /// Connects with a small receive window, like a narrow link would give.
    pub async fn connect_throttled(addr: SocketAddr, recv_buffer: u32) -> Operator {
        let socket = tokio::net::TcpSocket::new_v4().unwrap();
        socket.set_recv_buffer_size(recv_buffer).unwrap();
        let stream = socket.connect(addr).await.unwrap();
        let (ws, _) = tokio_tungstenite::client_async(format!("ws://{addr}/ws"), MaybeTlsStream::Plain(stream))
            .await
            .unwrap();
        Operator { ws }
    }

    pub async fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::text(text)).await.unwrap();
    }

    pub async fn send_binary(&mut self, bytes: Vec<u8>) {
        self.ws.send(Message::binary(bytes)).await.unwrap();
    }

    pub async fn command(&mut self, id: impl Into<Value>, name: &str, params: Value) {
        let env = json!({"type": "command", "id": id.into(), "name": name, "params": params});
        self.send_raw(&env.to_string()).await;
    }

    pub async fn next(&mut self, timeout: Duration) -> Option<Incoming> {
        loop {
            let msg = match tokio::time::timeout(timeout, self.ws.next()).await {
                Err(_) => return None,
                Ok(None) | Ok(Some(Err(_))) => return Some(Incoming::Closed),
                Ok(Some(Ok(m))) => m,
            };
            return Some(match msg {
                Message::Text(t) => Incoming::Envelope(serde_json::from_str(t.as_str()).unwrap()),
                Message::Binary(b) => Incoming::Frame(FrameMessage::decode(&b).unwrap()),
                Message::Close(_) => Incoming::Closed,
                _ => continue,
            });
        }
    }

    /// Next ack or error, skipping telemetry, track and frames.
    pub async fn reply(&mut self, timeout: Duration) -> WsEnvelope {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            match self.next(left).await {
                Some(Incoming::Envelope(e @ (WsEnvelope::Ack { .. } | WsEnvelope::Error { .. }))) => return e,
                Some(Incoming::Closed) => panic!("socket closed while waiting for a reply"),
                None => panic!("no reply within {timeout:?}"),
                _ => {}
            }
        }
    }

    /// Next telemetry message satisfying `pred`.
    pub async fn telemetry_until(
        &mut self,
        timeout: Duration,
        mut pred: impl FnMut(&TelemetryMessage) -> bool,
    ) -> Option<TelemetryMessage> {
        let deadline = tokio::time::Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(tokio::time::Instant::now());
            match self.next(left).await? {
                Incoming::Envelope(WsEnvelope::Telemetry(t)) if pred(&t) => return Some(t),
                Incoming::Closed => return None,
                _ => {}
            }
        }
    }

    pub async fn close(mut self) {
        let _ = self.ws.close(None).await;
    }
}

/// Blocking HTTP GET returning (status line, body).
pub fn http_get(addr: SocketAddr, path: &str) -> (String, String) {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw.lines().next().unwrap_or_default().to_string();
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

static NEXT_BASE: AtomicU16 = AtomicU16::new(0);

pub fn start_sim_with(config: SimConfig, scene: SimScene) -> (SimServer, u16) {
    let _ = NEXT_BASE.compare_exchange(
        0,
        40_000 + (std::process::id() % 1_000) as u16 * 10,
        Ordering::SeqCst,
        Ordering::SeqCst,
    );
    for _ in 0..50 {
        let base = NEXT_BASE.fetch_add(10, Ordering::SeqCst);
        match SimServer::start(config.clone(), scene.clone(), SimPorts::local(base)) {
            Ok(sim) => return (sim, base),
            Err(SimError::Bind { .. }) => continue,
            Err(e) => panic!("sim start: {e}"),
        }
    }
    panic!("no free port block for the simulator");
}

pub fn drone_for(base: u16) -> Drone {
    Drone::new(DroneEndpoint::with_base("127.0.0.1", base))
}
