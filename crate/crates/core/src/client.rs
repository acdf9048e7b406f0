//! Drone connection manager and flight API.
//!
//! A [`Drone`] owns one socket per drone port and runs a thread per channel:
//! a command loop re-sending the current command every 30 ms, a navdata loop
//! feeding the telemetry snapshot, and (once [`Drone::connect_video`] is
//! called) a video loop delivering decoded frames to a callback.
//!
//! The flight state machine itself lives in [`Pilot`], which knows nothing
//! about sockets so the simulator harness can drive it on a virtual clock.

use std::cell::Cell;
use std::fmt;
use std::io::{ErrorKind, Read};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs, UdpSocket};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use arc_swap::ArcSwap;
use log::{debug, info, warn};
use thiserror::Error;

use crate::protocol::{
    encode_at, parse_navdata, parse_video_header, state_bits, AtCommand, Command,
    EncodeError, NavdataPacket, PcmdArgs, RefBits, VideoError, CODEC_RAW_RGB24, NAVDATA_TRIGGER,
    VIDEO_SIGNATURE,
};
use crate::vision::Frame;

/// Period of the command loop.
pub const COMMAND_PERIOD: Duration = Duration::from_millis(30);
/// Navdata silence after which the link is reported down.
pub const LINK_TIMEOUT: Duration = Duration::from_secs(2);
/// Altitude at which a takeoff is considered complete.
pub const FLYING_ALTITUDE_M: f64 = 0.5;
/// Altitude under which a landing is considered complete.
pub const LANDED_ALTITUDE_M: f64 = 0.05;

const LOOP_POLL: Duration = Duration::from_millis(50);
const MAX_VIDEO_PAYLOAD: usize = 32 << 20;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("not connected")]
    NotConnected,
    #[error("already connected")]
    AlreadyConnected,
    #[error("cannot {op} while {state}")]
    State { op: &'static str, state: FlightState },
    #[error("connection error: {0}")]
    Connection(#[from] std::io::Error),
    #[error("link timeout: no navdata within {0:?}")]
    LinkTimeout(Duration),
    #[error("video already connected")]
    VideoActive,
    #[error("{0} is not allowed from the video callback")]
    Reentrant(&'static str),
    #[error("timed out waiting for state {want} (current {current})")]
    WaitTimeout { want: FlightState, current: FlightState },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

impl ClientError {
    /// True for errors caused by calling an operation in the wrong state.
    pub fn is_state_error(&self) -> bool {
        matches!(self, ClientError::NotConnected | ClientError::State { .. })
    }
}

/// Where the drone's three ports live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DroneEndpoint {
    pub host: String,
    pub command_port: u16,
    pub navdata_port: u16,
    pub video_port: u16,
}

/// Base used by [`DroneEndpoint::with_base`] that yields the vendor ports.
pub const DEFAULT_PORTS_BASE: u16 = 5550;

impl Default for DroneEndpoint {
    fn default() -> Self {
        DroneEndpoint::with_base("192.168.1.1", DEFAULT_PORTS_BASE)
    }
}

impl DroneEndpoint {
    /// Ports at fixed offsets from `base`: navdata `base+4`, video `base+5`,
    /// commands `base+6`. A base of 5550 gives the vendor layout.
    pub fn with_base(host: impl Into<String>, base: u16) -> DroneEndpoint {
        DroneEndpoint {
            host: host.into(),
            command_port: base + 6,
            navdata_port: base + 4,
            video_port: base + 5,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        let p = [self.command_port, self.navdata_port, self.video_port];
        if p[0] == p[1] || p[0] == p[2] || p[1] == p[2] {
            return Err(ClientError::InvalidArgument(format!("ports must be distinct: {p:?}")));
        }
        Ok(())
    }

    fn resolve(&self, port: u16) -> Result<SocketAddr, ClientError> {
        (self.host.as_str(), port).to_socket_addrs()?.next().ok_or_else(|| {
            ClientError::Connection(std::io::Error::new(
                ErrorKind::NotFound,
                format!("cannot resolve {}", self.host),
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FlightState {
    Disconnected,
    Landed,
    TakingOff,
    Flying,
    Hovering,
    Landing,
    Emergency,
}

impl FlightState {
    pub const ALL: [FlightState; 7] = [
        FlightState::Disconnected,
        FlightState::Landed,
        FlightState::TakingOff,
        FlightState::Flying,
        FlightState::Hovering,
        FlightState::Landing,
        FlightState::Emergency,
    ];

    pub fn is_airborne(self) -> bool {
        matches!(self, FlightState::Flying | FlightState::Hovering)
    }

    /// The transition relation of the client state machine.
    pub fn can_transition(self, to: FlightState) -> bool {
        use FlightState::*;
        if self == to || to == Emergency || to == Disconnected {
            return true;
        }
        matches!(
            (self, to),
            (Disconnected, Landed)
                | (Landed, TakingOff)
                | (TakingOff, Flying)
                | (TakingOff | Flying | Hovering, Landing)
                | (Landing, Landed)
                | (Flying, Hovering)
                | (Hovering, Flying)
                | (Emergency, Landed)
        )
    }
}

impl fmt::Display for FlightState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MoveDirection {
    Right,
    Left,
    Up,
    Down,
    Forward,
    Backward,
}

impl MoveDirection {
    pub const ALL: [MoveDirection; 6] = [
        MoveDirection::Right,
        MoveDirection::Left,
        MoveDirection::Up,
        MoveDirection::Down,
        MoveDirection::Forward,
        MoveDirection::Backward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MoveDirection::Right => "right",
            MoveDirection::Left => "left",
            MoveDirection::Up => "up",
            MoveDirection::Down => "down",
            MoveDirection::Forward => "forward",
            MoveDirection::Backward => "backward",
        }
    }

    /// Stick command for this direction; positive roll is right, negative
    /// pitch is forward, positive gaz is up.
    pub fn pcmd(self, speed: f32) -> PcmdArgs {
        let (roll, pitch, gaz) = match self {
            MoveDirection::Right => (speed, 0.0, 0.0),
            MoveDirection::Left => (-speed, 0.0, 0.0),
            MoveDirection::Forward => (0.0, -speed, 0.0),
            MoveDirection::Backward => (0.0, speed, 0.0),
            MoveDirection::Up => (0.0, 0.0, speed),
            MoveDirection::Down => (0.0, 0.0, -speed),
        };
        PcmdArgs::sticks(roll, pitch, gaz, 0.0)
    }
}

impl FromStr for MoveDirection {
    type Err = ClientError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MoveDirection::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| ClientError::InvalidArgument(format!("unknown direction {s:?}")))
    }
}

impl fmt::Display for MoveDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Telemetry as last reported by the drone. Immutable; replaced wholesale.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TelemetrySnapshot {
    pub battery_percent: u32,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub yaw_deg: f64,
    pub altitude_m: f64,
    pub velocity_m_s: [f64; 3],
    pub state_mask: u32,
    pub navdata_seq: u32,
    /// Time since the session started at which this packet arrived.
    pub last_update: Option<Duration>,
    pub link_ok: bool,
}

impl TelemetrySnapshot {
    pub fn from_navdata(packet: &NavdataPacket, at: Duration) -> TelemetrySnapshot {
        let mut snap = TelemetrySnapshot {
            state_mask: packet.state_mask,
            navdata_seq: packet.seq,
            last_update: Some(at),
            link_ok: true,
            ..Default::default()
        };
        if let Some(d) = packet.demo() {
            snap.battery_percent = d.battery_percent.min(100);
            snap.pitch_deg = f64::from(d.pitch_mdeg) / 1000.0;
            snap.roll_deg = f64::from(d.roll_mdeg) / 1000.0;
            snap.yaw_deg = f64::from(d.yaw_mdeg) / 1000.0;
            snap.altitude_m = (f64::from(d.altitude_mm) / 1000.0).max(0.0);
            snap.velocity_m_s = [d.vx_mm_s, d.vy_mm_s, d.vz_mm_s].map(|v| f64::from(v) / 1000.0);
        }
        snap
    }

    pub fn flying(&self) -> bool {
        self.state_mask & state_bits::FLYING != 0
    }

    pub fn emergency(&self) -> bool {
        self.state_mask & state_bits::EMERGENCY != 0
    }

    pub fn watchdog(&self) -> bool {
        self.state_mask & state_bits::WATCHDOG != 0
    }
}

/// The four flight primitives the controllers need. Implemented by the
/// networked [`Drone`] and by the simulator's virtual-clock harness.
pub trait FlightCommands {
    fn takeoff(&mut self) -> Result<(), ClientError>;
    fn land(&mut self) -> Result<(), ClientError>;
    fn hover(&mut self) -> Result<(), ClientError>;
    fn move_in(&mut self, direction: MoveDirection, speed: f64) -> Result<(), ClientError>;
}

/// Flight state machine and command sequencer, independent of any socket.
///
/// Operations return the commands to put on the wire immediately; [`tick`]
/// yields the command the keepalive loop should send next. Sequence numbers
/// are handed out in call order, so callers must send in that order too.
///
/// [`tick`]: Pilot::tick
#[derive(Debug, Clone)]
pub struct Pilot {
    state: FlightState,
    next_seq: u32,
    repeated: Command,
    watchdog_seen: bool,
    await_emergency_clear: bool,
}

impl Default for Pilot {
    fn default() -> Self {
        Pilot::new()
    }
}

impl Pilot {
    pub fn new() -> Pilot {
        Pilot {
            state: FlightState::Landed,
            next_seq: 1,
            repeated: Command::Comwdg,
            watchdog_seen: false,
            await_emergency_clear: false,
        }
    }

    pub fn state(&self) -> FlightState {
        self.state
    }

    pub fn repeated(&self) -> &Command {
        &self.repeated
    }

    pub fn stamp(&mut self, command: Command) -> AtCommand {
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1).max(1);
        AtCommand::new(seq, command)
    }

    fn require(&self, op: &'static str, allowed: &[FlightState]) -> Result<(), ClientError> {
        if allowed.contains(&self.state) {
            Ok(())
        } else {
            Err(ClientError::State { op, state: self.state })
        }
    }

    pub fn takeoff(&mut self) -> Result<Vec<AtCommand>, ClientError> {
        self.require("take off", &[FlightState::Landed])?;
        self.state = FlightState::TakingOff;
        self.repeated = Command::Ref(RefBits::TAKEOFF);
        Ok(vec![self.stamp(Command::Ref(RefBits::TAKEOFF))])
    }

    pub fn land(&mut self) -> Result<Vec<AtCommand>, ClientError> {
        use FlightState::*;
        self.require("land", &[Flying, Hovering, TakingOff])?;
        self.state = Landing;
        self.repeated = Command::Ref(RefBits::LAND);
        Ok(vec![self.stamp(Command::Ref(RefBits::LAND))])
    }

    pub fn emergency(&mut self) -> Vec<AtCommand> {
        self.state = FlightState::Emergency;
        // The drone toggles on the rising edge, so repeating is harmless.
        self.repeated = Command::Ref(RefBits::EMERGENCY);
        vec![self.stamp(Command::Ref(RefBits::EMERGENCY))]
    }

    pub fn reset_emergency(&mut self) -> Result<Vec<AtCommand>, ClientError> {
        self.require("reset emergency", &[FlightState::Emergency])?;
        self.state = FlightState::Landed;
        self.repeated = Command::Comwdg;
        self.await_emergency_clear = true;
        Ok(vec![
            self.stamp(Command::Ref(RefBits::LAND)),
            self.stamp(Command::Ref(RefBits::EMERGENCY)),
            self.stamp(Command::Ref(RefBits::LAND)),
        ])
    }

    pub fn flat_trim(&mut self) -> Result<Vec<AtCommand>, ClientError> {
        self.require("flat trim", &[FlightState::Landed])?;
        Ok(vec![self.stamp(Command::Ftrim)])
    }

    pub fn hover(&mut self) -> Result<Vec<AtCommand>, ClientError> {
        self.require("hover", &[FlightState::Flying, FlightState::Hovering])?;
        self.state = FlightState::Hovering;
        self.repeated = Command::Pcmd(PcmdArgs::HOVER);
        Ok(Vec::new())
    }

    pub fn move_in(
        &mut self,
        direction: MoveDirection,
        speed: f64,
    ) -> Result<Vec<AtCommand>, ClientError> {
        if speed.is_nan() {
            return Err(ClientError::InvalidArgument("speed is NaN".into()));
        }
        self.require("move", &[FlightState::Flying, FlightState::Hovering])?;
        let clamped = speed.clamp(f64::from(f32::MIN_POSITIVE), 1.0);
        if clamped != speed {
            warn!("move speed {speed} outside (0, 1], clamped to {clamped}");
        }
        self.state = FlightState::Flying;
        self.repeated = Command::Pcmd(direction.pcmd(clamped as f32));
        Ok(Vec::new())
    }

    /// Next command for the keepalive loop.
    pub fn tick(&mut self) -> AtCommand {
        if self.watchdog_seen {
            self.watchdog_seen = false;
            return self.stamp(Command::Comwdg);
        }
        let cmd = self.repeated.clone();
        self.stamp(cmd)
    }

    /// Advances the state machine from fresh telemetry.
    pub fn observe(&mut self, snap: &TelemetrySnapshot) {
        if snap.watchdog() {
            self.watchdog_seen = true;
        }
        if self.await_emergency_clear {
            if snap.emergency() {
                return;
            }
            self.await_emergency_clear = false;
        }
        match self.state {
            _ if snap.emergency() && self.state != FlightState::Emergency => {
                warn!("drone reports emergency");
                self.state = FlightState::Emergency;
                self.repeated = Command::Ref(RefBits::EMERGENCY);
            }
            FlightState::TakingOff if snap.flying() && snap.altitude_m >= FLYING_ALTITUDE_M => {
                self.state = FlightState::Flying;
                self.repeated = Command::Pcmd(PcmdArgs::HOVER);
            }
            FlightState::Landing if !snap.flying() && snap.altitude_m <= LANDED_ALTITUDE_M => {
                self.state = FlightState::Landed;
                self.repeated = Command::Comwdg;
            }
            _ => {}
        }
    }
}

thread_local! {
    static IN_VIDEO_CALLBACK: Cell<bool> = const { Cell::new(false) };
}

fn guard_reentry(op: &'static str) -> Result<(), ClientError> {
    if IN_VIDEO_CALLBACK.with(Cell::get) {
        Err(ClientError::Reentrant(op))
    } else {
        Ok(())
    }
}

/// Whether a successful [`Drone::connect`] also saw navdata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkStatus {
    Up,
    /// No navdata within [`LINK_TIMEOUT`]; commands are still sent.
    TimedOut,
}

struct CommandChannel {
    pilot: Pilot,
    socket: UdpSocket,
}

impl CommandChannel {
    fn send(&self, cmd: &AtCommand) -> Result<(), ClientError> {
        let line = encode_at(cmd)?;
        // A refusal reports an earlier datagram hitting a closed port; the
        // current one was not sent, so retry once. The link being down is
        // visible through telemetry, not through command errors.
        for _ in 0..2 {
            match self.socket.send(&line) {
                Ok(_) => return Ok(()),
                Err(e) if e.kind() == ErrorKind::ConnectionRefused => continue,
                Err(e) => return Err(e.into()),
            }
        }
        debug!("command {} not delivered: drone port closed", cmd.seq);
        Ok(())
    }

    fn send_all(&self, cmds: &[AtCommand]) -> Result<(), ClientError> {
        cmds.iter().try_for_each(|c| self.send(c))
    }
}

struct Session {
    commands: Mutex<CommandChannel>,
    telemetry: ArcSwap<TelemetrySnapshot>,
    stop: AtomicBool,
    started: Instant,
}

impl Session {
    fn lock(&self) -> MutexGuard<'_, CommandChannel> {
        self.commands.lock().unwrap_or_else(|e| e.into_inner())
    }
}

struct Connection {
    session: Arc<Session>,
    loops: Vec<JoinHandle<()>>,
    video: Option<VideoLoop>,
}

struct VideoLoop {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

struct DroneInner {
    endpoint: DroneEndpoint,
    connection: Mutex<Option<Connection>>,
}

/// Handle to one drone. Cheap to clone; clones share the session.
#[derive(Clone)]
pub struct Drone {
    inner: Arc<DroneInner>,
}

impl fmt::Debug for Drone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Drone").field("endpoint", &self.inner.endpoint).finish()
    }
}

impl Drone {
    pub fn new(endpoint: DroneEndpoint) -> Drone {
        Drone { inner: Arc::new(DroneInner { endpoint, connection: Mutex::new(None) }) }
    }

    pub fn endpoint(&self) -> &DroneEndpoint {
        &self.inner.endpoint
    }

    fn connection(&self) -> MutexGuard<'_, Option<Connection>> {
        self.inner.connection.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn session(&self) -> Result<Arc<Session>, ClientError> {
        self.connection().as_ref().map(|c| c.session.clone()).ok_or(ClientError::NotConnected)
    }

    pub fn is_connected(&self) -> bool {
        self.connection().is_some()
    }

    /// Opens the command and navdata channels and starts their loops. Waits
    /// up to [`LINK_TIMEOUT`] for the first navdata packet.
    pub fn connect(&self) -> Result<LinkStatus, ClientError> {
        guard_reentry("connect")?;
        let ep = &self.inner.endpoint;
        ep.validate()?;
        let session = {
            let mut conn = self.connection();
            if conn.is_some() {
                return Err(ClientError::AlreadyConnected);
            }
            let command_addr = ep.resolve(ep.command_port)?;
            let navdata_addr = ep.resolve(ep.navdata_port)?;
            let bind_any: SocketAddr = if command_addr.is_ipv4() {
                "0.0.0.0:0".parse().expect("literal address")
            } else {
                "[::]:0".parse().expect("literal address")
            };
            let cmd_socket = UdpSocket::bind(bind_any)?;
            cmd_socket.connect(command_addr)?;
            let nav_socket = UdpSocket::bind(bind_any)?;
            nav_socket.connect(navdata_addr)?;
            nav_socket.set_read_timeout(Some(LOOP_POLL))?;

            let mut pilot = Pilot::new();
            let config = pilot.stamp(Command::Config {
                key: "general:navdata_demo".into(),
                value: "TRUE".into(),
            });
            let channel = CommandChannel { pilot, socket: cmd_socket };
            channel.send(&config)?;

            let session = Arc::new(Session {
                commands: Mutex::new(channel),
                telemetry: ArcSwap::from_pointee(TelemetrySnapshot::default()),
                stop: AtomicBool::new(false),
                started: Instant::now(),
            });
            let s1 = session.clone();
            let s2 = session.clone();
            let loops = vec![
                thread::Builder::new()
                    .name("aerovis-command".into())
                    .spawn(move || command_loop(&s1))?,
                thread::Builder::new()
                    .name("aerovis-navdata".into())
                    .spawn(move || navdata_loop(&s2, nav_socket))?,
            ];
            *conn = Some(Connection { session: session.clone(), loops, video: None });
            info!("connected to {}", ep.host);
            session
        };

        let deadline = Instant::now() + LINK_TIMEOUT;
        while Instant::now() < deadline {
            if session.telemetry.load().link_ok {
                return Ok(LinkStatus::Up);
            }
            thread::sleep(Duration::from_millis(10));
        }
        warn!("{}", ClientError::LinkTimeout(LINK_TIMEOUT));
        Ok(LinkStatus::TimedOut)
    }

    /// Stops every loop and closes the sockets. A no-op when not connected.
    pub fn disconnect(&self) -> Result<(), ClientError> {
        guard_reentry("disconnect")?;
        let Some(conn) = self.connection().take() else {
            return Ok(());
        };
        conn.session.stop.store(true, Ordering::SeqCst);
        if let Some(video) = conn.video {
            video.stop.store(true, Ordering::SeqCst);
            let _ = video.handle.join();
        }
        for h in conn.loops {
            let _ = h.join();
        }
        info!("disconnected");
        Ok(())
    }

    pub fn state(&self) -> FlightState {
        match self.session() {
            Ok(s) => s.lock().pilot.state(),
            Err(_) => FlightState::Disconnected,
        }
    }

    /// Latest telemetry. Never blocks on the network.
    pub fn telemetry_snapshot(&self) -> Result<TelemetrySnapshot, ClientError> {
        Ok(**self.session()?.telemetry.load())
    }

    fn run(
        &self,
        op: impl FnOnce(&mut Pilot) -> Result<Vec<AtCommand>, ClientError>,
    ) -> Result<(), ClientError> {
        let session = self.session()?;
        let mut channel = session.lock();
        let cmds = op(&mut channel.pilot)?;
        channel.send_all(&cmds)
    }

    pub fn takeoff(&self) -> Result<(), ClientError> {
        self.run(Pilot::takeoff)
    }

    pub fn land(&self) -> Result<(), ClientError> {
        self.run(Pilot::land)
    }

    pub fn emergency(&self) -> Result<(), ClientError> {
        self.run(|p| Ok(p.emergency()))
    }

    pub fn reset_emergency(&self) -> Result<(), ClientError> {
        self.run(Pilot::reset_emergency)
    }

    pub fn flat_trim(&self) -> Result<(), ClientError> {
        self.run(Pilot::flat_trim)
    }

    pub fn hover(&self) -> Result<(), ClientError> {
        self.run(Pilot::hover)
    }

    pub fn move_in(&self, direction: MoveDirection, speed: f64) -> Result<(), ClientError> {
        self.run(|p| p.move_in(direction, speed))
    }

    /// Blocks until the state machine reaches `want`.
    pub fn wait_for_state(
        &self,
        want: FlightState,
        timeout: Duration,
    ) -> Result<(), ClientError> {
        guard_reentry("wait_for_state")?;
        let deadline = Instant::now() + timeout;
        loop {
            let current = self.state();
            if current == want {
                return Ok(());
            }
            if current == FlightState::Disconnected {
                return Err(ClientError::NotConnected);
            }
            if Instant::now() >= deadline {
                return Err(ClientError::WaitTimeout { want, current });
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    /// Opens the video stream. `on_frame` runs on the video thread once per
    /// decoded frame; a slow callback delays the stream. `on_close` runs once
    /// when the stream ends, with the error if it ended abnormally.
    pub fn connect_video<F, C>(&self, on_frame: F, on_close: C) -> Result<(), ClientError>
    where
        F: FnMut(&Frame) + Send + 'static,
        C: FnOnce(Option<String>) + Send + 'static,
    {
        guard_reentry("connect_video")?;
        let mut conn = self.connection();
        let conn = conn.as_mut().ok_or(ClientError::NotConnected)?;
        if conn.video.as_ref().is_some_and(|v| !v.handle.is_finished()) {
            return Err(ClientError::VideoActive);
        }
        let ep = &self.inner.endpoint;
        let addr = ep.resolve(ep.video_port)?;
        let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(1))?;
        stream.set_read_timeout(Some(LOOP_POLL))?;
        let stop = Arc::new(AtomicBool::new(false));
        let loop_stop = stop.clone();
        let handle = thread::Builder::new()
            .name("aerovis-video".into())
            .spawn(move || video_loop(stream, &loop_stop, on_frame, on_close))?;
        conn.video = Some(VideoLoop { stop, handle });
        Ok(())
    }
}

impl FlightCommands for Drone {
    fn takeoff(&mut self) -> Result<(), ClientError> {
        Drone::takeoff(self)
    }

    fn land(&mut self) -> Result<(), ClientError> {
        Drone::land(self)
    }

    fn hover(&mut self) -> Result<(), ClientError> {
        Drone::hover(self)
    }

    fn move_in(&mut self, direction: MoveDirection, speed: f64) -> Result<(), ClientError> {
        Drone::move_in(self, direction, speed)
    }
}

fn command_loop(session: &Session) {
    let mut next = Instant::now();
    while !session.stop.load(Ordering::SeqCst) {
        {
            let mut channel = session.lock();
            let cmd = channel.pilot.tick();
            if let Err(e) = channel.send(&cmd) {
                debug!("command send failed: {e}");
            }
        }
        next += COMMAND_PERIOD;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            next = now;
        }
    }
}

fn navdata_loop(session: &Session, socket: UdpSocket) {
    let mut buf = [0u8; 4096];
    let mut last_packet: Option<Instant> = None;
    let mut last_trigger: Option<Instant> = None;
    let mut last_seq: Option<u32> = None;
    while !session.stop.load(Ordering::SeqCst) {
        let silent = last_packet.is_none_or(|t| t.elapsed() > Duration::from_secs(1));
        if silent && last_trigger.is_none_or(|t| t.elapsed() > Duration::from_millis(500)) {
            if let Err(e) = socket.send(&NAVDATA_TRIGGER) {
                debug!("navdata trigger failed: {e}");
            }
            last_trigger = Some(Instant::now());
        }
        match socket.recv(&mut buf) {
            Ok(n) => {
                let packet = match parse_navdata(&buf[..n]) {
                    Ok(p) => p,
                    Err(e) => {
                        debug!("dropping navdata: {e}");
                        continue;
                    }
                };
                // A restarted drone begins again at 1.
                if last_seq.is_some_and(|s| packet.seq <= s && packet.seq > 1) {
                    continue;
                }
                last_seq = Some(packet.seq);
                last_packet = Some(Instant::now());
                let snap = TelemetrySnapshot::from_navdata(&packet, session.started.elapsed());
                session.telemetry.store(Arc::new(snap));
                session.lock().pilot.observe(&snap);
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            // ICMP port-unreachable surfaces here while the drone is down.
            Err(e) if e.kind() == ErrorKind::ConnectionRefused => {
                thread::sleep(LOOP_POLL);
            }
            Err(e) => {
                debug!("navdata recv error: {e}");
                thread::sleep(LOOP_POLL);
            }
        }
        if last_packet.is_some_and(|t| t.elapsed() > LINK_TIMEOUT) {
            let current = session.telemetry.load();
            if current.link_ok {
                warn!("navdata link lost");
                session.telemetry.store(Arc::new(TelemetrySnapshot { link_ok: false, ..**current }));
            }
        }
    }
}

/// Incremental decoder for the framed video stream. Bytes that do not start
/// a valid header are skipped up to the next `PaVE` signature.
#[derive(Debug, Default)]
pub struct VideoStreamDecoder {
    buf: Vec<u8>,
    skipped: usize,
}

/// One unit pulled off the video stream.
#[derive(Debug, PartialEq)]
pub enum VideoUnit {
    Frame { number: u32, frame: Frame },
    /// A well-formed frame in a codec this client does not decode.
    Undecoded { number: u32, codec: u8, payload_len: usize },
}

impl VideoStreamDecoder {
    pub fn new() -> VideoStreamDecoder {
        VideoStreamDecoder::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes discarded while resynchronizing.
    pub fn skipped_bytes(&self) -> usize {
        self.skipped
    }

    fn resync(&mut self, from: usize) {
        let at = self.buf[from..]
            .windows(4)
            .position(|w| w == VIDEO_SIGNATURE)
            .map(|i| i + from)
            .unwrap_or(self.buf.len().saturating_sub(3).max(from.min(self.buf.len())));
        self.skipped += at;
        self.buf.drain(..at);
    }

    pub fn next_unit(&mut self) -> Option<VideoUnit> {
        loop {
            if self.buf.len() >= 4 && self.buf[..4] != VIDEO_SIGNATURE {
                self.resync(1);
            }
            let header = match parse_video_header(&self.buf) {
                Ok(h) => h,
                Err(VideoError::Truncated(_)) => return None,
                Err(e) => {
                    debug!("video resync: {e}");
                    self.resync(1);
                    continue;
                }
            };
            let start = header.header_size as usize;
            let len = header.payload_size as usize;
            if len > MAX_VIDEO_PAYLOAD {
                debug!("video resync: payload of {len} bytes");
                self.resync(1);
                continue;
            }
            if self.buf.len() < start + len {
                return None;
            }
            let payload: Vec<u8> = self.buf[start..start + len].to_vec();
            self.buf.drain(..start + len);
            let number = header.frame_number;
            if header.codec == CODEC_RAW_RGB24 {
                let frame = Frame::new(
                    u32::from(header.display_width),
                    u32::from(header.display_height),
                    payload,
                )
                .expect("size checked by parse_video_header");
                return Some(VideoUnit::Frame { number, frame });
            }
            return Some(VideoUnit::Undecoded { number, codec: header.codec, payload_len: len });
        }
    }
}

fn video_loop<F, C>(mut stream: TcpStream, stop: &AtomicBool, mut on_frame: F, on_close: C)
where
    F: FnMut(&Frame),
    C: FnOnce(Option<String>),
{
    let mut decoder = VideoStreamDecoder::new();
    let mut chunk = vec![0u8; 64 * 1024];
    let reason = loop {
        if stop.load(Ordering::SeqCst) {
            break None;
        }
        match stream.read(&mut chunk) {
            Ok(0) => break None,
            Ok(n) => decoder.push(&chunk[..n]),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) => break Some(e.to_string()),
        }
        while let Some(unit) = decoder.next_unit() {
            match unit {
                VideoUnit::Frame { frame, .. } => {
                    IN_VIDEO_CALLBACK.with(|f| f.set(true));
                    let result = catch_unwind(AssertUnwindSafe(|| on_frame(&frame)));
                    IN_VIDEO_CALLBACK.with(|f| f.set(false));
                    if result.is_err() {
                        warn!("frame callback panicked; continuing");
                    }
                }
                VideoUnit::Undecoded { number, codec, .. } => {
                    debug!("frame {number}: codec {codec:#04x} passed through undecoded");
                }
            }
        }
    };
    if let Some(r) = &reason {
        warn!("video stream error: {r}");
    }
    on_close(reason);
}
