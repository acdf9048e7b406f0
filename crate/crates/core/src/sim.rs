//! Software drone speaking the same wire protocol as the real one.
//!
//! [`SimWorld`] holds all simulation state and is advanced one physics tick
//! at a time. [`SimServer`] wraps it in a real-time loop behind the three
//! drone ports; [`Loopback`] drives it on a virtual clock together with a
//! client-side [`Pilot`], for deterministic closed-loop tests.

use std::collections::VecDeque;
use std::io::{ErrorKind, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::client::{
    ClientError, FlightCommands, FlightState, MoveDirection, Pilot, TelemetrySnapshot,
};
use crate::protocol::{
    build_navdata, ctrl_state, encode_at, parse_at, parse_navdata, split_at_lines, state_bits,
    AtCommand, Command, DemoData, NavOption, NavdataPacket, PcmdArgs, VideoFrameHeader,
    NAVDATA_TRIGGER,
};
use crate::vision::{Frame, NormalizedBox};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot bind {what} port {port}: {source}")]
    Bind { what: &'static str, port: u16, source: std::io::Error },
    #[error("invalid sim config: {0}")]
    Config(String),
    #[error("scene file line {line}: {message}")]
    Scene { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub frame_width: u32,
    pub frame_height: u32,
    pub video_fps: f64,
    pub navdata_hz: f64,
    pub physics_dt: f64,
    /// Horizontal speed at full stick, m/s.
    pub v_max: f64,
    /// Vertical speed at full stick, m/s.
    pub vz_max: f64,
    /// Yaw rate at full stick, deg/s.
    pub yaw_max_deg: f64,
    /// Battery drain while airborne, percent per second.
    pub battery_drain: f64,
    /// Beyond this distance from the origin the drone stops transmitting.
    pub link_range_m: f64,
    pub hover_altitude_m: f64,
    pub watchdog_timeout_s: f64,
    /// Tilt reported at full stick, degrees.
    pub max_tilt_deg: f64,
    /// Attitude offset (pitch, roll) in degrees until a flat trim.
    pub attitude_bias_deg: [f64; 2],
    pub initial_battery: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            frame_width: 640,
            frame_height: 360,
            video_fps: 10.0,
            navdata_hz: 30.0,
            physics_dt: 1.0 / 30.0,
            v_max: 2.0,
            vz_max: 1.0,
            yaw_max_deg: 100.0,
            battery_drain: 0.1,
            link_range_m: 50.0,
            hover_altitude_m: 1.0,
            watchdog_timeout_s: 2.0,
            max_tilt_deg: 12.0,
            attitude_bias_deg: [0.8, -0.5],
            initial_battery: 100.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let rates = [self.video_fps, self.navdata_hz, self.physics_dt];
        if rates.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(SimError::Config("rates and physics step must be > 0".into()));
        }
        if self.frame_width == 0 || self.frame_height == 0 {
            return Err(SimError::Config("frame dimensions must be > 0".into()));
        }
        if self.frame_width > u32::from(u16::MAX) || self.frame_height > u32::from(u16::MAX) {
            return Err(SimError::Config("frame dimensions must fit 16 bits".into()));
        }
        if u64::from(self.frame_width) * u64::from(self.frame_height) * 3 > u64::from(u32::MAX) {
            return Err(SimError::Config("frame too large for the video header".into()));
        }
        if !(0.0..=100.0).contains(&self.initial_battery) {
            return Err(SimError::Config("battery must be within [0, 100]".into()));
        }
        Ok(())
    }
}

/// Pinhole focal constant used by [`project_target`].
pub const FOCAL: f64 = 1.0;
/// Box width as a fraction of its height.
pub const TARGET_ASPECT: f64 = 0.4;
/// Targets closer than this along the view axis are not visible.
pub const MIN_VISIBLE_DEPTH_M: f64 = 0.5;
const EMERGENCY_FALL_M_S: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimScene {
    /// Target centre in world coordinates, metres.
    pub target: [f64; 3],
    pub target_height_m: f64,
    pub target_color: [u8; 3],
    pub background_color: [u8; 3],
    /// Uniform perturbation of the target's x and y, drawn from the seed.
    pub target_jitter_m: f64,
}

impl Default for SimScene {
    /// A person-sized target 12 m away, 15° to the right of the initial
    /// heading.
    fn default() -> Self {
        SimScene::at_bearing(15.0, 12.0)
    }
}

impl SimScene {
    pub fn at_bearing(bearing_deg: f64, distance_m: f64) -> SimScene {
        let b = bearing_deg.to_radians();
        SimScene {
            target: [distance_m * b.cos(), distance_m * b.sin(), 0.85],
            target_height_m: 1.7,
            target_color: [230, 40, 40],
            background_color: [40, 90, 60],
            target_jitter_m: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.target_color == self.background_color {
            return Err(SimError::Config("target and background colours must differ".into()));
        }
        if !(self.target_height_m > 0.0) {
            return Err(SimError::Config("target height must be > 0".into()));
        }
        Ok(())
    }
}

fn parse_triple<T: std::str::FromStr>(v: &str) -> Option<[T; 3]> {
    let parts: Vec<T> = v.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    parts.try_into().ok()
}

/// Reads a `key = value` scene file. Recognised keys: `target` (x,y,z),
/// `target_bearing` (degrees) with `target_distance` (m), `target_height`,
/// `target_color` and `background_color` (r,g,b), `target_jitter`, `frame`
/// (WxH), `video_fps`, `battery`, `seed`. `#` starts a comment.
pub fn parse_scene_file(text: &str, config: &mut SimConfig) -> Result<SimScene, SimError> {
    let mut scene = SimScene::default();
    let mut polar: (Option<f64>, Option<f64>) = (None, None);
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SimError::Scene { line: i + 1, message };
        let (key, value) =
            line.split_once('=').ok_or_else(|| err("expected key = value".into()))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = || err(format!("bad value for {key}: {value:?}"));
        let num = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "target" => scene.target = parse_triple(value).ok_or_else(bad)?,
            "target_bearing" => polar.0 = Some(num()?),
            "target_distance" => polar.1 = Some(num()?),
            "target_height" => scene.target_height_m = num()?,
            "target_color" => scene.target_color = parse_triple(value).ok_or_else(bad)?,
            "background_color" => scene.background_color = parse_triple(value).ok_or_else(bad)?,
            "target_jitter" => scene.target_jitter_m = num()?,
            "frame" => {
                let (w, h) = value.split_once('x').ok_or_else(bad)?;
                config.frame_width = w.trim().parse().map_err(|_| bad())?;
                config.frame_height = h.trim().parse().map_err(|_| bad())?;
            }
            "video_fps" => config.video_fps = num()?,
            "battery" => config.initial_battery = num()?,
            "seed" => config.seed = value.parse().map_err(|_| bad())?,
            _ => return Err(err(format!("unknown key {key:?}"))),
        }
    }
    if let (Some(b), Some(d)) = polar {
        let z = scene.target[2];
        scene.target = SimScene::at_bearing(b, d).target;
        scene.target[2] = z;
    } else if polar.0.is_some() || polar.1.is_some() {
        return Err(SimError::Scene {
            line: 0,
            message: "target_bearing and target_distance go together".into(),
        });
    }
    scene.validate()?;
    config.validate()?;
    Ok(scene)
}

/// Mutable state of the simulated airframe.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDrone {
    pub position: [f64; 3],
    pub yaw_deg: f64,
    pub sticks: PcmdArgs,
    pub state: FlightState,
    pub battery: f64,
    pub watchdog_s: f64,
    pub watchdog_tripped: bool,
    pub last_seq: Option<u32>,
    pub attitude_bias_deg: [f64; 2],
    last_ref_emergency: bool,
}

impl SimDrone {
    fn new(config: &SimConfig) -> SimDrone {
        SimDrone {
            position: [0.0; 3],
            yaw_deg: 0.0,
            sticks: PcmdArgs::HOVER,
            state: FlightState::Landed,
            battery: config.initial_battery,
            watchdog_s: 0.0,
            watchdog_tripped: false,
            last_seq: None,
            attitude_bias_deg: config.attitude_bias_deg,
            last_ref_emergency: false,
        }
    }

    fn motors_on(&self) -> bool {
        matches!(
            self.state,
            FlightState::TakingOff | FlightState::Flying | FlightState::Hovering | FlightState::Landing
        )
    }

    /// Sticks in effect after the emergency and watchdog overrides.
    pub fn effective_sticks(&self) -> PcmdArgs {
        if self.state == FlightState::Emergency || self.watchdog_tripped || !self.sticks.progressive {
            PcmdArgs::HOVER
        } else {
            self.sticks
        }
    }

    pub fn state_mask(&self) -> u32 {
        let mut mask = 0;
        if self.motors_on() {
            mask |= state_bits::FLYING;
        }
        if self.battery < 20.0 {
            mask |= state_bits::BATTERY_LOW;
        }
        if self.watchdog_tripped {
            mask |= state_bits::WATCHDOG;
        }
        if self.state == FlightState::Emergency {
            mask |= state_bits::EMERGENCY;
        }
        mask
    }

    fn ctrl_state(&self) -> u32 {
        match self.state {
            FlightState::Landed | FlightState::Disconnected => ctrl_state::LANDED,
            FlightState::TakingOff => ctrl_state::TAKING_OFF,
            FlightState::Flying => ctrl_state::FLYING,
            FlightState::Hovering => ctrl_state::HOVERING,
            FlightState::Landing => ctrl_state::LANDING,
            FlightState::Emergency => ctrl_state::DEFAULT,
        }
    }
}

/// Where the target appears in the camera, or `None` when it is behind the
/// camera, too close, or centred outside the frame.
pub fn project_target(drone: &SimDrone, scene: &SimScene) -> Option<NormalizedBox> {
    let psi = drone.yaw_deg.to_radians();
    let (dx, dy) = (scene.target[0] - drone.position[0], scene.target[1] - drone.position[1]);
    let forward = psi.cos() * dx + psi.sin() * dy;
    let lateral = -psi.sin() * dx + psi.cos() * dy;
    let vertical = scene.target[2] - drone.position[2];
    if forward <= MIN_VISIBLE_DEPTH_M {
        return None;
    }
    let x = 0.5 + FOCAL * lateral / forward;
    let y = 0.5 - FOCAL * vertical / forward;
    if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
        return None;
    }
    let h = (FOCAL * scene.target_height_m / forward).min(1.0);
    Some(NormalizedBox { x, y, w: TARGET_ASPECT * h, h })
}

/// Pixel rectangle `[col0, col1) × [row0, row1)` covering a box, clipped to
/// the frame.
pub fn box_to_pixels(b: &NormalizedBox, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
    let (w, h) = (f64::from(width), f64::from(height));
    let clip = |v: f64, max: f64| v.round().clamp(0.0, max) as u32;
    let col0 = clip((b.x - b.w / 2.0) * w, w);
    let col1 = clip((b.x + b.w / 2.0) * w, w);
    let row0 = clip((b.y - b.h / 2.0) * h, h);
    let row1 = clip((b.y + b.h / 2.0) * h, h);
    (col1 > col0 && row1 > row0).then_some((col0, row0, col1, row1))
}

/// What one physics tick produced.
#[derive(Debug, Default)]
pub struct TickOutput {
    pub navdata: Option<Vec<u8>>,
    pub frame_due: bool,
}

/// Complete simulation state. Deterministic given config, scene and the
/// sequence of `apply_command`/`tick` calls.
#[derive(Debug, Clone)]
pub struct SimWorld {
    config: SimConfig,
    scene: SimScene,
    drone: SimDrone,
    time_s: f64,
    ticks: u64,
    navdata_seq: u32,
    navdata_enabled: bool,
    navdata_due: f64,
    frame_due: f64,
    frame_number: u32,
}

impl SimWorld {
    pub fn new(config: SimConfig, mut scene: SimScene) -> Result<SimWorld, SimError> {
        config.validate()?;
        scene.validate()?;
        if scene.target_jitter_m > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let j = scene.target_jitter_m;
            scene.target[0] += rng.random_range(-j..=j);
            scene.target[1] += rng.random_range(-j..=j);
        }
        let video_fps = config.video_fps;
        Ok(SimWorld {
            drone: SimDrone::new(&config),
            config,
            scene,
            time_s: 0.0,
            ticks: 0,
            navdata_seq: 0,
            navdata_enabled: false,
            navdata_due: 0.0,
            frame_due: 1.0 / video_fps,
            frame_number: 0,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn scene(&self) -> &SimScene {
        &self.scene
    }

    pub fn scene_mut(&mut self) -> &mut SimScene {
        &mut self.scene
    }

    pub fn drone(&self) -> &SimDrone {
        &self.drone
    }

    pub fn drone_mut(&mut self) -> &mut SimDrone {
        &mut self.drone
    }

    pub fn time_s(&self) -> f64 {
        self.time_s
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Starts navdata output, as the trigger datagram does.
    pub fn enable_navdata(&mut self) {
        self.navdata_enabled = true;
    }

    pub fn in_link_range(&self) -> bool {
        let p = self.drone.position;
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() <= self.config.link_range_m
    }

    /// Applies one received command. Returns false when it was dropped as
    /// stale. A sequence number of 1 always restarts the counter, as a new
    /// client session does.
    pub fn apply_command(&mut self, cmd: &AtCommand) -> bool {
        let d = &mut self.drone;
        if let Some(last) = d.last_seq {
            if cmd.seq <= last && cmd.seq != 1 {
                debug!("dropping stale seq {} (last {last})", cmd.seq);
                return false;
            }
        }
        d.last_seq = Some(cmd.seq);
        d.watchdog_s = 0.0;
        match &cmd.command {
            Command::Ref(bits) => {
                let rising = bits.emergency && !d.last_ref_emergency;
                d.last_ref_emergency = bits.emergency;
                if rising {
                    if d.state == FlightState::Emergency {
                        d.state = FlightState::Landed;
                    } else {
                        d.state = FlightState::Emergency;
                        d.sticks = PcmdArgs::HOVER;
                    }
                } else if d.state != FlightState::Emergency {
                    match (d.state, bits.takeoff) {
                        (FlightState::Landed, true) if d.battery > 0.0 => {
                            d.state = FlightState::TakingOff
                        }
                        (FlightState::TakingOff | FlightState::Flying | FlightState::Hovering, false) => {
                            d.state = FlightState::Landing;
                            d.sticks = PcmdArgs::HOVER;
                        }
                        _ => {}
                    }
                }
            }
            Command::Pcmd(args) => {
                if d.state != FlightState::Emergency {
                    d.sticks = args.clamped();
                    match (d.state, args.progressive) {
                        (FlightState::Hovering, true) => d.state = FlightState::Flying,
                        (FlightState::Flying, false) => d.state = FlightState::Hovering,
                        _ => {}
                    }
                }
            }
            Command::Ftrim => {
                if d.state == FlightState::Landed {
                    d.attitude_bias_deg = [0.0, 0.0];
                }
            }
            Command::Comwdg => d.watchdog_tripped = false,
            Command::Config { .. } | Command::Ctrl => {}
        }
        true
    }

    /// Advances the physics by `dt` seconds.
    pub fn step(&mut self, dt: f64) {
        let cfg = &self.config;
        let d = &mut self.drone;
        d.watchdog_s += dt;
        if d.watchdog_s > cfg.watchdog_timeout_s && !d.watchdog_tripped {
            warn!("watchdog tripped after {:.2}s of silence", d.watchdog_s);
            d.watchdog_tripped = true;
        }
        if d.watchdog_tripped || d.state == FlightState::Emergency {
            d.sticks = PcmdArgs::HOVER;
        }
        let airborne = d.motors_on();
        match d.state {
            FlightState::TakingOff => {
                d.position[2] += cfg.vz_max * dt;
                if d.position[2] >= cfg.hover_altitude_m {
                    d.position[2] = cfg.hover_altitude_m;
                    d.state = FlightState::Flying;
                }
            }
            FlightState::Landing => {
                d.position[2] -= cfg.vz_max * dt;
                if d.position[2] <= 0.0 {
                    d.position[2] = 0.0;
                    d.state = FlightState::Landed;
                }
            }
            FlightState::Flying if !d.sticks.progressive => d.state = FlightState::Hovering,
            FlightState::Flying => {
                let s = d.effective_sticks();
                let v_fwd = -f64::from(s.pitch) * cfg.v_max;
                let v_lat = f64::from(s.roll) * cfg.v_max;
                let v_z = f64::from(s.gaz) * cfg.vz_max;
                let psi = d.yaw_deg.to_radians();
                d.position[0] += (psi.cos() * v_fwd - psi.sin() * v_lat) * dt;
                d.position[1] += (psi.sin() * v_fwd + psi.cos() * v_lat) * dt;
                d.position[2] = (d.position[2] + v_z * dt).max(0.0);
                d.yaw_deg += f64::from(s.yaw) * cfg.yaw_max_deg * dt;
            }
            FlightState::Emergency | FlightState::Landed => {
                d.position[2] = (d.position[2] - EMERGENCY_FALL_M_S * dt).max(0.0);
            }
            FlightState::Hovering | FlightState::Disconnected => {}
        }
        if airborne {
            d.battery = (d.battery - cfg.battery_drain * dt).max(0.0);
        }
        self.time_s += dt;
        self.ticks += 1;
    }

    /// One fixed physics step plus whatever output falls due in it.
    pub fn tick(&mut self) -> TickOutput {
        let dt = self.config.physics_dt;
        self.step(dt);
        let mut out = TickOutput::default();
        let eps = 1e-9;
        if self.navdata_enabled && self.time_s + eps >= self.navdata_due {
            self.navdata_due += 1.0 / self.config.navdata_hz;
            out.navdata = self.emit_navdata();
        }
        if self.time_s + eps >= self.frame_due {
            self.frame_due += 1.0 / self.config.video_fps;
            out.frame_due = self.in_link_range();
        }
        out
    }

    pub fn project_target(&self) -> Option<NormalizedBox> {
        project_target(&self.drone, &self.scene)
    }

    pub fn render_frame(&self) -> Frame {
        let (w, h) = (self.config.frame_width, self.config.frame_height);
        let mut frame = Frame::filled(w, h, self.scene.background_color);
        if let Some((c0, r0, c1, r1)) = self.project_target().and_then(|b| box_to_pixels(&b, w, h)) {
            frame.fill_rect(c0, r0, c1, r1, self.scene.target_color);
        }
        frame
    }

    /// Rendered frame with its stream header; bumps the frame counter.
    pub fn next_video_frame(&mut self) -> (VideoFrameHeader, Frame) {
        self.frame_number = self.frame_number.wrapping_add(1);
        let frame = self.render_frame();
        let header =
            VideoFrameHeader::raw_rgb(frame.width() as u16, frame.height() as u16, self.frame_number)
                .expect("frame size checked by SimConfig::validate");
        (header, frame)
    }

    /// Telemetry as it would be sent now, without consuming a sequence number.
    pub fn navdata_packet(&self) -> NavdataPacket {
        let d = &self.drone;
        let s = if d.motors_on() { d.effective_sticks() } else { PcmdArgs::HOVER };
        let tilt = self.config.max_tilt_deg;
        let demo = DemoData {
            ctrl_state: d.ctrl_state(),
            battery_percent: d.battery.floor().clamp(0.0, 100.0) as u32,
            pitch_mdeg: ((d.attitude_bias_deg[0] + f64::from(s.pitch) * tilt) * 1000.0) as f32,
            roll_mdeg: ((d.attitude_bias_deg[1] + f64::from(s.roll) * tilt) * 1000.0) as f32,
            yaw_mdeg: (d.yaw_deg * 1000.0) as f32,
            altitude_mm: (d.position[2] * 1000.0).round() as i32,
            vx_mm_s: if d.state == FlightState::Flying {
                (-f64::from(s.pitch) * self.config.v_max * 1000.0) as f32
            } else {
                0.0
            },
            vy_mm_s: if d.state == FlightState::Flying {
                (f64::from(s.roll) * self.config.v_max * 1000.0) as f32
            } else {
                0.0
            },
            vz_mm_s: match d.state {
                FlightState::Flying => (f64::from(s.gaz) * self.config.vz_max * 1000.0) as f32,
                FlightState::TakingOff => (self.config.vz_max * 1000.0) as f32,
                FlightState::Landing => (-self.config.vz_max * 1000.0) as f32,
                _ => 0.0,
            },
        };
        NavdataPacket {
            state_mask: d.state_mask(),
            seq: self.navdata_seq.wrapping_add(1),
            vision_flag: 0,
            options: vec![NavOption::Demo(demo)],
        }
    }

    /// Encoded navdata for sending, or `None` when out of link range.
    pub fn emit_navdata(&mut self) -> Option<Vec<u8>> {
        if !self.in_link_range() {
            return None;
        }
        let packet = self.navdata_packet();
        self.navdata_seq = packet.seq;
        Some(build_navdata(&packet).expect("demo option always fits"))
    }
}

/// Replays `(tick index, command)` pairs for `ticks` ticks and returns every
/// navdata datagram produced. Commands due at tick `t` are applied before
/// that tick is stepped.
pub fn replay_trace(
    config: &SimConfig,
    scene: &SimScene,
    trace: &[(u64, AtCommand)],
    ticks: u64,
) -> Result<Vec<Vec<u8>>, SimError> {
    let mut world = SimWorld::new(config.clone(), scene.clone())?;
    world.enable_navdata();
    let mut out = Vec::new();
    let mut next = trace.iter().peekable();
    for t in 0..ticks {
        while let Some((at, cmd)) = next.peek() {
            if *at > t {
                break;
            }
            world.apply_command(cmd);
            next.next();
        }
        if let Some(bytes) = world.tick().navdata {
            out.push(bytes);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Networked server

/// Addresses the simulator listens on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimPorts {
    pub bind: IpAddr,
    pub command: u16,
    pub navdata: u16,
    pub video: u16,
}

impl SimPorts {
    /// Loopback ports laid out like [`crate::client::DroneEndpoint::with_base`].
    pub fn local(base: u16) -> SimPorts {
        SimPorts { bind: IpAddr::V4(Ipv4Addr::LOCALHOST), command: base + 6, navdata: base + 4, video: base + 5 }
    }
}

/// A command as seen on the simulator's command port.
#[derive(Debug, Clone)]
pub struct WireRecord {
    pub at: Instant,
    pub command: Result<AtCommand, String>,
}

const WIRE_LOG_CAP: usize = 100_000;

enum SimInput {
    At(AtCommand),
    SetBattery(f64),
    SetTarget([f64; 3]),
}

struct SimShared {
    stop: AtomicBool,
    drone: Mutex<SimDrone>,
    wire_log: Mutex<VecDeque<WireRecord>>,
    frames_sent: AtomicU64,
    navdata_sent: AtomicU64,
    video_client: AtomicBool,
}

/// A running simulator. Stops when dropped.
pub struct SimServer {
    shared: Arc<SimShared>,
    inputs: Sender<SimInput>,
    threads: Vec<JoinHandle<()>>,
    ports: SimPorts,
}

fn bind_udp(addr: SocketAddr, what: &'static str) -> Result<UdpSocket, SimError> {
    UdpSocket::bind(addr).map_err(|source| SimError::Bind { what, port: addr.port(), source })
}

impl SimServer {
    pub fn start(config: SimConfig, scene: SimScene, ports: SimPorts) -> Result<SimServer, SimError> {
        let world = SimWorld::new(config, scene)?;
        let cmd_socket = bind_udp(SocketAddr::new(ports.bind, ports.command), "command")?;
        let nav_socket = bind_udp(SocketAddr::new(ports.bind, ports.navdata), "navdata")?;
        let listener = TcpListener::bind(SocketAddr::new(ports.bind, ports.video))
            .map_err(|source| SimError::Bind { what: "video", port: ports.video, source })?;
        cmd_socket.set_read_timeout(Some(Duration::from_millis(20)))?;
        nav_socket.set_nonblocking(true)?;
        listener.set_nonblocking(true)?;

        let shared = Arc::new(SimShared {
            stop: AtomicBool::new(false),
            drone: Mutex::new(world.drone().clone()),
            wire_log: Mutex::new(VecDeque::new()),
            frames_sent: AtomicU64::new(0),
            navdata_sent: AtomicU64::new(0),
            video_client: AtomicBool::new(false),
        });
        let (input_tx, input_rx) = mpsc::channel();
        let (frame_tx, frame_rx) = mpsc::sync_channel::<Vec<u8>>(2);

        let mut threads = Vec::new();
        let s = shared.clone();
        let tx = input_tx.clone();
        threads.push(
            thread::Builder::new()
                .name("sim-command".into())
                .spawn(move || command_receiver(&s, cmd_socket, tx))?,
        );
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name("sim-physics".into())
                .spawn(move || physics_loop(&s, world, nav_socket, input_rx, frame_tx))?,
        );
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name("sim-video".into())
                .spawn(move || video_server(&s, listener, frame_rx))?,
        );
        info!("simulator listening on {}:{}/{}/{}", ports.bind, ports.command, ports.navdata, ports.video);
        Ok(SimServer { shared, inputs: input_tx, threads, ports })
    }

    pub fn ports(&self) -> SimPorts {
        self.ports
    }

    /// Copy of the airframe state as of the last physics tick.
    pub fn drone(&self) -> SimDrone {
        self.shared.drone.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn set_battery(&self, percent: f64) {
        let _ = self.inputs.send(SimInput::SetBattery(percent.clamp(0.0, 100.0)));
    }

    pub fn set_target(&self, position: [f64; 3]) {
        let _ = self.inputs.send(SimInput::SetTarget(position));
    }

    /// Every line received on the command port so far, oldest first.
    pub fn wire_log(&self) -> Vec<WireRecord> {
        self.shared.wire_log.lock().unwrap_or_else(|e| e.into_inner()).iter().cloned().collect()
    }

    pub fn frames_sent(&self) -> u64 {
        self.shared.frames_sent.load(Ordering::SeqCst)
    }

    pub fn navdata_sent(&self) -> u64 {
        self.shared.navdata_sent.load(Ordering::SeqCst)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for SimServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn command_receiver(shared: &SimShared, socket: UdpSocket, tx: Sender<SimInput>) {
    let mut buf = [0u8; 4096];
    while !shared.stop.load(Ordering::SeqCst) {
        let n = match socket.recv(&mut buf) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) => {
                debug!("command recv: {e}");
                continue;
            }
        };
        let now = Instant::now();
        for line in split_at_lines(&buf[..n]) {
            let parsed = parse_at(line).map_err(|e| e.to_string());
            match &parsed {
                Ok(cmd) => {
                    let _ = tx.send(SimInput::At(cmd.clone()));
                }
                Err(e) => warn!("bad command line {:?}: {e}", String::from_utf8_lossy(line)),
            }
            let mut log = shared.wire_log.lock().unwrap_or_else(|e| e.into_inner());
            if log.len() == WIRE_LOG_CAP {
                log.pop_front();
            }
            log.push_back(WireRecord { at: now, command: parsed });
        }
    }
}

fn physics_loop(
    shared: &SimShared,
    mut world: SimWorld,
    nav_socket: UdpSocket,
    inputs: Receiver<SimInput>,
    frames: SyncSender<Vec<u8>>,
) {
    let period = Duration::from_secs_f64(world.config().physics_dt);
    let mut next = Instant::now();
    let mut peer: Option<SocketAddr> = None;
    let mut buf = [0u8; 64];
    while !shared.stop.load(Ordering::SeqCst) {
        loop {
            match inputs.try_recv() {
                Ok(SimInput::At(cmd)) => {
                    world.apply_command(&cmd);
                }
                Ok(SimInput::SetBattery(b)) => world.drone_mut().battery = b,
                Ok(SimInput::SetTarget(t)) => world.scene_mut().target = t,
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => break,
            }
        }
        while let Ok((n, from)) = nav_socket.recv_from(&mut buf) {
            if buf[..n] == NAVDATA_TRIGGER {
                if peer != Some(from) {
                    debug!("navdata peer {from}");
                }
                peer = Some(from);
                world.enable_navdata();
            }
        }
        let out = world.tick();
        if let (Some(bytes), Some(to)) = (out.navdata, peer) {
            if nav_socket.send_to(&bytes, to).is_ok() {
                shared.navdata_sent.fetch_add(1, Ordering::SeqCst);
            }
        }
        if out.frame_due && shared.video_client.load(Ordering::SeqCst) {
            let (header, frame) = world.next_video_frame();
            let mut bytes = header.encode();
            bytes.extend_from_slice(frame.pixels());
            match frames.try_send(bytes) {
                Ok(()) | Err(TrySendError::Full(_)) => {}
                Err(TrySendError::Disconnected(_)) => {}
            }
        }
        *shared.drone.lock().unwrap_or_else(|e| e.into_inner()) = world.drone().clone();

        next += period;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else if now - next > period * 10 {
            // Fell far behind; do not try to catch up in a burst.
            next = now;
        }
    }
}

fn video_server(shared: &SimShared, listener: TcpListener, frames: Receiver<Vec<u8>>) {
    let mut client: Option<TcpStream> = None;
    while !shared.stop.load(Ordering::SeqCst) {
        if client.is_none() {
            match listener.accept() {
                Ok((stream, from)) => {
                    debug!("video client {from}");
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_write_timeout(Some(Duration::from_millis(500)));
                    let _ = stream.set_nodelay(true);
                    client = Some(stream);
                    shared.video_client.store(true, Ordering::SeqCst);
                    while frames.try_recv().is_ok() {}
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    thread::sleep(Duration::from_millis(20));
                    continue;
                }
                Err(e) => {
                    debug!("video accept: {e}");
                    thread::sleep(Duration::from_millis(20));
                    continue;
                }
            }
        }
        match frames.recv_timeout(Duration::from_millis(20)) {
            Ok(bytes) => {
                let stream = client.as_mut().expect("client present");
                if let Err(e) = stream.write_all(&bytes) {
                    debug!("video client gone: {e}");
                    client = None;
                    shared.video_client.store(false, Ordering::SeqCst);
                } else {
                    shared.frames_sent.fetch_add(1, Ordering::SeqCst);
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    shared.video_client.store(false, Ordering::SeqCst);
}

// ---------------------------------------------------------------------------
// Virtual-clock harness

/// Client and simulator in one context on a virtual clock. Every command
/// goes through the wire encoder and parser, and every navdata packet
/// through the builder and parser, exactly as over the network.
#[derive(Debug, Clone)]
pub struct Loopback {
    world: SimWorld,
    pilot: Pilot,
    telemetry: TelemetrySnapshot,
    sent: Vec<AtCommand>,
}

impl Loopback {
    pub fn new(config: SimConfig, scene: SimScene) -> Result<Loopback, SimError> {
        let mut world = SimWorld::new(config, scene)?;
        world.enable_navdata();
        Ok(Loopback { world, pilot: Pilot::new(), telemetry: TelemetrySnapshot::default(), sent: Vec::new() })
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut SimWorld {
        &mut self.world
    }

    pub fn state(&self) -> FlightState {
        self.pilot.state()
    }

    pub fn telemetry(&self) -> &TelemetrySnapshot {
        &self.telemetry
    }

    /// Commands put on the virtual wire so far.
    pub fn sent(&self) -> &[AtCommand] {
        &self.sent
    }

    fn transmit(&mut self, cmd: &AtCommand) {
        let line = encode_at(cmd).expect("pilot commands always encode");
        let parsed = parse_at(&line).expect("encoded commands always parse");
        self.world.apply_command(&parsed);
        self.sent.push(parsed);
    }

    fn run(
        &mut self,
        op: impl FnOnce(&mut Pilot) -> Result<Vec<AtCommand>, ClientError>,
    ) -> Result<(), ClientError> {
        let cmds = op(&mut self.pilot)?;
        cmds.iter().for_each(|c| self.transmit(c));
        Ok(())
    }

    /// One physics tick: keepalive command, physics, navdata back to the pilot.
    pub fn tick(&mut self) -> TickOutput {
        let cmd = self.pilot.tick();
        self.transmit(&cmd);
        let out = self.world.tick();
        if let Some(bytes) = &out.navdata {
            let packet = parse_navdata(bytes).expect("simulator navdata always parses");
            let at = Duration::from_secs_f64(self.world.time_s());
            self.telemetry = TelemetrySnapshot::from_navdata(&packet, at);
            self.pilot.observe(&self.telemetry);
        }
        out
    }

    /// Ticks until a frame falls due and returns it.
    pub fn next_frame(&mut self) -> Frame {
        loop {
            if self.tick().frame_due {
                return self.world.render_frame();
            }
        }
    }

    /// Ticks until `pred` holds, at most `max_ticks` times.
    pub fn run_until(&mut self, max_ticks: u64, mut pred: impl FnMut(&Loopback) -> bool) -> bool {
        for _ in 0..max_ticks {
            if pred(self) {
                return true;
            }
            self.tick();
        }
        pred(self)
    }

    pub fn emergency(&mut self) -> Result<(), ClientError> {
        self.run(|p| Ok(p.emergency()))
    }

    pub fn reset_emergency(&mut self) -> Result<(), ClientError> {
        self.run(Pilot::reset_emergency)
    }

    pub fn flat_trim(&mut self) -> Result<(), ClientError> {
        self.run(Pilot::flat_trim)
    }
}

impl FlightCommands for Loopback {
    fn takeoff(&mut self) -> Result<(), ClientError> {
        self.run(Pilot::takeoff)
    }

    fn land(&mut self) -> Result<(), ClientError> {
        self.run(Pilot::land)
    }

    fn hover(&mut self) -> Result<(), ClientError> {
        self.run(Pilot::hover)
    }

    fn move_in(&mut self, direction: MoveDirection, speed: f64) -> Result<(), ClientError> {
        self.run(|p| p.move_in(direction, speed))
    }
}
