//! The `aerovis` command line: one-shot subcommands and an interactive loop
//! sharing one grammar.

use std::io::{BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use aerovis::client::{ClientError, Drone, DroneEndpoint, FlightState, MoveDirection, DEFAULT_PORTS_BASE};
use aerovis::control::{gesture_to_command, Tracker, TrackerConfig};
use aerovis::sim::{parse_scene_file, SimConfig, SimPorts, SimScene, SimServer};
use aerovis::vision::{
    gesture_template, predict_gesture, stratified_split, synth_gesture_dataset, train_gestures,
    write_dataset_csv, BlobDetector, GestureLabel, HandKeypoints, MlpParams, TrainConfig,
    GESTURE_DATASET_SIZE, KEYPOINT_DIM,
};
use aerovis_gateway::{
    DroneSession, FrameBus, Gateway, GatewayCommand, GatewayConfig, OperatorSession, SessionFactory,
    TelemetryMessage, DEFAULT_BIND,
};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::info;
use thiserror::Error;

pub const DEFAULT_SPEED: f64 = 0.2;
const STATE_TIMEOUT: Duration = Duration::from_secs(8);
const DEFAULT_EPOCHS: usize = 200;

#[derive(Parser, Debug)]
#[command(
    name = "aerovis",
    version,
    about = "Ground station for aerovis drones and the bundled simulator",
    after_help = "Run without a command to enter the interactive loop."
)]
pub struct Cli {
    #[command(flatten)]
    pub opts: Opts,
    #[command(subcommand)]
    pub verb: Option<Verb>,
}

/// Flags accepted anywhere. In the interactive loop a flag stays in effect
/// for the rest of the session.
#[derive(Args, Debug, Clone, Default, PartialEq)]
pub struct Opts {
    /// Drone address [default: 192.168.1.1, or the local simulator once started]
    #[arg(long, global = true)]
    pub host: Option<String>,
    /// Base of the drone's port block: navdata +4, video +5, commands +6 [default: 5550]
    #[arg(long = "ports-base", global = true)]
    pub ports_base: Option<u16>,
    /// Seed for the simulator and gesture training [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Simulator scene file
    #[arg(long, global = true)]
    pub scene: Option<PathBuf>,
    /// Gesture model file to read
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Where train-gestures writes its model
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Stick fraction for move and tracking, 0 to 1 [default: 0.2]
    #[arg(long, global = true, value_parser = parse_speed)]
    pub speed: Option<f64>,
}

impl Opts {
    fn absorb(&mut self, other: Opts) {
        macro_rules! take {
            ($($f:ident),*) => { $(if other.$f.is_some() { self.$f = other.$f; })* };
        }
        take!(host, ports_base, seed, scene, model, out, speed);
    }

    pub fn host(&self) -> String {
        self.host.clone().unwrap_or_else(|| DroneEndpoint::default().host)
    }

    pub fn ports_base(&self) -> u16 {
        self.ports_base.unwrap_or(DEFAULT_PORTS_BASE)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn speed(&self) -> f64 {
        self.speed.unwrap_or(DEFAULT_SPEED)
    }

    /// Simulator settings, with the scene file applied if one was given.
    pub fn sim_setup(&self) -> Result<(SimConfig, SimScene), CliError> {
        let mut config = SimConfig { seed: self.seed(), ..SimConfig::default() };
        let scene = match &self.scene {
            None => SimScene::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Command(format!("cannot read {}: {e}", path.display())))?;
                parse_scene_file(&text, &mut config).map_err(|e| CliError::Command(format!("{}: {e}", path.display())))?
            }
        };
        Ok((config, scene))
    }
}

#[derive(Subcommand, Debug, Clone, PartialEq)]
pub enum Verb {
    /// Open the command, telemetry and video links
    Connect,
    /// Take off and wait until flying
    Takeoff,
    /// Land and wait until down
    Land,
    /// Hold position
    Hover,
    /// Cut the motors immediately
    Emergency,
    /// Clear an emergency
    Reset,
    /// Level the attitude reference (landed only)
    Trim,
    /// Fly in one direction until the next command
    Move {
        /// up, down, left, right, forward or backward
        #[arg(value_parser = parse_direction)]
        direction: MoveDirection,
        /// Stick fraction, 0 to 1 [default: --speed]
        #[arg(value_parser = parse_speed)]
        speed: Option<f64>,
    },
    /// Follow the target seen by the camera, or stop following it
    Track { mode: TrackMode },
    /// Print the latest telemetry on one line
    Telemetry,
    /// Run the simulator on this machine
    Sim {
        /// Seconds to run before exiting; runs until killed otherwise
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Train the gesture classifier on synthetic keypoints
    TrainGestures {
        #[arg(long, default_value_t = GESTURE_DATASET_SIZE)]
        samples: usize,
        #[arg(long, default_value_t = DEFAULT_EPOCHS)]
        epochs: usize,
        /// Also write the generated samples as CSV
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Classify hand keypoints with a trained model
    PredictGesture {
        /// 63 keypoint coordinates, comma or space separated
        #[arg(allow_negative_numbers = true, value_delimiter = ',')]
        values: Vec<f64>,
        /// Classify a noisy synthetic sample of this gesture instead
        #[arg(long, conflicts_with = "values")]
        example: Option<String>,
        /// Fly the recognized gesture
        #[arg(long)]
        send: bool,
    },
    /// Serve the browser ground station
    Gui {
        #[arg(long, default_value = DEFAULT_BIND)]
        bind: SocketAddr,
        /// Directory with the built UI
        #[arg(long)]
        ui_dir: Option<PathBuf>,
    },
    /// Close the links to the drone
    Disconnect,
    /// Leave the interactive loop
    Quit,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackMode {
    Start,
    Stop,
}

fn parse_direction(s: &str) -> Result<MoveDirection, String> {
    s.parse().map_err(|_| {
        let names: Vec<_> = MoveDirection::ALL.iter().map(|d| d.as_str()).collect();
        format!("expected one of {}", names.join(", "))
    })
}

fn parse_speed(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{s:?} is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside 0 to 1"))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    /// Bad syntax; the text carries clap's usage for the verb.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Command(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Command(_) => 1,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> CliError {
        CliError::Command(e.to_string())
    }
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Command(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub quit: bool,
}

impl Reply {
    fn line(text: impl Into<String>) -> Reply {
        Reply { text: text.into(), quit: false }
    }
}

type SessionSlot = Arc<Mutex<Option<Arc<DroneSession>>>>;

/// Session state behind both the one-shot commands and the interactive loop.
pub struct Repl {
    opts: Opts,
    session: SessionSlot,
    frames: FrameBus,
    sim: Option<SimServer>,
    gateway: Option<Gateway>,
}

impl Repl {
    pub fn new(opts: Opts) -> Repl {
        Repl { opts, session: Arc::default(), frames: FrameBus::new(2), sim: None, gateway: None }
    }

    pub fn opts(&self) -> &Opts {
        &self.opts
    }

    pub fn sim(&self) -> Option<&SimServer> {
        self.sim.as_ref()
    }

    pub fn gateway(&self) -> Option<&Gateway> {
        self.gateway.as_ref()
    }

    /// Parses and runs one line of input.
    pub fn execute(&mut self, line: &str) -> Result<Reply, CliError> {
        let words: Vec<&str> = line.split_whitespace().collect();
        if words.is_empty() {
            return Ok(Reply::line(""));
        }
        let cli = match parse_args(std::iter::once("aerovis").chain(words.iter().copied())) {
            Ok(cli) => cli,
            Err(Ok(help)) => return Ok(Reply::line(help)),
            Err(Err(e)) => return Err(e),
        };
        self.opts.absorb(cli.opts);
        match cli.verb {
            Some(verb) => self.run(verb),
            None => Ok(Reply::line("settings updated")),
        }
    }

    pub fn run(&mut self, verb: Verb) -> Result<Reply, CliError> {
        match verb {
            Verb::Connect => self.connect(),
            Verb::Takeoff => {
                let d = self.drone()?;
                d.takeoff()?;
                d.wait_for_state(FlightState::Flying, STATE_TIMEOUT)?;
                Ok(state_line(&d))
            }
            Verb::Land => {
                let d = self.drone()?;
                d.land()?;
                d.wait_for_state(FlightState::Landed, STATE_TIMEOUT)?;
                Ok(state_line(&d))
            }
            Verb::Hover => self.gateway_command(GatewayCommand::Hover),
            Verb::Emergency => self.gateway_command(GatewayCommand::Emergency),
            Verb::Reset => self.gateway_command(GatewayCommand::Reset),
            Verb::Trim => {
                self.gateway_command(GatewayCommand::Trim)?;
                Ok(Reply::line("trim sent"))
            }
            Verb::Move { direction, speed } => {
                let speed = speed.unwrap_or(self.opts.speed());
                self.gateway_command(GatewayCommand::Move { direction, speed })?;
                Ok(Reply::line(format!("moving {direction} at {speed}")))
            }
            Verb::Track { mode } => {
                let enabled = mode == TrackMode::Start;
                self.session()?.execute(GatewayCommand::Track { enabled }).map_err(failed)?;
                Ok(Reply::line(if enabled { "tracking on" } else { "tracking off" }))
            }
            Verb::Telemetry => Ok(Reply::line(telemetry_line(&self.session()?.telemetry()))),
            Verb::Sim { .. } => self.start_sim(),
            Verb::TrainGestures { samples, epochs, dataset } => self.train(samples, epochs, dataset),
            Verb::PredictGesture { values, example, send } => self.predict(values, example, send),
            Verb::Gui { bind, ui_dir } => self.start_gui(bind, ui_dir),
            Verb::Disconnect => {
                self.disconnect();
                Ok(Reply::line("disconnected"))
            }
            Verb::Quit => {
                self.shutdown();
                Ok(Reply { text: "bye".into(), quit: true })
            }
        }
    }

    /// Reads commands until `quit` or end of input. Replies go to `out`,
    /// errors to `err`; neither ends the loop.
    pub fn interactive<R: BufRead, O: Write, E: Write>(&mut self, input: R, mut out: O, mut err: E, prompt: bool) {
        let show_prompt = |out: &mut O| {
            if prompt {
                let _ = write!(out, "aerovis> ");
                let _ = out.flush();
            }
        };
        show_prompt(&mut out);
        for line in input.lines() {
            let Ok(line) = line else { break };
            match self.execute(&line) {
                Ok(reply) => {
                    if !reply.text.is_empty() {
                        let _ = writeln!(out, "{}", reply.text);
                    }
                    if reply.quit {
                        return;
                    }
                }
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                }
            }
            show_prompt(&mut out);
        }
        self.shutdown();
    }

    /// Blocks for the lifetime of a simulator started by `sim`.
    pub fn hold_sim(&mut self, duration: Option<f64>) {
        match duration {
            Some(secs) => std::thread::sleep(Duration::from_secs_f64(secs.max(0.0))),
            None => loop {
                std::thread::park();
            },
        }
        self.shutdown();
    }

    /// Blocks for the lifetime of a gateway started by `gui`.
    pub fn hold_gateway(&mut self) {
        if let Some(gw) = self.gateway.take() {
            gw.join();
        }
    }

    /// Stops everything this session started.
    pub fn shutdown(&mut self) {
        if let Some(gw) = self.gateway.take() {
            gw.shutdown();
        }
        self.disconnect();
        if let Some(sim) = self.sim.take() {
            sim.stop();
        }
    }

    fn session(&self) -> Result<Arc<DroneSession>, CliError> {
        current_session(&self.session).ok_or_else(|| ClientError::NotConnected.into())
    }

    fn drone(&self) -> Result<Drone, CliError> {
        Ok(self.session()?.drone().clone())
    }

    fn gateway_command(&self, cmd: GatewayCommand) -> Result<Reply, CliError> {
        let session = self.session()?;
        session.execute(cmd).map_err(failed)?;
        Ok(state_line(session.drone()))
    }

    fn connect(&mut self) -> Result<Reply, CliError> {
        if self.session().is_ok() {
            return Err(ClientError::AlreadyConnected.into());
        }
        let session = open_session(&self.opts, self.frames.clone())?;
        *self.session.lock().unwrap_or_else(|e| e.into_inner()) = Some(session.clone());
        let link = if session.drone().telemetry_snapshot()?.link_ok { "link up" } else { "no telemetry yet" };
        let video = if session.video_up() { "video on" } else { "no video" };
        Ok(Reply::line(format!(
            "connected to {}:{} ({link}, {video})",
            self.opts.host(),
            self.opts.ports_base()
        )))
    }

    fn disconnect(&mut self) {
        if let Some(s) = self.session.lock().unwrap_or_else(|e| e.into_inner()).take() {
            s.tracker().set_enabled(false);
            let _ = s.drone().disconnect();
        }
    }

    fn start_sim(&mut self) -> Result<Reply, CliError> {
        if self.sim.is_some() {
            return Err(failed("simulator already running"));
        }
        let (config, scene) = self.opts.sim_setup()?;
        let seed = config.seed;
        let ports = SimPorts::local(self.opts.ports_base());
        let sim = SimServer::start(config, scene, ports).map_err(failed)?;
        self.sim = Some(sim);
        if self.opts.host.is_none() {
            self.opts.host = Some(ports.bind.to_string());
        }
        Ok(Reply::line(format!(
            "simulator on {} ports {}/{}/{} (navdata/video/commands), seed {seed}",
            ports.bind, ports.navdata, ports.video, ports.command
        )))
    }

    fn start_gui(&mut self, bind: SocketAddr, ui_dir: Option<PathBuf>) -> Result<Reply, CliError> {
        if self.gateway.is_some() {
            return Err(failed("gateway already running"));
        }
        let (slot, opts) = (self.session.clone(), self.opts.clone());
        let factory: SessionFactory = Arc::new(move |frames| {
            let mut guard = slot.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(s) = guard.as_ref().filter(|s| s.drone().is_connected()) {
                return Ok(s.clone() as Arc<dyn OperatorSession>);
            }
            let session = open_session(&opts, frames).map_err(|e| e.to_string())?;
            *guard = Some(session.clone());
            Ok(session as Arc<dyn OperatorSession>)
        });
        let config = GatewayConfig { bind, ui_dir, ..GatewayConfig::default() };
        let gw = Gateway::start_with_bus(config, self.frames.clone(), factory).map_err(failed)?;
        let addr = gw.local_addr();
        self.gateway = Some(gw);
        Ok(Reply::line(format!("gateway on http://{addr}")))
    }

    fn train(&mut self, samples: usize, epochs: usize, dataset: Option<PathBuf>) -> Result<Reply, CliError> {
        let seed = self.opts.seed();
        let data = synth_gesture_dataset(samples, seed).map_err(failed)?;
        if let Some(path) = &dataset {
            let file = std::fs::File::create(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
            write_dataset_csv(&data, file).map_err(failed)?;
        }
        let config = TrainConfig { epochs, seed, ..TrainConfig::default() };
        let split = stratified_split(&data, config.ratios, seed).map_err(failed)?;
        let started = std::time::Instant::now();
        let (params, m) = train_gestures(&data, &config).map_err(failed)?;
        let elapsed = started.elapsed().as_secs_f64();

        let mut lines = vec![
            format!("{:<12}{:>8}{:>10}", "split", "samples", "accuracy"),
            format!("{:<12}{:>8}{:>10.3}", "train", split.train.len(), m.train_accuracy),
            format!("{:<12}{:>8}{:>10.3}", "validation", split.val.len(), m.val_accuracy),
            format!("{:<12}{:>8}{:>10.3}", "test", split.test.len(), m.test_accuracy),
            format!(
                "loss {:.4} -> {:.4} over {epochs} epochs, kept epoch {}, {elapsed:.2} s, seed {seed}",
                m.loss_curve.first().copied().unwrap_or(f64::NAN),
                m.loss_curve.last().copied().unwrap_or(f64::NAN),
                m.best_epoch
            ),
        ];
        match &self.opts.out {
            Some(path) => {
                params.save(path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
                lines.push(format!("model written to {}", path.display()));
            }
            None => lines.push("model not saved (pass --out FILE)".into()),
        }
        if let Some(path) = dataset {
            lines.push(format!("dataset written to {}", path.display()));
        }
        info!("gesture training finished in {elapsed:.2} s");
        Ok(Reply::line(lines.join("\n")))
    }

    fn predict(&mut self, values: Vec<f64>, example: Option<String>, send: bool) -> Result<Reply, CliError> {
        let path = self.opts.model.clone().ok_or_else(|| failed("predict-gesture needs --model FILE"))?;
        let params = MlpParams::load(&path).map_err(|e| failed(format!("{}: {e}", path.display())))?;
        let keypoints = match example {
            Some(name) => {
                let label = GestureLabel::from_name(&name).ok_or_else(|| {
                    failed(format!("unknown gesture {name:?}; expected one of {}", GestureLabel::NAMES.join(", ")))
                })?;
                noisy_example(label, self.opts.seed())
            }
            None if values.len() == KEYPOINT_DIM => HandKeypoints::from_slice(&values).map_err(failed)?,
            None => {
                return Err(CliError::Usage(format!(
                    "expected {KEYPOINT_DIM} keypoint values, got {}; or pass --example NAME",
                    values.len()
                )))
            }
        };
        let (label, p) = predict_gesture(&params, &keypoints).map_err(failed)?;
        let mut text = format!("gesture: {} (p={p:.3})", label.name());
        if send {
            let mut drone = self.drone()?;
            gesture_to_command(label, &mut drone)?;
            text.push_str(&format!("; {}", state_line(&drone).text));
        }
        Ok(Reply::line(text))
    }
}

impl Drop for Repl {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Parses a command line. Help and version text come back as `Err(Ok(_))`.
/// Usage errors always end with the usage of the verb involved.
pub fn parse_args<I, T>(args: I) -> Result<Cli, Result<String, CliError>>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let e = match Cli::try_parse_from(&args) {
        Ok(cli) => return Ok(cli),
        Err(e) => e,
    };
    if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
        return Err(Ok(e.render().to_string().trim_end().to_string()));
    }
    let rendered = e.render().to_string();
    let mut text = rendered.strip_prefix("error: ").unwrap_or(&rendered).trim_end().to_string();
    if !text.contains("Usage:") {
        let mut cmd = Cli::command();
        cmd.build();
        let verb = args.iter().skip(1).filter_map(|a| a.to_str()).find_map(|a| {
            cmd.get_subcommands().find(|s| s.get_name() == a).map(|s| s.get_name().to_string())
        });
        let usage = match verb.and_then(|v| cmd.find_subcommand_mut(&v)) {
            Some(sub) => sub.render_usage(),
            None => cmd.render_usage(),
        };
        text = format!("{text}\n\n{}", usage.to_string().trim_end());
    }
    Err(Err(CliError::Usage(text)))
}

fn current_session(slot: &SessionSlot) -> Option<Arc<DroneSession>> {
    slot.lock().unwrap_or_else(|e| e.into_inner()).clone().filter(|s| s.drone().is_connected())
}

fn open_session(opts: &Opts, frames: FrameBus) -> Result<Arc<DroneSession>, CliError> {
    let (_, scene) = opts.sim_setup()?;
    let tracker = Tracker::shared(
        Box::new(BlobDetector::new(scene.target_color)),
        TrackerConfig { move_speed: opts.speed(), ..TrackerConfig::default() },
    );
    let endpoint = DroneEndpoint::with_base(opts.host(), opts.ports_base());
    endpoint.validate()?;
    let session = DroneSession::connect(Drone::new(endpoint), tracker, frames)?;
    Ok(Arc::new(session))
}

/// One noisy synthetic sample of `label`, reproducible per seed.
fn noisy_example(label: GestureLabel, seed: u64) -> HandKeypoints {
    synth_gesture_dataset(GestureLabel::NAMES.len(), seed)
        .ok()
        .and_then(|d| d.into_iter().find(|(_, l)| *l == label))
        .map(|(k, _)| k)
        .unwrap_or_else(|| gesture_template(label))
}

fn state_line(drone: &Drone) -> Reply {
    Reply::line(format!("state: {}", drone.state()))
}

pub fn telemetry_line(t: &TelemetryMessage) -> String {
    let mut flags = Vec::new();
    for (on, name) in [(t.flying, "flying"), (t.emergency, "emergency"), (t.watchdog, "watchdog")] {
        if on {
            flags.push(name);
        }
    }
    let [vx, vy, vz] = t.velocity_m_s;
    format!(
        "state={} battery={}% altitude={:.2}m pitch={:.1} roll={:.1} yaw={:.1} velocity=({vx:.2},{vy:.2},{vz:.2}) \
         link={} flags={} tracking={} action={}",
        t.state,
        t.battery_percent,
        t.altitude_m,
        t.pitch_deg,
        t.roll_deg,
        t.yaw_deg,
        if t.link_ok { "up" } else { "down" },
        if flags.is_empty() { "-".to_string() } else { flags.join(",") },
        if t.tracking { "on" } else { "off" },
        t.action.as_deref().unwrap_or("-"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repl() -> Repl {
        Repl::new(Opts::default())
    }

    #[test]
    fn flight_verbs_need_a_connection() {
        let mut r = repl();
        for line in ["takeoff", "land", "hover", "emergency", "reset", "trim", "move up 0.2", "track start", "telemetry"] {
            assert_eq!(r.execute(line), Err(CliError::Command("not connected".into())), "{line}");
        }
    }

    #[test]
    fn usage_errors_are_exit_code_two() {
        let mut r = repl();
        for line in ["move sideways 0.2", "move up 1.5", "move", "track maybe", "fly", "takeoff now", "--speed fast"] {
            let e = r.execute(line).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{line}: {e}");
            assert!(e.to_string().contains("Usage: aerovis"), "{line}: {e}");
        }
    }

    #[test]
    fn value_errors_show_the_verb_usage() {
        let e = repl().execute("move sideways 0.2").unwrap_err().to_string();
        assert!(e.starts_with("invalid value 'sideways'"), "{e}");
        assert!(e.ends_with("Usage: aerovis move [OPTIONS] <DIRECTION> [SPEED]"), "{e}");
    }

    #[test]
    fn help_is_not_an_error() {
        let reply = repl().execute("move --help").unwrap();
        assert!(reply.text.contains("DIRECTION"), "{}", reply.text);
    }

    #[test]
    fn flags_persist_for_the_session() {
        let mut r = repl();
        assert_eq!(r.execute("--speed 0.5 --seed 9").unwrap().text, "settings updated");
        r.execute("disconnect --ports-base 6000").unwrap();
        assert_eq!((r.opts().speed(), r.opts().seed(), r.opts().ports_base()), (0.5, 9, 6000));
        assert_eq!(r.opts().host(), "192.168.1.1");
    }

    #[test]
    fn quit_ends_the_loop() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        repl().interactive("move sideways\n\nhover\nquit\ntakeoff\n".as_bytes(), &mut out, &mut err, false);
        assert_eq!(String::from_utf8(out).unwrap(), "bye\n");
        let err = String::from_utf8(err).unwrap();
        assert_eq!(err.matches("error:").count(), 2, "{err}");
        assert!(err.contains("not connected"));
    }

    #[test]
    fn predict_needs_a_model() {
        let e = repl().execute("predict-gesture --example right").unwrap_err();
        assert_eq!(e, CliError::Command("predict-gesture needs --model FILE".into()));
    }

    #[test]
    fn telemetry_line_is_one_line() {
        let t = TelemetryMessage {
            state: "Hovering".into(),
            battery_percent: 87,
            flying: true,
            link_ok: true,
            tracking: true,
            action: Some("hover".into()),
            ..Default::default()
        };
        let line = telemetry_line(&t);
        assert!(!line.contains('\n'));
        assert!(line.starts_with("state=Hovering battery=87%"), "{line}");
        assert!(line.ends_with("link=up flags=flying tracking=on action=hover"), "{line}");
    }
}
