use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use aerovis::client::{ClientError, Drone, LinkStatus};
use aerovis::control::Tracker;
use aerovis::vision::Frame;
use log::{debug, info, warn};
use tokio::sync::broadcast;

use crate::message::{BoxMessage, FrameMessage, GatewayCommand, TelemetryMessage, TrackMessage};

/// What the gateway needs from whoever flies the drone.
///
/// `execute` may block briefly; it runs on a blocking worker, never on the
/// socket tasks. Errors are sent to the operator verbatim.
pub trait OperatorSession: Send + Sync + 'static {
    fn execute(&self, command: GatewayCommand) -> Result<(), String>;
    fn telemetry(&self) -> TelemetryMessage;
}

/// Builds the session on first operator connect. Receives the bus that video
/// frames should be published to.
pub type SessionFactory =
    Arc<dyn Fn(FrameBus) -> Result<Arc<dyn OperatorSession>, String> + Send + Sync>;

/// One encoded frame and its overlay, shared by every subscriber.
#[derive(Debug)]
pub struct Published {
    pub track: TrackMessage,
    pub frame: Vec<u8>,
}

/// Fan-out for video frames. Publishing never blocks: a subscriber that
/// falls behind loses its oldest frames.
#[derive(Clone)]
pub struct FrameBus {
    tx: broadcast::Sender<Arc<Published>>,
    seq: Arc<AtomicU32>,
}

impl FrameBus {
    pub fn new(backlog: usize) -> FrameBus {
        let (tx, _) = broadcast::channel(backlog.max(1));
        FrameBus { tx, seq: Arc::new(AtomicU32::new(0)) }
    }

    /// Queues a frame for every connected operator and returns its sequence
    /// number. Frames are numbered even when nobody is listening.
    pub fn publish(&self, frame: &Frame, mut track: TrackMessage) -> u32 {
        let seq = self.seq.fetch_add(1, Ordering::Relaxed);
        if self.tx.receiver_count() == 0 {
            return seq;
        }
        match FrameMessage::from_frame(frame, seq) {
            Ok(msg) => {
                track.seq = seq;
                let _ = self.tx.send(Arc::new(Published { track, frame: msg.encode() }));
            }
            Err(e) => warn!("frame {seq} dropped: {e}"),
        }
        seq
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Arc<Published>> {
        self.tx.subscribe()
    }

    /// Frames handed to `publish` so far.
    pub fn published(&self) -> u32 {
        self.seq.load(Ordering::Relaxed)
    }
}

/// A networked drone plus tracker, as driven from the browser.
pub struct DroneSession {
    drone: Drone,
    tracker: Arc<Tracker>,
    video_up: Arc<AtomicBool>,
}

impl DroneSession {
    /// Connects the drone if needed and routes its video through the tracker
    /// to `frames`. A missing video stream is logged, not fatal.
    pub fn connect(drone: Drone, tracker: Arc<Tracker>, frames: FrameBus) -> Result<DroneSession, ClientError> {
        match drone.connect() {
            Ok(LinkStatus::Up) | Err(ClientError::AlreadyConnected) => {}
            Ok(LinkStatus::TimedOut) => warn!("no navdata yet; telemetry will show the link as down"),
            Err(e) => return Err(e),
        }
        let video_up = Arc::new(AtomicBool::new(false));
        let (t, mut pilot, up) = (tracker.clone(), drone.clone(), video_up.clone());
        let result = drone.connect_video(
            move |frame| {
                let report = t.on_frame(frame, &mut pilot);
                let track = TrackMessage {
                    seq: 0,
                    tracking: t.is_enabled(),
                    action: report.action.map(|a| a.as_str().to_string()),
                    target: report.target.map(|d| BoxMessage::from(d.bbox)),
                };
                frames.publish(frame, track);
            },
            move |err| {
                up.store(false, Ordering::SeqCst);
                match err {
                    Some(e) => warn!("video stream closed: {e}"),
                    None => debug!("video stream closed"),
                }
            },
        );
        match result {
            Ok(()) => video_up.store(true, Ordering::SeqCst),
            Err(e) => warn!("video unavailable: {e}"),
        }
        info!("gateway session ready");
        Ok(DroneSession { drone, tracker, video_up })
    }

    /// Factory that connects `drone` with `tracker` on first use and hands
    /// the same session to later operators while the link stays up.
    pub fn factory(drone: Drone, tracker: Arc<Tracker>) -> SessionFactory {
        let current: Mutex<Option<Arc<DroneSession>>> = Mutex::new(None);
        Arc::new(move |frames| {
            let mut current = current.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(s) = current.as_ref().filter(|s| s.drone.is_connected()) {
                return Ok(s.clone() as Arc<dyn OperatorSession>);
            }
            let session = Arc::new(
                DroneSession::connect(drone.clone(), tracker.clone(), frames).map_err(|e| e.to_string())?,
            );
            *current = Some(session.clone());
            Ok(session as Arc<dyn OperatorSession>)
        })
    }

    /// Whether video frames are currently arriving through this session.
    pub fn video_up(&self) -> bool {
        self.video_up.load(Ordering::SeqCst)
    }

    pub fn drone(&self) -> &Drone {
        &self.drone
    }

    pub fn tracker(&self) -> &Arc<Tracker> {
        &self.tracker
    }
}

impl OperatorSession for DroneSession {
    fn execute(&self, command: GatewayCommand) -> Result<(), String> {
        let d = &self.drone;
        let result = match command {
            GatewayCommand::Takeoff => d.takeoff(),
            GatewayCommand::Land => d.land(),
            GatewayCommand::Hover => d.hover(),
            GatewayCommand::Emergency => d.emergency(),
            GatewayCommand::Reset => d.reset_emergency(),
            GatewayCommand::Trim => d.flat_trim(),
            GatewayCommand::Move { direction, speed } => d.move_in(direction, speed),
            GatewayCommand::Track { enabled: true } => {
                if !self.video_up.load(Ordering::SeqCst) {
                    return Err("video stream not connected".into());
                }
                self.tracker.set_enabled(true);
                Ok(())
            }
            GatewayCommand::Track { enabled: false } => {
                self.tracker.set_enabled(false);
                // The last tracking move would otherwise keep repeating.
                if d.state().is_airborne() {
                    d.hover()
                } else {
                    Ok(())
                }
            }
        };
        result.map_err(|e| e.to_string())
    }

    fn telemetry(&self) -> TelemetryMessage {
        let snap = self.drone.telemetry_snapshot().unwrap_or_default();
        let tracking = self.tracker.is_enabled();
        let action = if tracking { self.tracker.last_action() } else { None };
        TelemetryMessage::new(self.drone.state(), &snap, tracking, action)
    }
}
