//! Visual-tracking control law and the gesture → command table.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use log::debug;

use crate::client::{ClientError, FlightCommands, MoveDirection};
use crate::vision::{Detection, Detector, Frame, GestureLabel, NormalizedBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackerConfig {
    pub eps_horizontal: f64,
    pub eps_vertical: f64,
    pub eps_height: f64,
    pub target_class: u32,
    pub move_speed: f64,
    /// Use `0.5 + eps_height` as the backward threshold instead of
    /// `1 + eps_height`, which normalized boxes can never reach.
    pub corrected_height_rule: bool,
    /// Send an explicit hover when nothing is detected.
    pub hover_on_no_detection: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            eps_horizontal: 0.1,
            eps_vertical: 0.3,
            eps_height: 0.3,
            target_class: 0,
            move_speed: 0.2,
            corrected_height_rule: false,
            hover_on_no_detection: true,
        }
    }
}

impl TrackerConfig {
    pub fn backward_threshold(&self) -> f64 {
        if self.corrected_height_rule {
            0.5 + self.eps_height
        } else {
            1.0 + self.eps_height
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrackAction {
    Hover,
    Right,
    Left,
    Down,
    Up,
    Backward,
    Forward,
}

impl TrackAction {
    pub const ALL: [TrackAction; 7] = [
        TrackAction::Hover,
        TrackAction::Right,
        TrackAction::Left,
        TrackAction::Down,
        TrackAction::Up,
        TrackAction::Backward,
        TrackAction::Forward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TrackAction::Hover => "hover",
            TrackAction::Right => "right",
            TrackAction::Left => "left",
            TrackAction::Down => "down",
            TrackAction::Up => "up",
            TrackAction::Backward => "backward",
            TrackAction::Forward => "forward",
        }
    }

    /// Direction to move in, or `None` for hover.
    pub fn direction(self) -> Option<MoveDirection> {
        match self {
            TrackAction::Hover => None,
            TrackAction::Right => Some(MoveDirection::Right),
            TrackAction::Left => Some(MoveDirection::Left),
            TrackAction::Down => Some(MoveDirection::Down),
            TrackAction::Up => Some(MoveDirection::Up),
            TrackAction::Backward => Some(MoveDirection::Backward),
            TrackAction::Forward => Some(MoveDirection::Forward),
        }
    }
}

impl fmt::Display for TrackAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrackAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TrackAction::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown action {s:?}"))
    }
}

/// Decides how to move so the target box settles in the centre band.
/// Rules are tried in order and comparisons are inclusive; the box width is
/// not used.
pub fn take_action(bbox: &NormalizedBox, cfg: &TrackerConfig) -> TrackAction {
    let NormalizedBox { x, y, h, .. } = *bbox;
    if (x - 0.5).abs() <= cfg.eps_horizontal
        && (y - 0.5).abs() <= cfg.eps_vertical
        && (h - 0.5).abs() <= cfg.eps_height
    {
        return TrackAction::Hover;
    }
    if x >= 0.5 + cfg.eps_horizontal {
        return TrackAction::Right;
    }
    if x <= 0.5 - cfg.eps_horizontal {
        return TrackAction::Left;
    }
    if y >= 0.5 + cfg.eps_vertical {
        return TrackAction::Down;
    }
    if y <= 0.5 - cfg.eps_vertical {
        return TrackAction::Up;
    }
    if h >= cfg.backward_threshold() {
        return TrackAction::Backward;
    }
    TrackAction::Forward
}

/// One control step: picks the first detection of the target class, decides
/// an action and issues it.
pub fn track_step<S: FlightCommands + ?Sized>(
    detections: &[Detection],
    cfg: &TrackerConfig,
    session: &mut S,
) -> Result<TrackAction, ClientError> {
    let target = detections.iter().find(|d| d.class_id == cfg.target_class);
    let Some(target) = target else {
        if cfg.hover_on_no_detection {
            session.hover()?;
        }
        return Ok(TrackAction::Hover);
    };
    let action = take_action(&target.bbox, cfg);
    match action.direction() {
        None => session.hover()?,
        Some(dir) => session.move_in(dir, cfg.move_speed)?,
    }
    Ok(action)
}

pub const GESTURE_MOVE_SPEED: f64 = 0.2;

/// Issues the command bound to a recognised gesture.
pub fn gesture_to_command<S: FlightCommands + ?Sized>(
    label: GestureLabel,
    session: &mut S,
) -> Result<(), ClientError> {
    match label {
        GestureLabel::TAKEOFF => session.takeoff(),
        GestureLabel::LAND => session.land(),
        GestureLabel::RIGHT => session.move_in(MoveDirection::Right, GESTURE_MOVE_SPEED),
        GestureLabel::LEFT => session.move_in(MoveDirection::Left, GESTURE_MOVE_SPEED),
        GestureLabel::FORWARD => session.move_in(MoveDirection::Forward, GESTURE_MOVE_SPEED),
        _ => session.move_in(MoveDirection::Backward, GESTURE_MOVE_SPEED),
    }
}

/// What the tracker did with one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackReport {
    pub target: Option<Detection>,
    /// `None` while tracking is disabled.
    pub action: Option<TrackAction>,
    pub error: Option<String>,
}

/// Frame-driven tracking loop: run it from the video callback. Tracking can
/// be switched on and off from any thread; the latest report is kept for
/// telemetry and annotation.
pub struct Tracker {
    detector: Box<dyn Detector>,
    config: TrackerConfig,
    enabled: AtomicBool,
    last: Mutex<Option<TrackReport>>,
}

impl Tracker {
    pub fn new(detector: Box<dyn Detector>, config: TrackerConfig) -> Tracker {
        Tracker { detector, config, enabled: AtomicBool::new(false), last: Mutex::new(None) }
    }

    pub fn shared(detector: Box<dyn Detector>, config: TrackerConfig) -> Arc<Tracker> {
        Arc::new(Tracker::new(detector, config))
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::SeqCst);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::SeqCst)
    }

    pub fn last_report(&self) -> Option<TrackReport> {
        self.last.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn last_action(&self) -> Option<TrackAction> {
        self.last_report().and_then(|r| r.action)
    }

    pub fn on_frame<S: FlightCommands + ?Sized>(&self, frame: &Frame, session: &mut S) -> TrackReport {
        let detections = self.detector.detect(frame);
        let target = detections.iter().find(|d| d.class_id == self.config.target_class).copied();
        let report = if self.is_enabled() {
            match track_step(&detections, &self.config, session) {
                Ok(action) => TrackReport { target, action: Some(action), error: None },
                Err(e) => {
                    debug!("tracking step failed: {e}");
                    TrackReport { target, action: None, error: Some(e.to_string()) }
                }
            }
        } else {
            TrackReport { target, action: None, error: None }
        };
        *self.last.lock().unwrap_or_else(|e| e.into_inner()) = Some(report.clone());
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::FlightState;

    fn act(x: f64, y: f64, h: f64) -> TrackAction {
        take_action(&NormalizedBox::new(x, y, 0.2, h), &TrackerConfig::default())
    }

    #[test]
    fn listing_examples() {
        assert_eq!(act(0.5, 0.5, 0.5), TrackAction::Hover);
        assert_eq!(act(0.65, 0.5, 0.5), TrackAction::Right);
        assert_eq!(act(0.35, 0.5, 0.5), TrackAction::Left);
        assert_eq!(act(0.5, 0.85, 0.5), TrackAction::Down);
        assert_eq!(act(0.5, 0.15, 0.5), TrackAction::Up);
        assert_eq!(act(0.5, 0.5, 0.95), TrackAction::Forward);
        assert_eq!(act(0.60, 0.5, 0.5), TrackAction::Hover);
        assert_eq!(act(0.65, 0.85, 0.5), TrackAction::Right);
        assert_eq!(act(0.5, 0.5, 1.3), TrackAction::Backward);
        let corrected = TrackerConfig { corrected_height_rule: true, ..Default::default() };
        assert_eq!(
            take_action(&NormalizedBox::new(0.5, 0.5, 0.2, 0.95), &corrected),
            TrackAction::Backward
        );
    }

    #[test]
    fn action_names() {
        let names: Vec<_> = TrackAction::ALL.iter().map(|a| a.as_str()).collect();
        assert_eq!(names, ["hover", "right", "left", "down", "up", "backward", "forward"]);
        for a in TrackAction::ALL {
            assert_eq!(a.as_str().parse::<TrackAction>().unwrap(), a);
        }
    }

    #[derive(Default)]
    struct Recorder {
        state: Option<FlightState>,
        calls: Vec<String>,
    }

    impl Recorder {
        fn airborne() -> Recorder {
            Recorder { state: Some(FlightState::Flying), calls: vec![] }
        }

        fn check(&self, op: &'static str, airborne_only: bool) -> Result<(), ClientError> {
            let state = self.state.unwrap_or(FlightState::Landed);
            if airborne_only && !state.is_airborne() {
                return Err(ClientError::State { op, state });
            }
            Ok(())
        }
    }

    impl FlightCommands for Recorder {
        fn takeoff(&mut self) -> Result<(), ClientError> {
            self.calls.push("takeoff".into());
            Ok(())
        }
        fn land(&mut self) -> Result<(), ClientError> {
            self.calls.push("land".into());
            Ok(())
        }
        fn hover(&mut self) -> Result<(), ClientError> {
            self.check("hover", true)?;
            self.calls.push("hover".into());
            Ok(())
        }
        fn move_in(&mut self, d: MoveDirection, speed: f64) -> Result<(), ClientError> {
            self.check("move", true)?;
            self.calls.push(format!("move {d} {speed}"));
            Ok(())
        }
    }

    fn det(x: f64, y: f64, h: f64, class_id: u32) -> Detection {
        Detection { bbox: NormalizedBox::new(x, y, 0.1, h), class_id, confidence: 1.0 }
    }

    #[test]
    fn track_step_dispatch() {
        let cfg = TrackerConfig::default();
        let mut s = Recorder::airborne();
        assert_eq!(track_step(&[], &cfg, &mut s).unwrap(), TrackAction::Hover);
        assert_eq!(s.calls, ["hover"]);

        let mut s = Recorder::airborne();
        assert_eq!(track_step(&[det(0.7, 0.5, 0.5, 0)], &cfg, &mut s).unwrap(), TrackAction::Right);
        assert_eq!(s.calls, ["move right 0.2"]);

        let mut s = Recorder::airborne();
        let a = track_step(&[det(0.7, 0.5, 0.5, 3), det(0.1, 0.5, 0.5, 5)], &cfg, &mut s).unwrap();
        assert_eq!(a, TrackAction::Hover);
        assert_eq!(s.calls, ["hover"]);

        // The listing only labels the frame when nothing is seen.
        let quiet = TrackerConfig { hover_on_no_detection: false, ..cfg };
        let mut s = Recorder::airborne();
        assert_eq!(track_step(&[], &quiet, &mut s).unwrap(), TrackAction::Hover);
        assert!(s.calls.is_empty());

        let mut landed = Recorder::default();
        assert!(track_step(&[det(0.7, 0.5, 0.5, 0)], &cfg, &mut landed).unwrap_err().is_state_error());
    }

    #[test]
    fn gesture_table() {
        let mut s = Recorder::airborne();
        for l in GestureLabel::all() {
            gesture_to_command(l, &mut s).unwrap();
        }
        assert_eq!(
            s.calls,
            [
                "takeoff",
                "land",
                "move right 0.2",
                "move left 0.2",
                "move forward 0.2",
                "move backward 0.2"
            ]
        );
        let mut landed = Recorder::default();
        assert!(gesture_to_command(GestureLabel::RIGHT, &mut landed).is_err());
        assert!(landed.calls.is_empty());
    }

    struct Fixed(Vec<Detection>);

    impl Detector for Fixed {
        fn detect(&self, _: &Frame) -> Vec<Detection> {
            self.0.clone()
        }
    }

    #[test]
    fn tracker_toggle() {
        let t = Tracker::new(Box::new(Fixed(vec![det(0.2, 0.5, 0.5, 0)])), TrackerConfig::default());
        let frame = Frame::filled(4, 4, [0, 0, 0]);
        let mut s = Recorder::airborne();
        let r = t.on_frame(&frame, &mut s);
        assert_eq!(r.action, None);
        assert!(r.target.is_some());
        assert!(s.calls.is_empty());
        t.set_enabled(true);
        assert_eq!(t.on_frame(&frame, &mut s).action, Some(TrackAction::Left));
        assert_eq!(t.last_action(), Some(TrackAction::Left));
        let mut landed = Recorder::default();
        let r = t.on_frame(&frame, &mut landed);
        assert!(r.error.unwrap().contains("Landed"));
    }
}
