//! What travels over `/ws`: JSON envelopes in text frames, video in binary
//! frames.

use std::str::FromStr;

use aerovis::client::{FlightState, MoveDirection, TelemetrySnapshot};
use aerovis::control::TrackAction;
use aerovis::vision::{Frame, NormalizedBox};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Speed used by `move` when the envelope does not give one.
pub const DEFAULT_MOVE_SPEED: f64 = 0.2;

/// One text frame on the socket, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum WsEnvelope {
    Command {
        id: Value,
        name: String,
        #[serde(default, skip_serializing_if = "Value::is_null")]
        params: Value,
    },
    Ack {
        id: Value,
        message: String,
    },
    Error {
        id: Value,
        message: String,
    },
    Telemetry(TelemetryMessage),
    Track(TrackMessage),
}

impl WsEnvelope {
    pub fn ack(id: Value) -> WsEnvelope {
        WsEnvelope::Ack { id, message: "ok".into() }
    }

    pub fn error(id: Value, message: impl Into<String>) -> WsEnvelope {
        WsEnvelope::Error { id, message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("envelopes always serialize")
    }
}

/// Telemetry snapshot plus the tracker's view, pushed at a fixed cadence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub state: String,
    pub battery_percent: u32,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub yaw_deg: f64,
    pub altitude_m: f64,
    pub velocity_m_s: [f64; 3],
    pub state_mask: u32,
    pub navdata_seq: u32,
    pub link_ok: bool,
    pub flying: bool,
    pub emergency: bool,
    pub watchdog: bool,
    pub tracking: bool,
    /// Latest tracking action, absent while tracking is off.
    pub action: Option<String>,
}

impl TelemetryMessage {
    pub fn new(
        state: FlightState,
        snap: &TelemetrySnapshot,
        tracking: bool,
        action: Option<TrackAction>,
    ) -> TelemetryMessage {
        TelemetryMessage {
            state: state.to_string(),
            battery_percent: snap.battery_percent,
            pitch_deg: snap.pitch_deg,
            roll_deg: snap.roll_deg,
            yaw_deg: snap.yaw_deg,
            altitude_m: snap.altitude_m,
            velocity_m_s: snap.velocity_m_s,
            state_mask: snap.state_mask,
            navdata_seq: snap.navdata_seq,
            link_ok: snap.link_ok,
            flying: snap.flying(),
            emergency: snap.emergency(),
            watchdog: snap.watchdog(),
            tracking,
            action: action.map(|a| a.as_str().to_string()),
        }
    }
}

/// Detector output for one frame, sent just before that frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrackMessage {
    pub seq: u32,
    pub tracking: bool,
    pub action: Option<String>,
    pub target: Option<BoxMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxMessage {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<NormalizedBox> for BoxMessage {
    fn from(b: NormalizedBox) -> BoxMessage {
        BoxMessage { x: b.x, y: b.y, w: b.w, h: b.h }
    }
}

/// Operations an operator may request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GatewayCommand {
    Takeoff,
    Land,
    Hover,
    Emergency,
    Reset,
    Trim,
    Move { direction: MoveDirection, speed: f64 },
    Track { enabled: bool },
}

impl GatewayCommand {
    pub const NAMES: [&'static str; 8] =
        ["takeoff", "land", "hover", "emergency", "reset", "trim", "move", "track"];

    /// Builds a command from an envelope's `name` and `params`.
    pub fn parse(name: &str, params: &Value) -> Result<GatewayCommand, String> {
        let field = |key: &str| params.get(key).filter(|v| !v.is_null());
        Ok(match name {
            "takeoff" => GatewayCommand::Takeoff,
            "land" => GatewayCommand::Land,
            "hover" => GatewayCommand::Hover,
            "emergency" => GatewayCommand::Emergency,
            "reset" => GatewayCommand::Reset,
            "trim" => GatewayCommand::Trim,
            "move" => {
                let direction = field("direction")
                    .and_then(Value::as_str)
                    .ok_or("move needs params.direction")?;
                let direction = MoveDirection::from_str(direction)
                    .map_err(|_| format!("unknown direction {direction:?}"))?;
                let speed = match field("speed") {
                    None => DEFAULT_MOVE_SPEED,
                    Some(v) => v.as_f64().ok_or("params.speed must be a number")?,
                };
                if !(0.0..=1.0).contains(&speed) {
                    return Err(format!("speed {speed} outside [0, 1]"));
                }
                GatewayCommand::Move { direction, speed }
            }
            "track" => {
                let enabled = field("enabled")
                    .and_then(Value::as_bool)
                    .ok_or("track needs params.enabled (true or false)")?;
                GatewayCommand::Track { enabled }
            }
            other => return Err(format!("unknown command {other:?}")),
        })
    }

    pub fn is_emergency(&self) -> bool {
        matches!(self, GatewayCommand::Emergency)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FrameMessageError {
    #[error("frame message shorter than its 8-byte header")]
    Truncated,
    #[error("frame payload is {got} bytes, expected {expected}")]
    Length { expected: usize, got: usize },
    #[error("frame {width}x{height} does not fit 16-bit dimensions")]
    TooLarge { width: u32, height: u32 },
}

pub const FRAME_HEADER_LEN: usize = 8;

/// Binary video message: u16 width, u16 height, u32 seq, all little-endian,
/// then `width * height * 3` bytes of RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameMessage {
    pub width: u16,
    pub height: u16,
    pub seq: u32,
    pub rgb: Vec<u8>,
}

impl FrameMessage {
    pub fn from_frame(frame: &Frame, seq: u32) -> Result<FrameMessage, FrameMessageError> {
        let too_large = || FrameMessageError::TooLarge { width: frame.width(), height: frame.height() };
        let width = u16::try_from(frame.width()).map_err(|_| too_large())?;
        let height = u16::try_from(frame.height()).map_err(|_| too_large())?;
        Ok(FrameMessage { width, height, seq, rgb: frame.pixels().to_vec() })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.rgb.len());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<FrameMessage, FrameMessageError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(FrameMessageError::Truncated);
        }
        let width = u16::from_le_bytes([bytes[0], bytes[1]]);
        let height = u16::from_le_bytes([bytes[2], bytes[3]]);
        let seq = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        let expected = usize::from(width) * usize::from(height) * 3;
        let rgb = &bytes[FRAME_HEADER_LEN..];
        if rgb.len() != expected {
            return Err(FrameMessageError::Length { expected, got: rgb.len() });
        }
        Ok(FrameMessage { width, height, seq, rgb: rgb.to_vec() })
    }

    pub fn into_frame(self) -> Frame {
        Frame::new(u32::from(self.width), u32::from(self.height), self.rgb)
            .expect("length checked on construction")
    }
}
