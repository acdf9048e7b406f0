//! Browser-facing bridge for an aerovis drone session.
//!
//! Serves the UI bundle over HTTP and a single-operator WebSocket at `/ws`.
//! Text frames carry [`WsEnvelope`] JSON in both directions; binary frames
//! carry video as [`FrameMessage`].

pub mod message;
pub mod server;
pub mod session;

pub use message::{
    BoxMessage, FrameMessage, FrameMessageError, GatewayCommand, TelemetryMessage, TrackMessage, WsEnvelope,
    DEFAULT_MOVE_SPEED,
};
pub use server::{parse_command, Gateway, GatewayConfig, GatewayError, DEFAULT_BIND};
pub use session::{DroneSession, FrameBus, OperatorSession, Published, SessionFactory};
