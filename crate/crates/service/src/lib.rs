//! Live teleoperation sessions over WebSocket.
//!
//! Each connection owns one [`Live`] session that ticks at a fixed rate,
//! streams `state_update` and `forecast_update` frames, and accepts
//! `takeover`, `manual_action` and `release` from the operator.

pub mod live;
pub mod protocol;
pub mod server;

pub use live::{ForecastJob, Live, ServiceContext};
pub use protocol::{ClientMessage, ObjectState, ServerMessage, WirePose};
pub use server::{bind, router, serve, Outbox, MAX_QUEUED_FORECASTS};
