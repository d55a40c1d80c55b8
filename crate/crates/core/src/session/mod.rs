//! Session assembly: configuration, the operator and teleoperator ends, the
//! virtual-time driver, wall-time roles over UDP, and the console gateway.

mod config;
mod gateway;
mod node;
mod virtual_time;
mod wall;

use std::path::Path;

use thiserror::Error;

pub use config::{
    ConfigIssue, HapticConfig, MasterConfig, MasterKind, MetricsConfig, Mode, NetConfig, Rates,
    Role, SessionConfig, VideoConfig,
};
pub use gateway::{
    gateway_serve, ClientMessage, ConsoleState, FrameSnapshot, GatewayHandle, ServerMessage,
    STATS_PERIOD_MS,
};
pub use node::{
    unit_of, DecodeRecord, OperatorNode, OperatorTick, Outbound, Screen, TeleoperatorNode,
    TeleoperatorTick,
};
pub use virtual_time::{run_session, Dir, SessionRun, TickProbe};
pub use wall::{start_roles, SessionHandle, SessionState, WallOutcome};

use crate::channel::ChannelError;
use crate::haptic::HapticError;
use crate::metrics::{build_report, MetricsError, SessionReport, TraceSet};
use crate::video::VideoError;
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("invalid config: {}", .0.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<ConfigIssue>),
    #[error("{0}")]
    Io(String),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
    #[error("no packet from peer {peer} within {timeout_ms} ms")]
    PeerTimeout { peer: String, timeout_ms: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("gateway error: {0}")]
    Gateway(String),
    #[error(transparent)]
    Video(#[from] VideoError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Haptic(#[from] HapticError),
}

/// Recomputes the report from dumped trace directories. Several directories
/// (one per role of a split run) are merged before the report is built.
pub fn replay(dirs: &[&Path]) -> Result<SessionReport, SessionError> {
    let mut sets = dirs
        .iter()
        .map(|d| TraceSet::read_dir(d))
        .collect::<Result<Vec<_>, _>>()?;
    let Some(mut merged) = sets.pop() else {
        return Err(SessionError::Io("no trace directory given".into()));
    };
    if !sets.is_empty() {
        for s in sets {
            merged.rows.extend(s.rows);
            merged.tracking.extend(s.tracking);
        }
        merged.sort_rows();
    }
    Ok(build_report(&merged)?)
}
