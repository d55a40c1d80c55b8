//! Session configuration file (JSON) and its validation.

use std::fmt;
use std::net::SocketAddr;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, MAX_SLOTS_PER_PACKET};
use crate::haptic::DeadbandConfig;
use crate::mux::{MuxConfig, SchemeKind};
use crate::simworld::{Trajectory, Workspace};
use crate::video::EncodeMode;
use crate::wire::{HEADER_LEN, MAX_PAYLOAD, VIDEO_HEADER_LEN};

use super::SessionError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    VirtualTime,
    WallTime,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::VirtualTime => "virtual_time",
            Mode::WallTime => "wall_time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Both,
    Operator,
    Teleoperator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rates {
    pub haptic_hz: f64,
    pub video_fps: f64,
}

impl Default for Rates {
    fn default() -> Self {
        Rates {
            haptic_hz: 1000.0,
            video_fps: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HapticConfig {
    /// Command stream deadband (positions, meters).
    pub deadband: DeadbandConfig,
    /// Feedback force deadband (newtons); the feedback position uses `deadband`.
    pub force_deadband: DeadbandConfig,
    /// Spring stiffness, N/m.
    pub k_s: f64,
    /// Force saturation, N.
    pub f_max: f64,
    /// A stream that has been silent this long resends its last value, so a
    /// lost update cannot stall the receiver. 0 disables.
    pub refresh_us: u64,
}

impl Default for HapticConfig {
    fn default() -> Self {
        HapticConfig {
            deadband: DeadbandConfig::default(),
            force_deadband: DeadbandConfig {
                weber_k: 0.1,
                floor: 0.01,
            },
            k_s: 300.0,
            f_max: 20.0,
            refresh_us: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoConfig {
    pub width: usize,
    pub height: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub n_encode_workers: usize,
    pub n_decode_workers: usize,
    /// Per-worker encode budget per frame, cost units (pixels processed).
    #[serde(rename = "T_cost_units")]
    pub t_cost_units: u64,
    /// Byte budget per frame.
    #[serde(rename = "R_total_bytes")]
    pub r_total_bytes: usize,
    pub roi_radius: usize,
    pub roi_weight: f64,
    pub encode_units_per_us: f64,
    pub decode_units_per_us: f64,
    /// A frame still missing tiles this long after its first tile arrived
    /// is decoded with what it has.
    pub frame_deadline_us: u64,
}

impl Default for VideoConfig {
    fn default() -> Self {
        VideoConfig {
            width: 128,
            height: 128,
            grid_cols: 4,
            grid_rows: 4,
            n_encode_workers: 4,
            n_decode_workers: 2,
            t_cost_units: 24_576,
            r_total_bytes: 8192,
            roi_radius: 0,
            roi_weight: 4.0,
            encode_units_per_us: 4.0,
            decode_units_per_us: 4.0,
            frame_deadline_us: 100_000,
        }
    }
}

impl VideoConfig {
    pub fn tile_w(&self) -> usize {
        self.width / self.grid_cols.max(1)
    }

    pub fn tile_h(&self) -> usize {
        self.height / self.grid_rows.max(1)
    }

    /// Largest video packet on the wire (a lossless tile).
    pub fn max_packet_bytes(&self) -> usize {
        HEADER_LEN
            + VIDEO_HEADER_LEN
            + EncodeMode::LOSSLESS.encoded_size(self.tile_w(), self.tile_h())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasterKind {
    Scripted,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasterConfig {
    pub source: MasterKind,
    pub trajectory: Trajectory,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            source: MasterKind::Scripted,
            trajectory: Trajectory::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Ticks before this are excluded from tracking error.
    pub warmup_us: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { warmup_us: 100_000 }
    }
}

/// Wall-time transport settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub operator_addr: SocketAddr,
    pub teleoperator_addr: SocketAddr,
    pub peer_timeout_ms: u64,
    /// Console gateway port on the operator side; absent disables it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gateway_port: Option<u16>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            operator_addr: "127.0.0.1:47100".parse().unwrap(),
            teleoperator_addr: "127.0.0.1:47101".parse().unwrap(),
            peer_timeout_ms: 5000,
            gateway_port: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub mode: Mode,
    pub role: Role,
    pub seed: u64,
    pub duration_s: f64,
    pub rates: Rates,
    pub workspace: Workspace,
    pub master: MasterConfig,
    pub haptic: HapticConfig,
    pub video: VideoConfig,
    pub mux: MuxConfig,
    pub channel: ChannelConfig,
    pub metrics: MetricsConfig,
    pub net: NetConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            mode: Mode::VirtualTime,
            role: Role::Both,
            seed: 1,
            duration_s: 10.0,
            rates: Rates::default(),
            workspace: Workspace::default(),
            master: MasterConfig::default(),
            haptic: HapticConfig::default(),
            video: VideoConfig::default(),
            mux: MuxConfig::default(),
            channel: ChannelConfig::default(),
            metrics: MetricsConfig::default(),
            net: NetConfig::default(),
        }
    }
}

/// One validation failure, located by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

impl SessionConfig {
    pub fn from_json(text: &str) -> Result<SessionConfig, SessionError> {
        serde_json::from_str(text).map_err(|e| SessionError::ConfigParse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<SessionConfig, SessionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SessionError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Simulation tick derived from the haptic rate.
    pub fn tick_us(&self) -> u64 {
        (1e6 / self.rates.haptic_hz).round() as u64
    }

    pub fn duration_us(&self) -> u64 {
        (self.duration_s * 1e6).round() as u64
    }

    /// Seed for the channel impairment streams.
    pub fn channel_seed(&self) -> u64 {
        self.channel.seed.unwrap_or(self.seed)
    }

    /// Workspace with the tick filled in from the haptic rate.
    pub fn world(&self) -> Workspace {
        Workspace {
            tick_us: self.tick_us(),
            ..self.workspace.clone()
        }
    }

    /// Every problem found, in field order.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut bad = |path: &str, message: String| {
            out.push(ConfigIssue {
                path: path.to_string(),
                message,
            })
        };
        let positive = |x: f64| x.is_finite() && x > 0.0;

        if self.mode == Mode::VirtualTime && self.role != Role::Both {
            bad(
                "role",
                "virtual-time sessions run both roles in one process".into(),
            );
        }
        if !(self.duration_s.is_finite() && self.duration_s >= 0.0) {
            bad(
                "duration_s",
                format!("must be a non-negative number, got {}", self.duration_s),
            );
        }

        let r = &self.rates;
        if !positive(r.haptic_hz) {
            bad(
                "rates.haptic_hz",
                format!("must be positive, got {}", r.haptic_hz),
            );
        } else {
            let tick = 1e6 / r.haptic_hz;
            if tick < 1.0 || (tick - tick.round()).abs() > 1e-9 {
                bad(
                    "rates.haptic_hz",
                    format!(
                        "must divide 1e6 into whole microseconds, got {}",
                        r.haptic_hz
                    ),
                );
            }
        }
        if !positive(r.video_fps) {
            bad(
                "rates.video_fps",
                format!("must be positive, got {}", r.video_fps),
            );
        } else if positive(r.haptic_hz) && r.video_fps > r.haptic_hz {
            bad("rates.video_fps", "cannot exceed rates.haptic_hz".into());
        }

        let ws = &self.workspace;
        if !ws.bounds.is_non_degenerate()
            || !ws.bounds.min.is_finite()
            || !ws.bounds.max.is_finite()
        {
            bad(
                "workspace.bounds",
                "must have positive finite extent on every axis".into(),
            );
        }
        for (i, o) in ws.obstacles.iter().enumerate() {
            if !o.is_non_degenerate() {
                bad(
                    &format!("workspace.obstacles[{i}]"),
                    "must have positive extent on every axis".into(),
                );
            }
        }
        if !positive(ws.v_max) {
            bad(
                "workspace.v_max",
                format!("must be positive, got {}", ws.v_max),
            );
        }

        if let Trajectory::Scripted { waypoints } = &self.master.trajectory {
            if waypoints.is_empty() {
                bad("master.trajectory.waypoints", "must not be empty".into());
            }
            if waypoints.windows(2).any(|w| !(w[1].t_s > w[0].t_s)) {
                bad(
                    "master.trajectory.waypoints",
                    "times must be strictly increasing".into(),
                );
            }
        }

        let h = &self.haptic;
        for (name, d) in [
            ("haptic.deadband", h.deadband),
            ("haptic.force_deadband", h.force_deadband),
        ] {
            if !(d.weber_k.is_finite() && d.weber_k >= 0.0) {
                bad(
                    &format!("{name}.weber_k"),
                    format!("must be non-negative, got {}", d.weber_k),
                );
            }
            if !positive(d.floor) {
                bad(
                    &format!("{name}.floor"),
                    format!("must be positive, got {}", d.floor),
                );
            }
        }
        if !(h.k_s.is_finite() && h.k_s >= 0.0) {
            bad("haptic.k_s", format!("must be non-negative, got {}", h.k_s));
        }
        if !(h.f_max.is_finite() && h.f_max >= 0.0) {
            bad(
                "haptic.f_max",
                format!("must be non-negative, got {}", h.f_max),
            );
        }

        let v = &self.video;
        if v.grid_cols == 0 || v.grid_cols > 255 {
            bad(
                "video.grid_cols",
                format!("must be in 1..=255, got {}", v.grid_cols),
            );
        }
        if v.grid_rows == 0 || v.grid_rows > 255 {
            bad(
                "video.grid_rows",
                format!("must be in 1..=255, got {}", v.grid_rows),
            );
        }
        if v.width == 0 || (v.grid_cols > 0 && !v.width.is_multiple_of(v.grid_cols)) {
            bad(
                "video.width",
                format!("must be a positive multiple of grid_cols, got {}", v.width),
            );
        }
        if v.height == 0 || (v.grid_rows > 0 && !v.height.is_multiple_of(v.grid_rows)) {
            bad(
                "video.height",
                format!("must be a positive multiple of grid_rows, got {}", v.height),
            );
        }
        if v.tile_w() > u16::MAX as usize || v.tile_h() > u16::MAX as usize {
            bad("video", "tile dimensions must fit 16 bits".into());
        }
        if v.n_encode_workers == 0 {
            bad("video.n_encode_workers", "must be at least 1".into());
        }
        if v.n_decode_workers == 0 {
            bad("video.n_decode_workers", "must be at least 1".into());
        }
        let tile_px = (v.tile_w() * v.tile_h()) as u64;
        if v.t_cost_units < tile_px {
            bad(
                "video.T_cost_units",
                format!(
                    "must cover one trial of a tile ({tile_px} units), got {}",
                    v.t_cost_units
                ),
            );
        } else if v.t_cost_units * (v.n_encode_workers as u64)
            < tile_px * (v.grid_cols * v.grid_rows) as u64
        {
            bad(
                "video.T_cost_units",
                "workers cannot fit one trial per tile".into(),
            );
        }
        if !positive(v.roi_weight) {
            bad(
                "video.roi_weight",
                format!("must be positive, got {}", v.roi_weight),
            );
        }
        if !positive(v.encode_units_per_us) {
            bad(
                "video.encode_units_per_us",
                format!("must be positive, got {}", v.encode_units_per_us),
            );
        }
        if !positive(v.decode_units_per_us) {
            bad(
                "video.decode_units_per_us",
                format!("must be positive, got {}", v.decode_units_per_us),
            );
        }
        if v.max_packet_bytes() - HEADER_LEN > MAX_PAYLOAD {
            bad(
                "video",
                "a lossless tile does not fit one packet payload".into(),
            );
        }

        let m = &self.mux;
        if m.capacity_per_class == 0 {
            bad("mux.capacity_per_class", "must be at least 1".into());
        }
        if m.scheme == SchemeKind::Drr {
            if m.quantum_haptic == 0 {
                bad("mux.quantum_haptic", "must be positive".into());
            }
            if m.quantum_video == 0 {
                bad("mux.quantum_video", "must be positive".into());
            }
        }

        let c = &self.channel;
        if !(c.loss_prob.is_finite() && (0.0..=1.0).contains(&c.loss_prob)) {
            bad(
                "channel.loss_prob",
                format!("must be within [0, 1], got {}", c.loss_prob),
            );
        }
        if c.slot_us == 0 {
            bad("channel.slot_us", "must be positive".into());
        }
        if c.slot_capacity_bytes == 0 {
            bad("channel.slot_capacity_bytes", "must be positive".into());
        } else if (v.max_packet_bytes() as u64) > c.slot_capacity_bytes * MAX_SLOTS_PER_PACKET {
            bad(
                "channel.slot_capacity_bytes",
                format!(
                    "{}-byte video packets exceed {MAX_SLOTS_PER_PACKET} slots",
                    v.max_packet_bytes()
                ),
            );
        }
        if !positive(c.link_rate_bytes_per_us) {
            bad(
                "channel.link_rate_bytes_per_us",
                format!("must be positive, got {}", c.link_rate_bytes_per_us),
            );
        }

        if self.mode == Mode::WallTime {
            if self.net.peer_timeout_ms == 0 {
                bad("net.peer_timeout_ms", "must be positive".into());
            }
            if self.master.source == MasterKind::Live && self.net.gateway_port.is_none() {
                bad(
                    "net.gateway_port",
                    "a live master needs the console gateway".into(),
                );
            }
        } else if self.master.source == MasterKind::Live {
            bad(
                "master.source",
                "live input needs a wall-time session".into(),
            );
        }
        out
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(SessionError::Invalid(issues))
        }
    }
}
