//! Per-unit stage timestamps, latency decomposition and the user-facing
//! metrics (tracking RMSE, motion-to-photon, haptic compression).

mod report;
mod trace;

pub use report::{
    build_report, ClassReport, CompressionReport, SessionReport, TrackingReport, UnitCounts,
};
pub use trace::{RowKind, TraceMeta, TraceRow, TraceSet, TrackingRow};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Timestamp, Vec3};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("unit {unit}: stage {stage} at {ts} regresses after {prev_stage} at {prev_ts}")]
    Regression {
        unit: UnitId,
        stage: Stage,
        ts: Timestamp,
        prev_stage: Stage,
        prev_ts: Timestamp,
    },
    #[error("no overlap between master and slave traces after lag and warmup")]
    EmptyOverlap,
    #[error("trace parse error: {0}")]
    Parse(String),
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace metadata: {0}")]
    Json(#[from] serde_json::Error),
}

/// Pipeline stages in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Capture,
    EncodeDone,
    MuxOut,
    PhyRx,
    DecodeDone,
    Display,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Capture,
        Stage::EncodeDone,
        Stage::MuxOut,
        Stage::PhyRx,
        Stage::DecodeDone,
        Stage::Display,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Capture => "capture",
            Stage::EncodeDone => "encode_done",
            Stage::MuxOut => "mux_out",
            Stage::PhyRx => "phy_rx",
            Stage::DecodeDone => "decode_done",
            Stage::Display => "display",
        }
    }

    /// Name of the interval ending at this stage.
    pub fn delta_name(self) -> &'static str {
        match self {
            Stage::Capture => "capture",
            Stage::EncodeDone => "encode",
            Stage::MuxOut => "mux",
            Stage::PhyRx => "channel",
            Stage::DecodeDone => "decode",
            Stage::Display => "display",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Identity of a latency-tracked unit. Haptic units are keyed by the tick
/// that produced them, tiles by frame and tile index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitId {
    Command(u64),
    Feedback(u64),
    Tile { frame: u32, tile: u16 },
}

impl UnitId {
    pub fn class_name(self) -> &'static str {
        match self {
            UnitId::Command(_) => "haptic_command",
            UnitId::Feedback(_) => "haptic_feedback",
            UnitId::Tile { .. } => "video",
        }
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitId::Command(t) => write!(f, "cmd:{t}"),
            UnitId::Feedback(t) => write!(f, "fb:{t}"),
            UnitId::Tile { frame, tile } => write!(f, "tile:{frame}:{tile}"),
        }
    }
}

impl FromStr for UnitId {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<UnitId, MetricsError> {
        let bad = || MetricsError::Parse(format!("bad unit id {s:?}"));
        let mut parts = s.split(':');
        let kind = parts.next().ok_or_else(bad)?;
        let mut num = || -> Result<u64, MetricsError> {
            parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)
        };
        let id = match kind {
            "cmd" => UnitId::Command(num()?),
            "fb" => UnitId::Feedback(num()?),
            "tile" => {
                let frame = u32::try_from(num()?).map_err(|_| bad())?;
                let tile = u16::try_from(num()?).map_err(|_| bad())?;
                UnitId::Tile { frame, tile }
            }
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(id)
    }
}

/// Non-stage events attached to a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitEvent {
    /// Tile belongs to the region of interest.
    Roi,
    /// Dropped by mux queue overflow.
    MuxDrop,
    /// Lost by the channel.
    ChannelLoss,
    /// Arrived after a newer sample and was ignored.
    Stale,
}

impl UnitEvent {
    pub const ALL: [UnitEvent; 4] = [
        UnitEvent::Roi,
        UnitEvent::MuxDrop,
        UnitEvent::ChannelLoss,
        UnitEvent::Stale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnitEvent::Roi => "roi",
            UnitEvent::MuxDrop => "mux_drop",
            UnitEvent::ChannelLoss => "channel_loss",
            UnitEvent::Stale => "stale",
        }
    }

    pub fn from_name(s: &str) -> Option<UnitEvent> {
        UnitEvent::ALL.into_iter().find(|e| e.name() == s)
    }
}

/// Stage timestamps of one unit.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LatencyRecord {
    stamps: [Option<Timestamp>; 6],
}

impl LatencyRecord {
    pub fn get(&self, stage: Stage) -> Option<Timestamp> {
        self.stamps[stage as usize]
    }

    fn last(&self) -> Option<(Stage, Timestamp)> {
        Stage::ALL
            .iter()
            .rev()
            .find_map(|&s| self.get(s).map(|t| (s, t)))
    }

    /// Stores `ts` for `stage`; stages must advance in pipeline order with
    /// non-decreasing timestamps. Stages may be skipped.
    pub fn record(
        &mut self,
        unit: UnitId,
        stage: Stage,
        ts: Timestamp,
    ) -> Result<(), MetricsError> {
        if let Some((prev_stage, prev_ts)) = self.last() {
            if stage <= prev_stage || ts < prev_ts {
                return Err(MetricsError::Regression {
                    unit,
                    stage,
                    ts,
                    prev_stage,
                    prev_ts,
                });
            }
        }
        self.stamps[stage as usize] = Some(ts);
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.get(Stage::Capture).is_some() && self.get(Stage::Display).is_some()
    }

    pub fn e2e_us(&self) -> Option<u64> {
        Some(self.get(Stage::Display)?.since(self.get(Stage::Capture)?))
    }

    /// Consecutive deltas between present stages, labelled by the later stage.
    pub fn deltas(&self) -> Vec<(Stage, u64)> {
        let mut out = Vec::new();
        let mut prev: Option<Timestamp> = None;
        for s in Stage::ALL {
            if let Some(t) = self.get(s) {
                if let Some(p) = prev {
                    out.push((s, t.since(p)));
                }
                prev = Some(t);
            }
        }
        out
    }
}

/// Single collector for every unit's stage timestamps and events.
#[derive(Debug, Clone, Default)]
pub struct LatencyLog {
    records: BTreeMap<UnitId, LatencyRecord>,
    rows: Vec<TraceRow>,
}

impl LatencyLog {
    pub fn new() -> LatencyLog {
        LatencyLog::default()
    }

    pub fn record_stage(
        &mut self,
        unit: UnitId,
        stage: Stage,
        ts: Timestamp,
    ) -> Result<(), MetricsError> {
        self.records
            .entry(unit)
            .or_default()
            .record(unit, stage, ts)?;
        self.rows.push(TraceRow::stage(unit, stage, ts));
        Ok(())
    }

    pub fn record_event(&mut self, unit: UnitId, event: UnitEvent, ts: Timestamp) {
        self.records.entry(unit).or_default();
        self.rows.push(TraceRow::event(unit, event, ts));
    }

    pub fn get(&self, unit: &UnitId) -> Option<&LatencyRecord> {
        self.records.get(unit)
    }

    pub fn records(&self) -> &BTreeMap<UnitId, LatencyRecord> {
        &self.records
    }

    pub fn rows(&self) -> &[TraceRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<TraceRow> {
        self.rows
    }
}

/// Order statistics over integer microsecond samples. Percentiles use the
/// nearest-rank definition; the mean is rounded to 6 significant digits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: u64,
    pub mean: f64,
    pub p50: u64,
    pub p99: u64,
    pub max: u64,
}

impl Summary {
    pub fn of(values: &[u64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let n = v.len();
        let rank = |p: f64| v[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        let sum: u128 = v.iter().map(|&x| x as u128).sum();
        Some(Summary {
            count: n as u64,
            mean: sig6(sum as f64 / n as f64),
            p50: rank(0.50),
            p99: rank(0.99),
            max: v[n - 1],
        })
    }
}

/// Rounds to 6 significant digits.
pub fn sig6(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Root-mean-square distance between `slave[i]` and `master[i - lag]` over
/// ticks `i >= max(lag, warmup)`.
pub fn tracking_rmse(
    master: &[Vec3],
    slave: &[Vec3],
    lag_ticks: usize,
    warmup_ticks: usize,
) -> Result<f64, MetricsError> {
    let start = lag_ticks.max(warmup_ticks);
    let end = slave.len().min(master.len() + lag_ticks);
    if start >= end {
        return Err(MetricsError::EmptyOverlap);
    }
    let sum: f64 = (start..end)
        .map(|i| {
            let d = slave[i] - master[i - lag_ticks];
            d.dot(d)
        })
        .sum();
    Ok((sum / (end - start) as f64).sqrt())
}

/// Display minus capture over displayed ROI tiles.
pub fn motion_to_photon<'a>(
    records: impl IntoIterator<Item = (&'a UnitId, &'a LatencyRecord)>,
    is_roi: impl Fn(&UnitId) -> bool,
) -> Option<Summary> {
    let v: Vec<u64> = records
        .into_iter()
        .filter(|(u, _)| matches!(u, UnitId::Tile { .. }) && is_roi(u))
        .filter_map(|(_, r)| r.e2e_us())
        .collect();
    Summary::of(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn telescoping_deltas() {
        let u = UnitId::Tile { frame: 0, tile: 0 };
        let mut log = LatencyLog::new();
        for (s, t) in Stage::ALL.into_iter().zip([0, 2, 3, 6, 7, 9]) {
            log.record_stage(u, s, Timestamp(t)).unwrap();
        }
        let r = log.get(&u).unwrap();
        let d: Vec<u64> = r.deltas().into_iter().map(|(_, d)| d).collect();
        assert_eq!(d, vec![2, 1, 3, 1, 2]);
        assert_eq!(r.e2e_us(), Some(9));
        assert_eq!(d.iter().sum::<u64>(), 9);
    }

    #[test]
    fn missing_display_is_incomplete() {
        let u = UnitId::Command(3);
        let mut r = LatencyRecord::default();
        r.record(u, Stage::Capture, Timestamp(0)).unwrap();
        r.record(u, Stage::PhyRx, Timestamp(5)).unwrap();
        assert!(!r.is_complete());
        assert_eq!(r.e2e_us(), None);
    }

    #[test]
    fn regression_rejected() {
        let u = UnitId::Command(1);
        let mut log = LatencyLog::new();
        log.record_stage(u, Stage::Capture, Timestamp(10)).unwrap();
        assert!(log
            .record_stage(u, Stage::EncodeDone, Timestamp(9))
            .is_err());
        log.record_stage(u, Stage::MuxOut, Timestamp(10)).unwrap();
        assert!(log
            .record_stage(u, Stage::EncodeDone, Timestamp(11))
            .is_err());
        assert!(log.record_stage(u, Stage::MuxOut, Timestamp(11)).is_err());
    }

    #[test]
    fn unit_ids_round_trip() {
        for u in [
            UnitId::Command(7),
            UnitId::Feedback(0),
            UnitId::Tile {
                frame: 12,
                tile: 15,
            },
        ] {
            assert_eq!(u.to_string().parse::<UnitId>().unwrap(), u);
        }
        assert!("tile:1".parse::<UnitId>().is_err());
        assert!("cmd:1:2".parse::<UnitId>().is_err());
        assert!("x:1".parse::<UnitId>().is_err());
    }

    #[test]
    fn summary_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        let s = Summary::of(&v).unwrap();
        assert_eq!((s.p50, s.p99, s.max, s.count), (50, 99, 100, 100));
        assert_eq!(s.mean, 50.5);
        assert!(Summary::of(&[]).is_none());
    }

    #[test]
    fn sig6_rounding() {
        assert_eq!(sig6(1.0 / 3.0), 0.333333);
        assert_eq!(sig6(123456789.0), 123457000.0);
        assert_eq!(sig6(0.0), 0.0);
    }

    #[test]
    fn rmse_cases() {
        let master: Vec<Vec3> = (0..50)
            .map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0))
            .collect();
        let lag = 3;
        let mut slave = vec![Vec3::ZERO; lag];
        slave.extend_from_slice(&master[..47]);
        assert_eq!(tracking_rmse(&master, &slave, lag, 0).unwrap(), 0.0);
        let offset: Vec<Vec3> = slave
            .iter()
            .map(|&p| p + Vec3::new(0.0, 0.01, 0.0))
            .collect();
        let r = tracking_rmse(&master, &offset, lag, 5).unwrap();
        assert!((r - 0.01).abs() < 1e-12);
        assert!(matches!(
            tracking_rmse(&master, &slave, 3, 100),
            Err(MetricsError::EmptyOverlap)
        ));
    }

    #[test]
    fn mtp_single_frame() {
        let u = UnitId::Tile { frame: 0, tile: 5 };
        let mut log = LatencyLog::new();
        log.record_stage(u, Stage::Capture, Timestamp(1_000))
            .unwrap();
        log.record_stage(u, Stage::Display, Timestamp(10_000))
            .unwrap();
        let s = motion_to_photon(log.records(), |_| true).unwrap();
        assert_eq!((s.count, s.max), (1, 9_000));
    }
}
