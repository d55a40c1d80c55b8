//! Canonical session report, computed purely from a [`TraceSet`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{
    motion_to_photon, sig6, tracking_rmse, LatencyRecord, MetricsError, RowKind, Summary, TraceSet,
    UnitEvent, UnitId,
};
use crate::types::Vec3;

pub const CLASS_NAMES: [&str; 3] = ["haptic_command", "haptic_feedback", "video"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitCounts {
    pub total: u64,
    pub complete: u64,
    pub incomplete: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub units: u64,
    pub complete: u64,
    pub channel_losses: u64,
    pub mux_drops: u64,
    pub stale: u64,
    /// Per-interval statistics over completed units, keyed by interval name.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub stages: BTreeMap<String, Summary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub e2e_us: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub lag_us: u64,
    pub warmup_us: u64,
    pub samples: u64,
    pub rmse_m: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub generated: u64,
    pub emitted_command: u64,
    pub emitted_feedback: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub command_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feedback_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mode: String,
    pub seed: u64,
    pub duration_us: u64,
    pub tick_us: u64,
    /// Set for wall-time runs, whose one-way stages span two clocks.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clock_sync: Option<String>,
    pub units: UnitCounts,
    pub classes: BTreeMap<String, ClassReport>,
    pub haptic_compression: CompressionReport,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tracking: Option<TrackingReport>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub motion_to_photon_us: Option<Summary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub frame_complete_us: Option<Summary>,
}

impl SessionReport {
    /// Canonical JSON text: fixed key order, floats at 6 significant digits.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub const CLOCK_SYNC_ASSUMPTION: &str =
    "one-way latencies assume operator and teleoperator clocks agree; exact only when both roles share a process";

pub fn build_report(traces: &TraceSet) -> Result<SessionReport, MetricsError> {
    let mut records: BTreeMap<UnitId, LatencyRecord> = BTreeMap::new();
    let mut events: BTreeMap<UnitEvent, BTreeSet<UnitId>> = BTreeMap::new();
    for row in &traces.rows {
        let rec = records.entry(row.unit).or_default();
        match row.kind {
            RowKind::Stage(s) => rec.record(row.unit, s, row.ts)?,
            RowKind::Event(e) => {
                events.entry(e).or_default().insert(row.unit);
            }
        }
    }
    let has = |e: UnitEvent, u: &UnitId| events.get(&e).is_some_and(|s| s.contains(u));

    let mut classes: BTreeMap<String, ClassReport> = CLASS_NAMES
        .iter()
        .map(|&n| (n.to_string(), ClassReport::default()))
        .collect();
    let mut deltas: BTreeMap<&str, BTreeMap<&str, Vec<u64>>> = BTreeMap::new();
    let mut e2e: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    let mut units = UnitCounts::default();

    for (u, r) in &records {
        let name = u.class_name();
        let c = classes.get_mut(name).expect("known class");
        c.units += 1;
        units.total += 1;
        c.channel_losses += has(UnitEvent::ChannelLoss, u) as u64;
        c.mux_drops += has(UnitEvent::MuxDrop, u) as u64;
        c.stale += has(UnitEvent::Stale, u) as u64;
        if r.is_complete() {
            c.complete += 1;
            units.complete += 1;
            e2e.entry(name).or_default().push(r.e2e_us().unwrap());
            for (stage, d) in r.deltas() {
                deltas
                    .entry(name)
                    .or_default()
                    .entry(stage.delta_name())
                    .or_default()
                    .push(d);
            }
        }
    }
    units.incomplete = units.total - units.complete;
    for (name, c) in classes.iter_mut() {
        c.e2e_us = e2e.get(name.as_str()).and_then(|v| Summary::of(v));
        if let Some(d) = deltas.get(name.as_str()) {
            c.stages = d
                .iter()
                .filter_map(|(k, v)| Summary::of(v).map(|s| (k.to_string(), s)))
                .collect();
        }
    }

    let meta = &traces.meta;
    let mut tracking_rows = traces.tracking.clone();
    tracking_rows.sort_by_key(|r| r.tick);

    let generated = tracking_rows.len() as u64;
    let emitted_command = classes["haptic_command"].units;
    let emitted_feedback = classes["haptic_feedback"].units;
    let ratio = |e: u64| (generated > 0).then(|| sig6(e as f64 / generated as f64));
    let haptic_compression = CompressionReport {
        generated,
        emitted_command,
        emitted_feedback,
        command_ratio: ratio(emitted_command),
        feedback_ratio: ratio(emitted_feedback),
    };

    let tracking = match (&classes["haptic_command"].e2e_us, meta.tick_us) {
        (Some(cmd), tick) if tick > 0 => {
            let lag_ticks = cmd.p50.div_ceil(tick) as usize;
            let warmup_ticks = (meta.warmup_us / tick) as usize;
            let master: Vec<Vec3> = tracking_rows.iter().map(|r| r.master()).collect();
            let slave: Vec<Vec3> = tracking_rows.iter().map(|r| r.slave()).collect();
            tracking_rmse(&master, &slave, lag_ticks, warmup_ticks)
                .ok()
                .map(|rmse| TrackingReport {
                    lag_us: lag_ticks as u64 * tick,
                    warmup_us: meta.warmup_us,
                    samples: (slave.len().min(master.len() + lag_ticks)
                        - lag_ticks.max(warmup_ticks)) as u64,
                    rmse_m: sig6(rmse),
                })
        }
        _ => None,
    };

    let motion_to_photon_us = motion_to_photon(&records, |u| has(UnitEvent::Roi, u));

    let mut frames: BTreeMap<u32, (bool, Vec<u64>)> = BTreeMap::new();
    for (u, r) in &records {
        if let UnitId::Tile { frame, .. } = u {
            let f = frames.entry(*frame).or_insert((true, Vec::new()));
            match r.e2e_us() {
                Some(d) => f.1.push(d),
                None => f.0 = false,
            }
        }
    }
    let frame_complete: Vec<u64> = frames
        .values()
        .filter(|(all, _)| *all)
        .filter_map(|(_, v)| v.iter().max().copied())
        .collect();

    Ok(SessionReport {
        mode: meta.mode.clone(),
        seed: meta.seed,
        duration_us: meta.duration_us,
        tick_us: meta.tick_us,
        clock_sync: (meta.mode == "wall_time").then(|| CLOCK_SYNC_ASSUMPTION.to_string()),
        units,
        classes,
        haptic_compression,
        tracking,
        motion_to_photon_us,
        frame_complete_us: Summary::of(&frame_complete),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{Stage, TraceMeta, TraceRow};
    use crate::types::Timestamp;

    fn meta() -> TraceMeta {
        TraceMeta {
            mode: "virtual-time".into(),
            seed: 1,
            duration_us: 0,
            tick_us: 1000,
            warmup_us: 0,
        }
    }

    #[test]
    fn empty_session_has_zero_counts_and_no_stats() {
        let r = build_report(&TraceSet {
            meta: meta(),
            rows: vec![],
            tracking: vec![],
        })
        .unwrap();
        assert_eq!(r.units, UnitCounts::default());
        let json = r.to_json();
        assert!(!json.contains("e2e_us"));
        assert!(!json.contains("tracking"));
        assert!(!json.contains("motion_to_photon"));
        assert_eq!(r.classes.len(), 3);
    }

    #[test]
    fn e2e_equals_sum_of_stage_means_for_single_unit() {
        let u = UnitId::Tile { frame: 0, tile: 0 };
        let rows: Vec<TraceRow> = Stage::ALL
            .into_iter()
            .zip([0u64, 2, 3, 6, 7, 9])
            .map(|(s, t)| TraceRow::stage(u, s, Timestamp(t)))
            .collect();
        let r = build_report(&TraceSet {
            meta: meta(),
            rows,
            tracking: vec![],
        })
        .unwrap();
        let v = &r.classes["video"];
        assert_eq!(v.e2e_us.unwrap().max, 9);
        let sum: u64 = v.stages.values().map(|s| s.max).sum();
        assert_eq!(sum, 9);
        assert_eq!(r.frame_complete_us.unwrap().max, 9);
        assert!(r.motion_to_photon_us.is_none());
    }

    #[test]
    fn regressing_trace_is_rejected() {
        let u = UnitId::Command(0);
        let rows = vec![
            TraceRow::stage(u, Stage::Capture, Timestamp(5)),
            TraceRow::stage(u, Stage::Display, Timestamp(4)),
        ];
        assert!(build_report(&TraceSet {
            meta: meta(),
            rows,
            tracking: vec![]
        })
        .is_err());
    }
}
