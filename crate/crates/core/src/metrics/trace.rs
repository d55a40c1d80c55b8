//! Raw trace dumps: every reported statistic is recomputable from these.
//!
//! A trace directory holds `meta.json`, `stages.csv` (`unit,stage,ts`, where
//! `stage` is a pipeline stage or a unit event name) and `tracking.csv`
//! (per-tick master and slave tip positions).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, Stage, UnitEvent, UnitId};
use crate::types::{Timestamp, Vec3};

pub const META_FILE: &str = "meta.json";
pub const STAGES_FILE: &str = "stages.csv";
pub const TRACKING_FILE: &str = "tracking.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Stage(Stage),
    Event(UnitEvent),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRow {
    pub unit: UnitId,
    pub kind: RowKind,
    pub ts: Timestamp,
}

impl TraceRow {
    pub fn stage(unit: UnitId, stage: Stage, ts: Timestamp) -> TraceRow {
        TraceRow {
            unit,
            kind: RowKind::Stage(stage),
            ts,
        }
    }

    pub fn event(unit: UnitId, event: UnitEvent, ts: Timestamp) -> TraceRow {
        TraceRow {
            unit,
            kind: RowKind::Event(event),
            ts,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self.kind {
            RowKind::Stage(s) => s.name(),
            RowKind::Event(e) => e.name(),
        }
    }
}

/// One simulation tick of the tip traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub tick: u64,
    pub master_x: f64,
    pub master_y: f64,
    pub master_z: f64,
    pub slave_x: f64,
    pub slave_y: f64,
    pub slave_z: f64,
    pub in_contact: bool,
}

impl TrackingRow {
    pub fn new(tick: u64, master: Vec3, slave: Vec3, in_contact: bool) -> TrackingRow {
        TrackingRow {
            tick,
            master_x: master.x,
            master_y: master.y,
            master_z: master.z,
            slave_x: slave.x,
            slave_y: slave.y,
            slave_z: slave.z,
            in_contact,
        }
    }

    pub fn master(&self) -> Vec3 {
        Vec3::new(self.master_x, self.master_y, self.master_z)
    }

    pub fn slave(&self) -> Vec3 {
        Vec3::new(self.slave_x, self.slave_y, self.slave_z)
    }
}

/// Run parameters the report depends on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub mode: String,
    pub seed: u64,
    pub duration_us: u64,
    pub tick_us: u64,
    pub warmup_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub meta: TraceMeta,
    pub rows: Vec<TraceRow>,
    pub tracking: Vec<TrackingRow>,
}

impl TraceSet {
    /// Orders rows by time, stages of one instant in pipeline order, so rows
    /// collected by separate processes form valid records.
    pub fn sort_rows(&mut self) {
        let rank = |k: RowKind| match k {
            RowKind::Stage(s) => s as u8,
            RowKind::Event(_) => Stage::ALL.len() as u8,
        };
        self.rows.sort_by_key(|r| (r.ts, rank(r.kind)));
        self.tracking.sort_by_key(|r| r.tick);
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), MetricsError> {
        fs::create_dir_all(dir)?;
        fs::write(
            dir.join(META_FILE),
            serde_json::to_string_pretty(&self.meta)? + "\n",
        )?;

        let mut w = csv::Writer::from_path(dir.join(STAGES_FILE))?;
        w.write_record(["unit", "stage", "ts"])?;
        for r in &self.rows {
            w.write_record([
                r.unit.to_string(),
                r.kind_name().to_string(),
                r.ts.0.to_string(),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join(TRACKING_FILE))?;
        for r in &self.tracking {
            w.serialize(r)?;
        }
        if self.tracking.is_empty() {
            w.write_record([
                "tick",
                "master_x",
                "master_y",
                "master_z",
                "slave_x",
                "slave_y",
                "slave_z",
                "in_contact",
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<TraceSet, MetricsError> {
        let meta: TraceMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;

        let mut rows = Vec::new();
        let mut r = csv::Reader::from_path(dir.join(STAGES_FILE))?;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(MetricsError::Parse(format!(
                    "expected 3 columns, got {}",
                    rec.len()
                )));
            }
            let unit: UnitId = rec[0].parse()?;
            let kind = match (Stage::from_name(&rec[1]), UnitEvent::from_name(&rec[1])) {
                (Some(s), _) => RowKind::Stage(s),
                (None, Some(e)) => RowKind::Event(e),
                _ => return Err(MetricsError::Parse(format!("unknown stage {:?}", &rec[1]))),
            };
            let ts = rec[2]
                .parse()
                .map_err(|_| MetricsError::Parse(format!("bad timestamp {:?}", &rec[2])))?;
            rows.push(TraceRow {
                unit,
                kind,
                ts: Timestamp(ts),
            });
        }

        let mut r = csv::Reader::from_path(dir.join(TRACKING_FILE))?;
        let tracking = r.deserialize().collect::<Result<Vec<TrackingRow>, _>>()?;
        Ok(TraceSet {
            meta,
            rows,
            tracking,
        })
    }
}
