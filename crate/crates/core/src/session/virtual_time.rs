//! Deterministic discrete-event driver: both roles in one process, the two
//! link directions emulated by [`Link`], one virtual clock.

use std::collections::BTreeMap;

use crate::channel::{Link, Transmission};
use crate::metrics::{
    build_report, LatencyLog, SessionReport, Stage, TraceMeta, TraceSet, TrackingRow, UnitEvent,
};
use crate::mux::MuxEvent;
use crate::rng::XorShift64Star;
use crate::simworld::MasterMode;
use crate::types::{Timestamp, Vec3};
use crate::wire::{decode_packet, encode_packet};

use super::config::SessionConfig;
use super::node::{unit_of, DecodeRecord, OperatorNode, Outbound, TeleoperatorNode};
use super::SessionError;

/// Link direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Dir {
    /// Operator to teleoperator (commands).
    Forward = 0,
    /// Teleoperator to operator (feedback and video).
    Reverse = 1,
}

/// Per-tick state of both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickProbe {
    pub tick: u64,
    pub master: Vec3,
    /// Operator deadband reference after this tick.
    pub last_sent: Option<Vec3>,
    /// Command the slave stepped toward, with the tick that produced it.
    pub command: Option<(u64, Vec3)>,
    pub tip: Vec3,
    pub force: Vec3,
    pub in_contact: bool,
}

/// Everything a virtual-time run produced.
#[derive(Debug, Clone)]
pub struct SessionRun {
    pub report: SessionReport,
    pub traces: TraceSet,
    pub ticks: Vec<TickProbe>,
    /// Mux departures, indexed by [`Dir`].
    pub mux_events: [Vec<MuxEvent>; 2],
    pub transmissions: [Vec<Transmission>; 2],
    pub decodes: Vec<DecodeRecord>,
}

// Same-instant ordering: arrivals, then frame deadlines, then the tick, then
// packets becoming ready, and finally link service.
#[derive(Debug)]
enum Event {
    Arrival(Dir, Vec<u8>),
    FrameDeadline,
    Tick(u64),
    Ready(Dir, Outbound),
    Service(Dir),
}

impl Event {
    fn rank(&self) -> u8 {
        match self {
            Event::Arrival(..) => 0,
            Event::FrameDeadline => 1,
            Event::Tick(_) => 2,
            Event::Ready(..) => 3,
            Event::Service(_) => 4,
        }
    }
}

struct Driver {
    queue: BTreeMap<(Timestamp, u8, u64), Event>,
    next_id: u64,
    links: [Link; 2],
    service_at: [Option<Timestamp>; 2],
    log: LatencyLog,
    tick_us: u64,
    mux_events: [Vec<MuxEvent>; 2],
    transmissions: [Vec<Transmission>; 2],
}

impl Driver {
    fn push(&mut self, ts: Timestamp, ev: Event) {
        self.next_id += 1;
        self.queue.insert((ts, ev.rank(), self.next_id), ev);
    }

    fn offer(&mut self, dir: Dir, o: Outbound, now: Timestamp) -> Result<(), SessionError> {
        if let Some(evicted) = self.links[dir as usize].offer(o.packet, now) {
            let unit = unit_of(&evicted.packet, self.tick_us)?;
            self.log.record_event(unit, UnitEvent::MuxDrop, now);
        }
        self.wake(dir, now);
        Ok(())
    }

    fn wake(&mut self, dir: Dir, now: Timestamp) {
        let d = dir as usize;
        if self.service_at[d].is_none() && self.links[d].has_backlog() {
            let at = self.links[d].busy_until().max(now);
            self.service_at[d] = Some(at);
            self.push(at, Event::Service(dir));
        }
    }

    fn service(&mut self, dir: Dir, now: Timestamp) -> Result<(), SessionError> {
        let d = dir as usize;
        self.service_at[d] = None;
        if let Some(tx) = self.links[d].poll(now)? {
            let unit = unit_of(&tx.mux.packet, self.tick_us)?;
            self.log
                .record_stage(unit, Stage::MuxOut, tx.mux.dequeue_ts)?;
            if tx.delivery.dropped {
                self.log
                    .record_event(unit, UnitEvent::ChannelLoss, tx.delivery.tx_ts);
            } else {
                let bytes = encode_packet(&tx.delivery.packet)?;
                self.push(tx.delivery.rx_ts, Event::Arrival(dir, bytes));
            }
            self.mux_events[d].push(tx.mux.clone());
            self.transmissions[d].push(tx);
        }
        self.wake(dir, now);
        Ok(())
    }
}

/// Runs both roles for `duration_us` of virtual time. Events at or after the
/// end are discarded; units still in flight are reported as incomplete.
pub fn run_session(cfg: &SessionConfig, duration_us: u64) -> Result<SessionRun, SessionError> {
    cfg.validate()?;
    let tick_us = cfg.tick_us();
    let end = Timestamp(duration_us);
    let seed = cfg.channel_seed();

    let mut op = OperatorNode::new(cfg, MasterMode::Scripted(cfg.master.trajectory.clone()))?;
    let mut tele = TeleoperatorNode::new(cfg)?;
    let mut drv = Driver {
        queue: BTreeMap::new(),
        next_id: 0,
        links: [
            Link::new(&cfg.channel, &cfg.mux, XorShift64Star::for_stream(seed, 1)),
            Link::new(&cfg.channel, &cfg.mux, XorShift64Star::for_stream(seed, 2)),
        ],
        service_at: [None; 2],
        log: LatencyLog::new(),
        tick_us,
        mux_events: [Vec::new(), Vec::new()],
        transmissions: [Vec::new(), Vec::new()],
    };
    let mut ticks = Vec::new();
    let mut tracking = Vec::new();

    if duration_us > 0 {
        drv.push(Timestamp::ZERO, Event::Tick(0));
    }
    while let Some(entry) = drv.queue.first_entry() {
        let now = entry.key().0;
        if now >= end {
            break;
        }
        match entry.remove() {
            Event::Arrival(dir, bytes) => {
                let p = decode_packet(&bytes)?;
                match dir {
                    Dir::Forward => tele.receive(p, now, &mut drv.log)?,
                    Dir::Reverse => {
                        if let Some(deadline) = op.receive(p, now, &mut drv.log)? {
                            drv.push(deadline, Event::FrameDeadline);
                        }
                    }
                }
            }
            Event::FrameDeadline => op.expire(now, &mut drv.log)?,
            Event::Tick(k) => {
                let o = op.tick(k, &mut drv.log)?;
                let t = tele.tick(k, &mut drv.log)?;
                if let Some(c) = o.command {
                    drv.offer(Dir::Forward, c, now)?;
                }
                if let Some(f) = t.feedback {
                    drv.offer(Dir::Reverse, f, now)?;
                }
                for tile in t.tiles {
                    if tile.ready <= now {
                        drv.offer(Dir::Reverse, tile, now)?;
                    } else {
                        drv.push(tile.ready, Event::Ready(Dir::Reverse, tile));
                    }
                }
                tracking.push(TrackingRow::new(k, o.master, t.arm.tip, t.arm.in_contact));
                ticks.push(TickProbe {
                    tick: k,
                    master: o.master,
                    last_sent: o.last_sent,
                    command: t.command,
                    tip: t.arm.tip,
                    force: t.force,
                    in_contact: t.arm.in_contact,
                });
                let next = Timestamp((k + 1) * tick_us);
                if next < end {
                    drv.push(next, Event::Tick(k + 1));
                }
            }
            Event::Ready(dir, o) => drv.offer(dir, o, now)?,
            Event::Service(dir) => drv.service(dir, now)?,
        }
    }

    let traces = TraceSet {
        meta: TraceMeta {
            mode: cfg.mode.name().to_string(),
            seed: cfg.seed,
            duration_us,
            tick_us,
            warmup_us: cfg.metrics.warmup_us,
        },
        rows: drv.log.into_rows(),
        tracking,
    };
    let report = build_report(&traces)?;
    Ok(SessionRun {
        report,
        traces,
        ticks,
        mux_events: drv.mux_events,
        transmissions: drv.transmissions,
        decodes: op.screen().decodes().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(cfg: &SessionConfig, ms: u64) -> SessionRun {
        run_session(cfg, ms * 1000).unwrap()
    }

    #[test]
    fn zero_duration_is_empty() {
        let run = short(&SessionConfig::default(), 0);
        assert_eq!(run.report.units.total, 0);
        assert!(run.ticks.is_empty());
        assert!(run.report.tracking.is_none());
    }

    #[test]
    fn one_second_default_run() {
        let run = short(&SessionConfig::default(), 1000);
        assert_eq!(run.ticks.len(), 1000);
        let r = &run.report;
        for c in ["haptic_command", "haptic_feedback", "video"] {
            assert!(r.classes[c].complete > 0, "{c}: {:?}", r.classes[c]);
            assert_eq!(r.classes[c].channel_losses, 0);
        }
        // 30 fps: frames 0..=29 captured, 16 tiles each
        assert_eq!(r.classes["video"].units, 30 * 16);
        assert!(r.motion_to_photon_us.is_some());
        let tr = r.tracking.as_ref().unwrap();
        assert!(tr.rmse_m.is_finite());
    }

    #[test]
    fn same_seed_same_report() {
        let mut cfg = SessionConfig::default();
        cfg.channel.loss_prob = 0.2;
        let a = short(&cfg, 300);
        let b = short(&cfg, 300);
        assert_eq!(a.report.to_json(), b.report.to_json());
        assert_eq!(a.traces, b.traces);
        cfg.seed = 2;
        assert_ne!(short(&cfg, 300).traces.rows, a.traces.rows);
    }

    #[test]
    fn lossy_link_keeps_the_slave_moving() {
        let mut cfg = SessionConfig::default();
        cfg.channel.loss_prob = 0.5;
        let run = short(&cfg, 2000);
        let last_cmd = run.ticks.last().unwrap().command.unwrap().0;
        assert!(
            last_cmd > 1800,
            "newest applied command from tick {last_cmd}"
        );
        assert!(run.report.classes["haptic_command"].channel_losses > 0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = SessionConfig::default();
        cfg.channel.loss_prob = -0.1;
        assert!(matches!(
            run_session(&cfg, 1000),
            Err(SessionError::Invalid(_))
        ));
    }
}
