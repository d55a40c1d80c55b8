//! The two ends of the loop, independent of how packets and time are
//! delivered to them. Drivers call `tick` once per haptic tick and hand over
//! received packets with their arrival time.

use std::collections::{BTreeMap, BTreeSet};

use crate::haptic::{
    collision_force, deadband_encode, DeadbandState, HapticSample, ZohReconstructor,
};
use crate::metrics::{LatencyLog, Stage, UnitEvent, UnitId};
use crate::simworld::{render_camera, step_slave, ArmState, MasterMode, MasterSource, Workspace};
use crate::types::{StreamClass, Timestamp, Vec3};
use crate::video::{
    allocate_budgets, classify_roi, decode_schedule, decode_tile_data, encode_tile, project_tip,
    tile_frame, DecodeJob, DecoderPool, TileGrid,
};
use crate::wire::{HapticPayload, MuxPacket, VideoPayload, WireError};

use super::config::{SessionConfig, VideoConfig};
use super::SessionError;

/// A packet ready to enter the mux at `ready`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub unit: UnitId,
    pub ready: Timestamp,
    pub packet: MuxPacket,
}

/// Latency unit carried by a packet, read from its class and payload prefix.
pub fn unit_of(p: &MuxPacket, tick_us: u64) -> Result<UnitId, WireError> {
    let bad = |reason: &str| WireError::BadPayload {
        what: "unit",
        reason: reason.to_string(),
    };
    match p.class {
        StreamClass::Haptic => {
            let tick = p.send_ts.0 / tick_us;
            match p.payload.first() {
                Some(0) => Ok(UnitId::Command(tick)),
                Some(1) => Ok(UnitId::Feedback(tick)),
                _ => Err(bad("unknown haptic subtype")),
            }
        }
        StreamClass::Video if p.payload.len() >= 6 => Ok(UnitId::Tile {
            frame: u32::from_be_bytes(p.payload[0..4].try_into().unwrap()),
            tile: u16::from_be_bytes(p.payload[4..6].try_into().unwrap()),
        }),
        _ => Err(bad("class carries no latency unit")),
    }
}

fn refresh_due(last: Option<Timestamp>, now: Timestamp, refresh_us: u64) -> bool {
    refresh_us > 0 && last.is_some_and(|t| now.since(t) >= refresh_us)
}

/// What the operator did on one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorTick {
    pub master: Vec3,
    /// Deadband reference after this tick.
    pub last_sent: Option<Vec3>,
    pub command: Option<Outbound>,
}

/// One decoded tile as shown on the operator display.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeRecord {
    pub frame_id: u32,
    pub tile_index: usize,
    pub is_roi: bool,
    pub cost: u64,
    pub ready: Timestamp,
    pub start: Timestamp,
    pub done: Timestamp,
}

#[derive(Debug)]
struct PendingFrame {
    deadline: Timestamp,
    tiles: Vec<(VideoPayload, Timestamp)>,
}

/// Operator display: frame assembly, priority decode, and the shown image.
#[derive(Debug)]
pub struct Screen {
    grid: TileGrid,
    deadline_us: u64,
    pool: DecoderPool,
    pending: BTreeMap<u32, PendingFrame>,
    flushed: BTreeSet<u32>,
    pixels: Vec<u8>,
    shown_frame: Vec<Option<u32>>,
    decodes: Vec<DecodeRecord>,
}

impl Screen {
    pub fn new(v: &VideoConfig) -> Result<Screen, SessionError> {
        let grid = TileGrid::new(v.width, v.height, v.grid_cols, v.grid_rows)?;
        Ok(Screen {
            grid,
            deadline_us: v.frame_deadline_us,
            pool: DecoderPool::new(v.n_decode_workers, v.decode_units_per_us),
            pending: BTreeMap::new(),
            flushed: BTreeSet::new(),
            pixels: vec![0; v.width * v.height],
            shown_frame: vec![None; grid.len()],
            decodes: Vec::new(),
        })
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    /// Current display buffer, row-major.
    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Newest frame that has at least one tile on screen.
    pub fn latest_frame(&self) -> Option<u32> {
        self.shown_frame.iter().flatten().max().copied()
    }

    pub fn decodes(&self) -> &[DecodeRecord] {
        &self.decodes
    }

    /// Accepts a tile. Returns a deadline when this tile opened a new frame.
    fn receive(
        &mut self,
        tile: VideoPayload,
        rx: Timestamp,
        log: &mut LatencyLog,
    ) -> Result<Option<Timestamp>, SessionError> {
        if tile.grid_cols as usize != self.grid.cols
            || tile.grid_rows as usize != self.grid.rows
            || tile.tile_index as usize >= self.grid.len()
        {
            return Err(SessionError::Protocol(format!(
                "tile {} of a {}x{} grid does not match the {}x{} display",
                tile.tile_index, tile.grid_cols, tile.grid_rows, self.grid.cols, self.grid.rows
            )));
        }
        let frame = tile.frame_id;
        if self.flushed.contains(&frame) {
            self.decode(vec![(tile, rx)], rx, log)?;
            return Ok(None);
        }
        let opened = !self.pending.contains_key(&frame);
        let deadline = rx.plus(self.deadline_us);
        let p = self.pending.entry(frame).or_insert_with(|| PendingFrame {
            deadline,
            tiles: Vec::new(),
        });
        p.tiles.push((tile, rx));
        if p.tiles.len() == self.grid.len() {
            let p = self.pending.remove(&frame).unwrap();
            self.flush(frame, p, rx, log)?;
            return Ok(None);
        }
        Ok(opened.then_some(deadline))
    }

    /// Decodes every incomplete frame whose deadline has passed.
    fn expire(&mut self, now: Timestamp, log: &mut LatencyLog) -> Result<(), SessionError> {
        let due: Vec<u32> = self
            .pending
            .iter()
            .filter(|(_, p)| p.deadline <= now)
            .map(|(&f, _)| f)
            .collect();
        for f in due {
            let p = self.pending.remove(&f).unwrap();
            let at = p.deadline;
            self.flush(f, p, at, log)?;
        }
        Ok(())
    }

    fn flush(
        &mut self,
        frame: u32,
        p: PendingFrame,
        at: Timestamp,
        log: &mut LatencyLog,
    ) -> Result<(), SessionError> {
        self.flushed.insert(frame);
        // Late tiles of long-gone frames are not expected; bound the set.
        while self.flushed.len() > 256 {
            self.flushed.pop_first();
        }
        self.decode(p.tiles, at, log)
    }

    fn decode(
        &mut self,
        tiles: Vec<(VideoPayload, Timestamp)>,
        ready: Timestamp,
        log: &mut LatencyLog,
    ) -> Result<(), SessionError> {
        let jobs: Vec<DecodeJob> = tiles
            .iter()
            .map(|(t, _)| DecodeJob {
                frame_id: t.frame_id,
                tile_index: t.tile_index as usize,
                is_roi: t.roi,
                cost: t.mode.decode_cost(t.tile_w as usize, t.tile_h as usize),
                ready,
            })
            .collect();
        let slots = decode_schedule(&jobs, &mut self.pool);
        for slot in slots {
            let (t, _) = tiles
                .iter()
                .find(|(t, _)| t.tile_index as usize == slot.tile_index)
                .expect("slot for a scheduled tile");
            let unit = UnitId::Tile {
                frame: t.frame_id,
                tile: t.tile_index,
            };
            log.record_stage(unit, Stage::DecodeDone, slot.done)?;
            log.record_stage(unit, Stage::Display, slot.done)?;
            let rect = self.grid.rect(slot.tile_index);
            if (rect.w, rect.h) != (t.tile_w as usize, t.tile_h as usize) {
                return Err(SessionError::Protocol(format!(
                    "tile {} is {}x{}, display expects {}x{}",
                    t.tile_index, t.tile_w, t.tile_h, rect.w, rect.h
                )));
            }
            if self.shown_frame[slot.tile_index].is_none_or(|f| f <= t.frame_id) {
                let px = decode_tile_data(&t.data, rect.w, rect.h, t.mode);
                for dy in 0..rect.h {
                    let dst = (rect.y + dy) * self.grid.width() + rect.x;
                    self.pixels[dst..dst + rect.w]
                        .copy_from_slice(&px[dy * rect.w..(dy + 1) * rect.w]);
                }
                self.shown_frame[slot.tile_index] = Some(t.frame_id);
            }
            self.decodes.push(DecodeRecord {
                frame_id: t.frame_id,
                tile_index: slot.tile_index,
                is_roi: t.roi,
                cost: jobs
                    .iter()
                    .find(|j| j.tile_index == slot.tile_index)
                    .unwrap()
                    .cost,
                ready,
                start: slot.start,
                done: slot.done,
            });
        }
        Ok(())
    }
}

/// Master side: samples the master, deadband-codes commands, applies
/// feedback and shows video.
#[derive(Debug)]
pub struct OperatorNode {
    tick_us: u64,
    refresh_us: u64,
    master: MasterSource,
    deadband: DeadbandState,
    last_emit: Option<Timestamp>,
    feedback: ZohReconstructor,
    pending_feedback: Vec<(UnitId, Timestamp)>,
    screen: Screen,
}

impl OperatorNode {
    pub fn new(cfg: &SessionConfig, mode: MasterMode) -> Result<OperatorNode, SessionError> {
        let tick_us = cfg.tick_us();
        Ok(OperatorNode {
            tick_us,
            refresh_us: cfg.haptic.refresh_us,
            master: MasterSource::new(mode, cfg.workspace.center(), tick_us),
            deadband: DeadbandState::new(cfg.haptic.deadband),
            last_emit: None,
            feedback: ZohReconstructor::new(),
            pending_feedback: Vec::new(),
            screen: Screen::new(&cfg.video)?,
        })
    }

    pub fn tick(&mut self, k: u64, log: &mut LatencyLog) -> Result<OperatorTick, SessionError> {
        let now = Timestamp(k * self.tick_us);
        for u in take_due(&mut self.pending_feedback, now) {
            log.record_stage(u, Stage::Display, now)?;
        }
        self.feedback.prune_before(now);

        let sample = self.master.sample(k);
        let mut emitted = deadband_encode(sample, &mut self.deadband)?;
        if emitted.is_none() && refresh_due(self.last_emit, now, self.refresh_us) {
            self.deadband.mark_sent(sample.position);
            emitted = Some(sample);
        }
        let command = emitted.map(|s| {
            self.last_emit = Some(now);
            let unit = UnitId::Command(k);
            log.record_stage(unit, Stage::Capture, now)?;
            log.record_stage(unit, Stage::EncodeDone, now)?;
            let payload = HapticPayload::Command {
                position: s.position,
            }
            .encode();
            Ok::<_, SessionError>(Outbound {
                unit,
                ready: now,
                packet: MuxPacket::new(StreamClass::Haptic, 0, now, payload),
            })
        });
        Ok(OperatorTick {
            master: sample.position,
            last_sent: self.deadband.last_sent,
            command: command.transpose()?,
        })
    }

    /// Handles a packet from the teleoperator. Returns a frame deadline the
    /// driver must report back through [`OperatorNode::expire`].
    pub fn receive(
        &mut self,
        p: MuxPacket,
        rx: Timestamp,
        log: &mut LatencyLog,
    ) -> Result<Option<Timestamp>, SessionError> {
        let unit = unit_of(&p, self.tick_us)?;
        log.record_stage(unit, Stage::PhyRx, rx)?;
        match p.class {
            StreamClass::Haptic => {
                let HapticPayload::State { position, force } = HapticPayload::decode(&p.payload)?
                else {
                    return Err(SessionError::Protocol(
                        "command payload on the feedback stream".into(),
                    ));
                };
                let sample = HapticSample {
                    ts: p.send_ts,
                    position,
                    force,
                };
                if self.feedback.receive(p.seq, sample) {
                    log.record_stage(unit, Stage::DecodeDone, rx)?;
                    self.pending_feedback.push((unit, rx));
                } else {
                    log.record_event(unit, UnitEvent::Stale, rx);
                }
                Ok(None)
            }
            StreamClass::Video => {
                let tile = VideoPayload::decode(&p.payload)?;
                if tile.roi {
                    log.record_event(unit, UnitEvent::Roi, rx);
                }
                self.screen.receive(tile, rx, log)
            }
            c => Err(SessionError::Protocol(format!(
                "unexpected {c:?} packet at the operator"
            ))),
        }
    }

    pub fn expire(&mut self, now: Timestamp, log: &mut LatencyLog) -> Result<(), SessionError> {
        self.screen.expire(now, log)
    }

    /// Latest slave state reported back.
    pub fn feedback(&self) -> Option<&HapticSample> {
        self.feedback.latest()
    }

    pub fn screen(&self) -> &Screen {
        &self.screen
    }
}

/// What the teleoperator did on one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TeleoperatorTick {
    /// Command in effect and the tick that produced it.
    pub command: Option<(u64, Vec3)>,
    pub arm: ArmState,
    pub force: Vec3,
    pub clamped: bool,
    pub feedback: Option<Outbound>,
    pub tiles: Vec<Outbound>,
}

/// Slave side: applies commands to the simulated arm, returns its state and
/// force, and runs the camera and tile encoder.
#[derive(Debug)]
pub struct TeleoperatorNode {
    tick_us: u64,
    refresh_us: u64,
    ws: Workspace,
    arm: ArmState,
    commands: ZohReconstructor,
    pending_apply: Vec<(UnitId, Timestamp)>,
    fb_pos: DeadbandState,
    fb_force: DeadbandState,
    last_emit: Option<Timestamp>,
    k_s: f64,
    f_max: f64,
    video: VideoConfig,
    fps: f64,
    next_frame: u32,
    encoders: Vec<Timestamp>,
}

impl TeleoperatorNode {
    pub fn new(cfg: &SessionConfig) -> Result<TeleoperatorNode, SessionError> {
        let ws = cfg.world();
        TileGrid::new(
            cfg.video.width,
            cfg.video.height,
            cfg.video.grid_cols,
            cfg.video.grid_rows,
        )?;
        Ok(TeleoperatorNode {
            tick_us: ws.tick_us,
            refresh_us: cfg.haptic.refresh_us,
            arm: ArmState::at(ws.center()),
            ws,
            commands: ZohReconstructor::new(),
            pending_apply: Vec::new(),
            fb_pos: DeadbandState::new(cfg.haptic.deadband),
            fb_force: DeadbandState::new(cfg.haptic.force_deadband),
            last_emit: None,
            k_s: cfg.haptic.k_s,
            f_max: cfg.haptic.f_max,
            video: cfg.video,
            fps: cfg.rates.video_fps,
            next_frame: 0,
            encoders: vec![Timestamp::ZERO; cfg.video.n_encode_workers],
        })
    }

    pub fn arm(&self) -> &ArmState {
        &self.arm
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    /// Capture time of frame `f`: the first tick at or after `f / fps`.
    pub fn frame_capture_ts(&self, f: u32) -> Timestamp {
        let t = (f as f64 * 1e6 / self.fps).ceil() as u64;
        Timestamp(t.div_ceil(self.tick_us) * self.tick_us)
    }

    pub fn tick(&mut self, k: u64, log: &mut LatencyLog) -> Result<TeleoperatorTick, SessionError> {
        let now = Timestamp(k * self.tick_us);
        for u in take_due(&mut self.pending_apply, now) {
            log.record_stage(u, Stage::Display, now)?;
        }
        self.commands.prune_before(now);

        let command = self
            .commands
            .latest()
            .map(|s| (s.ts.0 / self.tick_us, s.position));
        let target = command.map_or(self.arm.last_command, |(_, p)| p);
        let step = step_slave(&self.arm, target, &self.ws, self.ws.tick_s());
        self.arm = step.state;
        let force = collision_force(
            self.arm.last_command,
            &self.ws.obstacles,
            self.k_s,
            self.f_max,
        );

        let changed = self.fb_pos.exceeds(self.arm.tip) || self.fb_force.exceeds(force);
        let feedback = if changed || refresh_due(self.last_emit, now, self.refresh_us) {
            self.fb_pos.mark_sent(self.arm.tip);
            self.fb_force.mark_sent(force);
            self.last_emit = Some(now);
            let unit = UnitId::Feedback(k);
            log.record_stage(unit, Stage::Capture, now)?;
            log.record_stage(unit, Stage::EncodeDone, now)?;
            let payload = HapticPayload::State {
                position: self.arm.tip,
                force,
            }
            .encode();
            Some(Outbound {
                unit,
                ready: now,
                packet: MuxPacket::new(StreamClass::Haptic, 0, now, payload),
            })
        } else {
            None
        };

        let mut tiles = Vec::new();
        if now >= self.frame_capture_ts(self.next_frame) {
            tiles = self.capture(self.next_frame, now, log)?;
            self.next_frame += 1;
        }

        Ok(TeleoperatorTick {
            command,
            arm: self.arm,
            force,
            clamped: step.clamped,
            feedback,
            tiles,
        })
    }

    fn capture(
        &mut self,
        frame_id: u32,
        now: Timestamp,
        log: &mut LatencyLog,
    ) -> Result<Vec<Outbound>, SessionError> {
        let v = &self.video;
        let mut frame = render_camera(&self.ws, &self.arm, v.width, v.height);
        frame.frame_id = frame_id;
        frame.capture_ts = now;
        let grid = TileGrid::new(v.width, v.height, v.grid_cols, v.grid_rows)?;
        let mut tiles = tile_frame(&frame, v.grid_cols, v.grid_rows)?;
        let tip = project_tip(self.arm.tip, &self.ws.bounds, v.width, v.height);
        classify_roi(&mut tiles, &grid, tip, v.roi_radius, v.roi_weight);
        let plan = allocate_budgets(&tiles, v.n_encode_workers, v.t_cost_units, v.r_total_bytes)?;

        // Each worker runs its tiles back to back, ROI first.
        let mut order: Vec<usize> = (0..tiles.len()).collect();
        order.sort_by_key(|&i| (!tiles[i].is_roi, i));
        let mut out = Vec::with_capacity(tiles.len());
        for i in order {
            let t = &tiles[i];
            let b = &plan.tiles[i];
            let mut enc = encode_tile(t, b.budget, b.byte_budget);
            let w = b.worker;
            let start = self.encoders[w].max(now);
            let work = enc.trials as u64 * b.trial_cost;
            enc.encode_done_ts = start.plus((work as f64 / v.encode_units_per_us).ceil() as u64);
            self.encoders[w] = enc.encode_done_ts;

            let unit = UnitId::Tile {
                frame: frame_id,
                tile: i as u16,
            };
            log.record_stage(unit, Stage::Capture, now)?;
            log.record_stage(unit, Stage::EncodeDone, enc.encode_done_ts)?;
            let payload = VideoPayload {
                frame_id,
                tile_index: i as u16,
                grid_cols: v.grid_cols as u8,
                grid_rows: v.grid_rows as u8,
                mode: enc.mode,
                roi: enc.is_roi,
                tile_w: t.rect.w as u16,
                tile_h: t.rect.h as u16,
                data: enc.data,
            }
            .encode();
            out.push(Outbound {
                unit,
                ready: enc.encode_done_ts,
                packet: MuxPacket::new(StreamClass::Video, 0, now, payload),
            });
        }
        out.sort_by_key(|o| (o.ready, o.unit));
        Ok(out)
    }

    /// Handles a command packet from the operator.
    pub fn receive(
        &mut self,
        p: MuxPacket,
        rx: Timestamp,
        log: &mut LatencyLog,
    ) -> Result<(), SessionError> {
        let unit = unit_of(&p, self.tick_us)?;
        let HapticPayload::Command { position } = HapticPayload::decode(&p.payload)? else {
            return Err(SessionError::Protocol(
                "feedback payload on the command stream".into(),
            ));
        };
        log.record_stage(unit, Stage::PhyRx, rx)?;
        if self
            .commands
            .receive(p.seq, HapticSample::command(p.send_ts, position))
        {
            log.record_stage(unit, Stage::DecodeDone, rx)?;
            self.pending_apply.push((unit, rx));
        } else {
            log.record_event(unit, UnitEvent::Stale, rx);
        }
        Ok(())
    }
}

/// Units decoded at or before `now`; later ones stay queued for a later tick.
fn take_due(pending: &mut Vec<(UnitId, Timestamp)>, now: Timestamp) -> Vec<UnitId> {
    let (due, later): (Vec<_>, Vec<_>) = pending.drain(..).partition(|&(_, rx)| rx <= now);
    *pending = later;
    due.into_iter().map(|(u, _)| u).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_ids_from_packets() {
        let cmd = MuxPacket::new(
            StreamClass::Haptic,
            3,
            Timestamp(7000),
            HapticPayload::Command {
                position: Vec3::ZERO,
            }
            .encode(),
        );
        assert_eq!(unit_of(&cmd, 1000).unwrap(), UnitId::Command(7));
        let v = MuxPacket::new(
            StreamClass::Video,
            0,
            Timestamp(0),
            vec![0, 0, 0, 9, 0, 5, 4, 4],
        );
        assert_eq!(
            unit_of(&v, 1000).unwrap(),
            UnitId::Tile { frame: 9, tile: 5 }
        );
        assert!(unit_of(
            &MuxPacket::new(StreamClass::Control, 0, Timestamp(0), vec![]),
            1000
        )
        .is_err());
    }

    #[test]
    fn frame_capture_times_align_to_ticks() {
        let node = TeleoperatorNode::new(&SessionConfig::default()).unwrap();
        let ts: Vec<u64> = (0..4).map(|f| node.frame_capture_ts(f).0).collect();
        assert_eq!(ts, [0, 34_000, 67_000, 100_000]);
    }

    #[test]
    fn operator_refreshes_a_still_master() {
        let mut cfg = SessionConfig::default();
        cfg.master.trajectory = crate::simworld::Trajectory::Step {
            start: Vec3::new(0.4, 0.0, 0.1),
            target: Vec3::new(0.4, 0.0, 0.1),
            at_s: 0.0,
            duration_s: None,
        };
        let mut op =
            OperatorNode::new(&cfg, MasterMode::Scripted(cfg.master.trajectory.clone())).unwrap();
        let mut log = LatencyLog::new();
        let sent: Vec<u64> = (0..250)
            .filter(|&k| op.tick(k, &mut log).unwrap().command.is_some())
            .collect();
        assert_eq!(sent, [0, 100, 200]);
    }
}
