//! The simulated teleoperator side: slave tip kinematics with stop-on-surface
//! contact, the synthetic top-down camera, and master trajectories.

use std::f64::consts::TAU;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::haptic::HapticSample;
use crate::types::{Aabb, Timestamp, Vec3};
use crate::video::{project_tip, Frame};

pub const BACKGROUND: u8 = 32;
pub const OBSTACLE: u8 = 128;
pub const TIP: u8 = 255;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Workspace {
    pub bounds: Aabb,
    pub obstacles: Vec<Aabb>,
    /// Slave tip speed limit, m/s.
    pub v_max: f64,
    /// Set from the haptic rate by the session.
    #[serde(skip)]
    pub tick_us: u64,
}

impl Default for Workspace {
    fn default() -> Self {
        Workspace {
            bounds: Aabb::new(Vec3::new(0.2, -0.2, 0.0), Vec3::new(0.6, 0.2, 0.2)),
            obstacles: vec![Aabb::new(
                Vec3::new(0.45, -0.05, 0.0),
                Vec3::new(0.55, 0.05, 0.2),
            )],
            v_max: 0.5,
            tick_us: 1000,
        }
    }
}

impl Workspace {
    pub fn center(&self) -> Vec3 {
        self.bounds.center()
    }

    pub fn tick_s(&self) -> f64 {
        self.tick_us as f64 * 1e-6
    }

    /// Strictly inside some obstacle.
    pub fn is_blocked(&self, p: Vec3) -> bool {
        self.obstacles.iter().any(|o| o.contains_strictly(p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmState {
    pub tip: Vec3,
    pub last_command: Vec3,
    pub in_contact: bool,
}

impl ArmState {
    pub fn at(tip: Vec3) -> ArmState {
        ArmState {
            tip,
            last_command: tip,
            in_contact: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: ArmState,
    /// The command lay outside the workspace and was clamped.
    pub clamped: bool,
}

/// Earliest parameter `t` in `[0, 1)` at which `p0 + t * dir` enters the open
/// interior of `b`, with the face axis and coordinate crossed (if any).
fn interior_entry(p0: Vec3, dir: Vec3, b: &Aabb) -> Option<(f64, Option<(usize, f64)>)> {
    let (mut t_enter, mut t_exit) = (0.0f64, 1.0f64);
    let mut face = None;
    for i in 0..3 {
        let (p, d, lo, hi) = (p0.axis(i), dir.axis(i), b.min.axis(i), b.max.axis(i));
        if d == 0.0 {
            if !(p > lo && p < hi) {
                return None;
            }
            continue;
        }
        let (t1, t2) = ((lo - p) / d, (hi - p) / d);
        let (near, far, near_face) = if t1 < t2 { (t1, t2, lo) } else { (t2, t1, hi) };
        if near > t_enter {
            t_enter = near;
            face = Some((i, near_face));
        }
        t_exit = t_exit.min(far);
    }
    (t_enter < t_exit && t_enter < 1.0).then_some((t_enter, face))
}

/// Moves the tip toward `commanded` at most `v_max * dt_s`, stopping on the
/// first obstacle surface the motion would cross.
pub fn step_slave(state: &ArmState, commanded: Vec3, ws: &Workspace, dt_s: f64) -> StepOutcome {
    assert!(dt_s > 0.0, "dt must be positive");
    let target = ws.bounds.clamp(commanded);
    let clamped = target != commanded;

    let delta = target - state.tip;
    let dist = delta.norm();
    let reach = ws.v_max * dt_s;
    let motion = if dist <= reach {
        delta
    } else {
        delta * (reach / dist)
    };

    let mut hit: Option<(f64, Option<(usize, f64)>)> = None;
    if dist > 0.0 {
        for ob in &ws.obstacles {
            if let Some(e) = interior_entry(state.tip, motion, ob) {
                if hit.is_none_or(|h| e.0 < h.0) {
                    hit = Some(e);
                }
            }
        }
    }

    let (tip, blocked) = match hit {
        Some((t, face)) => {
            let mut p = state.tip + motion * t;
            if let Some((axis, v)) = face {
                p.set_axis(axis, v);
            }
            (p, true)
        }
        None if dist <= reach => (target, false),
        None => (state.tip + motion, false),
    };

    let in_contact = if blocked {
        true
    } else if !ws.is_blocked(target) && !ws.obstacles.iter().any(|o| o.on_surface(tip)) {
        false
    } else {
        state.in_contact
    };

    StepOutcome {
        state: ArmState {
            tip,
            last_command: target,
            in_contact,
        },
        clamped,
    }
}

/// Deterministic top-down raster: background, obstacles in list order, then
/// a 3x3 tip marker.
pub fn render_camera(ws: &Workspace, arm: &ArmState, w: usize, h: usize) -> Frame {
    let mut f = Frame::filled(0, w, h, BACKGROUND);
    for ob in &ws.obstacles {
        let (u0, v0) = project_tip(ob.min, &ws.bounds, w, h);
        let (u1, v1) = project_tip(ob.max, &ws.bounds, w, h);
        for v in v0..=v1 {
            for u in u0..=u1 {
                f.set(u, v, OBSTACLE);
            }
        }
    }
    let (tu, tv) = project_tip(arm.tip, &ws.bounds, w, h);
    for v in tv.saturating_sub(1)..=(tv + 1).min(h - 1) {
        for u in tu.saturating_sub(1)..=(tu + 1).min(w - 1) {
            f.set(u, v, TIP);
        }
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t_s: f64,
    pub position: Vec3,
}

/// Scripted master motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    /// `center + amplitude * sin(2 pi f t + phase)` per axis, one frequency.
    Sinusoid {
        center: Vec3,
        amplitude: Vec3,
        frequency_hz: f64,
        #[serde(default)]
        phase: Vec3,
        #[serde(default)]
        duration_s: Option<f64>,
    },
    /// As `Sinusoid` with a frequency per axis.
    Lissajous {
        center: Vec3,
        amplitude: Vec3,
        frequency_hz: Vec3,
        #[serde(default)]
        phase: Vec3,
        #[serde(default)]
        duration_s: Option<f64>,
    },
    /// `start` before `at_s`, `target` from then on.
    Step {
        start: Vec3,
        target: Vec3,
        at_s: f64,
        #[serde(default)]
        duration_s: Option<f64>,
    },
    /// Piecewise-linear through time-ordered waypoints.
    Scripted { waypoints: Vec<Waypoint> },
}

impl Default for Trajectory {
    fn default() -> Self {
        Trajectory::Lissajous {
            center: Vec3::new(0.35, 0.0, 0.1),
            amplitude: Vec3::new(0.1, 0.12, 0.05),
            frequency_hz: Vec3::new(0.25, 0.5, 0.25),
            phase: Vec3::ZERO,
            duration_s: None,
        }
    }
}

impl Trajectory {
    pub fn duration_s(&self) -> Option<f64> {
        match self {
            Trajectory::Sinusoid { duration_s, .. }
            | Trajectory::Lissajous { duration_s, .. }
            | Trajectory::Step { duration_s, .. } => *duration_s,
            Trajectory::Scripted { waypoints } => waypoints.last().map(|w| w.t_s),
        }
    }

    /// Largest speed reached, m/s (analytic for periodic kinds).
    pub fn peak_speed(&self) -> f64 {
        match self {
            Trajectory::Sinusoid {
                amplitude,
                frequency_hz,
                ..
            } => amplitude.norm() * TAU * frequency_hz,
            Trajectory::Lissajous {
                amplitude,
                frequency_hz,
                ..
            } => {
                Vec3::new(
                    amplitude.x * frequency_hz.x,
                    amplitude.y * frequency_hz.y,
                    amplitude.z * frequency_hz.z,
                )
                .norm()
                    * TAU
            }
            Trajectory::Step { .. } => f64::INFINITY,
            Trajectory::Scripted { waypoints } => waypoints
                .windows(2)
                .map(|w| (w[1].position - w[0].position).norm() / (w[1].t_s - w[0].t_s))
                .fold(0.0, f64::max),
        }
    }
}

fn sines(center: Vec3, amp: Vec3, freq: Vec3, phase: Vec3, t: f64) -> Vec3 {
    Vec3::new(
        center.x + amp.x * (TAU * freq.x * t + phase.x).sin(),
        center.y + amp.y * (TAU * freq.y * t + phase.y).sin(),
        center.z + amp.z * (TAU * freq.z * t + phase.z).sin(),
    )
}

/// Position at time `t` seconds; `t` outside `[0, duration]` yields the endpoint.
pub fn gen_trajectory(traj: &Trajectory, t: f64) -> Vec3 {
    let t = match traj.duration_s() {
        Some(d) => t.clamp(0.0, d.max(0.0)),
        None => t.max(0.0),
    };
    match traj {
        Trajectory::Sinusoid {
            center,
            amplitude,
            frequency_hz,
            phase,
            ..
        } => {
            let f = *frequency_hz;
            sines(*center, *amplitude, Vec3::new(f, f, f), *phase, t)
        }
        Trajectory::Lissajous {
            center,
            amplitude,
            frequency_hz,
            phase,
            ..
        } => sines(*center, *amplitude, *frequency_hz, *phase, t),
        Trajectory::Step {
            start,
            target,
            at_s,
            ..
        } => {
            if t < *at_s {
                *start
            } else {
                *target
            }
        }
        Trajectory::Scripted { waypoints } => {
            let Some(first) = waypoints.first() else {
                return Vec3::ZERO;
            };
            if t <= first.t_s {
                return first.position;
            }
            let i = waypoints.partition_point(|w| w.t_s <= t);
            if i >= waypoints.len() {
                return waypoints[waypoints.len() - 1].position;
            }
            let (a, b) = (waypoints[i - 1], waypoints[i]);
            let s = (t - a.t_s) / (b.t_s - a.t_s);
            a.position + (b.position - a.position) * s
        }
    }
}

/// Shared slot for operator input arriving from the console gateway.
#[derive(Debug, Clone, Default)]
pub struct LiveInput {
    latest: Arc<Mutex<Option<Vec3>>>,
    connected: Arc<AtomicBool>,
}

impl LiveInput {
    pub fn new() -> LiveInput {
        LiveInput::default()
    }

    pub fn set(&self, p: Vec3) {
        *self.latest.lock().unwrap() = Some(p);
    }

    pub fn get(&self) -> Option<Vec3> {
        *self.latest.lock().unwrap()
    }

    pub fn set_connected(&self, c: bool) {
        self.connected.store(c, Ordering::Relaxed);
    }

    pub fn is_connected(&self) -> bool {
        self.connected.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone)]
pub enum MasterMode {
    Scripted(Trajectory),
    Live(LiveInput),
}

/// One master sample per tick.
#[derive(Debug, Clone)]
pub struct MasterSource {
    mode: MasterMode,
    hold: Vec3,
    tick_us: u64,
    warned: bool,
}

impl MasterSource {
    /// `hold` is the value emitted in live mode before any input (the workspace center).
    pub fn new(mode: MasterMode, hold: Vec3, tick_us: u64) -> MasterSource {
        MasterSource {
            mode,
            hold,
            tick_us,
            warned: false,
        }
    }

    pub fn sample(&mut self, tick: u64) -> HapticSample {
        let ts = Timestamp(tick * self.tick_us);
        let position = match &self.mode {
            MasterMode::Scripted(t) => gen_trajectory(t, ts.0 as f64 * 1e-6),
            MasterMode::Live(input) => {
                if !input.is_connected() && !self.warned {
                    log::warn!(
                        "live master has no console connected; holding {:?}",
                        self.hold
                    );
                    self.warned = true;
                }
                if let Some(p) = input.get() {
                    self.hold = p;
                }
                self.hold
            }
        };
        HapticSample::command(ts, position)
    }

    /// Samples for ticks `0..n`.
    pub fn samples(&mut self, n: u64) -> Vec<HapticSample> {
        (0..n).map(|k| self.sample(k)).collect()
    }
}
