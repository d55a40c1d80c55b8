//! Wall-time roles: the operator and teleoperator ends exchanging wire
//! packets over UDP, paced by the real clock.
//!
//! Control packets (class `Control`, one-byte payload) carry the handshake:
//! the operator repeats HELLO (its session epoch as UNIX microseconds in
//! `send_ts`) until the teleoperator answers ACK; either side sends BYE when
//! it stops. Split-process runs assume the two hosts' clocks agree.

use std::collections::BTreeMap;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use crate::metrics::{
    build_report, LatencyLog, SessionReport, Stage, Summary, TraceMeta, TraceSet, TrackingRow,
    UnitEvent,
};
use crate::mux::Mux;
use crate::simworld::{LiveInput, MasterMode};
use crate::types::{StreamClass, Timestamp, Vec3};
use crate::wire::{decode_packet, encode_packet, HapticPayload, MuxPacket};

use super::config::{MasterKind, Mode, Role, SessionConfig};
use super::gateway::{gateway_serve, ConsoleState, FrameSnapshot, GatewayHandle};
use super::node::{unit_of, OperatorNode, Outbound, TeleoperatorNode};
use super::SessionError;

const HELLO: u8 = 0;
const ACK: u8 = 1;
const BYE: u8 = 2;
const HELLO_INTERVAL: Duration = Duration::from_millis(100);
/// Longest sleep between socket polls.
const POLL: Duration = Duration::from_micros(200);
const CONSOLE_FRAME_INTERVAL_US: u64 = 50_000;
const CONSOLE_STATS_INTERVAL_US: u64 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Init,
    Running,
    Ended,
}

/// What a finished wall-time session produced.
#[derive(Debug, Clone)]
pub struct WallOutcome {
    pub report: SessionReport,
    pub traces: TraceSet,
}

#[derive(Debug, Default)]
struct RoleOutput {
    master: BTreeMap<u64, Vec3>,
    slave: BTreeMap<u64, (Vec3, bool)>,
}

/// A running wall-time session.
pub struct SessionHandle {
    cfg: SessionConfig,
    state: Arc<Mutex<SessionState>>,
    stop: Arc<AtomicBool>,
    log: Arc<Mutex<LatencyLog>>,
    roles: Vec<(Role, JoinHandle<Result<RoleOutput, SessionError>>)>,
    local_addrs: Vec<(Role, SocketAddr)>,
    gateway: Option<GatewayHandle>,
    live: LiveInput,
    console: Arc<Mutex<ConsoleState>>,
}

impl SessionHandle {
    pub fn state(&self) -> SessionState {
        *self.state.lock().unwrap()
    }

    /// Bound UDP address of a local role.
    pub fn local_addr(&self, role: Role) -> Option<SocketAddr> {
        self.local_addrs
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, a)| *a)
    }

    pub fn gateway_addr(&self) -> Option<SocketAddr> {
        self.gateway.as_ref().map(|g| g.local_addr())
    }

    pub fn live_input(&self) -> &LiveInput {
        &self.live
    }

    pub fn console(&self) -> Arc<Mutex<ConsoleState>> {
        self.console.clone()
    }

    /// Asks every role to finish; [`SessionHandle::wait`] collects the result.
    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.roles.iter().all(|(_, h)| h.is_finished())
    }

    /// Joins the roles and builds the report from everything this process recorded.
    pub fn wait(mut self) -> Result<WallOutcome, SessionError> {
        let mut outputs = Vec::new();
        let mut first_err = None;
        for (role, h) in self.roles.drain(..) {
            match h.join() {
                Ok(Ok(out)) => outputs.push((role, out)),
                Ok(Err(e)) => {
                    self.stop.store(true, Ordering::SeqCst);
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err
                        .get_or_insert(SessionError::Protocol(format!("{role:?} role panicked")));
                }
            }
        }
        if let Some(g) = self.gateway.take() {
            g.shutdown();
        }
        *self.state.lock().unwrap() = SessionState::Ended;
        if let Some(e) = first_err {
            return Err(e);
        }

        let mut master = BTreeMap::new();
        let mut slave = BTreeMap::new();
        let mut fallback = BTreeMap::new();
        for (role, out) in outputs {
            master.extend(out.master);
            match role {
                Role::Operator => fallback.extend(out.slave),
                _ => slave.extend(out.slave),
            }
        }
        if slave.is_empty() {
            slave = fallback;
        }
        let tracking = master
            .iter()
            .filter_map(|(k, m)| slave.get(k).map(|(s, c)| TrackingRow::new(*k, *m, *s, *c)))
            .collect();

        let log = std::mem::take(&mut *self.log.lock().unwrap());
        let mut traces = TraceSet {
            meta: TraceMeta {
                mode: Mode::WallTime.name().to_string(),
                seed: self.cfg.seed,
                duration_us: self.cfg.duration_us(),
                tick_us: self.cfg.tick_us(),
                warmup_us: self.cfg.metrics.warmup_us,
            },
            rows: log.into_rows(),
            tracking,
        };
        traces.sort_rows();
        let report = build_report(&traces)?;
        Ok(WallOutcome { report, traces })
    }
}

impl Drop for SessionHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(g) = self.gateway.take() {
            g.shutdown();
        }
    }
}

fn bind(addr: SocketAddr) -> Result<UdpSocket, SessionError> {
    let sock = UdpSocket::bind(addr).map_err(|e| SessionError::Bind {
        addr: addr.to_string(),
        reason: e.to_string(),
    })?;
    sock.set_nonblocking(true)
        .map_err(|e| SessionError::Io(e.to_string()))?;
    Ok(sock)
}

fn unix_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

fn control(kind: u8, ts: Timestamp) -> Vec<u8> {
    encode_packet(&MuxPacket::new(StreamClass::Control, 0, ts, vec![kind]))
        .expect("control packet fits")
}

fn control_kind(p: &MuxPacket) -> Option<u8> {
    (p.class == StreamClass::Control)
        .then(|| p.payload.first().copied())
        .flatten()
}

/// Binds the sockets of every role in `cfg.role`, starts them, and returns
/// at once; the handshake and run happen on background threads.
pub fn start_roles(cfg: &SessionConfig) -> Result<SessionHandle, SessionError> {
    cfg.validate()?;
    if cfg.mode != Mode::WallTime {
        return Err(SessionError::Invalid(vec![super::ConfigIssue {
            path: "mode".into(),
            message: "roles run in wall-time mode".into(),
        }]));
    }
    let stop = Arc::new(AtomicBool::new(false));
    let state = Arc::new(Mutex::new(SessionState::Init));
    let log = Arc::new(Mutex::new(LatencyLog::new()));
    let live = LiveInput::new();
    let console = Arc::new(Mutex::new(ConsoleState::default()));

    let mut sockets = Vec::new();
    if matches!(cfg.role, Role::Both | Role::Operator) {
        sockets.push((Role::Operator, bind(cfg.net.operator_addr)?));
    }
    if matches!(cfg.role, Role::Both | Role::Teleoperator) {
        sockets.push((Role::Teleoperator, bind(cfg.net.teleoperator_addr)?));
    }
    let local_addrs: Vec<(Role, SocketAddr)> = sockets
        .iter()
        .map(|(r, s)| s.local_addr().map(|a| (*r, a)))
        .collect::<Result<_, _>>()
        .map_err(|e| SessionError::Io(e.to_string()))?;
    let peer_of = |role: Role| -> SocketAddr {
        let configured = match role {
            Role::Operator => cfg.net.teleoperator_addr,
            _ => cfg.net.operator_addr,
        };
        let other = if role == Role::Operator {
            Role::Teleoperator
        } else {
            Role::Operator
        };
        local_addrs
            .iter()
            .find(|(r, _)| *r == other)
            .map_or(configured, |(_, a)| *a)
    };

    let gateway = match (cfg.net.gateway_port, cfg.role) {
        (Some(port), Role::Both | Role::Operator) => {
            Some(gateway_serve(port, console.clone(), live.clone())?)
        }
        _ => None,
    };

    // In one process both roles share the epoch directly.
    let shared_epoch = (cfg.role == Role::Both).then(Instant::now);
    let mut roles = Vec::new();
    for (role, sock) in sockets {
        let ctx = RoleCtx {
            cfg: cfg.clone(),
            sock,
            peer: peer_of(role),
            stop: stop.clone(),
            state: state.clone(),
            log: log.clone(),
            shared_epoch,
        };
        let handle = match role {
            Role::Operator => {
                let mode = match cfg.master.source {
                    MasterKind::Scripted => MasterMode::Scripted(cfg.master.trajectory.clone()),
                    MasterKind::Live => MasterMode::Live(live.clone()),
                };
                let console = console.clone();
                let split = cfg.role == Role::Operator;
                std::thread::Builder::new()
                    .name("operator".into())
                    .spawn(move || run_operator(ctx, mode, console, split))
            }
            _ => std::thread::Builder::new()
                .name("teleoperator".into())
                .spawn(move || run_teleoperator(ctx)),
        }
        .map_err(|e| SessionError::Io(e.to_string()))?;
        roles.push((role, handle));
    }

    Ok(SessionHandle {
        cfg: cfg.clone(),
        state,
        stop,
        log,
        roles,
        local_addrs,
        gateway,
        live,
        console,
    })
}

struct RoleCtx {
    cfg: SessionConfig,
    sock: UdpSocket,
    peer: SocketAddr,
    stop: Arc<AtomicBool>,
    state: Arc<Mutex<SessionState>>,
    log: Arc<Mutex<LatencyLog>>,
    shared_epoch: Option<Instant>,
}

impl RoleCtx {
    fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.net.peer_timeout_ms)
    }

    fn peer_timeout(&self) -> SessionError {
        SessionError::PeerTimeout {
            peer: self.peer.to_string(),
            timeout_ms: self.cfg.net.peer_timeout_ms,
        }
    }

    /// One datagram from the peer if any is waiting.
    fn try_recv(&self) -> Result<Option<MuxPacket>, SessionError> {
        let mut buf = [0u8; 65_536];
        loop {
            let (n, from) = match self.sock.recv_from(&mut buf) {
                Ok(r) => r,
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => return Ok(None),
                // ICMP port unreachable surfaces as a refused receive on some platforms.
                Err(e) if e.kind() == std::io::ErrorKind::ConnectionRefused => return Ok(None),
                Err(e) => return Err(SessionError::Io(e.to_string())),
            };
            if from != self.peer {
                log::debug!("ignoring datagram from {from}");
                continue;
            }
            match decode_packet(&buf[..n]) {
                Ok(p) => return Ok(Some(p)),
                Err(e) => log::warn!("dropping malformed datagram from {from}: {e}"),
            }
        }
    }

    fn send(&self, bytes: &[u8]) {
        if let Err(e) = self.sock.send_to(bytes, self.peer) {
            log::debug!("send to {} failed: {e}", self.peer);
        }
    }
}

/// Sender half shared by both roles: mux, per-class sequence numbers, and
/// packets waiting for their ready time.
struct Sender {
    tick_us: u64,
    mux: Mux,
    seq: [u32; StreamClass::COUNT],
    waiting: Vec<Outbound>,
}

impl Sender {
    fn new(cfg: &SessionConfig) -> Sender {
        Sender {
            tick_us: cfg.tick_us(),
            mux: Mux::from_config(&cfg.mux),
            seq: [0; StreamClass::COUNT],
            waiting: Vec::new(),
        }
    }

    fn submit(&mut self, o: Outbound) {
        self.waiting.push(o);
    }

    fn flush(&mut self, now: Timestamp, ctx: &RoleCtx) -> Result<(), SessionError> {
        let (mut ready, later): (Vec<Outbound>, Vec<Outbound>) =
            self.waiting.drain(..).partition(|o| o.ready <= now);
        self.waiting = later;
        // Same order the virtual-time driver would enqueue them in.
        ready.sort_by_key(|o| o.ready);
        let mut log = ctx.log.lock().unwrap();
        for o in ready {
            if let Some(evicted) = self.mux.enqueue(o.packet, now) {
                log.record_event(
                    unit_of(&evicted.packet, self.tick_us)?,
                    UnitEvent::MuxDrop,
                    now,
                );
            }
        }
        while let Some(mut ev) = self.mux.dequeue_next(now) {
            let c = ev.packet.class.index();
            ev.packet.seq = self.seq[c];
            self.seq[c] = self.seq[c].wrapping_add(1);
            let unit = unit_of(&ev.packet, self.tick_us)?;
            log.record_stage(unit, Stage::MuxOut, now)?;
            ctx.send(&encode_packet(&ev.packet)?);
        }
        Ok(())
    }
}

struct Clock {
    epoch: Instant,
}

impl Clock {
    fn now(&self) -> Timestamp {
        Timestamp(self.epoch.elapsed().as_micros() as u64)
    }

    fn until(&self, ts: Timestamp) -> Duration {
        Duration::from_micros(ts.0.saturating_sub(self.now().0))
    }
}

fn end_ts(cfg: &SessionConfig) -> Option<Timestamp> {
    let d = cfg.duration_us();
    (d > 0).then_some(Timestamp(d))
}

fn run_operator(
    ctx: RoleCtx,
    mode: MasterMode,
    console: Arc<Mutex<ConsoleState>>,
    split: bool,
) -> Result<RoleOutput, SessionError> {
    let cfg = &ctx.cfg;
    let epoch = ctx.shared_epoch.unwrap_or_else(Instant::now);
    let epoch_unix = unix_us().saturating_sub(epoch.elapsed().as_micros() as u64);
    let clock = Clock { epoch };

    // Handshake.
    let started = Instant::now();
    let mut last_hello: Option<Instant> = None;
    loop {
        if ctx.stopped() {
            return Ok(RoleOutput::default());
        }
        if started.elapsed() >= ctx.timeout() {
            return Err(ctx.peer_timeout());
        }
        if last_hello.is_none_or(|t| t.elapsed() >= HELLO_INTERVAL) {
            ctx.send(&control(HELLO, Timestamp(epoch_unix)));
            last_hello = Some(Instant::now());
        }
        match ctx.try_recv()? {
            Some(p) if control_kind(&p) == Some(ACK) => break,
            Some(_) => {}
            None => std::thread::sleep(Duration::from_millis(1)),
        }
    }
    *ctx.state.lock().unwrap() = SessionState::Running;
    log::info!("operator connected to {}", ctx.peer);

    let tick_us = cfg.tick_us();
    let end = end_ts(cfg);
    let mut node = OperatorNode::new(cfg, mode)?;
    let mut tx = Sender::new(cfg);
    let mut out = RoleOutput::default();
    let mut k = clock.now().0.div_ceil(tick_us);
    let mut last_rx = Instant::now();
    let mut last_frame_push = 0u64;
    let mut last_stats = 0u64;
    let mut shown_frame = None;

    loop {
        let now = clock.now();
        if ctx.stopped() || end.is_some_and(|e| now >= e) {
            ctx.send(&control(BYE, now));
            break;
        }
        while clock.now() >= Timestamp(k * tick_us) {
            let t = {
                let mut log = ctx.log.lock().unwrap();
                node.tick(k, &mut log)?
            };
            out.master.insert(k, t.master);
            if split {
                if let Some(fb) = node.feedback() {
                    out.slave.insert(k, (fb.position, false));
                }
            }
            if let Some(c) = t.command {
                tx.submit(c);
            }
            k += 1;
        }
        let now = clock.now();
        {
            let mut log = ctx.log.lock().unwrap();
            node.expire(now, &mut log)?;
        }
        tx.flush(now, &ctx)?;

        if now.0 >= last_frame_push + CONSOLE_FRAME_INTERVAL_US {
            last_frame_push = now.0;
            let mut c = console.lock().unwrap();
            if let Some(fb) = node.feedback() {
                c.tip = fb.position;
                c.force = fb.force;
                c.state_ts = fb.ts;
            }
            let latest = node.screen().latest_frame();
            if let Some(frame_id) = latest.filter(|_| latest != shown_frame) {
                shown_frame = latest;
                let g = node.screen().grid();
                c.frame = Some(FrameSnapshot {
                    frame_id,
                    width: g.width(),
                    height: g.height(),
                    grid_cols: g.cols,
                    grid_rows: g.rows,
                    pixels: node.screen().pixels().to_vec(),
                });
            }
            if now.0 >= last_stats + CONSOLE_STATS_INTERVAL_US {
                last_stats = now.0;
                c.stats = e2e_by_class(&ctx.log.lock().unwrap());
            }
        }

        let mut bye = false;
        while let Some(p) = ctx.try_recv()? {
            last_rx = Instant::now();
            match control_kind(&p) {
                Some(BYE) => bye = true,
                Some(_) => {}
                None => {
                    let rx = clock.now();
                    let mut log = ctx.log.lock().unwrap();
                    if let Err(e) = node.receive(p, rx, &mut log) {
                        log::warn!("operator dropped a packet: {e}");
                    }
                }
            }
        }
        if bye {
            break;
        }
        if last_rx.elapsed() >= ctx.timeout() {
            log::warn!("teleoperator silent for {:?}; ending", ctx.timeout());
            break;
        }
        std::thread::sleep(clock.until(Timestamp(k * tick_us)).min(POLL));
    }
    console.lock().unwrap().stats = e2e_by_class(&ctx.log.lock().unwrap());
    *ctx.state.lock().unwrap() = SessionState::Ended;
    Ok(out)
}

fn run_teleoperator(ctx: RoleCtx) -> Result<RoleOutput, SessionError> {
    let cfg = &ctx.cfg;
    let started = Instant::now();
    let epoch = loop {
        if ctx.stopped() {
            return Ok(RoleOutput::default());
        }
        if started.elapsed() >= ctx.timeout() {
            return Err(ctx.peer_timeout());
        }
        match ctx.try_recv()? {
            Some(p) if control_kind(&p) == Some(HELLO) => {
                break ctx.shared_epoch.unwrap_or_else(|| {
                    let ago = unix_us().saturating_sub(p.send_ts.0);
                    Instant::now()
                        .checked_sub(Duration::from_micros(ago))
                        .unwrap_or_else(Instant::now)
                });
            }
            Some(_) => {}
            None => std::thread::sleep(Duration::from_millis(1)),
        }
    };
    let clock = Clock { epoch };
    ctx.send(&control(ACK, clock.now()));
    *ctx.state.lock().unwrap() = SessionState::Running;
    log::info!("teleoperator serving {}", ctx.peer);

    let tick_us = cfg.tick_us();
    let end = end_ts(cfg);
    let mut node = TeleoperatorNode::new(cfg)?;
    let mut tx = Sender::new(cfg);
    let mut out = RoleOutput::default();
    let mut k = clock.now().0.div_ceil(tick_us);
    let mut last_rx = Instant::now();

    loop {
        let now = clock.now();
        if ctx.stopped() || end.is_some_and(|e| now >= e) {
            ctx.send(&control(BYE, now));
            break;
        }
        while clock.now() >= Timestamp(k * tick_us) {
            let t = {
                let mut log = ctx.log.lock().unwrap();
                node.tick(k, &mut log)?
            };
            out.slave.insert(k, (t.arm.tip, t.arm.in_contact));
            if let Some(f) = t.feedback {
                tx.submit(f);
            }
            for tile in t.tiles {
                tx.submit(tile);
            }
            k += 1;
        }
        tx.flush(clock.now(), &ctx)?;

        let mut bye = false;
        while let Some(p) = ctx.try_recv()? {
            last_rx = Instant::now();
            match control_kind(&p) {
                Some(BYE) => bye = true,
                // A repeated HELLO means our ACK was lost.
                Some(HELLO) => ctx.send(&control(ACK, clock.now())),
                Some(_) => {}
                None => {
                    if HapticPayload::decode(&p.payload).is_err() {
                        log::warn!("teleoperator ignoring non-command packet");
                        continue;
                    }
                    let rx = clock.now();
                    let mut log = ctx.log.lock().unwrap();
                    if let Err(e) = node.receive(p, rx, &mut log) {
                        log::warn!("teleoperator dropped a packet: {e}");
                    }
                }
            }
        }
        if bye {
            break;
        }
        if last_rx.elapsed() >= ctx.timeout() {
            log::warn!("operator silent for {:?}; ending", ctx.timeout());
            break;
        }
        std::thread::sleep(clock.until(Timestamp(k * tick_us)).min(POLL));
    }
    *ctx.state.lock().unwrap() = SessionState::Ended;
    Ok(out)
}

/// End-to-end statistics per class over every completed unit so far.
fn e2e_by_class(log: &LatencyLog) -> BTreeMap<String, Summary> {
    let mut by: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for (u, r) in log.records() {
        if let Some(d) = r.e2e_us() {
            by.entry(u.class_name()).or_default().push(d);
        }
    }
    by.into_iter()
        .filter_map(|(k, v)| Summary::of(&v).map(|s| (k.to_string(), s)))
        .collect()
}
