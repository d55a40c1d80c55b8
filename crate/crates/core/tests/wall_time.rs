use std::collections::BTreeMap;
use std::net::{SocketAddr, UdpSocket};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use teleop_core::session::{
    run_session, start_roles, Dir, Mode, Role, SessionConfig, SessionError, SessionState,
};
use teleop_core::simworld::Trajectory;
use teleop_core::wire::{
    decode_packet, encode_packet, HapticPayload, MuxPacket, VideoPayload, HEADER_LEN, MAGIC,
    VERSION,
};
use teleop_core::{StreamClass, Timestamp, Vec3};

fn loopback() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn wall_config(role: Role, duration_s: f64) -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.mode = Mode::WallTime;
    cfg.role = role;
    cfg.duration_s = duration_s;
    cfg.net.operator_addr = loopback();
    cfg.net.teleoperator_addr = loopback();
    cfg
}

/// Master parked at the arm's starting point so the camera sees the same
/// scene in any run, whatever the command timing.
fn parked(cfg: &mut SessionConfig) {
    let c = cfg.workspace.center();
    cfg.master.trajectory = Trajectory::Step {
        start: c,
        target: c,
        at_s: 0.0,
        duration_s: None,
    };
}

fn unix_us() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap()
        .as_micros() as u64
}

fn control(kind: u8, ts: u64) -> Vec<u8> {
    encode_packet(&MuxPacket::new(
        StreamClass::Control,
        0,
        Timestamp(ts),
        vec![kind],
    ))
    .unwrap()
}

#[test]
fn both_roles_over_loopback() {
    let cfg = wall_config(Role::Both, 0.5);
    let h = start_roles(&cfg).unwrap();
    assert!(matches!(
        h.state(),
        SessionState::Init | SessionState::Running
    ));
    let op = h.local_addr(Role::Operator).unwrap();
    let tele = h.local_addr(Role::Teleoperator).unwrap();
    assert_ne!(op, tele);
    assert_ne!(op.port(), 0);
    let out = h.wait().unwrap();
    let r = &out.report;
    assert_eq!(r.mode, "wall_time");
    assert!(r.clock_sync.is_some());
    assert!(r.classes["video"].complete >= 100, "{}", r.to_json());
    assert!(r.classes["haptic_command"].complete > 0);
    assert!(r.classes["haptic_feedback"].complete > 0);
    assert!(r.tracking.is_some());
    assert!(!out.traces.tracking.is_empty());
}

#[test]
fn teleoperator_packets_match_wire_layout_and_virtual_run() {
    let fake = UdpSocket::bind(loopback()).unwrap();
    fake.set_read_timeout(Some(Duration::from_millis(50)))
        .unwrap();
    let mut cfg = wall_config(Role::Teleoperator, 0.6);
    cfg.net.operator_addr = fake.local_addr().unwrap();
    parked(&mut cfg);
    let h = start_roles(&cfg).unwrap();
    let tele = h.local_addr(Role::Teleoperator).unwrap();

    fake.send_to(&control(0, unix_us()), tele).unwrap();
    let mut captured = Vec::new();
    let mut buf = [0u8; 65_536];
    let deadline = Instant::now() + Duration::from_secs(3);
    while Instant::now() < deadline {
        match fake.recv_from(&mut buf) {
            Ok((n, from)) => {
                assert_eq!(from, tele);
                captured.push(buf[..n].to_vec());
            }
            Err(_) if h.is_finished() => break,
            Err(_) => {}
        }
    }
    h.wait().unwrap();

    let mut seq: BTreeMap<u8, u32> = BTreeMap::new();
    let mut video: Vec<VideoPayload> = Vec::new();
    let mut wall_video: Vec<MuxPacket> = Vec::new();
    let mut kinds = Vec::new();
    for b in &captured {
        assert_eq!(b[..2], MAGIC);
        assert_eq!(b[2], VERSION);
        assert_eq!(
            u16::from_be_bytes([b[17], b[18]]) as usize,
            b.len() - HEADER_LEN
        );
        let p = decode_packet(b).unwrap();
        assert_eq!(&encode_packet(&p).unwrap(), b, "re-encoding changes bytes");
        match p.class {
            StreamClass::Control => kinds.push(p.payload[0]),
            StreamClass::Haptic => {
                assert!(matches!(
                    HapticPayload::decode(&p.payload).unwrap(),
                    HapticPayload::State { .. }
                ));
            }
            StreamClass::Video => {
                video.push(VideoPayload::decode(&p.payload).unwrap());
                wall_video.push(p.clone());
            }
            c => panic!("unexpected class {c:?}"),
        }
        if p.class != StreamClass::Control {
            let next = seq.entry(p.class.code()).or_insert(0);
            assert_eq!(p.seq, *next, "{:?} sequence gap", p.class);
            *next += 1;
        }
    }
    assert_eq!(kinds.first(), Some(&1), "first control packet is ACK");
    assert!(video.len() >= 16 * 10, "only {} tiles", video.len());

    // Encoded tiles and their order within a frame do not depend on timing.
    let mut vcfg = cfg.clone();
    vcfg.mode = Mode::VirtualTime;
    vcfg.role = Role::Both;
    let run = run_session(&vcfg, vcfg.duration_us()).unwrap();
    let mut virt: BTreeMap<u32, Vec<(u16, &MuxPacket)>> = BTreeMap::new();
    for e in &run.mux_events[Dir::Reverse as usize] {
        if e.packet.class == StreamClass::Video {
            let v = VideoPayload::decode(&e.packet.payload).unwrap();
            virt.entry(v.frame_id)
                .or_default()
                .push((v.tile_index, &e.packet));
        }
    }
    let mut wall: BTreeMap<u32, Vec<(u16, &MuxPacket)>> = BTreeMap::new();
    for (v, p) in video.iter().zip(&wall_video) {
        wall.entry(v.frame_id).or_default().push((v.tile_index, p));
    }
    // The first frame is captured at whatever tick the role starts on.
    let mut compared = 0;
    for (frame, tiles) in wall.iter().skip(1) {
        let Some(expected) = virt.get(frame) else {
            continue;
        };
        if tiles.len() != 16 || expected.len() != 16 {
            continue;
        }
        for ((wi, w), (vi, v)) in tiles.iter().zip(expected) {
            assert_eq!(wi, vi, "frame {frame}: tile order differs");
            assert_eq!(w.send_ts, v.send_ts);
            assert_eq!(w.payload, v.payload, "frame {frame} tile {wi}");
        }
        compared += 1;
    }
    assert!(compared >= 10, "only {compared} frames compared");
}

#[test]
fn port_in_use_is_a_bind_error() {
    let taken = UdpSocket::bind(loopback()).unwrap();
    let mut cfg = wall_config(Role::Teleoperator, 1.0);
    cfg.net.teleoperator_addr = taken.local_addr().unwrap();
    match start_roles(&cfg) {
        Err(SessionError::Bind { addr, .. }) => {
            assert_eq!(addr, taken.local_addr().unwrap().to_string())
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("bound a port already in use"),
    }
}

#[test]
fn missing_peer_times_out() {
    let silent = UdpSocket::bind(loopback()).unwrap();
    let mut cfg = wall_config(Role::Operator, 5.0);
    cfg.net.teleoperator_addr = silent.local_addr().unwrap();
    cfg.net.peer_timeout_ms = 300;
    let t0 = Instant::now();
    let h = start_roles(&cfg).unwrap();
    match h.wait() {
        Err(SessionError::PeerTimeout { timeout_ms, .. }) => assert_eq!(timeout_ms, 300),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("session ran without a peer"),
    }
    let took = t0.elapsed();
    assert!(
        took >= Duration::from_millis(300) && took < Duration::from_secs(3),
        "{took:?}"
    );
}

#[test]
fn default_peer_timeout_is_five_seconds() {
    assert_eq!(SessionConfig::default().net.peer_timeout_ms, 5000);
}

#[test]
fn teleoperator_waits_for_operator_then_times_out() {
    let mut cfg = wall_config(Role::Teleoperator, 5.0);
    cfg.net.operator_addr = UdpSocket::bind(loopback()).unwrap().local_addr().unwrap();
    cfg.net.peer_timeout_ms = 200;
    let h = start_roles(&cfg).unwrap();
    assert!(matches!(h.wait(), Err(SessionError::PeerTimeout { .. })));
}

#[test]
fn peer_leaving_ends_the_session() {
    let fake = UdpSocket::bind(loopback()).unwrap();
    fake.set_read_timeout(Some(Duration::from_millis(20)))
        .unwrap();
    let mut cfg = wall_config(Role::Teleoperator, 30.0);
    cfg.net.operator_addr = fake.local_addr().unwrap();
    let h = start_roles(&cfg).unwrap();
    let tele = h.local_addr(Role::Teleoperator).unwrap();
    fake.send_to(&control(0, unix_us()), tele).unwrap();
    let cmd = MuxPacket::new(
        StreamClass::Haptic,
        0,
        Timestamp(0),
        HapticPayload::Command {
            position: Vec3::new(0.3, 0.0, 0.1),
        }
        .encode(),
    );
    fake.send_to(&encode_packet(&cmd).unwrap(), tele).unwrap();
    std::thread::sleep(Duration::from_millis(200));
    fake.send_to(&control(2, 0), tele).unwrap();
    let t0 = Instant::now();
    while !h.is_finished() {
        assert!(t0.elapsed() < Duration::from_secs(2), "BYE ignored");
        std::thread::sleep(Duration::from_millis(5));
    }
    let out = h.wait().unwrap();
    assert_eq!(out.report.classes["haptic_command"].units, 1);
}

#[test]
fn stop_ends_a_running_session() {
    let cfg = wall_config(Role::Both, 60.0);
    let h = start_roles(&cfg).unwrap();
    std::thread::sleep(Duration::from_millis(200));
    assert_eq!(h.state(), SessionState::Running);
    h.stop();
    let out = h.wait().unwrap();
    assert!(out.report.units.total > 0);
}

#[test]
fn virtual_time_config_is_refused() {
    let mut cfg = wall_config(Role::Both, 1.0);
    cfg.mode = Mode::VirtualTime;
    assert!(matches!(start_roles(&cfg), Err(SessionError::Invalid(_))));
}
