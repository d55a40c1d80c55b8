use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use teleop_core::session::{
    gateway_serve, start_roles, ConsoleState, MasterKind, Mode, Role, ServerMessage, SessionConfig,
    STATS_PERIOD_MS,
};
use teleop_core::simworld::LiveInput;
use teleop_core::Vec3;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Ws = WebSocket<MaybeTlsStream<TcpStream>>;

fn connect(addr: SocketAddr) -> Ws {
    let (ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(3))).unwrap();
    }
    ws
}

fn next(ws: &mut Ws) -> Option<ServerMessage> {
    loop {
        match ws.read() {
            Ok(Message::Text(t)) => return Some(serde_json::from_str(t.as_str()).unwrap()),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => {}
        }
    }
}

fn send(ws: &mut Ws, text: &str) {
    ws.send(Message::text(text)).unwrap();
}

fn wait_for(ws: &mut Ws, pred: impl Fn(&ServerMessage) -> bool) -> ServerMessage {
    let t0 = Instant::now();
    while t0.elapsed() < Duration::from_secs(3) {
        match next(ws) {
            Some(m) if pred(&m) => return m,
            Some(_) => {}
            None => break,
        }
    }
    panic!("expected message never arrived");
}

fn standalone() -> (
    teleop_core::session::GatewayHandle,
    Arc<Mutex<ConsoleState>>,
    LiveInput,
) {
    let state = Arc::new(Mutex::new(ConsoleState::default()));
    let live = LiveInput::new();
    let g = gateway_serve(0, state.clone(), live.clone()).unwrap();
    (g, state, live)
}

#[test]
fn first_console_controls_second_observes() {
    let (g, _state, live) = standalone();
    let mut a = connect(g.local_addr());
    assert_eq!(
        next(&mut a),
        Some(ServerMessage::Hello {
            role: "controller".into()
        })
    );
    let mut b = connect(g.local_addr());
    assert_eq!(
        next(&mut b),
        Some(ServerMessage::Hello {
            role: "observer".into()
        })
    );

    send(&mut b, r#"{"cmd":"tip","x":0.5,"y":0.0,"z":0.0}"#);
    let err = wait_for(&mut b, |m| matches!(m, ServerMessage::Error { .. }));
    assert!(matches!(err, ServerMessage::Error { message } if message.contains("observer")));
    assert_eq!(live.get(), None);

    send(&mut a, r#"{"cmd":"tip","x":0.2,"y":0.1,"z":0}"#);
    let t0 = Instant::now();
    while live.get().is_none() && t0.elapsed() < Duration::from_secs(2) {
        std::thread::sleep(Duration::from_millis(2));
    }
    assert_eq!(live.get(), Some(Vec3::new(0.2, 0.1, 0.0)));
    assert!(live.is_connected());

    // The observer stream keeps flowing.
    wait_for(&mut b, |m| matches!(m, ServerMessage::State { .. }));

    a.close(None).unwrap();
    while next(&mut a).is_some() {}
    let t0 = Instant::now();
    while live.is_connected() && t0.elapsed() < Duration::from_secs(2) {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(!live.is_connected());
    let mut c = connect(g.local_addr());
    assert_eq!(
        next(&mut c),
        Some(ServerMessage::Hello {
            role: "controller".into()
        })
    );
    g.shutdown();
}

#[test]
fn malformed_message_gets_error_and_close() {
    let (g, _state, live) = standalone();
    for bad in [
        "not json",
        r#"{"cmd":"fly"}"#,
        r#"{"cmd":"tip","x":0.1}"#,
        r#"{"cmd":"tip","x":0.1,"y":0,"z":0,"extra":1}"#,
    ] {
        let mut ws = connect(g.local_addr());
        next(&mut ws);
        send(&mut ws, bad);
        let m = wait_for(&mut ws, |m| matches!(m, ServerMessage::Error { .. }));
        assert!(matches!(m, ServerMessage::Error { message } if message.contains("malformed")));
        let t0 = Instant::now();
        while next(&mut ws).is_some() {
            assert!(
                t0.elapsed() < Duration::from_secs(2),
                "connection left open after {bad:?}"
            );
        }
    }
    assert_eq!(live.get(), None);
}

#[test]
fn pushes_state_frame_and_stats_at_most_20_hz() {
    let (g, state, _live) = standalone();
    {
        let mut s = state.lock().unwrap();
        s.tip = Vec3::new(0.3, 0.0, 0.1);
        s.frame = Some(teleop_core::session::FrameSnapshot {
            frame_id: 7,
            width: 4,
            height: 2,
            grid_cols: 2,
            grid_rows: 1,
            pixels: (0..8).collect(),
        });
    }
    let mut ws = connect(g.local_addr());
    next(&mut ws);
    let mut state_times = Vec::new();
    let mut frames = 0;
    let t0 = Instant::now();
    while state_times.len() < 6 {
        match next(&mut ws).unwrap() {
            ServerMessage::State { tip, .. } => {
                assert_eq!(tip, [0.3, 0.0, 0.1]);
                state_times.push(t0.elapsed());
            }
            ServerMessage::Frame {
                frame_id,
                pixels,
                width,
                ..
            } => {
                assert_eq!(frame_id, 7);
                assert_eq!(width, 4);
                let px = base64::engine::general_purpose::STANDARD
                    .decode(pixels)
                    .unwrap();
                assert_eq!(px, (0..8).collect::<Vec<u8>>());
                frames += 1;
            }
            _ => {}
        }
    }
    // An unchanged frame is sent once.
    assert_eq!(frames, 1);
    let slack = Duration::from_millis(STATS_PERIOD_MS - 5);
    for w in state_times.windows(2) {
        assert!(w[1] - w[0] >= slack, "{:?}", state_times);
    }
    g.shutdown();
}

#[test]
fn console_drives_live_master() {
    let mut cfg = SessionConfig::default();
    cfg.mode = Mode::WallTime;
    cfg.role = Role::Both;
    cfg.duration_s = 1.0;
    cfg.net.operator_addr = "127.0.0.1:0".parse().unwrap();
    cfg.net.teleoperator_addr = "127.0.0.1:0".parse().unwrap();
    cfg.net.gateway_port = Some(0);
    cfg.master.source = MasterKind::Live;
    let h = start_roles(&cfg).unwrap();
    let mut ws = connect(h.gateway_addr().unwrap());
    assert_eq!(
        next(&mut ws),
        Some(ServerMessage::Hello {
            role: "controller".into()
        })
    );
    send(&mut ws, r#"{"cmd":"tip","x":0.25,"y":0.1,"z":0.05}"#);
    let m = wait_for(&mut ws, |m| matches!(m, ServerMessage::Frame { .. }));
    assert!(matches!(
        m,
        ServerMessage::Frame {
            width: 128,
            height: 128,
            ..
        }
    ));
    wait_for(
        &mut ws,
        |m| matches!(m, ServerMessage::Stats { e2e_us } if e2e_us.contains_key("video")),
    );
    let out = h.wait().unwrap();

    let target = Vec3::new(0.25, 0.1, 0.05);
    let last = out.traces.tracking.last().unwrap();
    assert_eq!(last.master(), target);
    // The slave followed the console's target.
    assert!((last.slave() - target).norm() < 1e-3, "{:?}", last.slave());
}

#[test]
fn session_runs_without_a_console() {
    let mut cfg = SessionConfig::default();
    cfg.mode = Mode::WallTime;
    cfg.role = Role::Both;
    cfg.duration_s = 0.3;
    cfg.net.operator_addr = "127.0.0.1:0".parse().unwrap();
    cfg.net.teleoperator_addr = "127.0.0.1:0".parse().unwrap();
    cfg.net.gateway_port = Some(0);
    let out = start_roles(&cfg).unwrap().wait().unwrap();
    assert!(out.report.classes["video"].complete > 0);
}
