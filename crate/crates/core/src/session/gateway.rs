//! Console gateway: WebSocket text frames carrying JSON.
//!
//! Console to session:
//!
//! ```json
//! {"cmd": "tip", "x": 0.2, "y": 0.1, "z": 0.0, "client_ts": 1234.5}
//! ```
//!
//! Session to console, at most one batch per [`STATS_PERIOD_MS`]:
//!
//! ```json
//! {"type": "hello", "role": "controller"}
//! {"type": "state", "ts_us": 51000, "tip": [0.4, 0.0, 0.1], "force": [0.0, 0.0, 0.0]}
//! {"type": "frame", "frame_id": 3, "width": 128, "height": 128, "grid_cols": 4, "grid_rows": 4, "pixels": "<base64>"}
//! {"type": "stats", "e2e_us": {"video": {"count": 10, "mean": 7100.0, "p50": 7000, "p99": 9000, "max": 9000}}}
//! {"type": "error", "message": "..."}
//! ```
//!
//! The first console to connect controls the master; later ones are
//! observers whose commands are refused. When the controller leaves, the
//! next console to connect takes over. A malformed message gets an error
//! frame and the connection is closed.

use std::collections::BTreeMap;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::metrics::Summary;
use crate::simworld::LiveInput;
use crate::types::{Timestamp, Vec3};

use super::SessionError;

/// Downstream cadence: 20 Hz.
pub const STATS_PERIOD_MS: u64 = 50;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSnapshot {
    pub frame_id: u32,
    pub width: usize,
    pub height: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub pixels: Vec<u8>,
}

/// What the operator side publishes for consoles.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsoleState {
    pub frame: Option<FrameSnapshot>,
    pub tip: Vec3,
    pub force: Vec3,
    pub state_ts: Timestamp,
    pub stats: BTreeMap<String, Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Tip {
        x: f64,
        y: f64,
        z: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client_ts: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        role: String,
    },
    State {
        ts_us: u64,
        tip: [f64; 3],
        force: [f64; 3],
    },
    Frame {
        frame_id: u32,
        width: usize,
        height: usize,
        grid_cols: usize,
        grid_rows: usize,
        pixels: String,
    },
    Stats {
        e2e_us: BTreeMap<String, Summary>,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    fn text(&self) -> Message {
        Message::text(serde_json::to_string(self).expect("message serializes"))
    }
}

pub struct GatewayHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl GatewayHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Listens on `127.0.0.1:port` (0 picks a free port).
pub fn gateway_serve(
    port: u16,
    state: Arc<Mutex<ConsoleState>>,
    live: LiveInput,
) -> Result<GatewayHandle, SessionError> {
    let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| SessionError::Bind {
        addr: format!("127.0.0.1:{port}"),
        reason: e.to_string(),
    })?;
    let addr = listener
        .local_addr()
        .map_err(|e| SessionError::Gateway(e.to_string()))?;
    listener
        .set_nonblocking(true)
        .map_err(|e| SessionError::Gateway(e.to_string()))?;
    let stop = Arc::new(AtomicBool::new(false));
    let controller = Arc::new(AtomicU64::new(0));
    let stop_t = stop.clone();
    let thread = std::thread::Builder::new()
        .name("gateway".into())
        .spawn(move || {
            let mut next_id = 1u64;
            let mut conns: Vec<JoinHandle<()>> = Vec::new();
            while !stop_t.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let id = next_id;
                        next_id += 1;
                        let (state, live, stop, controller) = (
                            state.clone(),
                            live.clone(),
                            stop_t.clone(),
                            controller.clone(),
                        );
                        log::info!("console {id} connected from {peer}");
                        conns.push(std::thread::spawn(move || {
                            if let Err(e) =
                                serve_console(id, stream, &state, &live, &stop, &controller)
                            {
                                log::info!("console {id} closed: {e}");
                            }
                            if controller
                                .compare_exchange(id, 0, Ordering::SeqCst, Ordering::SeqCst)
                                .is_ok()
                            {
                                live.set_connected(false);
                            }
                        }));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(10))
                    }
                    Err(e) => {
                        log::warn!("gateway accept failed: {e}");
                        std::thread::sleep(Duration::from_millis(10));
                    }
                }
                conns.retain(|c| !c.is_finished());
            }
            for c in conns {
                let _ = c.join();
            }
        })
        .map_err(|e| SessionError::Gateway(e.to_string()))?;
    Ok(GatewayHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn serve_console(
    id: u64,
    stream: TcpStream,
    state: &Mutex<ConsoleState>,
    live: &LiveInput,
    stop: &AtomicBool,
    controller: &AtomicU64,
) -> Result<(), String> {
    stream.set_nonblocking(false).map_err(|e| e.to_string())?;
    stream
        .set_read_timeout(Some(Duration::from_secs(5)))
        .map_err(|e| e.to_string())?;
    let mut ws: WebSocket<TcpStream> = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_ref()
        .set_read_timeout(Some(Duration::from_millis(5)))
        .map_err(|e| e.to_string())?;

    let is_controller = controller
        .compare_exchange(0, id, Ordering::SeqCst, Ordering::SeqCst)
        .is_ok();
    if is_controller {
        live.set_connected(true);
    }
    let role = if is_controller {
        "controller"
    } else {
        "observer"
    };
    ws.send(ServerMessage::Hello { role: role.into() }.text())
        .map_err(|e| e.to_string())?;

    let period = Duration::from_millis(STATS_PERIOD_MS);
    let mut last_push: Option<Instant> = None;
    let mut sent_frame = None;
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(t)) => match serde_json::from_str::<ClientMessage>(t.as_str()) {
                Ok(ClientMessage::Tip { x, y, z, .. }) => {
                    let p = Vec3::new(x, y, z);
                    if !p.is_finite() {
                        return reject(&mut ws, "tip coordinates must be finite");
                    }
                    if is_controller {
                        live.set(p);
                    } else {
                        ws.send(
                            ServerMessage::Error {
                                message: "observer console: command ignored".into(),
                            }
                            .text(),
                        )
                        .map_err(|e| e.to_string())?;
                    }
                }
                Err(e) => return reject(&mut ws, &format!("malformed message: {e}")),
            },
            Ok(Message::Binary(_)) => return reject(&mut ws, "binary frames are not accepted"),
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(e) => return Err(e.to_string()),
        }

        if last_push.is_none_or(|t| t.elapsed() >= period) {
            last_push = Some(Instant::now());
            let (msgs, frame_id) = {
                let s = state.lock().unwrap();
                let mut msgs = vec![ServerMessage::State {
                    ts_us: s.state_ts.0,
                    tip: s.tip.to_array(),
                    force: s.force.to_array(),
                }];
                let mut frame_id = sent_frame;
                if let Some(f) = &s.frame {
                    if sent_frame != Some(f.frame_id) {
                        frame_id = Some(f.frame_id);
                        msgs.push(ServerMessage::Frame {
                            frame_id: f.frame_id,
                            width: f.width,
                            height: f.height,
                            grid_cols: f.grid_cols,
                            grid_rows: f.grid_rows,
                            pixels: base64::engine::general_purpose::STANDARD.encode(&f.pixels),
                        });
                    }
                }
                msgs.push(ServerMessage::Stats {
                    e2e_us: s.stats.clone(),
                });
                (msgs, frame_id)
            };
            sent_frame = frame_id;
            for m in msgs {
                ws.send(m.text()).map_err(|e| e.to_string())?;
            }
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

fn reject(ws: &mut WebSocket<TcpStream>, message: &str) -> Result<(), String> {
    let _ = ws.send(
        ServerMessage::Error {
            message: message.into(),
        }
        .text(),
    );
    let _ = ws.close(None);
    let _ = ws.flush();
    Err(message.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tip_command_parses() {
        let m: ClientMessage =
            serde_json::from_str(r#"{"cmd":"tip","x":0.2,"y":0.1,"z":0}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::Tip {
                x: 0.2,
                y: 0.1,
                z: 0.0,
                client_ts: None
            }
        );
        assert!(serde_json::from_str::<ClientMessage>(r#"{"cmd":"fly"}"#).is_err());
        assert!(serde_json::from_str::<ClientMessage>(r#"{"cmd":"tip","x":1}"#).is_err());
    }

    #[test]
    fn server_messages_are_tagged() {
        let s = serde_json::to_string(&ServerMessage::Error {
            message: "x".into(),
        })
        .unwrap();
        assert_eq!(s, r#"{"type":"error","message":"x"}"#);
    }
}
