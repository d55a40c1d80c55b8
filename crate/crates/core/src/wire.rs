//! Bit-exact wire codec.
//!
//! ```text
//! offset  size  field
//!      0     2  magic "TL" (0x54 0x4C)
//!      2     1  version (0x01)
//!      3     1  class code
//!      4     1  flags
//!      5     4  seq (per class, per sender)
//!      9     8  send_ts_us
//!     17     2  payload_len
//!     19     n  payload
//! ```
//!
//! All integers are big-endian. Haptic and video payload layouts are defined
//! by [`HapticPayload`] and [`VideoPayload`].

use thiserror::Error;

use crate::types::{StreamClass, Timestamp, Vec3};
use crate::video::EncodeMode;

pub const MAGIC: [u8; 2] = [0x54, 0x4C];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 19;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;
pub const VIDEO_HEADER_LEN: usize = 14;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the 65535-byte limit")]
    PayloadTooLarge(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("truncated buffer: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("length mismatch: header declares {declared} payload bytes, buffer carries {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("unknown stream class {0}")]
    UnknownClass(u8),
    #[error("malformed {what} payload: {reason}")]
    BadPayload { what: &'static str, reason: String },
}

/// The unit crossing the link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MuxPacket {
    pub class: StreamClass,
    pub flags: u8,
    pub seq: u32,
    /// Capture time of the carried unit; receivers complete latency records from it.
    pub send_ts: Timestamp,
    pub payload: Vec<u8>,
}

impl MuxPacket {
    pub fn new(class: StreamClass, seq: u32, send_ts: Timestamp, payload: Vec<u8>) -> MuxPacket {
        MuxPacket {
            class,
            flags: 0,
            seq,
            send_ts,
            payload,
        }
    }

    /// Encoded size on the wire.
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_packet(p: &MuxPacket) -> Result<Vec<u8>, WireError> {
    if p.payload.len() > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge(p.payload.len()));
    }
    let mut out = Vec::with_capacity(p.wire_len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(p.class.code());
    out.push(p.flags);
    out.extend_from_slice(&p.seq.to_be_bytes());
    out.extend_from_slice(&p.send_ts.0.to_be_bytes());
    out.extend_from_slice(&(p.payload.len() as u16).to_be_bytes());
    out.extend_from_slice(&p.payload);
    Ok(out)
}

pub fn decode_packet(b: &[u8]) -> Result<MuxPacket, WireError> {
    if b.len() >= 2 && b[..2] != MAGIC {
        return Err(WireError::BadMagic([b[0], b[1]]));
    }
    if b.len() < HEADER_LEN {
        return Err(WireError::Truncated {
            needed: HEADER_LEN,
            got: b.len(),
        });
    }
    if b[2] != VERSION {
        return Err(WireError::BadVersion(b[2]));
    }
    let class = StreamClass::from_code(b[3]).ok_or(WireError::UnknownClass(b[3]))?;
    let flags = b[4];
    let seq = u32::from_be_bytes(b[5..9].try_into().unwrap());
    let send_ts = u64::from_be_bytes(b[9..17].try_into().unwrap());
    let declared = u16::from_be_bytes([b[17], b[18]]) as usize;
    let actual = b.len() - HEADER_LEN;
    if declared != actual {
        return Err(WireError::LengthMismatch { declared, actual });
    }
    Ok(MuxPacket {
        class,
        flags,
        seq,
        send_ts: Timestamp(send_ts),
        payload: b[HEADER_LEN..].to_vec(),
    })
}

fn bad(what: &'static str, reason: impl Into<String>) -> WireError {
    WireError::BadPayload {
        what,
        reason: reason.into(),
    }
}

fn put_vec3(out: &mut Vec<u8>, v: Vec3) {
    for c in v.to_array() {
        out.extend_from_slice(&c.to_be_bytes());
    }
}

fn get_vec3(b: &[u8]) -> Vec3 {
    let f = |i: usize| f64::from_be_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
    Vec3::new(f(0), f(1), f(2))
}

/// Haptic payload: `subtype (1B) | position (3 x f64) | force (3 x f64, state only)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HapticPayload {
    /// Operator -> teleoperator commanded tip position.
    Command { position: Vec3 },
    /// Teleoperator -> operator slave tip and feedback force.
    State { position: Vec3, force: Vec3 },
}

impl HapticPayload {
    pub const COMMAND_LEN: usize = 25;
    pub const STATE_LEN: usize = 49;

    pub fn position(&self) -> Vec3 {
        match *self {
            HapticPayload::Command { position } | HapticPayload::State { position, .. } => position,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match *self {
            HapticPayload::Command { position } => {
                let mut out = Vec::with_capacity(Self::COMMAND_LEN);
                out.push(0);
                put_vec3(&mut out, position);
                out
            }
            HapticPayload::State { position, force } => {
                let mut out = Vec::with_capacity(Self::STATE_LEN);
                out.push(1);
                put_vec3(&mut out, position);
                put_vec3(&mut out, force);
                out
            }
        }
    }

    pub fn decode(b: &[u8]) -> Result<HapticPayload, WireError> {
        match b.first() {
            Some(0) if b.len() == Self::COMMAND_LEN => Ok(HapticPayload::Command {
                position: get_vec3(&b[1..25]),
            }),
            Some(1) if b.len() == Self::STATE_LEN => Ok(HapticPayload::State {
                position: get_vec3(&b[1..25]),
                force: get_vec3(&b[25..49]),
            }),
            Some(s @ (0 | 1)) => Err(bad("haptic", format!("subtype {s} with {} bytes", b.len()))),
            Some(s) => Err(bad("haptic", format!("unknown subtype {s}"))),
            None => Err(bad("haptic", "empty")),
        }
    }
}

/// Video payload: one encoded tile with the metadata needed to place and decode it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoPayload {
    pub frame_id: u32,
    pub tile_index: u16,
    pub grid_cols: u8,
    pub grid_rows: u8,
    pub mode: EncodeMode,
    pub roi: bool,
    pub tile_w: u16,
    pub tile_h: u16,
    pub data: Vec<u8>,
}

impl VideoPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VIDEO_HEADER_LEN + self.data.len());
        out.extend_from_slice(&self.frame_id.to_be_bytes());
        out.extend_from_slice(&self.tile_index.to_be_bytes());
        out.push(self.grid_cols);
        out.push(self.grid_rows);
        out.push(self.mode.to_byte());
        out.push(self.roi as u8);
        out.extend_from_slice(&self.tile_w.to_be_bytes());
        out.extend_from_slice(&self.tile_h.to_be_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(b: &[u8]) -> Result<VideoPayload, WireError> {
        if b.len() < VIDEO_HEADER_LEN {
            return Err(WireError::Truncated {
                needed: VIDEO_HEADER_LEN,
                got: b.len(),
            });
        }
        let mode = EncodeMode::from_byte(b[8])
            .ok_or_else(|| bad("video", format!("mode byte {:#04x}", b[8])))?;
        let roi = match b[9] {
            0 => false,
            1 => true,
            v => return Err(bad("video", format!("roi flag {v}"))),
        };
        let p = VideoPayload {
            frame_id: u32::from_be_bytes(b[0..4].try_into().unwrap()),
            tile_index: u16::from_be_bytes([b[4], b[5]]),
            grid_cols: b[6],
            grid_rows: b[7],
            mode,
            roi,
            tile_w: u16::from_be_bytes([b[10], b[11]]),
            tile_h: u16::from_be_bytes([b[12], b[13]]),
            data: b[VIDEO_HEADER_LEN..].to_vec(),
        };
        let expected = mode.encoded_size(p.tile_w as usize, p.tile_h as usize);
        if p.data.len() != expected {
            return Err(bad(
                "video",
                format!("{} data bytes, mode implies {expected}", p.data.len()),
            ));
        }
        Ok(p)
    }
}
