//! Quantize/downsample tile codec and the budgeted mode search.
//!
//! A mode `(q, d)` downsamples by `d` (2x2 floor average when `d = 2`), keeps the
//! top `8 - q` bits of each sample and packs them MSB-first. Reconstruction
//! dequantizes to the bucket midpoint and upsamples by replication.

use crate::types::Timestamp;

use super::{TileRect, TileUnit};

/// One of the eight coding modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EncodeMode {
    quant_shift: u8,
    downsample: u8,
}

impl EncodeMode {
    /// Search order: all full-resolution modes, then all downsampled ones.
    pub const SEARCH_ORDER: [EncodeMode; 8] = [
        EncodeMode::raw(0, 1),
        EncodeMode::raw(1, 1),
        EncodeMode::raw(2, 1),
        EncodeMode::raw(3, 1),
        EncodeMode::raw(0, 2),
        EncodeMode::raw(1, 2),
        EncodeMode::raw(2, 2),
        EncodeMode::raw(3, 2),
    ];

    pub const LOSSLESS: EncodeMode = EncodeMode::raw(0, 1);

    const fn raw(quant_shift: u8, downsample: u8) -> EncodeMode {
        EncodeMode {
            quant_shift,
            downsample,
        }
    }

    pub fn new(quant_shift: u8, downsample: u8) -> EncodeMode {
        assert!(quant_shift <= 3, "quant_shift must be in 0..=3");
        assert!(
            downsample == 1 || downsample == 2,
            "downsample must be 1 or 2"
        );
        EncodeMode::raw(quant_shift, downsample)
    }

    pub fn quant_shift(self) -> u8 {
        self.quant_shift
    }

    pub fn downsample(self) -> u8 {
        self.downsample
    }

    /// Low nibble: quant shift; bit 4: downsample.
    pub fn to_byte(self) -> u8 {
        self.quant_shift | if self.downsample == 2 { 0x10 } else { 0 }
    }

    pub fn from_byte(b: u8) -> Option<EncodeMode> {
        let q = b & 0x0F;
        if q > 3 || b & 0xE0 != 0 {
            return None;
        }
        Some(EncodeMode::raw(q, if b & 0x10 != 0 { 2 } else { 1 }))
    }

    pub fn sample_dims(self, w: usize, h: usize) -> (usize, usize) {
        let d = self.downsample as usize;
        (w.div_ceil(d), h.div_ceil(d))
    }

    /// Encoded bytes for a `w x h` tile.
    pub fn encoded_size(self, w: usize, h: usize) -> usize {
        let (sw, sh) = self.sample_dims(w, h);
        (sw * sh * (8 - self.quant_shift as usize)).div_ceil(8)
    }

    /// Decode work for a tile: encoded sample count.
    pub fn decode_cost(self, w: usize, h: usize) -> u64 {
        let (sw, sh) = self.sample_dims(w, h);
        (sw * sh) as u64
    }

    fn dequantize(self, code: u8) -> u8 {
        match self.quant_shift {
            0 => code,
            q => (code << q) + (1 << (q - 1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTile {
    pub frame_id: u32,
    pub tile_index: usize,
    pub rect: TileRect,
    pub is_roi: bool,
    pub mode: EncodeMode,
    pub data: Vec<u8>,
    pub size_bytes: usize,
    pub mse: f64,
    /// Modes evaluated by the search.
    pub trials: usize,
    pub capture_ts: Timestamp,
    pub encode_done_ts: Timestamp,
}

/// Outcome of evaluating one mode on a tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTrial {
    pub mode: EncodeMode,
    pub data: Vec<u8>,
    pub size_bytes: usize,
    pub mse: f64,
}

fn downsample2(px: &[u8], w: usize, h: usize) -> Vec<u8> {
    let (sw, sh) = (w.div_ceil(2), h.div_ceil(2));
    let mut out = Vec::with_capacity(sw * sh);
    for by in 0..sh {
        for bx in 0..sw {
            let (mut sum, mut n) = (0u32, 0u32);
            for y in 2 * by..(2 * by + 2).min(h) {
                for x in 2 * bx..(2 * bx + 2).min(w) {
                    sum += px[y * w + x] as u32;
                    n += 1;
                }
            }
            out.push((sum / n) as u8);
        }
    }
    out
}

fn pack(codes: &[u8], bits: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity((codes.len() * bits as usize).div_ceil(8));
    let (mut acc, mut nacc) = (0u32, 0u32);
    for &c in codes {
        acc = (acc << bits) | c as u32;
        nacc += bits;
        while nacc >= 8 {
            nacc -= 8;
            out.push((acc >> nacc) as u8);
        }
        acc &= (1 << nacc) - 1;
    }
    if nacc > 0 {
        out.push((acc << (8 - nacc)) as u8);
    }
    out
}

fn unpack(data: &[u8], bits: u32, count: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(count);
    let (mut acc, mut nacc) = (0u32, 0u32);
    let mut bytes = data.iter();
    while out.len() < count {
        while nacc < bits {
            acc = (acc << 8) | *bytes.next().unwrap_or(&0) as u32;
            nacc += 8;
        }
        nacc -= bits;
        out.push(((acc >> nacc) & ((1 << bits) - 1)) as u8);
        acc &= (1 << nacc) - 1;
    }
    out
}

/// Encodes `px` (`w x h`) with a fixed mode, returning the packed bitstream.
pub fn encode_with_mode(px: &[u8], w: usize, h: usize, mode: EncodeMode) -> Vec<u8> {
    let samples = if mode.downsample == 2 {
        downsample2(px, w, h)
    } else {
        px.to_vec()
    };
    let q = mode.quant_shift;
    let codes: Vec<u8> = samples.iter().map(|&v| v >> q).collect();
    pack(&codes, 8 - q as u32)
}

/// Reconstructs `w x h` pixels from a packed bitstream.
pub fn decode_tile_data(data: &[u8], w: usize, h: usize, mode: EncodeMode) -> Vec<u8> {
    let (sw, sh) = mode.sample_dims(w, h);
    let codes = unpack(data, 8 - mode.quant_shift as u32, sw * sh);
    let samples: Vec<u8> = codes.into_iter().map(|c| mode.dequantize(c)).collect();
    if mode.downsample == 1 {
        return samples;
    }
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(samples[(y / 2) * sw + x / 2]);
        }
    }
    out
}

pub fn mse(a: &[u8], b: &[u8]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    let sum: u64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    sum as f64 / a.len() as f64
}

pub(crate) fn trial(tile: &TileUnit, mode: EncodeMode) -> ModeTrial {
    let (w, h) = (tile.rect.w, tile.rect.h);
    let data = encode_with_mode(&tile.pixels, w, h, mode);
    let recon = decode_tile_data(&data, w, h, mode);
    ModeTrial {
        mode,
        size_bytes: data.len(),
        mse: mse(&tile.pixels, &recon),
        data,
    }
}

/// Budgeted mode search.
///
/// Evaluates the first `trial_budget / pixel_count` modes of
/// [`EncodeMode::SEARCH_ORDER`] (at least one, at most eight). Among those
/// whose size fits `byte_budget` it keeps the minimum mse (then smaller size,
/// then earlier mode); if none fits it keeps the smallest tried mode.
pub fn encode_tile(tile: &TileUnit, trial_budget: u64, byte_budget: usize) -> EncodedTile {
    let cost = tile.pixel_count().max(1) as u64;
    let n = ((trial_budget / cost) as usize).clamp(1, EncodeMode::SEARCH_ORDER.len());
    let tried: Vec<ModeTrial> = EncodeMode::SEARCH_ORDER[..n]
        .iter()
        .map(|&m| trial(tile, m))
        .collect();

    let mut best: Option<&ModeTrial> = None;
    for t in tried.iter().filter(|t| t.size_bytes <= byte_budget) {
        let better = match best {
            None => true,
            Some(b) => t.mse < b.mse || (t.mse == b.mse && t.size_bytes < b.size_bytes),
        };
        if better {
            best = Some(t);
        }
    }
    let chosen = best.unwrap_or_else(|| {
        let mut smallest = &tried[0];
        for t in &tried[1..] {
            if t.size_bytes < smallest.size_bytes {
                smallest = t;
            }
        }
        smallest
    });

    EncodedTile {
        frame_id: tile.frame_id,
        tile_index: tile.tile_index,
        rect: tile.rect,
        is_roi: tile.is_roi,
        mode: chosen.mode,
        data: chosen.data.clone(),
        size_bytes: chosen.size_bytes,
        mse: chosen.mse,
        trials: n,
        capture_ts: tile.capture_ts,
        encode_done_ts: tile.capture_ts,
    }
}
