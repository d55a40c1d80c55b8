//! ROI-prioritized tile video: framing, ROI classification from the haptic
//! tip, importance-weighted encode budgets, per-tile mode search, and
//! priority decode scheduling.

mod budget;
mod codec;
mod decode;
pub mod pgm;

pub use budget::{allocate_budgets, lpt_assign, BudgetPlan, TileBudget, MAX_TRIALS};
pub use codec::{
    decode_tile_data, encode_tile, encode_with_mode, mse, EncodeMode, EncodedTile, ModeTrial,
};
pub use decode::{decode_schedule, DecodeJob, DecodeSlot, DecoderPool};

use thiserror::Error;

use crate::types::{Aabb, Timestamp, Vec3};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VideoError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible encode budget: {0}")]
    Infeasible(String),
    #[error("PGM error: {0}")]
    Pgm(String),
}

/// 8-bit grayscale frame, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_id: u32,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    pub capture_ts: Timestamp,
}

impl Frame {
    pub fn filled(frame_id: u32, width: usize, height: usize, value: u8) -> Frame {
        Frame {
            frame_id,
            width,
            height,
            pixels: vec![value; width * height],
            capture_ts: Timestamp::ZERO,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TileRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl TileRect {
    pub fn pixel_count(&self) -> usize {
        self.w * self.h
    }
}

/// Geometry of a uniform tile grid over a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileGrid {
    pub cols: usize,
    pub rows: usize,
    pub tile_w: usize,
    pub tile_h: usize,
}

impl TileGrid {
    pub fn new(
        width: usize,
        height: usize,
        cols: usize,
        rows: usize,
    ) -> Result<TileGrid, VideoError> {
        if cols == 0 || rows == 0 {
            return Err(VideoError::Config(
                "grid dimensions must be positive".into(),
            ));
        }
        if width == 0 || height == 0 || !width.is_multiple_of(cols) || !height.is_multiple_of(rows)
        {
            return Err(VideoError::Config(format!(
                "{width}x{height} frame is not divisible by a {cols}x{rows} grid"
            )));
        }
        Ok(TileGrid {
            cols,
            rows,
            tile_w: width / cols,
            tile_h: height / rows,
        })
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.cols * self.tile_w
    }

    pub fn height(&self) -> usize {
        self.rows * self.tile_h
    }

    pub fn rect(&self, index: usize) -> TileRect {
        let (col, row) = (index % self.cols, index / self.cols);
        TileRect {
            x: col * self.tile_w,
            y: row * self.tile_h,
            w: self.tile_w,
            h: self.tile_h,
        }
    }

    /// Row-major index of the tile containing pixel `(u, v)`.
    pub fn tile_at(&self, u: usize, v: usize) -> usize {
        (v / self.tile_h) * self.cols + u / self.tile_w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileUnit {
    pub frame_id: u32,
    pub tile_index: usize,
    pub rect: TileRect,
    pub pixels: Vec<u8>,
    pub importance: f64,
    pub is_roi: bool,
    pub capture_ts: Timestamp,
}

impl TileUnit {
    pub fn pixel_count(&self) -> usize {
        self.rect.pixel_count()
    }
}

pub fn tile_frame(
    f: &Frame,
    grid_cols: usize,
    grid_rows: usize,
) -> Result<Vec<TileUnit>, VideoError> {
    let grid = TileGrid::new(f.width, f.height, grid_cols, grid_rows)?;
    if f.pixels.len() != f.width * f.height {
        return Err(VideoError::Config(format!(
            "frame buffer holds {} pixels, expected {}",
            f.pixels.len(),
            f.width * f.height
        )));
    }
    Ok((0..grid.len())
        .map(|i| {
            let rect = grid.rect(i);
            let mut pixels = Vec::with_capacity(rect.pixel_count());
            for y in rect.y..rect.y + rect.h {
                let row = y * f.width;
                pixels.extend_from_slice(&f.pixels[row + rect.x..row + rect.x + rect.w]);
            }
            TileUnit {
                frame_id: f.frame_id,
                tile_index: i,
                rect,
                pixels,
                importance: 1.0,
                is_roi: false,
                capture_ts: f.capture_ts,
            }
        })
        .collect())
}

/// Writes tile pixels back into a frame buffer of the given size.
pub fn reassemble<'a>(
    tiles: impl IntoIterator<Item = (&'a TileRect, &'a [u8])>,
    width: usize,
    height: usize,
) -> Vec<u8> {
    let mut out = vec![0u8; width * height];
    for (rect, px) in tiles {
        for dy in 0..rect.h {
            let dst = (rect.y + dy) * width + rect.x;
            out[dst..dst + rect.w].copy_from_slice(&px[dy * rect.w..(dy + 1) * rect.w]);
        }
    }
    out
}

/// Marks tiles within Chebyshev distance `roi_radius` of the tip's tile.
pub fn classify_roi(
    tiles: &mut [TileUnit],
    grid: &TileGrid,
    tip_pixel: (usize, usize),
    roi_radius: usize,
    roi_weight: f64,
) {
    let center = grid.tile_at(
        tip_pixel.0.min(grid.width() - 1),
        tip_pixel.1.min(grid.height() - 1),
    );
    let (cc, cr) = (center % grid.cols, center / grid.cols);
    for t in tiles.iter_mut() {
        let (c, r) = (t.tile_index % grid.cols, t.tile_index / grid.cols);
        let dist = c.abs_diff(cc).max(r.abs_diff(cr));
        t.is_roi = dist <= roi_radius;
        t.importance = if t.is_roi { roi_weight } else { 1.0 };
    }
}

/// Orthographic top-down projection of a workspace point to pixel coordinates,
/// rounding half up; points outside the workspace are clamped to the frame edge.
pub fn project_tip(tip: Vec3, bounds: &Aabb, width: usize, height: usize) -> (usize, usize) {
    let map = |v: f64, lo: f64, hi: f64, n: usize| -> usize {
        let span = hi - lo;
        let frac = if span > 0.0 {
            ((v - lo) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let px = (frac * (n.saturating_sub(1)) as f64 + 0.5).floor();
        (px as usize).min(n.saturating_sub(1))
    };
    (
        map(tip.x, bounds.min.x, bounds.max.x, width),
        map(tip.y, bounds.min.y, bounds.max.y, height),
    )
}
