//! Fixtures shared by the pipeline benchmarks.

use teleop_core::simworld::{render_camera, ArmState, Workspace};
use teleop_core::video::{classify_roi, project_tip, tile_frame, TileGrid, TileUnit};

/// One rendered camera frame, tiled, with the ROI marked around the tip.
pub fn camera_tiles(
    width: usize,
    height: usize,
    cols: usize,
    rows: usize,
) -> (TileGrid, Vec<TileUnit>) {
    let ws = Workspace::default();
    let arm = ArmState::at(ws.center());
    let frame = render_camera(&ws, &arm, width, height);
    let grid = TileGrid::new(width, height, cols, rows).expect("grid divides frame");
    let mut tiles = tile_frame(&frame, cols, rows).expect("grid divides frame");
    let tip = project_tip(arm.tip, &ws.bounds, width, height);
    classify_roi(&mut tiles, &grid, tip, 0, 4.0);
    (grid, tiles)
}
