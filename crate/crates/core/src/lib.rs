//! Haptic/video teleoperation over a shared low-rate link.
//!
//! The operator side samples a master device, deadband-compresses commands
//! and receives force feedback plus tiled video; the teleoperator side runs a
//! simulated slave arm and camera. Both directions share one multiplexed,
//! slotted link, and every unit is timestamped at each pipeline stage.

pub mod channel;
pub mod clock;
pub mod haptic;
pub mod metrics;
pub mod mux;
pub mod rng;
pub mod session;
pub mod simworld;
pub mod types;
pub mod video;
pub mod wire;

pub use clock::{Clock, VirtualClock, WallClock};
pub use rng::XorShift64Star;
pub use types::{Aabb, StreamClass, Timestamp, Vec3};
