//! Haptic stream coding: Weber-fraction deadband reduction on the sender,
//! newest-wins zero-order hold on the receiver, and the penalty-spring
//! contact force computed at the teleoperator.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Aabb, Timestamp, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HapticError {
    #[error("non-finite haptic sample at {0}")]
    NonFinite(Timestamp),
    #[error("no sample received at or before {0}")]
    NoData(Timestamp),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HapticSample {
    pub ts: Timestamp,
    pub position: Vec3,
    /// Zero on the command direction.
    pub force: Vec3,
}

impl HapticSample {
    pub fn command(ts: Timestamp, position: Vec3) -> HapticSample {
        HapticSample {
            ts,
            position,
            force: Vec3::ZERO,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.force.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeadbandConfig {
    pub weber_k: f64,
    /// Absolute threshold floor, meters.
    pub floor: f64,
}

impl Default for DeadbandConfig {
    fn default() -> Self {
        DeadbandConfig {
            weber_k: 0.1,
            floor: 1e-4,
        }
    }
}

/// Sender-side deadband state.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadbandState {
    pub last_sent: Option<Vec3>,
    pub weber_k: f64,
    pub floor: f64,
}

impl DeadbandState {
    pub fn new(cfg: DeadbandConfig) -> DeadbandState {
        assert!(cfg.weber_k >= 0.0, "weber_k must be non-negative");
        assert!(cfg.floor > 0.0, "deadband floor must be positive");
        DeadbandState {
            last_sent: None,
            weber_k: cfg.weber_k,
            floor: cfg.floor,
        }
    }

    /// Perceptual threshold around a reference value.
    pub fn threshold_at(&self, reference: Vec3) -> f64 {
        (self.weber_k * reference.norm()).max(self.floor)
    }

    /// Whether `v` would be transmitted.
    pub fn exceeds(&self, v: Vec3) -> bool {
        match self.last_sent {
            None => true,
            Some(last) => (v - last).norm() > self.threshold_at(last),
        }
    }

    pub fn mark_sent(&mut self, v: Vec3) {
        self.last_sent = Some(v);
    }
}

/// Emits the sample iff it leaves the deadband around the last transmitted position.
pub fn deadband_encode(
    s: HapticSample,
    st: &mut DeadbandState,
) -> Result<Option<HapticSample>, HapticError> {
    if !s.is_finite() {
        return Err(HapticError::NonFinite(s.ts));
    }
    if st.exceeds(s.position) {
        st.mark_sent(s.position);
        Ok(Some(s))
    } else {
        Ok(None)
    }
}

/// Receiver-side zero-order hold with newest-wins ordering.
#[derive(Debug, Clone, Default)]
pub struct ZohReconstructor {
    // Applied samples; seq and ts both non-decreasing.
    applied: Vec<(u32, HapticSample)>,
    stale: u64,
}

impl ZohReconstructor {
    pub fn new() -> ZohReconstructor {
        ZohReconstructor::default()
    }

    /// Applies a received sample. Returns false (and ignores it) when `seq` is
    /// not newer than the newest applied sample.
    pub fn receive(&mut self, seq: u32, sample: HapticSample) -> bool {
        if let Some(&(newest, _)) = self.applied.last() {
            if seq <= newest {
                self.stale += 1;
                return false;
            }
        }
        self.applied.push((seq, sample));
        true
    }

    /// Position of the latest applied sample with `ts <= query`.
    pub fn at(&self, query: Timestamp) -> Result<Vec3, HapticError> {
        let n = self.applied.partition_point(|(_, s)| s.ts <= query);
        if n == 0 {
            return Err(HapticError::NoData(query));
        }
        Ok(self.applied[n - 1].1.position)
    }

    pub fn latest(&self) -> Option<&HapticSample> {
        self.applied.last().map(|(_, s)| s)
    }

    pub fn latest_seq(&self) -> Option<u32> {
        self.applied.last().map(|&(q, _)| q)
    }

    pub fn stale_count(&self) -> u64 {
        self.stale
    }

    /// Drops history older than the newest sample at or before `ts`.
    pub fn prune_before(&mut self, ts: Timestamp) {
        let n = self.applied.partition_point(|(_, s)| s.ts <= ts);
        if n > 1 {
            self.applied.drain(..n - 1);
        }
    }
}

/// Spring force pushing a commanded point out of the deepest-penetrated box.
///
/// Faces are searched in the order x-min, x-max, y-min, y-max, z-min, z-max;
/// the first face at the minimum distance wins. Points on a boundary produce
/// no force.
pub fn collision_force(commanded: Vec3, obstacles: &[Aabb], k_s: f64, f_max: f64) -> Vec3 {
    let mut best: Option<(f64, usize, f64)> = None; // (depth, axis, sign)
    for ob in obstacles {
        if !ob.contains_strictly(commanded) {
            continue;
        }
        let (depth, axis, sign) = nearest_face(commanded, ob);
        if best.is_none_or(|(d, _, _)| depth > d) {
            best = Some((depth, axis, sign));
        }
    }
    match best {
        None => Vec3::ZERO,
        Some((depth, axis, sign)) => {
            let mut f = Vec3::ZERO;
            f.set_axis(axis, sign * (k_s * depth).min(f_max));
            f
        }
    }
}

/// (distance, axis, outward normal sign) of the nearest face of `ob` to interior point `p`.
pub(crate) fn nearest_face(p: Vec3, ob: &Aabb) -> (f64, usize, f64) {
    let mut best = (f64::INFINITY, 0, -1.0);
    for axis in 0..3 {
        let to_min = p.axis(axis) - ob.min.axis(axis);
        let to_max = ob.max.axis(axis) - p.axis(axis);
        if to_min < best.0 {
            best = (to_min, axis, -1.0);
        }
        if to_max < best.0 {
            best = (to_max, axis, 1.0);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn st(last: Option<Vec3>) -> DeadbandState {
        let mut s = DeadbandState::new(DeadbandConfig::default());
        s.last_sent = last;
        s
    }

    fn at(x: f64) -> HapticSample {
        HapticSample::command(Timestamp(0), Vec3::new(x, 0.0, 0.0))
    }

    #[test]
    fn first_sample_always_emitted() {
        let mut s = st(None);
        assert!(deadband_encode(at(0.0), &mut s).unwrap().is_some());
        assert_eq!(s.last_sent, Some(Vec3::ZERO));
    }

    #[test]
    fn inside_deadband_suppressed() {
        let mut s = st(Some(Vec3::new(1.0, 0.0, 0.0)));
        assert!(deadband_encode(at(1.05), &mut s).unwrap().is_none());
        assert_eq!(s.last_sent, Some(Vec3::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn outside_deadband_emitted() {
        let mut s = st(Some(Vec3::new(1.0, 0.0, 0.0)));
        assert!(deadband_encode(at(1.2), &mut s).unwrap().is_some());
        assert_eq!(s.last_sent, Some(Vec3::new(1.2, 0.0, 0.0)));
    }

    #[test]
    fn non_finite_rejected() {
        let mut s = st(None);
        assert_eq!(
            deadband_encode(at(f64::NAN), &mut s),
            Err(HapticError::NonFinite(Timestamp(0)))
        );
    }

    #[test]
    fn zero_weber_emits_every_distinct_sample() {
        let mut s = DeadbandState::new(DeadbandConfig {
            weber_k: 0.0,
            floor: 1e-12,
        });
        let emitted = (0..100)
            .filter(|&i| {
                deadband_encode(at(i as f64 * 1e-6), &mut s)
                    .unwrap()
                    .is_some()
            })
            .count();
        assert_eq!(emitted, 100);
    }

    #[test]
    fn zoh_holds_and_is_boundary_inclusive() {
        let mut z = ZohReconstructor::new();
        assert_eq!(z.at(Timestamp(0)), Err(HapticError::NoData(Timestamp(0))));
        z.receive(0, HapticSample::command(Timestamp(0), Vec3::ZERO));
        z.receive(
            1,
            HapticSample::command(Timestamp(10), Vec3::new(1.0, 0.0, 0.0)),
        );
        assert_eq!(z.at(Timestamp(5)).unwrap(), Vec3::ZERO);
        assert_eq!(z.at(Timestamp(10)).unwrap(), Vec3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn zoh_newest_wins() {
        let mut z = ZohReconstructor::new();
        assert!(z.receive(
            3,
            HapticSample::command(Timestamp(30), Vec3::new(3.0, 0.0, 0.0))
        ));
        assert!(!z.receive(
            2,
            HapticSample::command(Timestamp(20), Vec3::new(2.0, 0.0, 0.0))
        ));
        assert_eq!(z.at(Timestamp(100)).unwrap(), Vec3::new(3.0, 0.0, 0.0));
        assert_eq!(z.stale_count(), 1);
    }

    #[test]
    fn zoh_prune_keeps_current_value() {
        let mut z = ZohReconstructor::new();
        for i in 0..10u32 {
            z.receive(
                i,
                HapticSample::command(Timestamp(i as u64 * 10), Vec3::new(i as f64, 0.0, 0.0)),
            );
        }
        z.prune_before(Timestamp(55));
        assert_eq!(z.at(Timestamp(55)).unwrap().x, 5.0);
        assert_eq!(z.at(Timestamp(99)).unwrap().x, 9.0);
    }

    fn slab() -> Aabb {
        Aabb::new(Vec3::new(0.5, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0))
    }

    // Independent oracle: enumerate the six faces explicitly.
    fn oracle_force(p: Vec3, b: &Aabb, k: f64, fmax: f64) -> Vec3 {
        if !b.contains_strictly(p) {
            return Vec3::ZERO;
        }
        let faces = [
            (p.x - b.min.x, Vec3::new(-1.0, 0.0, 0.0)),
            (b.max.x - p.x, Vec3::new(1.0, 0.0, 0.0)),
            (p.y - b.min.y, Vec3::new(0.0, -1.0, 0.0)),
            (b.max.y - p.y, Vec3::new(0.0, 1.0, 0.0)),
            (p.z - b.min.z, Vec3::new(0.0, 0.0, -1.0)),
            (b.max.z - p.z, Vec3::new(0.0, 0.0, 1.0)),
        ];
        let mut best = faces[0];
        for f in &faces[1..] {
            if f.0 < best.0 {
                best = *f;
            }
        }
        best.1 * (k * best.0).min(fmax)
    }

    #[test]
    fn force_outside_is_zero() {
        assert_eq!(
            collision_force(Vec3::new(0.4, 0.0, 0.0), &[slab()], 300.0, 20.0),
            Vec3::ZERO
        );
        assert_eq!(
            collision_force(Vec3::new(0.5, 0.0, 0.0), &[slab()], 300.0, 20.0),
            Vec3::ZERO
        );
    }

    #[test]
    fn force_clipped_at_fmax() {
        let p = Vec3::new(0.6, 0.0, 0.0);
        let want = oracle_force(p, &slab(), 300.0, 20.0);
        assert_eq!(want, Vec3::new(-20.0, 0.0, 0.0));
        assert_eq!(collision_force(p, &[slab()], 300.0, 20.0), want);
    }

    #[test]
    fn force_proportional_to_depth() {
        let p = Vec3::new(0.52, 0.0, 0.0);
        let f = collision_force(p, &[slab()], 300.0, 20.0);
        let want = oracle_force(p, &slab(), 300.0, 20.0);
        assert_eq!(f, want);
        assert!((f.x + 6.0).abs() < 1e-9 && f.y == 0.0 && f.z == 0.0);
    }

    #[test]
    fn deepest_obstacle_selected() {
        let shallow = Aabb::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0));
        let deep = Aabb::new(Vec3::new(-1.0, -1.0, -1.0), Vec3::new(0.6, 0.6, 0.6));
        let p = Vec3::new(0.05, 0.3, 0.3);
        // depth in `shallow` is 0.05 (x-min), in `deep` 0.3 (y-max / z-max tie -> y).
        let f = collision_force(p, &[shallow, deep], 10.0, 100.0);
        assert!((f.y - 3.0).abs() < 1e-12 && f.x == 0.0 && f.z == 0.0);
    }

    #[test]
    fn face_ties_resolve_in_axis_order() {
        let cube = Aabb::new(Vec3::ZERO, Vec3::new(1.0, 1.0, 1.0));
        let f = collision_force(Vec3::new(0.5, 0.5, 0.5), &[cube], 10.0, 100.0);
        assert_eq!(f, Vec3::new(-5.0, 0.0, 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn force_never_exceeds_fmax(x in -0.2f64..1.5, y in -1.5f64..1.5, z in -1.5f64..1.5,
                                        k in 0.0f64..5000.0, fmax in 0.0f64..50.0) {
                let p = Vec3::new(x, y, z);
                let f = collision_force(p, &[slab()], k, fmax);
                prop_assert!(f.norm() <= fmax + 1e-12);
                prop_assert_eq!(f, oracle_force(p, &slab(), k, fmax));
            }

            #[test]
            fn suppressed_samples_stay_within_threshold(xs in proptest::collection::vec(-1.0f64..1.0, 1..200)) {
                let mut s = DeadbandState::new(DeadbandConfig::default());
                for x in xs {
                    let p = Vec3::new(x, 0.5 * x, 0.1);
                    let emitted = deadband_encode(HapticSample::command(Timestamp(0), p), &mut s).unwrap();
                    let last = s.last_sent.unwrap();
                    match emitted {
                        Some(e) => prop_assert_eq!(e.position, last),
                        None => prop_assert!((p - last).norm() <= s.threshold_at(last)),
                    }
                }
            }
        }
    }
}
