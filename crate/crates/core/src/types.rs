//! Domain primitives shared by every stage of the pipeline.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

/// Microseconds since the session epoch.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn micros(self) -> u64 {
        self.0
    }

    /// Saturating difference `self - earlier` in microseconds.
    pub fn since(self, earlier: Timestamp) -> u64 {
        self.0.saturating_sub(earlier.0)
    }

    pub fn plus(self, us: u64) -> Timestamp {
        Timestamp(self.0 + us)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Traffic class carried in the wire header. Codes are stable wire constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum StreamClass {
    Control = 0,
    Haptic = 1,
    Video = 2,
    Metrics = 3,
    /// Reserved for an audio modality; never produced.
    AudioReserved = 4,
}

impl StreamClass {
    pub const COUNT: usize = 5;
    pub const ALL: [StreamClass; 5] = [
        StreamClass::Control,
        StreamClass::Haptic,
        StreamClass::Video,
        StreamClass::Metrics,
        StreamClass::AudioReserved,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<StreamClass> {
        StreamClass::ALL.get(code as usize).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// A 3-vector in meters (positions) or newtons (forces).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3 { x, y, z }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn axis(self, i: usize) -> f64 {
        match i {
            0 => self.x,
            1 => self.y,
            2 => self.z,
            _ => panic!("axis index {i} out of range"),
        }
    }

    pub fn set_axis(&mut self, i: usize, v: f64) {
        match i {
            0 => self.x = v,
            1 => self.y = v,
            2 => self.z = v,
            _ => panic!("axis index {i} out of range"),
        }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Axis-aligned box `[min, max]` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub const fn new(min: Vec3, max: Vec3) -> Aabb {
        Aabb { min, max }
    }

    /// Positive extent along every axis.
    pub fn is_non_degenerate(&self) -> bool {
        (0..3).all(|i| self.max.axis(i) > self.min.axis(i))
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    /// Closed containment.
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|i| p.axis(i) >= self.min.axis(i) && p.axis(i) <= self.max.axis(i))
    }

    /// Strict interior (boundary excluded).
    pub fn contains_strictly(&self, p: Vec3) -> bool {
        (0..3).all(|i| p.axis(i) > self.min.axis(i) && p.axis(i) < self.max.axis(i))
    }

    /// `other` lies within `self` (closed).
    pub fn encloses(&self, other: &Aabb) -> bool {
        self.contains(other.min) && self.contains(other.max)
    }

    /// On the boundary: inside the closed box but not the open one.
    pub fn on_surface(&self, p: Vec3) -> bool {
        self.contains(p) && !self.contains_strictly(p)
    }

    pub fn clamp(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_codes_are_stable() {
        assert_eq!(StreamClass::Control.code(), 0);
        assert_eq!(StreamClass::Haptic.code(), 1);
        assert_eq!(StreamClass::Video.code(), 2);
        assert_eq!(StreamClass::Metrics.code(), 3);
        assert_eq!(StreamClass::AudioReserved.code(), 4);
        assert_eq!(StreamClass::from_code(5), None);
        for c in StreamClass::ALL {
            assert_eq!(StreamClass::from_code(c.code()), Some(c));
        }
    }

    #[test]
    fn aabb_interior_excludes_boundary() {
        let b = Aabb::new(Vec3::new(0.5, -1.0, -1.0), Vec3::new(1.0, 1.0, 1.0));
        assert!(b.contains_strictly(Vec3::new(0.6, 0.0, 0.0)));
        assert!(!b.contains_strictly(Vec3::new(0.5, 0.0, 0.0)));
        assert!(b.on_surface(Vec3::new(0.5, 0.0, 0.0)));
        assert!(!b.contains(Vec3::new(0.49, 0.0, 0.0)));
    }
}
