//! Planar geometry in local meters: x points east, y points north.
//!
//! Headings are compass degrees: 0 is north, 90 is east.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Unit vector pointing along a compass heading.
    pub fn from_heading(heading_deg: f64) -> Self {
        let r = heading_deg.to_radians();
        Self::new(r.sin(), r.cos())
    }

    /// Compass heading of this vector in [0, 360).
    pub fn heading(self) -> f64 {
        normalize_heading(self.x.atan2(self.y).to_degrees())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    /// Rotate clockwise by a quarter turn, which advances a compass heading by 90 degrees.
    pub fn rotate_cw90(self) -> Self {
        Self::new(self.y, -self.x)
    }

    /// Left-hand normal (counter-clockwise perpendicular).
    pub fn perp(self) -> Self {
        Self::new(-self.y, self.x)
    }

    pub fn normalized(self) -> Self {
        let n = self.norm();
        if n > 0.0 {
            self * (1.0 / n)
        } else {
            self
        }
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

pub fn normalize_heading(deg: f64) -> f64 {
    let h = deg.rem_euclid(360.0);
    if h >= 360.0 {
        0.0
    } else {
        h
    }
}

/// Smallest absolute difference between two headings, in [0, 180].
pub fn heading_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec2,
    pub max: Vec2,
}

impl Aabb {
    pub fn area(&self) -> f64 {
        (self.max.x - self.min.x) * (self.max.y - self.min.y)
    }

    pub fn center(&self) -> Vec2 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }
}

/// Vehicle body footprint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedRect {
    pub center: Vec2,
    /// Unit vector along the body's long axis (direction of travel).
    pub axis: Vec2,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    /// Body of a vehicle whose front-bumper center sits at `front` facing `heading_deg`.
    pub fn from_front_bumper(front: Vec2, heading_deg: f64, length: f64, width: f64) -> Self {
        let axis = Vec2::from_heading(heading_deg);
        Self {
            center: front - axis * (length * 0.5),
            axis,
            half_length: length * 0.5,
            half_width: width * 0.5,
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        let l = self.axis * self.half_length;
        let w = self.axis.perp() * self.half_width;
        [
            self.center + l + w,
            self.center + l - w,
            self.center - l - w,
            self.center - l + w,
        ]
    }

    fn bounding_radius(&self) -> f64 {
        (self.half_length * self.half_length + self.half_width * self.half_width).sqrt()
    }

    fn project(&self, axis: Vec2) -> (f64, f64) {
        let c = self.center.dot(axis);
        let r = self.half_length * self.axis.dot(axis).abs()
            + self.half_width * self.axis.perp().dot(axis).abs();
        (c - r, c + r)
    }

    /// Separating-axis test. Touching boundaries count as overlap.
    pub fn intersects(&self, other: &OrientedRect) -> bool {
        let reach = self.bounding_radius() + other.bounding_radius();
        if self.center.distance(other.center) > reach {
            return false;
        }
        let axes = [self.axis, self.axis.perp(), other.axis, other.axis.perp()];
        axes.iter().all(|&a| {
            let (a0, a1) = self.project(a);
            let (b0, b1) = other.project(a);
            a0 <= b1 && b0 <= a1
        })
    }

    /// Minimum Euclidean distance between the two bodies, zero when they overlap.
    pub fn distance(&self, other: &OrientedRect) -> f64 {
        if self.intersects(other) {
            return 0.0;
        }
        let a = self.corners();
        let b = other.corners();
        let mut best = f64::INFINITY;
        for i in 0..4 {
            let (a0, a1) = (a[i], a[(i + 1) % 4]);
            for j in 0..4 {
                let (b0, b1) = (b[j], b[(j + 1) % 4]);
                best = best.min(segment_distance(a0, a1, b0, b1));
            }
        }
        best
    }
}

pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

fn segments_cross(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> bool {
    let d1 = (a1 - a0).cross(b0 - a0);
    let d2 = (a1 - a0).cross(b1 - a0);
    let d3 = (b1 - b0).cross(a0 - b0);
    let d4 = (b1 - b0).cross(a1 - b0);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

pub fn segment_distance(a0: Vec2, a1: Vec2, b0: Vec2, b1: Vec2) -> f64 {
    if segments_cross(a0, a1, b0, b1) {
        return 0.0;
    }
    point_segment_distance(a0, b0, b1)
        .min(point_segment_distance(a1, b0, b1))
        .min(point_segment_distance(b0, a0, a1))
        .min(point_segment_distance(b1, a0, a1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heading_round_trip() {
        for h in [0.0, 45.0, 90.0, 180.0, 270.0, 359.0] {
            let v = Vec2::from_heading(h);
            assert!((v.heading() - h).abs() < 1e-9, "{h} -> {}", v.heading());
        }
        assert!((Vec2::new(1.0, 0.0).heading() - 90.0).abs() < 1e-12);
        assert!(Vec2::new(0.0, 1.0).heading().abs() < 1e-12);
    }

    #[test]
    fn cw_rotation_advances_heading() {
        let v = Vec2::from_heading(10.0).rotate_cw90();
        assert!((v.heading() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn heading_difference_wraps() {
        assert_eq!(heading_difference(350.0, 10.0), 20.0);
        assert_eq!(heading_difference(0.0, 180.0), 180.0);
    }

    #[test]
    fn rear_end_overlap_with_front_bumper_gap() {
        // leader stopped with its front bumper 4.9 m ahead of the follower's front bumper
        let leader = OrientedRect::from_front_bumper(Vec2::new(0.0, 4.9), 0.0, 5.0, 1.8);
        let follower = OrientedRect::from_front_bumper(Vec2::new(0.0, 0.0), 0.0, 5.0, 1.8);
        assert!(leader.intersects(&follower));
        let apart = OrientedRect::from_front_bumper(Vec2::new(0.0, 5.5), 0.0, 5.0, 1.8);
        assert!(!apart.intersects(&follower));
        assert!((apart.distance(&follower) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rotated_rects_separated_on_diagonal() {
        let a = OrientedRect::from_front_bumper(Vec2::new(0.0, 0.0), 45.0, 5.0, 1.8);
        let b = OrientedRect::from_front_bumper(Vec2::new(10.0, 0.0), 315.0, 5.0, 1.8);
        assert!(!a.intersects(&b));
        assert!(a.distance(&b) > 0.0);
        assert!((a.distance(&b) - b.distance(&a)).abs() < 1e-12);
    }

    #[test]
    fn crossing_bodies_overlap() {
        let a = OrientedRect::from_front_bumper(Vec2::new(0.0, 1.0), 0.0, 5.0, 1.8);
        let b = OrientedRect::from_front_bumper(Vec2::new(0.5, 0.0), 270.0, 5.0, 1.8);
        assert!(a.intersects(&b));
        assert_eq!(a.distance(&b), 0.0);
    }
}
