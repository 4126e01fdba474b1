//! Four-way intersection geometry and route paths.
//!
//! Arms are indexed by the side the traffic comes from: 0 south, 1 west,
//! 2 north, 3 east. Arm `a` is the south arm rotated clockwise by `a` quarter
//! turns. Traffic keeps right; lane 0 is the rightmost lane of an approach.
//!
//! Edge indices: approach edges `0..4` (by origin arm), exit edges `4..8`
//! (`4 + exit arm`), and one internal junction edge `8`.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Vec2};

pub const ARM_COUNT: usize = 4;
pub const JUNCTION_EDGE: usize = 2 * ARM_COUNT;
pub const EDGE_COUNT: usize = 2 * ARM_COUNT + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnRadii {
    pub right: f64,
    pub left: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionLayout {
    pub arm_count: usize,
    pub lanes_per_approach: usize,
    pub arm_length: f64,
    pub lane_width: f64,
    /// Distance between the outermost lane edge and the conflict-region boundary.
    pub corner_margin: f64,
    pub conflict_region: Aabb,
    pub turn_radii: TurnRadii,
}

impl Default for IntersectionLayout {
    fn default() -> Self {
        Self::new(2, 120.0, 3.2, 6.0).expect("default layout is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Straight,
    Left,
    Right,
}

impl Turn {
    pub fn is_turning(self) -> bool {
        self != Turn::Straight
    }

    pub fn exit_arm(self, origin: usize) -> usize {
        match self {
            Turn::Straight => (origin + 2) % ARM_COUNT,
            Turn::Left => (origin + 1) % ARM_COUNT,
            Turn::Right => (origin + 3) % ARM_COUNT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    pub origin: usize,
    pub lane: usize,
    pub turn: Turn,
}

impl Route {
    pub fn exit_arm(&self) -> usize {
        self.turn.exit_arm(self.origin)
    }

    pub fn approach_edge(&self) -> usize {
        self.origin
    }

    pub fn exit_edge(&self) -> usize {
        ARM_COUNT + self.exit_arm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Line {
        start: Vec2,
        dir: Vec2,
        len: f64,
    },
    Arc {
        center: Vec2,
        radius: f64,
        start_angle: f64,
        /// Signed sweep in radians; positive is counter-clockwise.
        sweep: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match *self {
            Segment::Line { len, .. } => len,
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Local-frame position and travel direction at arc length `s` (clamped to the segment).
    fn pose(&self, s: f64) -> (Vec2, Vec2) {
        match *self {
            Segment::Line { start, dir, len } => (start + dir * s.clamp(0.0, len), dir),
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let frac = (s / self.length()).clamp(0.0, 1.0);
                let theta = start_angle + sweep * frac;
                let p = center + Vec2::new(theta.cos(), theta.sin()) * radius;
                let tangent = if sweep > 0.0 {
                    Vec2::new(-theta.sin(), theta.cos())
                } else {
                    Vec2::new(theta.sin(), -theta.cos())
                };
                (p, tangent)
            }
        }
    }
}

/// Which part of a route a vehicle's front bumper is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RoutePart {
    Approach,
    Junction,
    Exit,
}

/// Centerline of one route, parametrized by arc length from the approach start.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePath {
    pub route: Route,
    segments: [Segment; 3],
    bounds: [f64; 4],
}

impl RoutePath {
    pub fn total_length(&self) -> f64 {
        self.bounds[3]
    }

    pub fn approach_length(&self) -> f64 {
        self.bounds[1]
    }

    pub fn junction_length(&self) -> f64 {
        self.bounds[2] - self.bounds[1]
    }

    /// Arc length at which the junction segment starts and ends.
    pub fn junction_span(&self) -> (f64, f64) {
        (self.bounds[1], self.bounds[2])
    }

    pub fn part_at(&self, s: f64) -> RoutePart {
        if s < self.bounds[1] {
            RoutePart::Approach
        } else if s < self.bounds[2] {
            RoutePart::Junction
        } else {
            RoutePart::Exit
        }
    }

    pub fn edge_at(&self, s: f64) -> usize {
        match self.part_at(s) {
            RoutePart::Approach => self.route.approach_edge(),
            RoutePart::Junction => JUNCTION_EDGE,
            RoutePart::Exit => self.route.exit_edge(),
        }
    }

    pub fn junction_radius(&self) -> Option<f64> {
        match self.segments[1] {
            Segment::Arc { radius, .. } => Some(radius),
            Segment::Line { .. } => None,
        }
    }

    /// World position and compass heading at arc length `s`. Positions before
    /// the start or past the end are extrapolated along the end tangents.
    pub fn pose_at(&self, s: f64) -> (Vec2, f64) {
        let (p, dir) = if s <= 0.0 {
            let (p, d) = self.segments[0].pose(0.0);
            (p + d * s, d)
        } else if s >= self.bounds[3] {
            let seg = &self.segments[2];
            let (p, d) = seg.pose(seg.length());
            (p + d * (s - self.bounds[3]), d)
        } else {
            let i = if s < self.bounds[1] {
                0
            } else if s < self.bounds[2] {
                1
            } else {
                2
            };
            self.segments[i].pose(s - self.bounds[i])
        };
        let world = rotate_quarters(p, self.route.origin);
        let heading = rotate_quarters(dir, self.route.origin).heading();
        (world, heading)
    }
}

fn rotate_quarters(mut v: Vec2, quarters: usize) -> Vec2 {
    for _ in 0..quarters % 4 {
        v = v.rotate_cw90();
    }
    v
}

impl IntersectionLayout {
    pub fn new(
        lanes_per_approach: usize,
        arm_length: f64,
        lane_width: f64,
        corner_margin: f64,
    ) -> Result<Self> {
        if lanes_per_approach == 0 {
            return Err(Error::config("lanes_per_approach must be at least 1"));
        }
        if !(arm_length > 0.0 && lane_width > 0.0 && corner_margin >= 0.0) {
            return Err(Error::config(
                "arm_length and lane_width must be positive, corner_margin non-negative",
            ));
        }
        let half = lanes_per_approach as f64 * lane_width + corner_margin;
        let outer = (lanes_per_approach as f64 - 0.5) * lane_width;
        Ok(Self {
            arm_count: ARM_COUNT,
            lanes_per_approach,
            arm_length,
            lane_width,
            corner_margin,
            conflict_region: Aabb {
                min: Vec2::new(-half, -half),
                max: Vec2::new(half, half),
            },
            turn_radii: TurnRadii {
                right: half - outer,
                left: half + 0.5 * lane_width,
            },
        })
    }

    pub fn half_extent(&self) -> f64 {
        self.conflict_region.max.x
    }

    pub fn edge_count(&self) -> usize {
        EDGE_COUNT
    }

    /// Lateral offset of lane `k` from the road center line.
    pub fn lane_offset(&self, lane: usize) -> f64 {
        (self.lanes_per_approach as f64 - lane as f64 - 0.5) * self.lane_width
    }

    /// Turns permitted from an approach lane.
    pub fn lane_allows(&self, lane: usize, turn: Turn) -> bool {
        if lane >= self.lanes_per_approach {
            return false;
        }
        match turn {
            Turn::Straight => true,
            Turn::Right => lane == 0,
            Turn::Left => lane + 1 == self.lanes_per_approach,
        }
    }

    pub fn route_path(&self, route: Route) -> Result<RoutePath> {
        if route.origin >= ARM_COUNT || !self.lane_allows(route.lane, route.turn) {
            return Err(Error::config(format!(
                "route {route:?} is not permitted by the layout"
            )));
        }
        let w = self.half_extent();
        let o = self.lane_offset(route.lane);
        let north = Vec2::new(0.0, 1.0);
        let approach = Segment::Line {
            start: Vec2::new(o, -w - self.arm_length),
            dir: north,
            len: self.arm_length,
        };
        let (junction, exit_start, exit_dir) = match route.turn {
            Turn::Straight => (
                Segment::Line {
                    start: Vec2::new(o, -w),
                    dir: north,
                    len: 2.0 * w,
                },
                Vec2::new(o, w),
                north,
            ),
            Turn::Right => {
                let r = w - o;
                (
                    Segment::Arc {
                        center: Vec2::new(o + r, -w),
                        radius: r,
                        start_angle: std::f64::consts::PI,
                        sweep: -FRAC_PI_2,
                    },
                    Vec2::new(w, -o),
                    Vec2::new(1.0, 0.0),
                )
            }
            Turn::Left => {
                let r = w + o;
                (
                    Segment::Arc {
                        center: Vec2::new(o - r, -w),
                        radius: r,
                        start_angle: 0.0,
                        sweep: FRAC_PI_2,
                    },
                    Vec2::new(-w, o),
                    Vec2::new(-1.0, 0.0),
                )
            }
        };
        let exit = Segment::Line {
            start: exit_start,
            dir: exit_dir,
            len: self.arm_length,
        };
        let segments = [approach, junction, exit];
        let mut bounds = [0.0; 4];
        for i in 0..3 {
            bounds[i + 1] = bounds[i] + segments[i].length();
        }
        Ok(RoutePath {
            route,
            segments,
            bounds,
        })
    }

    /// Every route the layout permits, in a fixed order.
    pub fn all_routes(&self) -> Vec<Route> {
        let mut out = Vec::new();
        for origin in 0..ARM_COUNT {
            for lane in 0..self.lanes_per_approach {
                for turn in [Turn::Straight, Turn::Left, Turn::Right] {
                    if self.lane_allows(lane, turn) {
                        out.push(Route { origin, lane, turn });
                    }
                }
            }
        }
        out
    }

    /// Centerline segment of an approach or exit lane, ordered in travel direction.
    pub fn lane_centerline(&self, edge: usize, lane: usize) -> Option<(Vec2, Vec2)> {
        if lane >= self.lanes_per_approach || edge >= JUNCTION_EDGE {
            return None;
        }
        let w = self.half_extent();
        let o = self.lane_offset(lane);
        let (a, b, quarters) = if edge < ARM_COUNT {
            (
                Vec2::new(o, -w - self.arm_length),
                Vec2::new(o, -w),
                edge,
            )
        } else {
            // exit on arm `b` carries traffic that came straight from arm b + 2
            let exit_arm = edge - ARM_COUNT;
            (
                Vec2::new(o, w),
                Vec2::new(o, w + self.arm_length),
                (exit_arm + 2) % ARM_COUNT,
            )
        };
        Some((rotate_quarters(a, quarters), rotate_quarters(b, quarters)))
    }

    /// Snap a position to the nearest lane: `(edge, lane)`. Points inside the
    /// conflict region map to the junction edge, lane 0.
    pub fn snap_to_lane(&self, p: Vec2) -> (usize, usize) {
        if self.conflict_region.contains(p) {
            return (JUNCTION_EDGE, 0);
        }
        let mut best = (f64::INFINITY, (JUNCTION_EDGE, 0));
        for edge in 0..JUNCTION_EDGE {
            for lane in 0..self.lanes_per_approach {
                if let Some((a, b)) = self.lane_centerline(edge, lane) {
                    let d = crate::geometry::point_segment_distance(p, a, b);
                    if d < best.0 {
                        best = (d, (edge, lane));
                    }
                }
            }
        }
        best.1
    }
}
