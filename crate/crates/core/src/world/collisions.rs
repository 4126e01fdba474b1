use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

use super::trace::{tick_index, PairId, Trace, VehicleState};
use crate::geometry::heading_difference;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CollisionCategory {
    Front,
    Rear,
    Side,
    Corner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub pair: PairId,
    pub collision_time: f64,
    /// Speeds of the lower and higher id vehicle at the collision tick.
    pub impact_speeds: (f64, f64),
    pub category: CollisionCategory,
}

/// Both turning gives a corner collision; otherwise the relative heading at impact
/// separates rear-end, head-on and side impacts.
pub fn categorize(a: &VehicleState, b: &VehicleState, a_turning: bool, b_turning: bool) -> CollisionCategory {
    if a_turning && b_turning {
        return CollisionCategory::Corner;
    }
    let dh = heading_difference(a.heading, b.heading);
    if dh < 30.0 {
        CollisionCategory::Rear
    } else if dh > 150.0 {
        CollisionCategory::Front
    } else {
        CollisionCategory::Side
    }
}

/// One event per pair per overlap episode, at the first tick the bodies overlap.
pub fn detect_ground_truth_collisions(trace: &Trace) -> Vec<CollisionEvent> {
    let mut events = Vec::new();
    let mut overlapping_prev: BTreeSet<PairId> = BTreeSet::new();
    let mut prev_tick: Option<i64> = None;
    for (n, frame) in trace.frames() {
        if prev_tick != Some(n - 1) {
            overlapping_prev.clear();
        }
        let bodies: Vec<_> = frame.iter().map(|s| s.body()).collect();
        let mut now = BTreeSet::new();
        for i in 0..frame.len() {
            for j in (i + 1)..frame.len() {
                if !bodies[i].intersects(&bodies[j]) {
                    continue;
                }
                let (a, b) = (frame[i], frame[j]);
                let pair = PairId::new(a.vehicle_id, b.vehicle_id);
                if !overlapping_prev.contains(&pair) {
                    let (lo, hi) = if a.vehicle_id <= b.vehicle_id { (a, b) } else { (b, a) };
                    events.push(CollisionEvent {
                        pair,
                        collision_time: lo.time,
                        impact_speeds: (lo.speed, hi.speed),
                        category: categorize(
                            lo,
                            hi,
                            trace.is_turning(lo.vehicle_id),
                            trace.is_turning(hi.vehicle_id),
                        ),
                    });
                }
                now.insert(pair);
            }
        }
        overlapping_prev = now;
        prev_tick = Some(n);
    }
    events.sort_by(|a, b| {
        a.collision_time
            .total_cmp(&b.collision_time)
            .then(a.pair.cmp(&b.pair))
    });
    events
}

/// Tick index of an event in a trace.
pub fn collision_tick(trace: &Trace, event: &CollisionEvent) -> i64 {
    tick_index(event.collision_time, trace.tick())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec2;
    use crate::world::layout::IntersectionLayout;
    use crate::world::trace::{tick_time, VehicleId};

    fn state(id: u32, n: i64, pos: Vec2, heading: f64, speed: f64) -> VehicleState {
        VehicleState {
            time: tick_time(n, 0.1),
            vehicle_id: VehicleId(id),
            position: pos,
            heading,
            speed,
            acceleration: 0.0,
            lane_index: 0,
            edge_index: 0,
            length: 5.0,
            width: 1.8,
            preceding: None,
        }
    }

    fn trace_of(list: Vec<VehicleState>) -> Trace {
        let mut t = Trace::empty(IntersectionLayout::default(), 0.1);
        for s in list {
            t.vehicles.entry(s.vehicle_id).or_default().push(s);
        }
        t
    }

    #[test]
    fn separated_vehicles_never_collide() {
        let mut v = Vec::new();
        for n in 0..50 {
            v.push(state(1, n, Vec2::new(0.0, n as f64), 0.0, 10.0));
            v.push(state(2, n, Vec2::new(10.0, n as f64), 0.0, 10.0));
        }
        assert!(detect_ground_truth_collisions(&trace_of(v)).is_empty());
    }

    #[test]
    fn head_on_meets_at_eight_seconds() {
        // fronts approach at 10 m/s each and meet at x = 0 at t = 8.0 s
        let mut v = Vec::new();
        for n in 0..=80 {
            let t = n as f64 * 0.1;
            let gap = 10.0 * (8.0 - t);
            v.push(state(1, n, Vec2::new(-gap, 0.0), 90.0, 10.0));
            v.push(state(2, n, Vec2::new(gap, 0.0), 270.0, 10.0));
        }
        let events = detect_ground_truth_collisions(&trace_of(v));
        assert_eq!(events.len(), 1);
        assert!((events[0].collision_time - 8.0).abs() < 1e-9);
        assert_eq!(events[0].category, CollisionCategory::Front);
        assert_eq!(events[0].impact_speeds, (10.0, 10.0));
    }

    #[test]
    fn rear_end_with_positive_point_distance() {
        // leader stopped; follower front closes at 5 m/s and ends 4.8 m behind the leader's front
        let mut v = Vec::new();
        for n in 0..=20 {
            let y = -10.0 + 5.0 * n as f64 * 0.1;
            v.push(state(1, n, Vec2::new(0.0, 0.0), 0.0, 0.0));
            v.push(state(2, n, Vec2::new(0.0, y.min(-4.8)), 0.0, 5.0));
        }
        let t = trace_of(v);
        let events = detect_ground_truth_collisions(&t);
        assert_eq!(events.len(), 1);
        let e = &events[0];
        let n = collision_tick(&t, e);
        let a = t.state_at(VehicleId(1), n).unwrap();
        let b = t.state_at(VehicleId(2), n).unwrap();
        assert!(a.position.distance(b.position) > 0.0);
        assert_eq!(e.category, CollisionCategory::Rear);
    }

    #[test]
    fn order_of_vehicles_does_not_matter() {
        let mut v = Vec::new();
        let mut w = Vec::new();
        for n in 0..=80 {
            let t = n as f64 * 0.1;
            let a = state(3, n, Vec2::new(0.0, -10.0 * (8.0 - t)), 0.0, 10.0);
            let b = state(7, n, Vec2::new(-10.0 * (8.0 - t), 0.0), 90.0, 10.0);
            v.push(a.clone());
            v.push(b.clone());
            w.push(b);
            w.push(a);
        }
        let e1 = detect_ground_truth_collisions(&trace_of(v));
        let e2 = detect_ground_truth_collisions(&trace_of(w));
        assert_eq!(e1, e2);
        assert_eq!(e1.len(), 1);
        assert_eq!(e1[0].category, CollisionCategory::Side);
    }
}
