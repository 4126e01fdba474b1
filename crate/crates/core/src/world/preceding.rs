use super::trace::{Preceding, Trace};
use crate::geometry::Vec2;

/// Distance of the virtual leader placed ahead of a vehicle with no predecessor.
pub const VIRTUAL_LEADER_DISTANCE_M: f64 = 200.0;

/// Fill in the vehicle ahead on the same edge and lane for every state.
///
/// Candidates must be ahead along the ego heading and within half a lane width
/// laterally. With no candidate a virtual leader is placed ahead at the ego's speed.
pub fn annotate_preceding(mut trace: Trace) -> Trace {
    let tick = trace.tick();
    let half_lane = trace.layout().lane_width * 0.5;
    let frames: Vec<(i64, Vec<(Vec2, f64, f64, usize, usize, super::trace::VehicleId)>)> = trace
        .frames()
        .into_iter()
        .map(|(n, states)| {
            (
                n,
                states
                    .iter()
                    .map(|s| (s.position, s.heading, s.speed, s.edge_index, s.lane_index, s.vehicle_id))
                    .collect(),
            )
        })
        .collect();
    let mut found = std::collections::HashMap::new();
    for (n, frame) in &frames {
        for &(p, h, v, e, l, id) in frame {
            let dir = Vec2::from_heading(h);
            let mut best: Option<(f64, Vec2, f64)> = None;
            for &(q, _, w, e2, l2, id2) in frame {
                if id2 == id || e2 != e || l2 != l {
                    continue;
                }
                let rel = q - p;
                let along = rel.dot(dir);
                if along <= 0.0 || rel.cross(dir).abs() > half_lane {
                    continue;
                }
                if best.is_none_or(|(d, _, _)| along < d) {
                    best = Some((along, q, w));
                }
            }
            let pre = match best {
                Some((_, q, w)) => Preceding {
                    position: q,
                    speed: w,
                    real: true,
                },
                None => Preceding {
                    position: p + dir * VIRTUAL_LEADER_DISTANCE_M,
                    speed: v,
                    real: false,
                },
            };
            found.insert((id, *n), pre);
        }
    }
    for (id, states) in trace.vehicles.iter_mut() {
        for s in states.iter_mut() {
            let n = super::trace::tick_index(s.time, tick);
            s.preceding = found.get(&(*id, n)).copied();
        }
    }
    trace
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::layout::IntersectionLayout;
    use crate::world::trace::{VehicleId, VehicleState};

    fn st(id: u32, y: f64, speed: f64) -> VehicleState {
        VehicleState {
            time: 0.0,
            vehicle_id: VehicleId(id),
            position: Vec2::new(1.6, y),
            heading: 0.0,
            speed,
            acceleration: 0.0,
            lane_index: 1,
            edge_index: 0,
            length: 5.0,
            width: 1.8,
            preceding: None,
        }
    }

    fn trace(states: Vec<VehicleState>) -> Trace {
        let mut t = Trace::empty(IntersectionLayout::default(), 0.1);
        for s in states {
            t.vehicles.insert(s.vehicle_id, vec![s]);
        }
        annotate_preceding(t)
    }

    #[test]
    fn lone_vehicle_gets_virtual_leader() {
        let t = trace(vec![st(1, -50.0, 8.0)]);
        let p = t.vehicles[&VehicleId(1)][0].preceding.unwrap();
        assert!((p.position.y - 150.0).abs() < 1e-9);
        assert!((p.position.x - 1.6).abs() < 1e-9);
        assert_eq!(p.speed, 8.0);
        assert!(!p.real);
    }

    #[test]
    fn follower_sees_leader_and_leader_sees_virtual() {
        let t = trace(vec![st(1, -60.0, 7.0), st(2, -40.0, 9.0)]);
        let f = t.vehicles[&VehicleId(1)][0].preceding.unwrap();
        assert_eq!(f.position, Vec2::new(1.6, -40.0));
        assert_eq!(f.speed, 9.0);
        let l = t.vehicles[&VehicleId(2)][0].preceding.unwrap();
        assert!(!l.real);
        assert!((l.position.y - 160.0).abs() < 1e-9);
    }

    #[test]
    fn other_lane_ignored() {
        let mut other = st(2, -40.0, 9.0);
        other.lane_index = 0;
        other.position.x = 4.8;
        let t = trace(vec![st(1, -60.0, 7.0), other]);
        assert!(!t.vehicles[&VehicleId(1)][0].preceding.unwrap().real);
    }
}
