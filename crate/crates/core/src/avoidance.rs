//! Turn alarms into braking and replay the colliding pair to see whether
//! the crash still happens, and how hard.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::detection::DetectionLog;
use crate::error::{Error, Result};
use crate::geometry::{OrientedRect, Vec2};
use crate::world::trace::{tick_index, tick_time};
use crate::world::{CollisionEvent, PairId, Trace, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverType {
    Human,
    Automated,
}

impl DriverType {
    pub const ALL: [DriverType; 2] = [DriverType::Human, DriverType::Automated];
}

/// Latency components in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencyProfile {
    pub transmission_min_ms: f64,
    pub transmission_max_ms: f64,
    pub transmission_alpha: f64,
    pub transmission_beta: f64,
    pub decoding_ms: f64,
    pub processing_ms: f64,
    pub reaction_mean_ms: f64,
    pub reaction_std_ms: f64,
    /// Truncation of the reaction time, in standard deviations around the mean.
    pub reaction_z: (f64, f64),
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self {
            transmission_min_ms: 2.4,
            transmission_max_ms: 18.0,
            transmission_alpha: 2.0,
            transmission_beta: 5.0,
            decoding_ms: 23.0,
            processing_ms: 400.0,
            reaction_mean_ms: 680.0,
            reaction_std_ms: 145.0,
            reaction_z: (-1.24, 1.52),
        }
    }
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.transmission_min_ms >= 0.0
            && self.transmission_max_ms >= self.transmission_min_ms
            && self.transmission_alpha > 0.0
            && self.transmission_beta > 0.0
            && self.decoding_ms >= 0.0
            && self.processing_ms >= 0.0
            && self.reaction_std_ms > 0.0
            && self.reaction_z.0 < self.reaction_z.1
            && self.reaction_mean_ms + self.reaction_z.0 * self.reaction_std_ms >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid latency profile {self:?}")))
        }
    }

    pub fn reaction_bounds_ms(&self) -> (f64, f64) {
        (
            self.reaction_mean_ms + self.reaction_z.0 * self.reaction_std_ms,
            self.reaction_mean_ms + self.reaction_z.1 * self.reaction_std_ms,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyDraw {
    pub transmission_ms: f64,
    pub decoding_ms: f64,
    pub processing_ms: f64,
    pub reaction_ms: f64,
}

impl LatencyDraw {
    pub fn total_ms(&self) -> f64 {
        self.transmission_ms + self.decoding_ms + self.processing_ms + self.reaction_ms
    }

    pub fn total_s(&self) -> f64 {
        self.total_ms() / 1000.0
    }

    pub fn for_driver(self, driver: DriverType) -> Self {
        match driver {
            DriverType::Human => self,
            DriverType::Automated => Self {
                reaction_ms: 0.0,
                ..self
            },
        }
    }
}

/// Draw all components. The reaction time is drawn for every driver type so
/// that the random stream does not depend on it; automated drivers then zero it.
pub fn sample_latency<R: Rng + ?Sized>(profile: &LatencyProfile, driver: DriverType, rng: &mut R) -> Result<LatencyDraw> {
    profile.validate()?;
    let beta = Beta::new(profile.transmission_alpha, profile.transmission_beta)
        .map_err(|e| Error::config(format!("transmission beta: {e}")))?;
    let u = beta.sample(rng);
    let transmission_ms = profile.transmission_min_ms + u * (profile.transmission_max_ms - profile.transmission_min_ms);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let z = loop {
        let z: f64 = normal.sample(rng);
        if z >= profile.reaction_z.0 && z <= profile.reaction_z.1 {
            break z;
        }
    };
    let draw = LatencyDraw {
        transmission_ms,
        decoding_ms: profile.decoding_ms,
        processing_ms: profile.processing_ms,
        reaction_ms: profile.reaction_mean_ms + z * profile.reaction_std_ms,
    };
    Ok(draw.for_driver(driver))
}

/// Time to halt from `speed` under constant `decel`.
pub fn stopping_time(speed: f64, decel: f64) -> f64 {
    speed / decel
}

/// Speed after braking for `elapsed` seconds.
pub fn braked_speed(speed: f64, decel: f64, elapsed: f64) -> f64 {
    (speed - decel * elapsed.max(0.0)).max(0.0)
}

/// Whether latency plus stopping time fits inside the available reaction time.
pub fn halts_in_time(latency_s: f64, stop_s: f64, available_s: f64) -> bool {
    latency_s + stop_s < available_s
}

/// A vehicle's recorded motion, parameterised by travelled distance.
struct Track<'a> {
    states: &'a [VehicleState],
    first_tick: i64,
    cum: Vec<f64>,
    tick: f64,
}

impl<'a> Track<'a> {
    fn new(states: &'a [VehicleState], tick: f64) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::contract("vehicle without states"))?;
        let mut cum = Vec::with_capacity(states.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in states.windows(2) {
            acc += w[0].position.distance(w[1].position);
            cum.push(acc);
        }
        Ok(Self {
            states,
            first_tick: tick_index(first.time, tick),
            cum,
            tick,
        })
    }

    fn last(&self) -> &VehicleState {
        self.states.last().expect("non-empty")
    }

    fn last_time(&self) -> f64 {
        self.last().time
    }

    fn state_at_tick(&self, n: i64) -> Option<&VehicleState> {
        let k = n - self.first_tick;
        (k >= 0).then(|| self.states.get(k as usize)).flatten()
    }

    /// Fractional index of time `t` within the recorded states.
    fn index_at(&self, t: f64) -> f64 {
        (t / self.tick - self.first_tick as f64).max(0.0)
    }

    fn lerp<F: Fn(usize) -> f64>(&self, t: f64, f: F) -> f64 {
        let x = self.index_at(t);
        let i = (x.floor() as usize).min(self.states.len() - 1);
        if i + 1 >= self.states.len() {
            return f(self.states.len() - 1);
        }
        let frac = x - i as f64;
        f(i) + frac * (f(i + 1) - f(i))
    }

    /// Distance travelled by time `t` without intervention, extrapolating at
    /// the last speed after the record ends.
    fn original_distance(&self, t: f64) -> f64 {
        let last = self.last();
        if t > last.time {
            return self.cum[self.cum.len() - 1] + last.speed * (t - last.time);
        }
        self.lerp(t, |i| self.cum[i])
    }

    fn original_speed(&self, t: f64) -> f64 {
        if t > self.last_time() {
            return self.last().speed;
        }
        self.lerp(t, |i| self.states[i].speed)
    }

    fn original_pose(&self, n: i64) -> (Vec2, f64) {
        match self.state_at_tick(n) {
            Some(s) => (s.position, s.heading),
            None => self.pose_at_distance(self.original_distance(tick_time(n, self.tick))),
        }
    }

    fn pose_at_distance(&self, s: f64) -> (Vec2, f64) {
        let end = self.cum[self.cum.len() - 1];
        if s >= end {
            let last = self.last();
            let dir = Vec2::from_heading(last.heading);
            return (last.position + dir * (s - end), last.heading);
        }
        let i = self.cum.partition_point(|&c| c <= s).saturating_sub(1);
        let (a, b) = (&self.states[i], &self.states[i + 1]);
        let seg = self.cum[i + 1] - self.cum[i];
        let frac = if seg > 0.0 { (s - self.cum[i]) / seg } else { 0.0 };
        let heading = if frac < 0.5 { a.heading } else { b.heading };
        (a.position + (b.position - a.position) * frac, heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BrakePlan {
    pub start_time: f64,
    pub start_speed: f64,
    pub decel: f64,
}

impl BrakePlan {
    pub fn stop_time(&self) -> f64 {
        self.start_time + stopping_time(self.start_speed, self.decel)
    }
}

struct Replay<'a> {
    track: Track<'a>,
    plan: BrakePlan,
    start_distance: f64,
}

impl Replay<'_> {
    fn braked_distance(&self, t: f64) -> f64 {
        let tau = (t - self.plan.start_time).clamp(0.0, stopping_time(self.plan.start_speed, self.plan.decel));
        self.start_distance + self.plan.start_speed * tau - 0.5 * self.plan.decel * tau * tau
    }

    /// Pose and speed at tick `n`. A braking vehicle never runs ahead of its
    /// recorded motion.
    fn at(&self, n: i64) -> (Vec2, f64, f64) {
        let t = tick_time(n, self.track.tick);
        if t <= self.plan.start_time {
            let (p, h) = self.track.original_pose(n);
            return (p, h, self.track.original_speed(t));
        }
        let orig = self.track.original_distance(t);
        let braked = self.braked_distance(t);
        if braked < orig {
            let (p, h) = self.track.pose_at_distance(braked);
            (p, h, braked_speed(self.plan.start_speed, self.plan.decel, t - self.plan.start_time))
        } else {
            let (p, h) = self.track.original_pose(n);
            (p, h, self.track.original_speed(t))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvoidanceOutcome {
    pub pair: PairId,
    pub avoided: bool,
    pub brake_start: [f64; 2],
    /// Time to halt from the speed at brake start.
    pub stopping_time: [f64; 2],
    pub impact_time: Option<f64>,
    pub impact_speeds_without: [f64; 2],
    pub impact_speeds_with: Option<[f64; 2]>,
}

impl AvoidanceOutcome {
    /// Relative drop of the summed impact speed; `None` if avoided or the
    /// baseline impact was at standstill.
    pub fn speed_reduction(&self) -> Option<f64> {
        let with = self.impact_speeds_with?;
        let base = self.impact_speeds_without[0] + self.impact_speeds_without[1];
        (base > 0.0).then(|| 1.0 - (with[0] + with[1]) / base)
    }
}

/// Replay a colliding pair with both vehicles braking after `alarm_time` plus
/// their own latency; only the two bodies are checked against each other.
pub fn simulate_braking(
    trace: &Trace,
    event: &CollisionEvent,
    alarm_time: f64,
    decel: f64,
    latencies: [LatencyDraw; 2],
) -> Result<AvoidanceOutcome> {
    if !(decel > 0.0) {
        return Err(Error::config(format!("deceleration must be positive, got {decel}")));
    }
    let tick = trace.tick();
    let ids = [event.pair.0, event.pair.1];
    let mut replays = Vec::with_capacity(2);
    for (id, lat) in ids.iter().zip(latencies) {
        let states = trace
            .vehicles
            .get(id)
            .ok_or_else(|| Error::contract(format!("collision references unknown vehicle {id}")))?;
        let track = Track::new(states, tick)?;
        let start_time = alarm_time + lat.total_s();
        let plan = BrakePlan {
            start_time,
            start_speed: track.original_speed(start_time),
            decel,
        };
        let start_distance = track.original_distance(start_time);
        replays.push(Replay {
            track,
            plan,
            start_distance,
        });
    }
    let (a, b) = (&replays[0], &replays[1]);
    let first = a.track.first_tick.max(b.track.first_tick);
    let stop = a.plan.stop_time().max(b.plan.stop_time()).max(event.collision_time);
    let last = tick_index(stop, tick) + 1;
    let mut impact = None;
    for n in first..=last {
        let (pa, ha, va) = a.at(n);
        let (pb, hb, vb) = b.at(n);
        let (sa, sb) = (&a.track.states[0], &b.track.states[0]);
        let ra = OrientedRect::from_front_bumper(pa, ha, sa.length, sa.width);
        let rb = OrientedRect::from_front_bumper(pb, hb, sb.length, sb.width);
        if ra.intersects(&rb) {
            impact = Some((tick_time(n, tick), [va, vb]));
            break;
        }
    }
    Ok(AvoidanceOutcome {
        pair: event.pair,
        avoided: impact.is_none(),
        brake_start: [a.plan.start_time, b.plan.start_time],
        stopping_time: [
            stopping_time(a.plan.start_speed, decel),
            stopping_time(b.plan.start_speed, decel),
        ],
        impact_time: impact.map(|(t, _)| t),
        impact_speeds_without: [event.impact_speeds.0, event.impact_speeds.1],
        impact_speeds_with: impact.map(|(_, v)| v),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvoidanceConfig {
    pub trials: usize,
    pub decelerations: Vec<f64>,
    pub drivers: Vec<DriverType>,
    pub profile: LatencyProfile,
}

impl Default for AvoidanceConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            decelerations: vec![4.5, 9.0],
            drivers: DriverType::ALL.to_vec(),
            profile: LatencyProfile::default(),
        }
    }
}

impl AvoidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::config("avoidance needs at least one trial"));
        }
        if self.decelerations.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::config("decelerations must be positive"));
        }
        self.profile.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualImpact {
    pub pair: PairId,
    pub trial: usize,
    pub without: [f64; 2],
    pub with: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvoidanceCell {
    pub decel: f64,
    pub driver: DriverType,
    /// Ground-truth collisions times trials.
    pub cases: usize,
    /// Cases with an alarm at or before the collision.
    pub detected: usize,
    pub avoided: usize,
    pub avoided_fraction: f64,
    pub avoided_fraction_detected: Option<f64>,
    pub mean_speed_reduction: Option<f64>,
    pub residual: Vec<ResidualImpact>,
    pub latency: Option<LatencySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvoidanceReport {
    pub trials: usize,
    pub seed: u64,
    pub cells: Vec<AvoidanceCell>,
}

impl AvoidanceReport {
    pub fn cell(&self, decel: f64, driver: DriverType) -> Option<&AvoidanceCell> {
        self.cells.iter().find(|c| c.decel == decel && c.driver == driver)
    }
}

/// First alarm per pair that precedes its collision.
fn timely_alarms(collisions: &[CollisionEvent], log: &DetectionLog) -> BTreeMap<PairId, f64> {
    let mut first = BTreeMap::new();
    for c in collisions {
        if let Some(a) = log
            .alarms
            .iter()
            .filter(|a| a.pair == c.pair && a.time < c.collision_time + 1e-9)
            .map(|a| a.time)
            .min_by(f64::total_cmp)
        {
            first.insert(c.pair, a);
        }
    }
    first
}

/// Every (deceleration, driver) cell over `trials` latency draws. Trial `i`
/// uses stream `i` of a generator seeded with `seed`, so all cells share draws.
pub fn evaluate_avoidance(
    trace: &Trace,
    collisions: &[CollisionEvent],
    log: &DetectionLog,
    cfg: &AvoidanceConfig,
    seed: u64,
) -> Result<AvoidanceReport> {
    cfg.validate()?;
    let alarms = timely_alarms(collisions, log);
    let mut draws: Vec<Vec<[LatencyDraw; 2]>> = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let mut per = Vec::with_capacity(collisions.len());
        for _ in collisions {
            per.push([
                sample_latency(&cfg.profile, DriverType::Human, &mut rng)?,
                sample_latency(&cfg.profile, DriverType::Human, &mut rng)?,
            ]);
        }
        draws.push(per);
    }
    let mut cells = Vec::new();
    for &decel in &cfg.decelerations {
        for &driver in &cfg.drivers {
            let mut cell = AvoidanceCell {
                decel,
                driver,
                cases: collisions.len() * cfg.trials,
                detected: 0,
                avoided: 0,
                avoided_fraction: 0.0,
                avoided_fraction_detected: None,
                mean_speed_reduction: None,
                residual: Vec::new(),
                latency: None,
            };
            let mut reductions = Vec::new();
            let mut totals = Vec::new();
            for (trial, per) in draws.iter().enumerate() {
                for (event, lat) in collisions.iter().zip(per) {
                    let Some(&alarm_time) = alarms.get(&event.pair) else {
                        continue;
                    };
                    let lat = [lat[0].for_driver(driver), lat[1].for_driver(driver)];
                    totals.extend(lat.iter().map(LatencyDraw::total_ms));
                    let out = simulate_braking(trace, event, alarm_time, decel, lat)?;
                    cell.detected += 1;
                    if out.avoided {
                        cell.avoided += 1;
                    } else {
                        if let Some(r) = out.speed_reduction() {
                            reductions.push(r);
                        }
                        cell.residual.push(ResidualImpact {
                            pair: event.pair,
                            trial,
                            without: out.impact_speeds_without,
                            with: out.impact_speeds_with.unwrap_or_default(),
                        });
                    }
                }
            }
            if cell.cases > 0 {
                cell.avoided_fraction = cell.avoided as f64 / cell.cases as f64;
            }
            if cell.detected > 0 {
                cell.avoided_fraction_detected = Some(cell.avoided as f64 / cell.detected as f64);
            }
            if !reductions.is_empty() {
                cell.mean_speed_reduction = Some(reductions.iter().sum::<f64>() / reductions.len() as f64);
            }
            if !totals.is_empty() {
                cell.latency = Some(LatencySummary {
                    mean_ms: totals.iter().sum::<f64>() / totals.len() as f64,
                    min_ms: totals.iter().copied().fold(f64::INFINITY, f64::min),
                    max_ms: totals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                });
            }
            cells.push(cell);
        }
    }
    Ok(AvoidanceReport {
        trials: cfg.trials,
        seed,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{Alarm, Method};
    use crate::world::{detect_ground_truth_collisions, IntersectionLayout, VehicleId};
    use proptest::prelude::*;

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

    /// Two vehicles on perpendicular straight paths whose fronts reach the
    /// origin together at `meet` seconds; the record stops at first overlap.
    fn crossing(speed_a: f64, speed_b: f64, meet: f64) -> Trace {
        let mut t = Trace::empty(IntersectionLayout::default(), 0.1);
        for n in 0..=((meet + 2.0) / 0.1).round() as i64 {
            let time = n as f64 * 0.1;
            let a = state(1, n, Vec2::new(-speed_a * (meet - time), 0.0), 90.0, speed_a);
            let b = state(2, n, Vec2::new(0.0, -speed_b * (meet - time)), 0.0, speed_b);
            let hit = a.body().intersects(&b.body());
            t.vehicles.entry(VehicleId(1)).or_default().push(a);
            t.vehicles.entry(VehicleId(2)).or_default().push(b);
            if hit {
                break;
            }
        }
        t
    }

    fn log_with(pair: PairId, time: f64) -> DetectionLog {
        DetectionLog {
            method: Method::RandomForest,
            tick_s: 0.1,
            records: Vec::new(),
            alarms: vec![Alarm {
                pair,
                tick: tick_index(time, 0.1),
                time,
                vote_fraction: 1.0,
                min_distance: 0.0,
                min_expected_sq: 0.0,
            }],
        }
    }

    fn zero_latency() -> LatencyDraw {
        LatencyDraw {
            transmission_ms: 0.0,
            decoding_ms: 0.0,
            processing_ms: 0.0,
            reaction_ms: 0.0,
        }
    }

    #[test]
    fn transmission_mean_matches_beta() {
        let p = LatencyProfile::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let d = sample_latency(&p, DriverType::Human, &mut rng).unwrap();
            assert!((2.4..=18.0).contains(&d.transmission_ms));
            sum += d.transmission_ms;
        }
        let expect = 2.4 + 2.0 / 7.0 * 15.6;
        assert!((sum / n as f64 - expect).abs() < 0.02 * expect);
    }

    #[test]
    fn reaction_is_truncated_or_zero() {
        let p = LatencyProfile::default();
        let (lo, hi) = p.reaction_bounds_ms();
        assert!((lo - 500.2).abs() < 1e-9 && (hi - 900.4).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100_000 {
            let r = sample_latency(&p, DriverType::Human, &mut rng).unwrap().reaction_ms;
            assert!((500.2..=900.4).contains(&r), "{r}");
        }
        for _ in 0..100 {
            let d = sample_latency(&p, DriverType::Automated, &mut rng).unwrap();
            assert_eq!(d.reaction_ms, 0.0);
            assert_eq!(d.decoding_ms, 23.0);
            assert_eq!(d.processing_ms, 400.0);
        }
    }

    #[test]
    fn kinematic_examples() {
        assert_eq!(stopping_time(9.0, 4.5), 2.0);
        assert!((braked_speed(10.0, 4.5, 1.0) - 5.5).abs() < 1e-12);
        assert_eq!(braked_speed(10.0, 4.5, 5.0), 0.0);
        assert!(halts_in_time(1.11, 2.0, 3.9));
        assert!(!halts_in_time(1.9, 2.0, 3.9));
    }

    #[test]
    fn baseline_crossing_collides() {
        let trace = crossing(10.0, 10.0, 5.0);
        let events = detect_ground_truth_collisions(&trace);
        assert_eq!(events.len(), 1);
    }

    #[test]
    fn late_brake_keeps_original_impact() {
        let trace = crossing(10.0, 10.0, 5.0);
        let ev = detect_ground_truth_collisions(&trace)[0].clone();
        let out = simulate_braking(&trace, &ev, ev.collision_time, 4.5, [zero_latency(); 2]).unwrap();
        assert!(!out.avoided);
        assert_eq!(out.impact_time, Some(ev.collision_time));
        assert_eq!(out.impact_speeds_with, Some([10.0, 10.0]));
    }

    #[test]
    fn early_alarm_avoids() {
        let trace = crossing(9.0, 9.0, 6.0);
        let ev = detect_ground_truth_collisions(&trace)[0].clone();
        // each car needs 2 s to stop; with 1.2 s of latency a 3.9 s warning suffices
        let lat = LatencyDraw {
            transmission_ms: 10.0,
            decoding_ms: 23.0,
            processing_ms: 400.0,
            reaction_ms: 767.0,
        };
        assert!(halts_in_time(lat.total_s(), stopping_time(9.0, 4.5), 3.9));
        let out = simulate_braking(&trace, &ev, ev.collision_time - 3.9, 4.5, [lat; 2]).unwrap();
        assert!(out.avoided, "{out:?}");
        assert_eq!(out.stopping_time, [2.0, 2.0]);
    }

    #[test]
    fn instant_halt_before_contact_avoids() {
        let trace = crossing(12.0, 8.0, 5.0);
        let ev = detect_ground_truth_collisions(&trace)[0].clone();
        for lead in [0.1, 0.5, 2.0] {
            let out = simulate_braking(&trace, &ev, ev.collision_time - lead, 1e9, [zero_latency(); 2]).unwrap();
            assert!(out.avoided, "lead {lead}");
        }
    }

    #[test]
    fn partial_braking_lowers_impact_speed() {
        let trace = crossing(10.0, 10.0, 5.0);
        let ev = detect_ground_truth_collisions(&trace)[0].clone();
        let out = simulate_braking(&trace, &ev, ev.collision_time - 0.6, 4.5, [zero_latency(); 2]).unwrap();
        assert!(!out.avoided);
        let with = out.impact_speeds_with.unwrap();
        let t = out.impact_time.unwrap();
        for v in with {
            assert!(v < 10.0);
            assert!((v - braked_speed(10.0, 4.5, t - (ev.collision_time - 0.6))).abs() < 1e-9);
        }
        assert!(out.speed_reduction().unwrap() > 0.0);
    }

    #[test]
    fn no_alarms_no_avoidance() {
        let trace = crossing(10.0, 10.0, 5.0);
        let events = detect_ground_truth_collisions(&trace);
        let mut log = log_with(events[0].pair, 1.0);
        log.alarms.clear();
        let r = evaluate_avoidance(&trace, &events, &log, &AvoidanceConfig::default(), 3).unwrap();
        for c in &r.cells {
            assert_eq!(c.avoided_fraction, 0.0);
            assert_eq!(c.avoided_fraction_detected, None);
            assert!(c.residual.is_empty());
            assert_eq!(c.mean_speed_reduction, None);
        }
    }

    #[test]
    fn ample_warning_avoids_everything() {
        let trace = crossing(10.0, 11.0, 8.0);
        let events = detect_ground_truth_collisions(&trace);
        let p = LatencyProfile::default();
        let worst = (p.transmission_max_ms + p.decoding_ms + p.processing_ms + p.reaction_bounds_ms().1) / 1000.0;
        let lead = stopping_time(11.0, 4.5) + worst + 0.1;
        let log = log_with(events[0].pair, events[0].collision_time - lead);
        let r = evaluate_avoidance(&trace, &events, &log, &AvoidanceConfig::default(), 4).unwrap();
        for c in &r.cells {
            assert_eq!(c.avoided_fraction_detected, Some(1.0), "{c:?}");
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let trace = crossing(10.0, 10.0, 5.0);
        let events = detect_ground_truth_collisions(&trace);
        let log = log_with(events[0].pair, events[0].collision_time - 1.5);
        let cfg = AvoidanceConfig::default();
        let a = evaluate_avoidance(&trace, &events, &log, &cfg, 9).unwrap();
        let b = evaluate_avoidance(&trace, &events, &log, &cfg, 9).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn braking_is_monotone(va in 7.0f64..14.0, vb in 7.0f64..14.0, lead in 0.5f64..3.5, seed in 0u64..1000) {
            let trace = crossing(va, vb, 6.0);
            let events = detect_ground_truth_collisions(&trace);
            prop_assume!(events.len() == 1);
            let log = log_with(events[0].pair, events[0].collision_time - lead);
            let cfg = AvoidanceConfig { trials: 5, ..AvoidanceConfig::default() };
            let r = evaluate_avoidance(&trace, &events, &log, &cfg, seed).unwrap();
            for driver in DriverType::ALL {
                let soft = r.cell(4.5, driver).unwrap();
                let hard = r.cell(9.0, driver).unwrap();
                prop_assert!(hard.avoided >= soft.avoided);
            }
            for decel in [4.5, 9.0] {
                let human = r.cell(decel, DriverType::Human).unwrap();
                let auto = r.cell(decel, DriverType::Automated).unwrap();
                prop_assert!(auto.avoided >= human.avoided);
                for cell in [human, auto] {
                    for res in &cell.residual {
                        prop_assert!(res.with[0] <= res.without[0] + 1e-9);
                        prop_assert!(res.with[1] <= res.without[1] + 1e-9);
                    }
                }
            }
        }
    }
}
