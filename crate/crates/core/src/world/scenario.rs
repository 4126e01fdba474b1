//! Seeded microscopic traffic simulation at a single unregulated intersection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

use super::layout::{IntersectionLayout, Route, RoutePart, RoutePath, Turn, ARM_COUNT};
use super::trace::{tick_time, Trace, VehicleId, VehicleState, DEFAULT_TICK_S};
use crate::error::{Error, Result};
use crate::geometry::OrientedRect;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteMix {
    pub straight: f64,
    pub left: f64,
    pub right: f64,
}

impl Default for RouteMix {
    fn default() -> Self {
        Self {
            straight: 0.5,
            left: 0.25,
            right: 0.25,
        }
    }
}

/// Intelligent Driver Model parameters shared by all drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriverParams {
    pub max_accel: f64,
    pub comfort_decel: f64,
    pub min_gap: f64,
    pub headway: f64,
    pub exponent: f64,
    pub max_lateral_accel: f64,
    pub emergency_decel: f64,
}

impl Default for DriverParams {
    fn default() -> Self {
        Self {
            max_accel: 1.5,
            comfort_decel: 2.5,
            min_gap: 2.0,
            headway: 1.2,
            exponent: 4.0,
            max_lateral_accel: 2.5,
            emergency_decel: 9.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayoutConfig {
    pub lanes_per_approach: usize,
    pub arm_length: f64,
    pub lane_width: f64,
    pub corner_margin: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        let l = IntersectionLayout::default();
        Self {
            lanes_per_approach: l.lanes_per_approach,
            arm_length: l.arm_length,
            lane_width: l.lane_width,
            corner_margin: l.corner_margin,
        }
    }
}

impl LayoutConfig {
    pub fn build(&self) -> Result<IntersectionLayout> {
        IntersectionLayout::new(
            self.lanes_per_approach,
            self.arm_length,
            self.lane_width,
            self.corner_margin,
        )
    }
}

/// A vehicle placed by hand rather than drawn from the arrival process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedVehicle {
    pub spawn_time: f64,
    pub origin: usize,
    pub lane: usize,
    pub turn: Turn,
    /// Initial and desired speed.
    pub speed: f64,
    #[serde(default)]
    pub ignore_priority: bool,
    /// Arc length along the route at spawn.
    #[serde(default)]
    pub start_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub duration_s: f64,
    pub tick_s: f64,
    /// Mean arrivals per second on each arm.
    pub spawn_rate_per_arm: f64,
    pub route_mix: RouteMix,
    pub speed_limit_mps: f64,
    /// Relative spread of individual desired speeds around the limit.
    pub speed_spread: f64,
    pub ignore_priority_fraction: f64,
    pub seed: u64,
    pub layout: LayoutConfig,
    pub vehicle_length_m: f64,
    pub vehicle_width_m: f64,
    pub driver: DriverParams,
    /// Pairs of priority-ignoring vehicles timed to meet in the conflict region.
    pub injected_collisions: usize,
    pub injection_start_s: f64,
    pub injection_interval_s: f64,
    pub injection_speed_range: (f64, f64),
    /// Share of injected pairs drawn from crossing routes where at least one vehicle turns.
    pub injection_turning_fraction: f64,
    pub scripted: Vec<ScriptedVehicle>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration_s: 300.0,
            tick_s: DEFAULT_TICK_S,
            spawn_rate_per_arm: 0.05,
            route_mix: RouteMix::default(),
            speed_limit_mps: 13.0,
            speed_spread: 0.15,
            ignore_priority_fraction: 0.0,
            seed: 0,
            layout: LayoutConfig::default(),
            vehicle_length_m: 5.0,
            vehicle_width_m: 1.8,
            driver: DriverParams::default(),
            injected_collisions: 0,
            injection_start_s: 15.0,
            injection_interval_s: 15.0,
            injection_speed_range: (8.0, 13.0),
            injection_turning_fraction: 0.5,
            scripted: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.duration_s.is_finite() || self.duration_s < 0.0 {
            return Err(Error::config("duration_s must be non-negative"));
        }
        if !self.spawn_rate_per_arm.is_finite() || self.spawn_rate_per_arm < 0.0 {
            return Err(Error::config("spawn_rate_per_arm must be non-negative"));
        }
        if !(self.tick_s > 0.0) {
            return Err(Error::config("tick_s must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ignore_priority_fraction) {
            return Err(Error::config("ignore_priority_fraction must lie in [0, 1]"));
        }
        let m = &self.route_mix;
        if [m.straight, m.left, m.right].iter().any(|w| *w < 0.0)
            || m.straight + m.left + m.right <= 0.0
        {
            return Err(Error::config("route_mix weights must be non-negative with a positive sum"));
        }
        if !(self.speed_limit_mps > 0.0) || !(0.0..1.0).contains(&self.speed_spread) {
            return Err(Error::config("speed_limit_mps must be positive and speed_spread in [0, 1)"));
        }
        if !(self.vehicle_length_m > 0.0 && self.vehicle_width_m > 0.0) {
            return Err(Error::config("vehicle dimensions must be positive"));
        }
        let (lo, hi) = self.injection_speed_range;
        if self.injected_collisions > 0 && !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("injection_speed_range must be positive and ordered"));
        }
        if !(0.0..=1.0).contains(&self.injection_turning_fraction) {
            return Err(Error::config("injection_turning_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Ticks simulated for a scenario duration.
fn tick_count(duration: f64, tick: f64) -> i64 {
    (duration / tick - 1e-9).ceil().max(0.0) as i64
}

/// Distance before the stop line at which a driver starts negotiating the junction.
fn decision_zone(p: &DriverParams, v: f64) -> f64 {
    p.min_gap + v * p.headway + v * v / (2.0 * (p.max_accel * p.comfort_decel).sqrt()) + 10.0
}

fn idm_accel(p: &DriverParams, v: f64, v0: f64, leader: Option<(f64, f64)>) -> f64 {
    let v0 = v0.max(0.1);
    let mut a = p.max_accel * (1.0 - (v / v0).powf(p.exponent));
    if let Some((gap, lead_v)) = leader {
        let dv = v - lead_v;
        let s_star = p.min_gap
            + (v * p.headway + v * dv / (2.0 * (p.max_accel * p.comfort_decel).sqrt())).max(0.0);
        let gap = gap.max(0.01);
        a -= p.max_accel * (s_star / gap).powi(2);
    }
    a.max(-p.emergency_decel)
}

/// Arc lengths on the two paths where their centerlines come closest, with that distance.
pub fn closest_approach(a: &RoutePath, b: &RoutePath, step: f64) -> (f64, f64, f64) {
    let sample = |p: &RoutePath| -> Vec<(f64, crate::geometry::Vec2)> {
        let (s0, s1) = p.junction_span();
        let n = ((s1 - s0) / step).ceil().max(1.0) as usize;
        (0..=n)
            .map(|i| {
                let s = s0 + (s1 - s0) * i as f64 / n as f64;
                (s, p.pose_at(s).0)
            })
            .collect()
    };
    let sa = sample(a);
    let sb = sample(b);
    let mut best = (0.0, 0.0, f64::INFINITY);
    for &(s, p) in &sa {
        for &(t, q) in &sb {
            let d = p.distance(q);
            if d < best.2 {
                best = (s, t, d);
            }
        }
    }
    best
}

/// Route-to-route conflict table over `layout.all_routes()`.
#[derive(Debug, Clone)]
pub struct ConflictMatrix {
    pub routes: Vec<Route>,
    table: Vec<bool>,
}

/// Centerlines closer than this inside the junction make two routes conflict.
pub const CONFLICT_CLEARANCE_M: f64 = 2.5;

impl ConflictMatrix {
    pub fn build(layout: &IntersectionLayout) -> Result<Self> {
        let routes = layout.all_routes();
        let paths = routes
            .iter()
            .map(|r| layout.route_path(*r))
            .collect::<Result<Vec<_>>>()?;
        let n = routes.len();
        let mut table = vec![false; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let (ri, rj) = (routes[i], routes[j]);
                if ri.origin == rj.origin {
                    continue;
                }
                let same_exit = ri.exit_arm() == rj.exit_arm() && ri.lane == rj.lane;
                let close = closest_approach(&paths[i], &paths[j], 0.5).2 < CONFLICT_CLEARANCE_M;
                if same_exit || close {
                    table[i * n + j] = true;
                    table[j * n + i] = true;
                }
            }
        }
        Ok(Self { routes, table })
    }

    pub fn index(&self, route: Route) -> Option<usize> {
        self.routes.iter().position(|r| *r == route)
    }

    pub fn conflicts(&self, a: usize, b: usize) -> bool {
        self.table[a * self.routes.len() + b]
    }
}

#[derive(Debug, Clone)]
struct Agent {
    id: VehicleId,
    route: usize,
    s: f64,
    v: f64,
    desired: f64,
    ignore_priority: bool,
    length: f64,
    width: f64,
    request: Option<(i64, u32)>,
    granted: bool,
    accel: f64,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    route: Route,
    desired: f64,
    ignore_priority: bool,
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    conflicts: ConflictMatrix,
    paths: Vec<RoutePath>,
    agents: Vec<Agent>,
    next_id: u32,
}

/// Longitudinal lane a front bumper is on, used for leader search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LaneKey {
    Approach(usize, usize),
    Junction(usize),
    Exit(usize, usize),
}

impl<'a> Sim<'a> {
    fn path(&self, a: &Agent) -> &RoutePath {
        &self.paths[a.route]
    }

    fn key(&self, a: &Agent) -> LaneKey {
        let p = self.path(a);
        let r = p.route;
        match p.part_at(a.s) {
            RoutePart::Approach => LaneKey::Approach(r.origin, r.lane),
            RoutePart::Junction => LaneKey::Junction(a.route),
            RoutePart::Exit => LaneKey::Exit(r.exit_arm(), r.lane),
        }
    }

    fn exit_distance(&self, a: &Agent) -> f64 {
        a.s - self.path(a).junction_span().1
    }

    fn dist_to_stop(&self, a: &Agent) -> f64 {
        self.path(a).approach_length() - a.s
    }

    /// Gap (front to rear bumper) and speed of the nearest vehicle ahead of agent `i`.
    fn leader(&self, i: usize) -> Option<(f64, f64)> {
        let ego = &self.agents[i];
        let ego_path = self.path(ego);
        let ego_route = ego_path.route;
        let ego_key = self.key(ego);
        let (j0, j1) = ego_path.junction_span();
        let mut best: Option<(f64, f64)> = None;
        for (k, other) in self.agents.iter().enumerate() {
            if k == i {
                continue;
            }
            let op = self.path(other);
            let or = op.route;
            let ahead = match (ego_key, self.key(other)) {
                (LaneKey::Approach(a, l), LaneKey::Approach(b, m)) if a == b && l == m => {
                    Some(other.s - ego.s)
                }
                (LaneKey::Approach(a, l), LaneKey::Junction(r)) if or.origin == a && or.lane == l => {
                    if r == ego.route || other.s - op.junction_span().0 < 10.0 {
                        Some(other.s - ego.s)
                    } else {
                        None
                    }
                }
                (LaneKey::Approach(..), LaneKey::Exit(b, m))
                    if b == ego_route.exit_arm() && m == ego_route.lane =>
                {
                    Some(j1 - ego.s + self.exit_distance(other))
                }
                (LaneKey::Junction(r), LaneKey::Junction(q)) if r == q => Some(other.s - ego.s),
                (LaneKey::Junction(_), LaneKey::Exit(b, m))
                    if b == ego_route.exit_arm() && m == ego_route.lane =>
                {
                    Some(j1 - ego.s + self.exit_distance(other))
                }
                (LaneKey::Exit(a, l), LaneKey::Exit(b, m)) if a == b && l == m => {
                    Some(self.exit_distance(other) - (ego.s - j1))
                }
                _ => None,
            };
            if let Some(d) = ahead {
                if d > 0.0 || (d == 0.0 && other.id > ego.id) {
                    let gap = d - other.length;
                    if best.is_none_or(|(g, _)| gap < g) {
                        best = Some((gap, other.v));
                    }
                }
            }
        }
        let _ = j0;
        best
    }

    fn is_lead_on_approach(&self, i: usize) -> bool {
        let ego = &self.agents[i];
        let LaneKey::Approach(a, l) = self.key(ego) else {
            return false;
        };
        !self.agents.iter().enumerate().any(|(k, o)| {
            k != i && self.key(o) == LaneKey::Approach(a, l) && o.s > ego.s
        })
    }

    /// Whether agent `k` currently occupies or is committed to the junction.
    fn is_active(&self, k: usize) -> bool {
        let o = &self.agents[k];
        match self.path(o).part_at(o.s) {
            RoutePart::Junction => true,
            RoutePart::Exit => self.exit_distance(o) < o.length,
            RoutePart::Approach => {
                o.granted
                    || (o.ignore_priority
                        && self.dist_to_stop(o) < decision_zone(&self.cfg.driver, o.v)
                        && self.is_lead_on_approach(k))
            }
        }
    }

    fn update_right_of_way(&mut self, n: i64) {
        let p = &self.cfg.driver;
        for i in 0..self.agents.len() {
            let a = &self.agents[i];
            if a.ignore_priority || a.granted || a.request.is_some() {
                continue;
            }
            if self.path(a).part_at(a.s) != RoutePart::Approach {
                self.agents[i].granted = true;
                continue;
            }
            if self.is_lead_on_approach(i) && self.dist_to_stop(a) < decision_zone(p, a.v).max(15.0)
            {
                let id = a.id.0;
                self.agents[i].request = Some((n, id));
            }
        }
        let mut order: Vec<usize> = (0..self.agents.len())
            .filter(|&i| self.agents[i].request.is_some() && !self.agents[i].granted)
            .collect();
        order.sort_by_key(|&i| self.agents[i].request);
        for &i in &order {
            let me = self.agents[i].route;
            let my_req = self.agents[i].request;
            let blocked = self.agents.iter().enumerate().any(|(k, o)| {
                if k == i || !self.conflicts.conflicts(me, o.route) {
                    return false;
                }
                let earlier = !o.granted && o.request.is_some() && o.request < my_req;
                earlier || self.is_active(k)
            });
            if !blocked {
                self.agents[i].granted = true;
            }
        }
    }

    /// Desired speed at the agent's position, slowed for the turn ahead.
    fn target_speed(&self, a: &Agent) -> f64 {
        let path = self.path(a);
        let Some(r) = path.junction_radius() else {
            return a.desired;
        };
        let p = &self.cfg.driver;
        let v_turn = (p.max_lateral_accel * r).sqrt().min(a.desired);
        match path.part_at(a.s) {
            RoutePart::Approach => {
                let d = self.dist_to_stop(a);
                a.desired.min((v_turn * v_turn + 2.0 * p.comfort_decel * d).sqrt())
            }
            RoutePart::Junction => v_turn,
            RoutePart::Exit => a.desired,
        }
    }

    fn compute_accels(&mut self) {
        let p = &self.cfg.driver;
        let mut accels = Vec::with_capacity(self.agents.len());
        for i in 0..self.agents.len() {
            let a = &self.agents[i];
            let v0 = self.target_speed(a);
            let mut acc = idm_accel(p, a.v, v0, self.leader(i));
            let on_approach = self.path(a).part_at(a.s) == RoutePart::Approach;
            if on_approach && !a.ignore_priority && !a.granted {
                let d = self.dist_to_stop(a);
                if d < decision_zone(p, a.v).max(15.0) {
                    acc = acc.min(idm_accel(p, a.v, v0, Some((d, 0.0))));
                }
            }
            accels.push(acc);
        }
        for (a, acc) in self.agents.iter_mut().zip(accels) {
            a.accel = acc;
        }
    }

    fn state(&self, a: &Agent, time: f64) -> VehicleState {
        let path = self.path(a);
        // body axis runs from the rear bumper to the front bumper, both on the path
        let (position, tangent) = path.pose_at(a.s);
        let rear = path.pose_at(a.s - a.length).0;
        let chord = position - rear;
        let heading = if chord.norm() > 1e-9 { chord.heading() } else { tangent };
        VehicleState {
            time,
            vehicle_id: a.id,
            position,
            heading,
            speed: a.v,
            acceleration: a.accel,
            lane_index: path.route.lane,
            edge_index: path.edge_at(a.s),
            length: a.length,
            width: a.width,
            preceding: None,
        }
    }

    fn integrate(&mut self, tau: f64) {
        for a in &mut self.agents {
            let v_next = a.v + a.accel * tau;
            if v_next < 0.0 {
                a.s += -a.v * a.v / (2.0 * a.accel);
                a.v = 0.0;
            } else {
                a.s += a.v * tau + 0.5 * a.accel * tau * tau;
                a.v = v_next;
            }
        }
    }

    fn spawn(&mut self, p: Pending, s: f64) {
        let route = self
            .conflicts
            .index(p.route)
            .expect("pending routes come from the layout");
        let id = VehicleId(self.next_id);
        self.next_id += 1;
        self.agents.push(Agent {
            id,
            route,
            s,
            v: p.desired,
            desired: p.desired,
            ignore_priority: p.ignore_priority,
            length: self.cfg.vehicle_length_m,
            width: self.cfg.vehicle_width_m,
            request: None,
            granted: false,
            accel: 0.0,
        });
    }

    /// Whether a new vehicle at speed `v` fits at arc length `s` of an approach lane.
    fn entry_clear(&self, route: Route, s: f64, v: f64) -> bool {
        let p = &self.cfg.driver;
        let need = self.cfg.vehicle_length_m + 2.0 * (p.min_gap + v * p.headway);
        !self.agents.iter().any(|o| {
            self.key(o) == LaneKey::Approach(route.origin, route.lane) && (o.s - s).abs() < need
        })
    }

    /// Ticks a lone priority-ignoring driver on route `idx`, spawned at the start
    /// of its path at speed `v`, needs until `done` holds.
    fn free_run(&mut self, idx: usize, v: f64, mut done: impl FnMut(&Agent) -> bool) -> usize {
        let saved = std::mem::take(&mut self.agents);
        self.agents.push(Agent {
            id: VehicleId(u32::MAX),
            route: idx,
            s: 0.0,
            v,
            desired: v,
            ignore_priority: true,
            length: self.cfg.vehicle_length_m,
            width: self.cfg.vehicle_width_m,
            request: None,
            granted: false,
            accel: 0.0,
        });
        let limit = self.paths[idx].total_length() / (0.5 * v * self.cfg.tick_s).max(1e-3);
        let mut n = 0;
        while !done(&self.agents[0]) && (n as f64) < limit {
            self.compute_accels();
            self.integrate(self.cfg.tick_s);
            n += 1;
        }
        self.agents = saved;
        n
    }
}

fn pick_route(
    rng: &mut ChaCha8Rng,
    layout: &IntersectionLayout,
    mix: &RouteMix,
    origin: usize,
) -> Route {
    let total = mix.straight + mix.left + mix.right;
    let u = rng.random::<f64>() * total;
    let turn = if u < mix.straight {
        Turn::Straight
    } else if u < mix.straight + mix.left {
        Turn::Left
    } else {
        Turn::Right
    };
    let lanes = layout.lanes_per_approach;
    let lane = match turn {
        Turn::Straight => rng.random_range(0..lanes),
        Turn::Left => lanes - 1,
        Turn::Right => 0,
    };
    Route { origin, lane, turn }
}

/// Route pairs from different arms whose centerlines cross inside the junction,
/// with at least one of the two turning.
fn turning_crossings(sim: &Sim) -> Vec<(usize, usize)> {
    let n = sim.conflicts.routes.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let (ri, rj) = (sim.conflicts.routes[i], sim.conflicts.routes[j]);
            if ri.origin == rj.origin || !(ri.turn.is_turning() || rj.turn.is_turning()) {
                continue;
            }
            if ri.exit_arm() == rj.exit_arm() {
                continue;
            }
            if closest_approach(&sim.paths[i], &sim.paths[j], 0.25).2 < CONFLICT_CLEARANCE_M {
                out.push((i, j));
            }
        }
    }
    out
}

/// Scripted priority-ignoring pairs timed so both front bumpers reach the closest
/// point of their centerlines together. Pairs are perpendicular straight crossings,
/// or with probability `injection_turning_fraction` crossings involving a turn.
fn plan_injected_collisions(sim: &mut Sim, rng: &mut ChaCha8Rng) -> Result<Vec<ScriptedVehicle>> {
    let cfg = sim.cfg;
    let mut out = Vec::new();
    let (lo, hi) = cfg.injection_speed_range;
    let lanes = cfg.layout.lanes_per_approach;
    let turning = if cfg.injected_collisions > 0 && cfg.injection_turning_fraction > 0.0 {
        turning_crossings(sim)
    } else {
        Vec::new()
    };
    for i in 0..cfg.injected_collisions {
        let meet = cfg.injection_start_s + i as f64 * cfg.injection_interval_s;
        let (ra, rb) = if !turning.is_empty() && rng.random::<f64>() < cfg.injection_turning_fraction {
            let (a, b) = turning[rng.random_range(0..turning.len())];
            (sim.conflicts.routes[a], sim.conflicts.routes[b])
        } else {
            let a = rng.random_range(0..ARM_COUNT);
            let b = if rng.random::<bool>() {
                (a + 1) % ARM_COUNT
            } else {
                (a + 3) % ARM_COUNT
            };
            (
                Route {
                    origin: a,
                    lane: rng.random_range(0..lanes),
                    turn: Turn::Straight,
                },
                Route {
                    origin: b,
                    lane: rng.random_range(0..lanes),
                    turn: Turn::Straight,
                },
            )
        };
        let va = rng.random_range(lo..=hi);
        let vb = rng.random_range(lo..=hi);
        let ia = sim.conflicts.index(ra).expect("layout route");
        let ib = sim.conflicts.index(rb).expect("layout route");
        let (sa, sb, _) = closest_approach(&sim.paths[ia], &sim.paths[ib], 0.05);
        for (route, idx, s, v) in [(ra, ia, sa, va), (rb, ib, sb, vb)] {
            let ticks = sim.free_run(idx, v, |a| a.s >= s);
            let spawn = meet - ticks as f64 * cfg.tick_s;
            let (spawn_time, start_s) = if spawn < 0.0 {
                let skip = (-spawn / cfg.tick_s).round() as usize;
                let mut n = 0;
                let mut at = 0.0;
                sim.free_run(idx, v, |a| {
                    at = a.s;
                    n += 1;
                    n > skip
                });
                (0.0, at)
            } else {
                (spawn, 0.0)
            };
            out.push(ScriptedVehicle {
                spawn_time,
                origin: route.origin,
                lane: route.lane,
                turn: route.turn,
                speed: v,
                ignore_priority: true,
                start_s,
            });
        }
    }
    Ok(out)
}

/// Run a scenario. `seed` overrides the seed stored in the config.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<Trace> {
    cfg.validate()?;
    let layout = cfg.layout.build()?;
    let tau = cfg.tick_s;
    let mut trace = Trace::empty(layout.clone(), tau);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let conflicts = ConflictMatrix::build(&layout)?;
    let paths = conflicts
        .routes
        .iter()
        .map(|r| layout.route_path(*r))
        .collect::<Result<Vec<_>>>()?;
    let mut sim = Sim {
        cfg,
        conflicts,
        paths,
        agents: Vec::new(),
        next_id: 0,
    };

    let mut scripted = cfg.scripted.clone();
    scripted.extend(plan_injected_collisions(&mut sim, &mut rng)?);
    for sv in &scripted {
        if sv.origin >= ARM_COUNT || !layout.lane_allows(sv.lane, sv.turn) || !(sv.speed >= 0.0) {
            return Err(Error::config(format!("invalid scripted vehicle {sv:?}")));
        }
    }
    scripted.sort_by(|a, b| a.spawn_time.total_cmp(&b.spawn_time));
    let mut scripted: VecDeque<ScriptedVehicle> = scripted.into();

    let n_ticks = tick_count(cfg.duration_s, tau);
    let arrivals = (cfg.spawn_rate_per_arm > 0.0)
        .then(|| Exp::new(cfg.spawn_rate_per_arm).expect("positive rate"));
    let mut next_arrival = [f64::INFINITY; ARM_COUNT];
    if let Some(exp) = &arrivals {
        for t in next_arrival.iter_mut() {
            *t = exp.sample(&mut rng);
        }
    }
    let mut queues: [VecDeque<Pending>; ARM_COUNT] = Default::default();
    let mut states: BTreeMap<VehicleId, Vec<VehicleState>> = BTreeMap::new();

    for n in 0..n_ticks {
        let t = tick_time(n, tau);
        for arm in 0..ARM_COUNT {
            while next_arrival[arm] <= t + 1e-9 {
                let route = pick_route(&mut rng, &layout, &cfg.route_mix, arm);
                let factor = 1.0 + cfg.speed_spread * (2.0 * rng.random::<f64>() - 1.0);
                let ignore = rng.random::<f64>() < cfg.ignore_priority_fraction;
                queues[arm].push_back(Pending {
                    route,
                    desired: cfg.speed_limit_mps * factor,
                    ignore_priority: ignore,
                });
                let exp = arrivals.as_ref().expect("arrivals scheduled only with a rate");
                next_arrival[arm] += exp.sample(&mut rng);
            }
            while let Some(p) = queues[arm].front().copied() {
                if !sim.entry_clear(p.route, 0.0, p.desired) {
                    break;
                }
                queues[arm].pop_front();
                sim.spawn(p, 0.0);
            }
        }
        // A scripted vehicle whose lane is occupied waits for the next tick.
        let mut blocked = VecDeque::new();
        while scripted.front().is_some_and(|sv| sv.spawn_time <= t + 1e-9) {
            let sv = scripted.pop_front().expect("front checked");
            let route = Route {
                origin: sv.origin,
                lane: sv.lane,
                turn: sv.turn,
            };
            if !sim.entry_clear(route, sv.start_s, sv.speed) {
                blocked.push_back(sv);
                continue;
            }
            sim.spawn(
                Pending {
                    route,
                    desired: sv.speed,
                    ignore_priority: sv.ignore_priority,
                },
                sv.start_s,
            );
        }
        while let Some(sv) = blocked.pop_back() {
            scripted.push_front(sv);
        }

        sim.update_right_of_way(n);
        sim.compute_accels();

        let frame: Vec<VehicleState> = sim.agents.iter().map(|a| sim.state(a, t)).collect();
        let bodies: Vec<OrientedRect> = frame.iter().map(VehicleState::body).collect();
        let mut crashed = vec![false; frame.len()];
        for i in 0..frame.len() {
            for j in (i + 1)..frame.len() {
                if bodies[i].intersects(&bodies[j]) {
                    crashed[i] = true;
                    crashed[j] = true;
                }
            }
        }
        for s in frame {
            states.entry(s.vehicle_id).or_default().push(s);
        }
        let mut k = 0;
        sim.agents.retain(|_| {
            let keep = !crashed[k];
            k += 1;
            keep
        });

        sim.integrate(tau);
        let paths = &sim.paths;
        sim.agents.retain(|a| a.s <= paths[a.route].total_length());
    }
    trace.vehicles = states;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> ScenarioConfig {
        ScenarioConfig {
            duration_s: 20.0,
            spawn_rate_per_arm: 0.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn zero_rate_and_duration_are_empty() {
        let t = generate_scenario(&quiet(), 1).unwrap();
        assert!(t.is_empty());
        let cfg = ScenarioConfig {
            duration_s: 0.0,
            ..ScenarioConfig::default()
        };
        assert!(generate_scenario(&cfg, 1).unwrap().is_empty());
    }

    #[test]
    fn negative_inputs_rejected() {
        let cfg = ScenarioConfig {
            duration_s: -1.0,
            ..ScenarioConfig::default()
        };
        assert!(matches!(generate_scenario(&cfg, 0), Err(Error::Config(_))));
        let cfg = ScenarioConfig {
            spawn_rate_per_arm: -0.1,
            ..ScenarioConfig::default()
        };
        assert!(matches!(generate_scenario(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_speed_straight_vehicle() {
        let v = 10.0;
        let cfg = ScenarioConfig {
            scripted: vec![ScriptedVehicle {
                spawn_time: 0.0,
                origin: 0,
                lane: 0,
                turn: Turn::Straight,
                speed: v,
                ignore_priority: false,
                start_s: 0.0,
            }],
            duration_s: 20.0,
            ..quiet()
        };
        let trace = generate_scenario(&cfg, 3).unwrap();
        let states = &trace.vehicles[&VehicleId(0)];
        assert_eq!(states.len(), 200);
        let y0 = states[0].position.y;
        for s in states {
            assert!((s.position.y - (y0 + v * s.time)).abs() < 1e-9, "t={}", s.time);
            assert!((s.position.x - states[0].position.x).abs() < 1e-12);
            assert_eq!(s.speed, v);
        }
    }

    #[test]
    fn conflicts_are_symmetric_and_skip_same_origin() {
        let layout = IntersectionLayout::default();
        let m = ConflictMatrix::build(&layout).unwrap();
        let n = m.routes.len();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(m.conflicts(i, j), m.conflicts(j, i));
                if m.routes[i].origin == m.routes[j].origin {
                    assert!(!m.conflicts(i, j));
                }
            }
        }
        let s0 = m.index(Route { origin: 0, lane: 0, turn: Turn::Straight }).unwrap();
        let s1 = m.index(Route { origin: 1, lane: 0, turn: Turn::Straight }).unwrap();
        assert!(m.conflicts(s0, s1));
    }

    #[test]
    fn generation_is_deterministic_and_physical() {
        let cfg = ScenarioConfig {
            duration_s: 120.0,
            spawn_rate_per_arm: 0.1,
            ignore_priority_fraction: 0.05,
            ..ScenarioConfig::default()
        };
        let a = generate_scenario(&cfg, 11).unwrap();
        let b = generate_scenario(&cfg, 11).unwrap();
        assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
        assert!(a.vehicles.len() > 10);
        for states in a.vehicles.values() {
            for w in states.windows(2) {
                let d = w[1].position.distance(w[0].position);
                let bound = (w[0].speed + w[0].acceleration.abs() * 0.1) * 0.1 + 1e-6;
                assert!(d <= bound, "{d} > {bound}");
                assert!(w[1].speed >= 0.0);
            }
        }
    }

    #[test]
    fn compliant_traffic_does_not_crash() {
        let cfg = ScenarioConfig {
            duration_s: 300.0,
            spawn_rate_per_arm: 0.05,
            ..ScenarioConfig::default()
        };
        let trace = generate_scenario(&cfg, 5).unwrap();
        let events = super::super::collisions::detect_ground_truth_collisions(&trace);
        assert!(events.is_empty(), "{events:?}");
        // everyone eventually clears the junction
        let finished = trace
            .vehicles
            .values()
            .filter(|s| s.last().unwrap().edge_index >= ARM_COUNT)
            .count();
        assert!(finished as f64 > 0.8 * trace.vehicles.len() as f64);
    }

    #[test]
    fn crossing_ignorers_collide_once_at_meeting_time() {
        let cfg = ScenarioConfig {
            duration_s: 12.0,
            injected_collisions: 1,
            injection_start_s: 8.0,
            injection_speed_range: (10.0, 10.0),
            injection_turning_fraction: 0.0,
            ..quiet()
        };
        let trace = generate_scenario(&cfg, 2).unwrap();
        assert_eq!(trace.vehicles.len(), 2);
        let events = super::super::collisions::detect_ground_truth_collisions(&trace);
        assert_eq!(events.len(), 1);
        assert!((events[0].collision_time - 8.0).abs() <= 0.1 + 1e-9);
        assert_eq!(events[0].category, super::super::CollisionCategory::Side);
    }

    #[test]
    fn turning_injections_mostly_collide() {
        let cfg = ScenarioConfig {
            duration_s: 170.0,
            injected_collisions: 10,
            injection_start_s: 10.0,
            injection_turning_fraction: 1.0,
            ..quiet()
        };
        let trace = generate_scenario(&cfg, 9).unwrap();
        assert_eq!(trace.vehicles.len(), 20);
        let events = super::super::collisions::detect_ground_truth_collisions(&trace);
        assert!(events.len() >= 8, "{events:?}");
    }
}
