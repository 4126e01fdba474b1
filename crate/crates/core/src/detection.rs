//! The per-tick detection loop: gate pairs, classify them, debounce verdicts
//! into alarms and score alarms against ground truth.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::classifier::{gated_pairs, pair_features, Forest, GATING_RADIUS_M};
use crate::error::{Error, Result};
use crate::forecast::{ForecastTable, VehicleForecast};
use crate::world::trace::tick_time;
use crate::world::{CollisionEvent, PairId, Trace, VehicleId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SporadicityConfig {
    /// Consecutive positive verdicts needed to fire.
    pub k: usize,
    /// Consecutive negatives after which a fired pair may fire again.
    pub rearm_after: usize,
}

impl Default for SporadicityConfig {
    fn default() -> Self {
        Self { k: 3, rearm_after: 10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SporadicityState {
    pub consecutive: usize,
    pub armed: bool,
    pub negatives: usize,
}

impl Default for SporadicityState {
    fn default() -> Self {
        Self {
            consecutive: 0,
            armed: true,
            negatives: 0,
        }
    }
}

/// Feed one verdict; returns whether an alarm fires now.
pub fn sporadicity_update(state: &mut SporadicityState, verdict: bool, cfg: &SporadicityConfig) -> bool {
    if verdict {
        state.consecutive += 1;
        state.negatives = 0;
        if state.armed && state.consecutive >= cfg.k.max(1) {
            state.armed = false;
            return true;
        }
    } else {
        state.consecutive = 0;
        if !state.armed {
            state.negatives += 1;
            if state.negatives >= cfg.rearm_after {
                state.armed = true;
                state.negatives = 0;
            }
        }
    }
    false
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    RandomForest,
    RelativeDistance,
    CiCws,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RandomForest, Method::RelativeDistance, Method::CiCws];

    pub fn name(self) -> &'static str {
        match self {
            Method::RandomForest => "random_forest",
            Method::RelativeDistance => "relative_distance",
            Method::CiCws => "ci_cws",
        }
    }
}

/// Outcome of classifying one pair at one tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub positive: bool,
    /// Positive vote fraction, or 0/1 for rule-based detectors.
    pub score: f64,
    pub min_distance: f64,
    pub min_expected_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub tick: i64,
    pub pair: PairId,
    pub verdict: bool,
    pub vote_fraction: f64,
    pub fired: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alarm {
    pub pair: PairId,
    pub tick: i64,
    pub time: f64,
    pub vote_fraction: f64,
    pub min_distance: f64,
    pub min_expected_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLog {
    pub method: Method,
    pub tick_s: f64,
    pub records: Vec<DetectionRecord>,
    pub alarms: Vec<Alarm>,
}

#[derive(Serialize, Deserialize)]
struct LogLine<'a> {
    method: Method,
    tick: i64,
    time: f64,
    pair: PairId,
    verdict: bool,
    vote_fraction: f64,
    fired: bool,
    #[serde(skip_serializing_if = "Option::is_none", borrow)]
    alarm: Option<std::borrow::Cow<'a, Alarm>>,
}

impl DetectionLog {
    /// One JSON object per evaluated (tick, pair); fired lines carry the alarm.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let alarms: BTreeMap<(i64, PairId), &Alarm> = self.alarms.iter().map(|a| ((a.tick, a.pair), a)).collect();
        for r in &self.records {
            let line = LogLine {
                method: self.method,
                tick: r.tick,
                time: tick_time(r.tick, self.tick_s),
                pair: r.pair,
                verdict: r.verdict,
                vote_fraction: r.vote_fraction,
                fired: r.fired,
                alarm: alarms.get(&(r.tick, r.pair)).map(|a| std::borrow::Cow::Borrowed(*a)),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io("<detection log>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, tick_s: f64) -> Result<Self> {
        let mut log: Option<DetectionLog> = None;
        for (i, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<detection log>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: LogLine = serde_json::from_str(&line).map_err(|e| Error::Schema {
                row: i + 1,
                field: "json".into(),
                message: e.to_string(),
            })?;
            let log = log.get_or_insert_with(|| DetectionLog {
                method: l.method,
                tick_s,
                records: vec![],
                alarms: vec![],
            });
            log.records.push(DetectionRecord {
                tick: l.tick,
                pair: l.pair,
                verdict: l.verdict,
                vote_fraction: l.vote_fraction,
                fired: l.fired,
            });
            if let Some(a) = l.alarm {
                log.alarms.push(a.into_owned());
            }
        }
        log.ok_or_else(|| Error::contract("detection log is empty"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, tick_s: f64) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(f), tick_s)
    }
}

/// Context handed to a per-pair classifier.
pub struct PairContext<'a> {
    pub trace: &'a Trace,
    pub tick: i64,
    pub pair: PairId,
    pub first: &'a VehicleForecast,
    pub second: &'a VehicleForecast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub sporadicity: SporadicityConfig,
    pub gating_radius: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            sporadicity: SporadicityConfig::default(),
            gating_radius: GATING_RADIUS_M,
        }
    }
}

/// Tick loop shared by every detector. Pairs are visited in id order; a tracked
/// pair that drops out of the gate counts as a negative.
pub fn run_pairwise<F>(
    trace: &Trace,
    forecasts: &ForecastTable,
    method: Method,
    cfg: &DetectionConfig,
    mut classify: F,
) -> Result<DetectionLog>
where
    F: FnMut(&PairContext<'_>) -> Result<Verdict>,
{
    let mut log = DetectionLog {
        method,
        tick_s: trace.tick(),
        records: vec![],
        alarms: vec![],
    };
    let mut states: BTreeMap<PairId, SporadicityState> = BTreeMap::new();
    for (&tick, frame) in &forecasts.frames {
        let ids: Vec<VehicleId> = frame.keys().copied().collect();
        let gated = gated_pairs(trace, tick, &ids, cfg.gating_radius);
        let mut seen = std::collections::BTreeSet::new();
        for pair in gated {
            let ctx = PairContext {
                trace,
                tick,
                pair,
                first: &frame[&pair.0],
                second: &frame[&pair.1],
            };
            let v = classify(&ctx)?;
            let st = states.entry(pair).or_default();
            let fired = sporadicity_update(st, v.positive, &cfg.sporadicity);
            seen.insert(pair);
            log.records.push(DetectionRecord {
                tick,
                pair,
                verdict: v.positive,
                vote_fraction: v.score,
                fired,
            });
            if fired {
                log.alarms.push(Alarm {
                    pair,
                    tick,
                    time: tick_time(tick, trace.tick()),
                    vote_fraction: v.score,
                    min_distance: v.min_distance,
                    min_expected_sq: v.min_expected_sq,
                });
            }
        }
        for (pair, st) in states.iter_mut() {
            if !seen.contains(pair) {
                sporadicity_update(st, false, &cfg.sporadicity);
            }
        }
        states.retain(|p, st| seen.contains(p) || !st.armed || st.consecutive > 0);
    }
    Ok(log)
}

/// The forest detector with sporadicity filtering.
pub fn run_detection(
    trace: &Trace,
    forecasts: &ForecastTable,
    forest: &Forest,
    cfg: &DetectionConfig,
) -> Result<DetectionLog> {
    let mut buf = Vec::with_capacity(forest.dim);
    run_pairwise(trace, forecasts, Method::RandomForest, cfg, |ctx| {
        buf.clear();
        let d = pair_features(ctx.first, ctx.second, ctx.trace.layout(), &mut buf)?;
        let (positive, score) = forest.classify(&buf)?;
        Ok(Verdict {
            positive,
            score,
            min_distance: d.min_distance,
            min_expected_sq: d.min_expected_sq,
        })
    })
}

pub const FP_BUCKETS_M: [f64; 3] = [5.0, 10.0, 15.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FalsePositive {
    pub pair: PairId,
    pub time: f64,
    pub min_body_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub method: Method,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Collision time minus first alarm time, one per detected collision.
    pub reaction_times: Vec<f64>,
    pub detected: Vec<PairId>,
    pub missed: Vec<PairId>,
    pub false_alarms: Vec<FalsePositive>,
    /// Counts in [0,5), [5,10), [10,15), ≥15 m of minimum body distance.
    pub fp_histogram: [usize; 4],
}

impl DetectionMetrics {
    pub fn fraction_fp_below(&self, meters: f64) -> Option<f64> {
        if self.false_alarms.is_empty() {
            return None;
        }
        let n = self.false_alarms.iter().filter(|f| f.min_body_distance < meters).count();
        Some(n as f64 / self.false_alarms.len() as f64)
    }
}

/// Smallest body-to-body distance of a pair over every shared tick.
pub fn min_body_distance(trace: &Trace, pair: PairId) -> Option<f64> {
    let a = trace.vehicles.get(&pair.0)?;
    let mut best: Option<f64> = None;
    for s in a {
        let n = crate::world::trace::tick_index(s.time, trace.tick());
        if let Some(o) = trace.state_at(pair.1, n) {
            let d = s.body().distance(&o.body());
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    }
    best
}

pub fn fp_bucket(d: f64) -> usize {
    FP_BUCKETS_M.iter().take_while(|&&b| d >= b).count()
}

pub fn score_detection(log: &DetectionLog, collisions: &[CollisionEvent], trace: &Trace) -> DetectionMetrics {
    let collide: BTreeMap<PairId, f64> = collisions.iter().map(|c| (c.pair, c.collision_time)).collect();
    let mut first_alarm: BTreeMap<PairId, f64> = BTreeMap::new();
    let mut false_alarms = Vec::new();
    for a in &log.alarms {
        match collide.get(&a.pair) {
            Some(&tc) => {
                if a.time < tc + 1e-9 {
                    first_alarm.entry(a.pair).or_insert(a.time);
                }
            }
            None => false_alarms.push(FalsePositive {
                pair: a.pair,
                time: a.time,
                min_body_distance: min_body_distance(trace, a.pair).unwrap_or(f64::INFINITY),
            }),
        }
    }
    let mut detected = Vec::new();
    let mut missed = Vec::new();
    let mut reaction_times = Vec::new();
    for (&pair, &tc) in &collide {
        match first_alarm.get(&pair) {
            Some(&ta) => {
                detected.push(pair);
                reaction_times.push(tc - ta);
            }
            None => missed.push(pair),
        }
    }
    let mut fp_histogram = [0usize; 4];
    for f in &false_alarms {
        fp_histogram[fp_bucket(f.min_body_distance)] += 1;
    }
    DetectionMetrics {
        method: log.method,
        true_positives: detected.len(),
        false_positives: false_alarms.len(),
        false_negatives: missed.len(),
        reaction_times,
        detected,
        missed,
        false_alarms,
        fp_histogram,
    }
}

/// Fetch the thresholds-independent distance summary without a forest.
pub fn pair_distances(ctx: &PairContext<'_>) -> Result<crate::classifier::PairDistances> {
    let mut scratch = Vec::new();
    pair_features(ctx.first, ctx.second, ctx.trace.layout(), &mut scratch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feed(seq: &[u8], cfg: &SporadicityConfig) -> Vec<usize> {
        let mut st = SporadicityState::default();
        seq.iter()
            .enumerate()
            .filter_map(|(i, &v)| sporadicity_update(&mut st, v == 1, cfg).then_some(i))
            .collect()
    }

    #[test]
    fn sporadicity_examples() {
        let cfg = SporadicityConfig::default();
        assert_eq!(feed(&[1, 1, 1], &cfg), vec![2]);
        assert!(feed(&[1, 1, 0, 1, 1], &cfg).is_empty());
        let mut seq = vec![1, 1, 1];
        seq.extend([0; 10]);
        seq.extend([1, 1, 1]);
        assert_eq!(feed(&seq, &cfg), vec![2, 15]);
        let mut short = vec![1, 1, 1];
        short.extend([0; 9]);
        short.extend([1, 1, 1]);
        assert_eq!(feed(&short, &cfg), vec![2]);
    }

    proptest! {
        #[test]
        fn one_alarm_per_episode(seq in prop::collection::vec(0u8..2, 0..200)) {
            let fires = feed(&seq, &SporadicityConfig::default());
            for w in fires.windows(2) {
                let gap = &seq[w[0] + 1..w[1]];
                let mut run = 0;
                let mut best = 0;
                for &v in gap {
                    run = if v == 0 { run + 1 } else { 0 };
                    best = best.max(run);
                }
                prop_assert!(best >= 10);
            }
            for &i in &fires {
                prop_assert!(i >= 2 && seq[i - 2..=i].iter().all(|&v| v == 1));
            }
        }

        #[test]
        fn unfiltered_detector_never_detects_less(seq in prop::collection::vec(0u8..2, 1..120), c in 0usize..120) {
            let c = c.min(seq.len() - 1);
            let hit = |k: usize| feed(&seq, &SporadicityConfig { k, rearm_after: 10 }).iter().any(|&i| i <= c);
            prop_assert!(hit(1) || !hit(3));
        }
    }

    fn alarm(a: u32, b: u32, time: f64) -> Alarm {
        Alarm {
            pair: PairId::new(VehicleId(a), VehicleId(b)),
            tick: (time * 10.0).round() as i64,
            time,
            vote_fraction: 1.0,
            min_distance: 0.0,
            min_expected_sq: 0.0,
        }
    }

    fn log_with(alarms: Vec<Alarm>) -> DetectionLog {
        DetectionLog {
            method: Method::RandomForest,
            tick_s: 0.1,
            records: vec![],
            alarms,
        }
    }

    #[test]
    fn scoring_examples() {
        let trace = Trace::empty(crate::world::IntersectionLayout::default(), 0.1);
        let m = score_detection(&log_with(vec![]), &[], &trace);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 0, 0));
        let m = score_detection(&log_with(vec![alarm(1, 2, 4.0)]), &[], &trace);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (0, 1, 0));
        let ev = CollisionEvent {
            pair: PairId::new(VehicleId(3), VehicleId(4)),
            collision_time: 13.9,
            impact_speeds: (9.0, 9.0),
            category: crate::world::CollisionCategory::Side,
        };
        let m = score_detection(&log_with(vec![alarm(3, 4, 10.0), alarm(3, 4, 12.0)]), std::slice::from_ref(&ev), &trace);
        assert_eq!((m.true_positives, m.false_positives, m.false_negatives), (1, 0, 0));
        assert!((m.reaction_times[0] - 3.9).abs() < 1e-9);
        let late = score_detection(&log_with(vec![alarm(3, 4, 14.5)]), &[ev], &trace);
        assert_eq!((late.true_positives, late.false_negatives), (0, 1));
    }

    #[test]
    fn log_round_trips_through_jsonl() {
        let mut log = log_with(vec![alarm(1, 2, 0.2)]);
        for t in 0..3 {
            log.records.push(DetectionRecord {
                tick: t,
                pair: PairId::new(VehicleId(1), VehicleId(2)),
                verdict: true,
                vote_fraction: 0.75,
                fired: t == 2,
            });
        }
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 3);
        assert_eq!(DetectionLog::read_jsonl(buf.as_slice(), 0.1).unwrap(), log);
    }

    #[test]
    fn fp_buckets() {
        assert_eq!([0.0, 4.99, 5.0, 9.9, 10.0, 14.0, 15.0, 80.0].map(fp_bucket), [0, 0, 1, 1, 2, 2, 3, 3]);
    }
}
