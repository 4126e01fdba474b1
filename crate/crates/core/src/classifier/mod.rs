//! Pair features, rule-based labels, distance thresholds and the forest
//! classifier built on them.

pub mod forest;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::forecast::{ForecastTable, VehicleForecast};
use crate::fusion::{euclidean_distance, expected_squared_distance};
use crate::geometry::Vec2;
use crate::world::trace::tick_index;
use crate::world::{CollisionEvent, IntersectionLayout, PairId, Trace, VehicleId};

pub use forest::{vote_verdict, Forest, ForestConfig, Node, Samples, Tree};

pub const GATING_RADIUS_M: f64 = 50.0;
pub const THRESHOLD_QUANTILE: f64 = 0.9;

/// Features contributed by each future step.
pub const STEP_FEATURES: [&str; 16] = [
    "pos_first_y",
    "pos_first_x",
    "pos_second_y",
    "pos_second_x",
    "road_first",
    "road_second",
    "dist",
    "exp_sq_dist",
    "width_first_y",
    "width_first_x",
    "width_second_y",
    "width_second_x",
    "var_first_y",
    "var_first_x",
    "var_second_y",
    "var_second_x",
];

pub fn feature_names(horizon: usize) -> Vec<String> {
    (1..=horizon)
        .flat_map(|j| STEP_FEATURES.iter().map(move |f| format!("{f}@{j}")))
        .collect()
}

/// Nearest-rank quantile: the ⌈q·n⌉-th smallest value.
pub fn nearest_rank(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Some(v[k - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceThresholds {
    pub distance: f64,
    pub squared_distance: f64,
    pub quantile: f64,
    pub pairs: usize,
    /// sha256 of the per-pair minimum distances the thresholds came from.
    pub provenance: String,
}

/// Minimum true front-bumper distance over the ticks both vehicles share.
pub fn min_pair_distance(trace: &Trace, pair: PairId) -> Option<f64> {
    let a = trace.vehicles.get(&pair.0)?;
    let tick = trace.tick();
    let mut best: Option<f64> = None;
    for s in a {
        if let Some(o) = trace.state_at(pair.1, tick_index(s.time, tick)) {
            let d = s.position.distance(o.position);
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    }
    best
}

/// 0.9-quantile (nearest rank) of per-pair minimum distances and of their squares.
pub fn distance_thresholds_from_minima(minima: &[f64]) -> Result<DistanceThresholds> {
    if minima.is_empty() {
        return Err(Error::Threshold("no colliding pairs to calibrate distance thresholds".into()));
    }
    let squares: Vec<f64> = minima.iter().map(|d| d * d).collect();
    let distance = nearest_rank(minima, THRESHOLD_QUANTILE).expect("non-empty");
    let squared_distance = nearest_rank(&squares, THRESHOLD_QUANTILE).expect("non-empty");
    if !(distance > 0.0 && squared_distance > 0.0) {
        return Err(Error::Threshold(format!(
            "calibrated thresholds must be positive, got {distance} m and {squared_distance} m²"
        )));
    }
    let mut h = Sha256::new();
    for d in minima {
        h.update(d.to_le_bytes());
    }
    Ok(DistanceThresholds {
        distance,
        squared_distance,
        quantile: THRESHOLD_QUANTILE,
        pairs: minima.len(),
        provenance: hex::encode(h.finalize()),
    })
}

pub fn compute_distance_thresholds(trace: &Trace, colliding: &[PairId]) -> Result<DistanceThresholds> {
    let minima: Vec<f64> = colliding.iter().filter_map(|&p| min_pair_distance(trace, p)).collect();
    distance_thresholds_from_minima(&minima)
}

/// Summary distances of a pair over the forecast horizon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairDistances {
    pub min_distance: f64,
    pub min_expected_sq: f64,
}

/// Concatenated per-step features of an ordered pair (lower id first).
pub fn pair_features(
    first: &VehicleForecast,
    second: &VehicleForecast,
    layout: &IntersectionLayout,
    out: &mut Vec<f32>,
) -> Result<PairDistances> {
    let l = first.point.nrows();
    if second.point.nrows() != l || first.locations.len() != l || second.locations.len() != l {
        return Err(Error::contract("pair forecasts differ in horizon"));
    }
    let mut dist = PairDistances {
        min_distance: f64::INFINITY,
        min_expected_sq: f64::INFINITY,
    };
    for j in 0..l {
        let (gi, gk) = (&first.locations[j], &second.locations[j]);
        let d = euclidean_distance(gi.mean, gk.mean);
        let e2 = expected_squared_distance(gi, gk);
        dist.min_distance = dist.min_distance.min(d);
        dist.min_expected_sq = dist.min_expected_sq.min(e2);
        let road = |g: &crate::fusion::GaussianLocation| layout.snap_to_lane(Vec2::new(g.mean[1], g.mean[0])).0 as f32;
        let wi = first.interval.widths(j);
        let wk = second.interval.widths(j);
        out.extend_from_slice(&[
            gi.mean[0] as f32,
            gi.mean[1] as f32,
            gk.mean[0] as f32,
            gk.mean[1] as f32,
            road(gi),
            road(gk),
            d as f32,
            e2 as f32,
            wi[0] as f32,
            wi[1] as f32,
            wk[0] as f32,
            wk[1] as f32,
            gi.var[0] as f32,
            gi.var[1] as f32,
            gk.var[0] as f32,
            gk.var[1] as f32,
        ]);
    }
    Ok(dist)
}

/// Unordered pairs of vehicles present at `tick` whose true distance is within `radius`.
pub fn gated_pairs(trace: &Trace, tick: i64, ids: &[VehicleId], radius: f64) -> Vec<PairId> {
    let mut out = Vec::new();
    for (a, &i) in ids.iter().enumerate() {
        let Some(si) = trace.state_at(i, tick) else { continue };
        for &k in &ids[a + 1..] {
            if let Some(sk) = trace.state_at(k, tick) {
                if si.position.distance(sk.position) <= radius {
                    out.push(PairId::new(i, k));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub pair: PairId,
    pub tick: i64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairDataset {
    pub dim: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
    pub keys: Vec<PairKey>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRules {
    pub horizon_s: f64,
    pub distance: f64,
    pub squared_distance: f64,
}

/// Positive iff the pair truly collides and, at this tick, the collision is
/// within the horizon or a predicted distance statistic dips under its threshold.
pub fn label_pair(
    collision_time: Option<f64>,
    now: f64,
    dist: PairDistances,
    rules: &LabelRules,
) -> bool {
    let Some(tc) = collision_time else { return false };
    let soon = tc >= now - 1e-9 && tc <= now + rules.horizon_s + 1e-9;
    soon || dist.min_distance < rules.distance || dist.min_expected_sq < rules.squared_distance
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn samples(&self) -> Result<Samples<'_>> {
        Samples::new(self.dim, &self.features, &self.labels)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// One sample per gated pair per tick where both vehicles have forecasts.
    pub fn build(
        trace: &Trace,
        forecasts: &ForecastTable,
        collisions: &[CollisionEvent],
        thresholds: &DistanceThresholds,
        gating_radius: f64,
    ) -> Result<Self> {
        let horizon = forecasts.horizon;
        let rules = LabelRules {
            horizon_s: horizon as f64 * trace.tick(),
            distance: thresholds.distance,
            squared_distance: thresholds.squared_distance,
        };
        let collide: BTreeMap<PairId, f64> = collisions.iter().map(|c| (c.pair, c.collision_time)).collect();
        let mut ds = PairDataset {
            dim: horizon * STEP_FEATURES.len(),
            ..Default::default()
        };
        for (&tick, frame) in &forecasts.frames {
            let ids: Vec<VehicleId> = frame.keys().copied().collect();
            for pair in gated_pairs(trace, tick, &ids, gating_radius) {
                let dist = pair_features(&frame[&pair.0], &frame[&pair.1], trace.layout(), &mut ds.features)?;
                let now = crate::world::trace::tick_time(tick, trace.tick());
                ds.labels.push(label_pair(collide.get(&pair).copied(), now, dist, &rules) as u8);
                ds.keys.push(PairKey { pair, tick });
            }
        }
        Ok(ds)
    }

    pub fn extend(&mut self, other: PairDataset) -> Result<()> {
        if self.is_empty() && self.dim == 0 {
            *self = other;
            return Ok(());
        }
        if other.dim != self.dim {
            return Err(Error::contract("pair datasets differ in feature width"));
        }
        self.features.extend(other.features);
        self.labels.extend(other.labels);
        self.keys.extend(other.keys);
        Ok(())
    }

    pub fn select(&self, idx: &[usize]) -> PairDataset {
        let mut out = PairDataset {
            dim: self.dim,
            ..Default::default()
        };
        for &i in idx {
            out.features.extend_from_slice(self.row(i));
            out.labels.push(self.labels[i]);
            out.keys.push(self.keys[i]);
        }
        out
    }

    /// Keep every positive and at most `ratio` negatives per positive.
    pub fn subsample_negatives(&self, ratio: f64, seed: u64) -> PairDataset {
        let pos: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == 1).collect();
        let mut neg: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == 0).collect();
        let keep = ((pos.len() as f64 * ratio).ceil() as usize).min(neg.len());
        neg.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        neg.truncate(keep);
        let mut idx: Vec<usize> = pos.into_iter().chain(neg).collect();
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn pairs(&self) -> BTreeSet<PairId> {
        self.keys.iter().map(|k| k.pair).collect()
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"XWPR")?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        for (k, &y) in self.keys.iter().zip(&self.labels) {
            w.write_u32::<LittleEndian>(k.pair.0 .0)?;
            w.write_u32::<LittleEndian>(k.pair.1 .0)?;
            w.write_i64::<LittleEndian>(k.tick)?;
            w.write_u8(y)?;
        }
        for v in &self.features {
            w.write_f32::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"XWPR" {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "not a pair dataset"));
        }
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut ds = PairDataset {
            dim,
            ..Default::default()
        };
        for _ in 0..n {
            let a = VehicleId(r.read_u32::<LittleEndian>()?);
            let b = VehicleId(r.read_u32::<LittleEndian>()?);
            let tick = r.read_i64::<LittleEndian>()?;
            ds.keys.push(PairKey {
                pair: PairId(a, b),
                tick,
            });
            ds.labels.push(r.read_u8()?);
        }
        ds.features = vec![0.0; n * dim];
        r.read_f32_into::<LittleEndian>(&mut ds.features)?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read(bytes.as_slice()).map_err(|e| Error::io(path, e))
    }
}

/// Importances summed per step-feature kind over all future steps.
pub fn grouped_importance(forest: &Forest) -> BTreeMap<String, f64> {
    let k = STEP_FEATURES.len();
    let mut out: BTreeMap<String, f64> = STEP_FEATURES.iter().map(|f| (f.to_string(), 0.0)).collect();
    for (i, v) in forest.importance.iter().enumerate() {
        *out.get_mut(STEP_FEATURES[i % k]).expect("known feature") += v;
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ForestMeta {
    thresholds: DistanceThresholds,
    feature_names: Vec<String>,
    layout_version: u32,
}

pub const PAIR_LAYOUT_VERSION: u32 = 1;

pub fn save_forest(dir: &Path, forest: &Forest, thresholds: &DistanceThresholds) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("forest.json");
    std::fs::write(&p, serde_json::to_vec(forest)?).map_err(|e| Error::io(&p, e))?;
    let meta = ForestMeta {
        thresholds: thresholds.clone(),
        feature_names: feature_names(forest.dim / STEP_FEATURES.len()),
        layout_version: PAIR_LAYOUT_VERSION,
    };
    let p = dir.join("meta.json");
    std::fs::write(&p, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p, e))
}

pub fn load_forest(dir: &Path) -> Result<(Forest, DistanceThresholds)> {
    let p = dir.join("forest.json");
    let forest: Forest = serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
    let p = dir.join("meta.json");
    let meta: ForestMeta = serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?;
    if meta.layout_version != PAIR_LAYOUT_VERSION {
        return Err(Error::contract(format!("pair feature layout version {} unsupported", meta.layout_version)));
    }
    Ok((forest, meta.thresholds))
}
