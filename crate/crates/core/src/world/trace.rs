use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::layout::IntersectionLayout;
use crate::error::{Error, Result};
use crate::geometry::{OrientedRect, Vec2};

pub const DEFAULT_TICK_S: f64 = 0.1;

/// Tolerance used when checking that timestamps sit on the tick grid.
pub const TICK_EPS: f64 = 1e-6;

pub const CSV_HEADER: [&str; 11] = [
    "time_s",
    "vehicle_id",
    "x_m",
    "y_m",
    "heading_deg",
    "speed_mps",
    "accel_mps2",
    "lane_index",
    "edge_index",
    "length_m",
    "width_m",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VehicleId(pub u32);

impl std::fmt::Display for VehicleId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Unordered vehicle pair, stored with the lower id first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairId(pub VehicleId, pub VehicleId);

impl PairId {
    pub fn new(a: VehicleId, b: VehicleId) -> Self {
        if a <= b {
            PairId(a, b)
        } else {
            PairId(b, a)
        }
    }
}

/// Position and speed of the vehicle ahead on the same lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preceding {
    pub position: Vec2,
    pub speed: f64,
    /// False when the predecessor is the virtual leader.
    pub real: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub time: f64,
    pub vehicle_id: VehicleId,
    /// Front-bumper center.
    pub position: Vec2,
    pub heading: f64,
    pub speed: f64,
    pub acceleration: f64,
    pub lane_index: usize,
    pub edge_index: usize,
    pub length: f64,
    pub width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preceding: Option<Preceding>,
}

impl VehicleState {
    pub fn body(&self) -> OrientedRect {
        OrientedRect::from_front_bumper(self.position, self.heading, self.length, self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub tick: f64,
    pub layout: IntersectionLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub meta: TraceMeta,
    pub vehicles: BTreeMap<VehicleId, Vec<VehicleState>>,
}

/// Time of tick `n`, rounded onto a microsecond grid so that text output stays short.
pub fn tick_time(n: i64, tick: f64) -> f64 {
    ((n as f64 * tick) * 1e6).round() / 1e6
}

pub fn tick_index(time: f64, tick: f64) -> i64 {
    (time / tick).round() as i64
}

impl Trace {
    pub fn empty(layout: IntersectionLayout, tick: f64) -> Self {
        Self {
            meta: TraceMeta { tick, layout },
            vehicles: BTreeMap::new(),
        }
    }

    pub fn tick(&self) -> f64 {
        self.meta.tick
    }

    pub fn layout(&self) -> &IntersectionLayout {
        &self.meta.layout
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn state_count(&self) -> usize {
        self.vehicles.values().map(Vec::len).sum()
    }

    /// Inclusive tick range covered by the trace.
    pub fn tick_range(&self) -> Option<(i64, i64)> {
        let tick = self.tick();
        let mut range: Option<(i64, i64)> = None;
        for states in self.vehicles.values() {
            if let (Some(first), Some(last)) = (states.first(), states.last()) {
                let (a, b) = (tick_index(first.time, tick), tick_index(last.time, tick));
                range = Some(match range {
                    None => (a, b),
                    Some((lo, hi)) => (lo.min(a), hi.max(b)),
                });
            }
        }
        range
    }

    /// State of `id` at tick `n`, if the vehicle is present then.
    pub fn state_at(&self, id: VehicleId, n: i64) -> Option<&VehicleState> {
        let states = self.vehicles.get(&id)?;
        let first = tick_index(states.first()?.time, self.tick());
        let k = n - first;
        if k < 0 {
            return None;
        }
        states.get(k as usize)
    }

    /// States grouped by tick, vehicles in id order.
    pub fn frames(&self) -> BTreeMap<i64, Vec<&VehicleState>> {
        let tick = self.tick();
        let mut frames: BTreeMap<i64, Vec<&VehicleState>> = BTreeMap::new();
        for states in self.vehicles.values() {
            for s in states {
                frames.entry(tick_index(s.time, tick)).or_default().push(s);
            }
        }
        frames
    }

    /// Keep only the listed vehicles.
    pub fn subset(&self, keep: &std::collections::BTreeSet<VehicleId>) -> Trace {
        Trace {
            meta: self.meta.clone(),
            vehicles: self
                .vehicles
                .iter()
                .filter(|(id, _)| keep.contains(id))
                .map(|(id, s)| (*id, s.clone()))
                .collect(),
        }
    }

    /// Whether a vehicle turned at the intersection, judged from its heading change.
    pub fn is_turning(&self, id: VehicleId) -> bool {
        self.vehicles
            .get(&id)
            .map(|s| states_turning(s))
            .unwrap_or(false)
    }

    /// Write the trace CSV, rows ordered by time then vehicle id.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        let frames = self.frames();
        for states in frames.values() {
            for s in states {
                w.write_record(&[
                    s.time.to_string(),
                    s.vehicle_id.0.to_string(),
                    s.position.x.to_string(),
                    s.position.y.to_string(),
                    s.heading.to_string(),
                    s.speed.to_string(),
                    s.acceleration.to_string(),
                    s.lane_index.to_string(),
                    s.edge_index.to_string(),
                    s.length.to_string(),
                    s.width.to_string(),
                ])?;
            }
        }
        w.flush()
            .map_err(|e| Error::io("<trace csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv writer emits utf-8"))
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Total absolute heading change above which a trajectory counts as turning.
pub const TURNING_HEADING_CHANGE_DEG: f64 = 30.0;

pub fn states_turning(states: &[VehicleState]) -> bool {
    match (states.first(), states.last()) {
        (Some(a), Some(b)) => {
            crate::geometry::heading_difference(a.heading, b.heading) > TURNING_HEADING_CHANGE_DEG
        }
        _ => false,
    }
}

fn schema(row: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        row,
        field: field.to_string(),
        message: message.into(),
    }
}

/// Parse a trace CSV. Rows are 1-based data rows (the header is row 0).
pub fn ingest_trace<R: Read>(source: R, layout: IntersectionLayout) -> Result<Trace> {
    ingest_trace_with_tick(source, layout, DEFAULT_TICK_S)
}

pub fn ingest_trace_with_tick<R: Read>(
    source: R,
    layout: IntersectionLayout,
    tick: f64,
) -> Result<Trace> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let mut columns = [0usize; 11];
    for (i, name) in CSV_HEADER.iter().enumerate() {
        columns[i] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or_else(|| schema(0, name, "missing column"))?;
    }

    let mut trace = Trace::empty(layout, tick);
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let get = |k: usize| -> Result<&str> {
            record
                .get(columns[k])
                .ok_or_else(|| schema(row, CSV_HEADER[k], "missing value"))
        };
        let float = |k: usize| -> Result<f64> {
            let v: f64 = get(k)?
                .parse()
                .map_err(|_| schema(row, CSV_HEADER[k], "not a number"))?;
            if !v.is_finite() {
                return Err(schema(row, CSV_HEADER[k], "not finite"));
            }
            Ok(v)
        };
        let int = |k: usize| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| schema(row, CSV_HEADER[k], "not a non-negative integer"))
        };
        let state = VehicleState {
            time: float(0)?,
            vehicle_id: VehicleId(
                u32::try_from(int(1)?).map_err(|_| schema(row, "vehicle_id", "id too large"))?,
            ),
            position: Vec2::new(float(2)?, float(3)?),
            heading: float(4)?,
            speed: float(5)?,
            acceleration: float(6)?,
            lane_index: int(7)? as usize,
            edge_index: int(8)? as usize,
            length: float(9)?,
            width: float(10)?,
            preceding: None,
        };
        if state.speed < 0.0 {
            return Err(schema(row, "speed_mps", "negative speed"));
        }
        if state.lane_index >= trace.meta.layout.lanes_per_approach {
            return Err(schema(row, "lane_index", "lane index exceeds lanes on edge"));
        }
        if state.edge_index >= trace.meta.layout.edge_count() {
            return Err(schema(row, "edge_index", "unknown edge"));
        }
        let states = trace.vehicles.entry(state.vehicle_id).or_default();
        if let Some(prev) = states.last() {
            let dt = state.time - prev.time;
            if dt <= 0.0 {
                return Err(schema(row, "time_s", "non-monotone timestamp"));
            }
            if (dt - tick).abs() > TICK_EPS {
                return Err(schema(row, "time_s", "non-contiguous tick"));
            }
        }
        states.push(state);
    }
    Ok(trace)
}

pub fn load_trace_csv(path: &std::path::Path, layout: IntersectionLayout) -> Result<Trace> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_trace(std::io::BufReader::new(f), layout)
}
