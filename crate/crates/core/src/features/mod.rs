//! Per-tick feature encoding and sliding-window sequence samples.

pub mod cache;
pub mod scaler;
pub mod split;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{annotate_preceding, Trace, VehicleId, VehicleState, EDGE_COUNT};

pub use cache::{DatasetMeta, PreparedDataset};
pub use scaler::{fit_and_apply_scaler, Scaler};
pub use split::{split_dataset, split_vehicles, SplitAssignment, SplitRatios};

pub const INPUT_TICKS: usize = 30;
pub const HORIZON_TICKS: usize = 30;

/// Column layout of one encoded tick.
///
/// Order: y, x, sin(heading), cos(heading), speed, acceleration, lane one-hot,
/// edge one-hot, preceding y, preceding x, preceding speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub lanes: usize,
    pub edges: usize,
}

impl FeatureLayout {
    pub fn new(lanes: usize) -> Self {
        Self {
            lanes,
            edges: EDGE_COUNT,
        }
    }

    pub fn for_trace(trace: &Trace) -> Self {
        Self::new(trace.layout().lanes_per_approach)
    }

    pub fn dim(&self) -> usize {
        9 + self.lanes + self.edges
    }

    pub fn lane_block(&self) -> std::ops::Range<usize> {
        6..6 + self.lanes
    }

    pub fn edge_block(&self) -> std::ops::Range<usize> {
        6 + self.lanes..6 + self.lanes + self.edges
    }

    /// Columns that are standardized; one-hot blocks are left alone.
    pub fn continuous_columns(&self) -> Vec<usize> {
        let tail = 6 + self.lanes + self.edges;
        (0..6).chain(tail..tail + 3).collect()
    }

    /// Columns holding the (y, x) position.
    pub const POSITION: [usize; 2] = [0, 1];

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["y", "x", "heading_sin", "heading_cos", "speed", "accel"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend((0..self.lanes).map(|k| format!("lane_{k}")));
        v.extend((0..self.edges).map(|k| format!("edge_{k}")));
        v.extend(["prev_y", "prev_x", "prev_speed"].iter().map(|s| s.to_string()));
        v
    }
}

pub fn one_hot(index: usize, cardinality: usize) -> Result<Vec<f64>> {
    if index >= cardinality {
        return Err(Error::Encoding { index, cardinality });
    }
    let mut v = vec![0.0; cardinality];
    v[index] = 1.0;
    Ok(v)
}

/// Lane and edge one-hot blocks.
pub fn encode_categoricals(
    lane_index: usize,
    edge_index: usize,
    layout: &FeatureLayout,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((one_hot(lane_index, layout.lanes)?, one_hot(edge_index, layout.edges)?))
}

/// Write the encoded features of one state into `row`.
pub fn encode_state(state: &VehicleState, layout: &FeatureLayout, row: &mut [f64]) -> Result<()> {
    debug_assert_eq!(row.len(), layout.dim());
    let pre = state.preceding.ok_or_else(|| {
        Error::contract(format!(
            "state of vehicle {} at t={} lacks preceding-vehicle features",
            state.vehicle_id, state.time
        ))
    })?;
    if state.lane_index >= layout.lanes {
        return Err(Error::Encoding {
            index: state.lane_index,
            cardinality: layout.lanes,
        });
    }
    if state.edge_index >= layout.edges {
        return Err(Error::Encoding {
            index: state.edge_index,
            cardinality: layout.edges,
        });
    }
    row.fill(0.0);
    let h = state.heading.to_radians();
    row[0] = state.position.y;
    row[1] = state.position.x;
    row[2] = h.sin();
    row[3] = h.cos();
    row[4] = state.speed;
    row[5] = state.acceleration;
    row[layout.lane_block().start + state.lane_index] = 1.0;
    row[layout.edge_block().start + state.edge_index] = 1.0;
    let tail = layout.edge_block().end;
    row[tail] = pre.position.y;
    row[tail + 1] = pre.position.x;
    row[tail + 2] = pre.speed;
    Ok(())
}

/// All states of one vehicle as an n×d matrix.
pub fn encode_states(states: &[VehicleState], layout: &FeatureLayout) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((states.len(), layout.dim()));
    for (i, s) in states.iter().enumerate() {
        encode_state(s, layout, m.row_mut(i).as_slice_mut().expect("row-major"))?;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub vehicle_id: VehicleId,
    /// Time of the last input tick.
    pub anchor_time: f64,
    pub input: Array2<f64>,
    /// True future (y, x) positions at anchor + τ … anchor + Lτ, in meters.
    pub target: Array2<f64>,
    pub turning: bool,
}

pub fn window_count(n: usize, input_ticks: usize, horizon: usize) -> usize {
    (n + 1).saturating_sub(input_ticks + horizon)
}

/// Stride-1 windows per vehicle. Preceding features are computed if absent.
pub fn build_sequences(trace: &Trace, input_ticks: usize, horizon: usize) -> Result<Vec<SequenceSample>> {
    if input_ticks == 0 || horizon == 0 {
        return Err(Error::config("window lengths must be at least one tick"));
    }
    let annotated;
    let trace = if trace
        .vehicles
        .values()
        .flatten()
        .any(|s| s.preceding.is_none())
    {
        annotated = annotate_preceding(trace.clone());
        &annotated
    } else {
        trace
    };
    let layout = FeatureLayout::for_trace(trace);
    let mut out = Vec::new();
    for (id, states) in &trace.vehicles {
        let count = window_count(states.len(), input_ticks, horizon);
        if count == 0 {
            continue;
        }
        let enc = encode_states(states, &layout)?;
        let turning = trace.is_turning(*id);
        for start in 0..count {
            let last = start + input_ticks - 1;
            let mut target = Array2::zeros((horizon, 2));
            for j in 0..horizon {
                let p = states[last + 1 + j].position;
                target[[j, 0]] = p.y;
                target[[j, 1]] = p.x;
            }
            out.push(SequenceSample {
                vehicle_id: *id,
                anchor_time: states[last].time,
                input: enc.slice(s![start..start + input_ticks, ..]).to_owned(),
                target,
                turning,
            });
        }
    }
    Ok(out)
}
