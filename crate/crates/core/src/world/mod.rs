//! Synthetic intersection traffic, trace I/O and ground-truth collisions.

pub mod collisions;
pub mod layout;
pub mod preceding;
pub mod scenario;
pub mod trace;

pub use collisions::{detect_ground_truth_collisions, CollisionCategory, CollisionEvent};
pub use layout::{IntersectionLayout, Route, RoutePath, Turn, EDGE_COUNT, JUNCTION_EDGE};
pub use preceding::annotate_preceding;
pub use scenario::{generate_scenario, ScenarioConfig, ScriptedVehicle};
pub use trace::{ingest_trace, PairId, Trace, VehicleId, VehicleState};
