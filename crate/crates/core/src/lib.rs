//! Collision-free staging queues for drones passing through narrow openings.

pub mod dispatch;
pub mod geometry;
pub mod pattern_queue;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod workload;

pub use dispatch::{DispatchConfig, DispatchMode, Opening, OpeningId, Orchestrator};
pub use geometry::{build_pattern, Orientation, Pattern, PatternSpec, Shape, Vec3};
pub use pattern_queue::{Drone, DroneId, DroneState, PatternQueue, Policy, PolicyKind};
pub use scenario::{gallery, gallery_scenario, load_scenario, parse_scenario, render_scenario, Scenario};
pub use sim::{check_separation, run, Metrics, RunOutput, SimConfig, Simulation};
pub use workload::{generate, rose_desk_scale, Arrival, WorkloadSpec};
