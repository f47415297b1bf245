#![allow(dead_code)]

use flightq::dispatch::DispatchConfig;
use flightq::geometry::{Orientation, Shape, Vec3};
use flightq::pattern_queue::Policy;
use flightq::scenario::{OpeningConfig, PatternConfig, Scenario, SCENARIO_VERSION};
use flightq::sim::SimConfig;
use flightq::workload::{Arrival, BatteryDistribution, SpawnRegion, WorkloadKind, WorkloadSpec};

pub const ANCHOR: Vec3 = Vec3::new(0.0, 0.0, 5.0);

/// Chord between neighbors on a circle with `m` evenly spaced slots.
pub fn chord(radius: f64, m: usize) -> f64 {
    2.0 * radius * (std::f64::consts::PI / m as f64).sin()
}

/// Box hovering `lift` above a circle of `radius` anchored at [`ANCHOR`].
pub fn box_above(radius: f64, lift: f64, depth: f64, margin: f64) -> SpawnRegion {
    SpawnRegion::Box {
        min: Vec3::new(-margin, -radius - margin, ANCHOR.z + lift),
        max: Vec3::new(2.0 * radius + margin, radius + margin, ANCHOR.z + lift + depth),
    }
}

pub struct CircleSetup {
    pub radius: f64,
    pub slots: usize,
    pub lambda: f64,
    pub v_max: f64,
    pub policy: Policy,
    pub horizon: f64,
}

pub fn circle_scenario(name: &str, c: &CircleSetup, workload: WorkloadSpec) -> Scenario {
    Scenario {
        version: SCENARIO_VERSION,
        name: name.into(),
        sim: SimConfig { v_max: c.v_max, horizon: c.horizon, seed: 1, ..SimConfig::default() },
        openings: vec![OpeningConfig {
            id: 0,
            position: ANCHOR,
            lambda: c.lambda,
            pattern: PatternConfig {
                shape: Shape::Circle { radius: c.radius },
                slots: Some(c.slots),
                orientation: Orientation::horizontal(),
            },
            policy: c.policy,
        }],
        dispatch: DispatchConfig::shared(c.lambda),
        workload,
    }
}

pub fn workload(kind: WorkloadKind, region: SpawnRegion, battery: BatteryDistribution, spacing: f64) -> WorkloadSpec {
    let mut w = WorkloadSpec::new(kind, region, battery);
    w.min_spacing = spacing;
    w
}

/// Saturated opening: a full queue at t = 0, then arrivals slightly faster
/// than the opening consumes them. Spawn points cycle over a grid above the
/// pattern so hovering drones keep their distance.
pub fn saturated(n: usize) -> (Scenario, Vec<Arrival>) {
    const RADIUS: f64 = 0.33;
    const SLOTS: usize = 8;
    const SIDE: usize = 8;
    const PITCH: f64 = 0.3;
    let c = CircleSetup { radius: RADIUS, slots: SLOTS, lambda: 10.0, v_max: 4.0, policy: Policy::fifo(), horizon: 1000.0 };
    let w = workload(
        WorkloadKind::Burst { n: 1, at: 0.0 },
        box_above(RADIUS, 0.5, 0.1, 1.0),
        BatteryDistribution::Fixed { value: 300.0 },
        0.0,
    );
    let half = (SIDE - 1) as f64 * PITCH / 2.0;
    let grid: Vec<Vec3> = (0..SIDE * SIDE)
        .map(|k| {
            let (i, j) = ((k / SIDE) as f64, (k % SIDE) as f64);
            Vec3::new(RADIUS - half + i * PITCH, -half + j * PITCH, ANCHOR.z + 0.5)
        })
        .collect();
    // Nearest grid points first so the opening fills quickly.
    let centre = Vec3::new(RADIUS, 0.0, ANCHOR.z + 0.5);
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[a].distance(centre).total_cmp(&grid[b].distance(centre)).then(a.cmp(&b)));
    let arrivals = (0..n)
        .map(|i| Arrival {
            time: if i < SLOTS { 0.0 } else { (i - SLOTS) as f64 * 0.098 },
            position: grid[order[i % grid.len()]],
            battery: 300.0,
            class: "default".into(),
        })
        .collect();
    (circle_scenario("saturated", &c, w), arrivals)
}

/// Twenty nearly drained drones at a slow opening.
pub fn lrf_stress(policy: Policy) -> Scenario {
    let radius = 0.6 / chord(1.0, 8);
    let c = CircleSetup { radius, slots: 8, lambda: 0.5, v_max: 1.0, policy, horizon: 200.0 };
    let w = workload(
        WorkloadKind::Burst { n: 20, at: 0.0 },
        box_above(radius, 1.0, 1.0, 1.5),
        BatteryDistribution::Uniform { min: 15.0, max: 120.0 },
        0.5,
    );
    circle_scenario("lrf-stress", &c, w)
}
