mod common;

use approx::assert_abs_diff_eq;
use common::*;
use flightq::geometry::Vec3;
use flightq::pattern_queue::{DroneState, Policy};
use flightq::scenario::Scenario;
use flightq::sim::Simulation;
use flightq::workload::{Arrival, BatteryDistribution, WorkloadKind};
use proptest::prelude::*;

fn one_opening(lambda: f64, slots: usize) -> Scenario {
    let c = CircleSetup { radius: 1.0, slots, lambda, v_max: 1.0, policy: Policy::fifo(), horizon: 400.0 };
    let w = workload(
        WorkloadKind::Burst { n: 1, at: 0.0 },
        box_above(1.0, 1.0, 1.0, 1.0),
        BatteryDistribution::Fixed { value: 300.0 },
        0.0,
    );
    circle_scenario("unit", &c, w)
}

fn arrival(time: f64, position: Vec3, battery: f64) -> Arrival {
    Arrival { time, position, battery, class: "default".into() }
}

/// Climb to the lane unless already above it, fly straight to the point
/// over the slot, descend.
fn approach_length(spawn: Vec3, slot: Vec3, lane_z: f64) -> f64 {
    let over_slot = Vec3::new(slot.x, slot.y, lane_z);
    let start = if spawn.z >= lane_z { spawn } else { Vec3::new(spawn.x, spawn.y, lane_z) };
    (lane_z - spawn.z).max(0.0) + start.distance(over_slot) + (lane_z - slot.z)
}

#[test]
fn lone_drone_transit_is_distance_over_speed() {
    let s = one_opening(0.5, 4);
    let spawn = ANCHOR + Vec3::new(0.0, 0.0, 2.0);
    let out = Simulation::new(&s, vec![arrival(0.0, spawn, 300.0)]).unwrap().run_to_end().unwrap();
    assert_eq!(out.admissions.len(), 1);
    // 2 m at 1 m/s lands exactly on the tick at t = 2
    assert_abs_diff_eq!(out.admissions[0].transit, 2.0, epsilon = 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lone_drone_waits_for_the_next_tick(dx in -2.0f64..2.0, dy in -2.0f64..2.0, dz in 0.12f64..2.5, lambda in 0.2f64..2.0) {
        let s = one_opening(lambda, 4);
        let dt = s.sim.dt;
        let lane = ANCHOR.z + 2.0 * s.sim.delta_min;
        let spawn = ANCHOR + Vec3::new(dx, dy, dz);
        let flight = approach_length(spawn, ANCHOR, lane) / s.sim.v_max;
        let period = 1.0 / lambda;
        // first admission tick once hovering; landing is known to within a tick
        let admit = |landed: f64| (landed / period - 1e-9).ceil().max(1.0) * period;
        let landed = (flight / dt).ceil() * dt;
        let out = Simulation::new(&s, vec![arrival(0.0, spawn, 300.0)]).unwrap().run_to_end().unwrap();
        prop_assert_eq!(out.admissions.len(), 1);
        let transit = out.admissions[0].transit;
        prop_assert!(
            [landed - dt, landed, landed + dt].iter().any(|&l| (transit - admit(l)).abs() <= dt + 1e-9),
            "transit {} expected {}", transit, admit(landed)
        );
    }
}

#[test]
fn battery_drains_while_hovering() {
    let s = one_opening(0.01, 1);
    let a = ANCHOR + Vec3::new(0.0, 0.0, 2.0);
    let b = ANCHOR + Vec3::new(3.0, 0.0, 2.0);
    let mut sim = Simulation::new(&s, vec![arrival(0.0, a, 300.0), arrival(0.0, b, 50.0)]).unwrap();
    for _ in 0..1000 {
        sim.step();
    }
    // drone 1 found the only slot taken and hovers in place
    let held = sim.drone(1).unwrap();
    assert_eq!(held.state, DroneState::Spawned);
    assert_eq!(held.position, b);
    assert_abs_diff_eq!(held.remaining_flight_time, 50.0 - 10.0, epsilon = 1e-9);
    assert_abs_diff_eq!(sim.drone(0).unwrap().remaining_flight_time, 290.0, epsilon = 1e-9);
}

#[test]
fn failure_fires_on_the_tick_the_budget_runs_out() {
    let mut s = one_opening(0.5, 4);
    s.sim.dt = 0.1;
    s.sim.v_max = 0.4;
    let spawn = ANCHOR + Vec3::new(0.0, 0.0, 2.0);
    let mut sim = Simulation::new(&s, vec![arrival(0.0, spawn, 0.05), arrival(0.0, spawn + Vec3::new(1.0, 0.0, 0.0), 0.15)]).unwrap();
    sim.step();
    assert_eq!(sim.drone(0).unwrap().state, DroneState::Failed);
    assert_ne!(sim.drone(1).unwrap().state, DroneState::Failed);
    assert_eq!(sim.openings()[0].queue.slot_of(0), None);
    sim.step();
    assert_eq!(sim.drone(1).unwrap().state, DroneState::Failed);
    let out = sim.finish().unwrap();
    let times: Vec<f64> = out.failures.iter().map(|f| f.t).collect();
    assert_eq!(times.len(), 2);
    assert_abs_diff_eq!(times[0], 0.1, epsilon = 1e-9);
    assert_abs_diff_eq!(times[1], 0.2, epsilon = 1e-9);
    assert!(out.metrics.invariant_breaches == 0, "{:?}", out.breaches);
}

#[test]
fn conservation_holds_every_tick() {
    let s = lrf_stress(Policy::lrf(2.0, 0.15));
    let mut sim = Simulation::from_scenario(&s, 4).unwrap();
    while !sim.finished() && sim.clock() < s.sim.horizon {
        sim.step();
        let c = sim.census();
        assert!(c.conserved(), "{c:?}");
    }
    let c = sim.census();
    assert_eq!(c.admitted + c.failed, 20);
}

#[test]
fn worst_case_arrival_takes_the_last_slot() {
    let s = one_opening(0.05, 6);
    let mut arrivals = Vec::new();
    for i in 0..6 {
        let t = if i == 5 { 0.5 } else { 0.0 };
        arrivals.push(arrival(t, ANCHOR + Vec3::new(-1.5 + 0.6 * i as f64, 0.0, 2.0), 300.0));
    }
    let mut sim = Simulation::new(&s, arrivals).unwrap();
    while sim.clock() < 0.6 {
        sim.step();
    }
    assert_eq!(sim.drone(5).unwrap().state, DroneState::Approaching { target_slot: 5 });
    let out = sim.run_to_end().unwrap();
    assert_eq!(out.metrics.per_opening[0].peak_occupancy, 6);
    assert!(out.clean());
}

#[test]
fn lrf_swaps_the_drained_drone_ahead() {
    // FIFO would admit the 35 s drone at t = 40, after its battery ran out
    let s = {
        let c = CircleSetup { radius: 1.0, slots: 6, lambda: 0.1, v_max: 1.0, policy: Policy::lrf(4.0, 0.15), horizon: 200.0 };
        let w = workload(
            WorkloadKind::Burst { n: 1, at: 0.0 },
            box_above(1.0, 1.0, 1.0, 1.0),
            BatteryDistribution::Fixed { value: 300.0 },
            0.0,
        );
        circle_scenario("lrf-pair", &c, w)
    };
    let arrivals = vec![
        arrival(0.0, ANCHOR + Vec3::new(0.0, 0.0, 1.5), 200.0),
        arrival(0.0, ANCHOR + Vec3::new(1.0, 1.0, 1.5), 200.0),
        arrival(0.0, ANCHOR + Vec3::new(2.0, 0.0, 1.5), 200.0),
        arrival(0.0, ANCHOR + Vec3::new(2.0, 1.5, 1.5), 35.0),
    ];
    let out = Simulation::new(&s, arrivals).unwrap().run_to_end().unwrap();
    let order: Vec<u64> = out.admissions.iter().map(|a| a.drone).collect();
    assert_eq!(out.metrics.failed, 0, "{:?}", out.failures);
    assert!(out.metrics.swaps > 0);
    assert_eq!(order, vec![0, 1, 3, 2]);
    assert!(out.clean());
}
