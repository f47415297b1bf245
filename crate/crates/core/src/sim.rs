//! Fixed-timestep world: motion, battery drain, admissions, separation audit.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{AssignmentDecision, Opening, OpeningId, Orchestrator, Outcome};
use crate::geometry::Vec3;
use crate::pattern_queue::{
    Drone, DroneId, DroneState, Enqueued, OccupantStatus, PolicyKind, SwapTrajectory,
};
use crate::scenario::Scenario;
use crate::trace::{DroneRecord, Event, TraceWriter};
use crate::workload::{Arrival, WorkloadError};

const EPS: f64 = 1e-9;

fn default_dt() -> f64 {
    0.01
}
fn default_delta_min() -> f64 {
    0.1
}
fn default_v_max() -> f64 {
    1.0
}
fn default_flight_time() -> f64 {
    300.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_delta_min")]
    pub delta_min: f64,
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    #[serde(default = "default_flight_time")]
    pub initial_flight_time: f64,
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    /// Height of the approach lane above the top slot; defaults to twice `delta_min`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub approach_offset: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: default_dt(),
            delta_min: default_delta_min(),
            v_max: default_v_max(),
            initial_flight_time: default_flight_time(),
            horizon: 600.0,
            seed: 0,
            approach_offset: None,
        }
    }
}

impl SimConfig {
    pub fn approach_offset(&self) -> f64 {
        self.approach_offset.unwrap_or(2.0 * self.delta_min)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.dt) {
            errors.push(format!("sim.dt must be > 0, got {}", self.dt));
        }
        if !positive(self.delta_min) {
            errors.push(format!("sim.delta_min must be > 0, got {}", self.delta_min));
        }
        if !positive(self.v_max) {
            errors.push(format!("sim.v_max must be > 0, got {}", self.v_max));
        }
        if !positive(self.initial_flight_time) {
            errors.push(format!(
                "sim.initial_flight_time must be > 0, got {}",
                self.initial_flight_time
            ));
        }
        if !positive(self.horizon) {
            errors.push(format!("sim.horizon must be > 0, got {}", self.horizon));
        }
        if positive(self.dt) && positive(self.v_max) && self.v_max * self.dt >= self.delta_min / 2.0 {
            errors.push(format!(
                "sim.dt too coarse: v_max * dt = {} must stay below delta_min / 2 = {}",
                self.v_max * self.dt,
                self.delta_min / 2.0
            ));
        }
        let offset = self.approach_offset();
        if !(offset.is_finite() && offset >= self.delta_min) {
            errors.push(format!("sim.approach_offset {offset} must be >= delta_min"));
        }
        errors
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    ConfigInvalid(Vec<String>),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("trace output: {0}")]
    Io(#[from] std::io::Error),
}

/// Pairwise minimum distance and every pair closer than `delta_min`.
///
/// Sorted sweep along x: a pair is only examined while its x gap is below
/// the larger of the running minimum and `delta_min`, which keeps the result exact.
pub fn check_separation(drones: &[(DroneId, Vec3)], delta_min: f64) -> (f64, Vec<(DroneId, DroneId, f64)>) {
    let mut sorted: Vec<(DroneId, Vec3)> = drones.to_vec();
    sorted.sort_by(|a, b| a.1.x.total_cmp(&b.1.x).then(a.0.cmp(&b.0)));
    let mut best = f64::INFINITY;
    let mut violations = Vec::new();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            if sorted[j].1.x - sorted[i].1.x >= best.max(delta_min) {
                break;
            }
            let d = sorted[i].1.distance(sorted[j].1);
            best = best.min(d);
            if d < delta_min {
                let (a, b) = (sorted[i].0.min(sorted[j].0), sorted[i].0.max(sorted[j].0));
                violations.push((a, b, d));
            }
        }
    }
    violations.sort_by_key(|v| (v.0, v.1));
    (best, violations)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Climb,
    Transit,
    Descend,
}

#[derive(Debug, Clone)]
enum Motion {
    /// Hovering at the spawn point, waiting for a slot.
    Hold,
    Approach(Phase),
    Hover,
    Leg { from: Vec3, to: Vec3, start: f64, speed: f64 },
    Swap { traj: Box<SwapTrajectory>, first: bool },
    Gone,
}

#[derive(Debug, Clone)]
struct Agent {
    drone: Drone,
    spawn_time: f64,
    initial_battery: f64,
    opening: Option<usize>,
    motion: Motion,
    /// Consecutive ticks spent waiting for another drone to clear.
    yielded: u32,
}

#[derive(Debug, Clone, Copy)]
struct ApproachStep {
    position: Vec3,
    phase: Phase,
    arrived_at: Option<usize>,
}

/// Longest an approaching drone waits for the way to clear, seconds.
pub const MAX_YIELD_S: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Admission {
    pub t: f64,
    pub drone: DroneId,
    pub opening: OpeningId,
    pub transit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub t: f64,
    pub drone: DroneId,
    pub opening: Option<OpeningId>,
    pub airborne: f64,
    pub initial_battery: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OpeningMetrics {
    pub id: OpeningId,
    pub lambda: f64,
    pub assigned: u64,
    pub admitted: u64,
    pub failed: u64,
    pub peak_occupancy: usize,
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub spawned: u64,
    pub admitted: u64,
    pub failed: u64,
    pub elapsed: f64,
    /// Admissions per second over the whole run.
    pub throughput: f64,
    /// Spawn to admission, seconds; NaN before the first admission.
    pub transit_mean: f64,
    pub transit_max: f64,
    pub min_separation: f64,
    pub separation_violations: u64,
    pub invariant_breaches: u64,
    pub peak_held: usize,
    pub swaps: u64,
    pub legs_measured: u64,
    /// Measured leg speed over the speed-law target, extremes over all legs.
    pub leg_speed_ratio_min: f64,
    pub leg_speed_ratio_max: f64,
    pub per_opening: Vec<OpeningMetrics>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub admissions: Vec<Admission>,
    pub failures: Vec<Failure>,
    /// First few invariant breaches, for diagnostics.
    pub breaches: Vec<String>,
}

impl RunOutput {
    /// No separation violations and no invariant breaches.
    pub fn clean(&self) -> bool {
        self.metrics.separation_violations == 0 && self.metrics.invariant_breaches == 0
    }
}

/// Per-state head count of a snapshot.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Census {
    pub spawned: u64,
    pub holding: u64,
    pub approaching: u64,
    pub queued: u64,
    pub swapping: u64,
    pub admitted: u64,
    pub failed: u64,
}

impl Census {
    pub fn conserved(&self) -> bool {
        self.spawned
            == self.holding + self.approaching + self.queued + self.swapping + self.admitted + self.failed
    }
}

const MAX_BREACH_NOTES: usize = 16;

pub struct Simulation {
    config: SimConfig,
    openings: Vec<Opening>,
    orchestrator: Orchestrator,
    arrivals: Vec<Arrival>,
    next_arrival: usize,
    agents: Vec<Agent>,
    live: BTreeSet<DroneId>,
    held: Vec<Vec<DroneId>>,
    ticks: u64,
    trace: Option<TraceWriter>,
    events: Vec<Event>,
    // accumulators
    admissions: Vec<Admission>,
    failures: Vec<Failure>,
    breaches: Vec<String>,
    breach_count: u64,
    min_separation: f64,
    violations: u64,
    peak_occupancy: Vec<usize>,
    peak_held: usize,
    swaps: u64,
    leg_ratio: (u64, f64, f64),
}

impl Simulation {
    /// Builds the world for a validated scenario and a fixed arrival list.
    pub fn new(scenario: &Scenario, mut arrivals: Vec<Arrival>) -> Result<Self, SimError> {
        let errors = scenario.validate();
        if !errors.is_empty() {
            return Err(SimError::ConfigInvalid(errors));
        }
        let openings = scenario.build_openings().map_err(SimError::ConfigInvalid)?;
        let orchestrator = Orchestrator::new(scenario.dispatch.clone(), &openings)
            .map_err(|e| SimError::ConfigInvalid(e.iter().map(|e| e.to_string()).collect()))?;
        arrivals.sort_by(|a, b| a.time.total_cmp(&b.time));
        let n = openings.len();
        Ok(Self {
            config: scenario.sim.clone(),
            openings,
            orchestrator,
            arrivals,
            next_arrival: 0,
            agents: Vec::new(),
            live: BTreeSet::new(),
            held: vec![Vec::new(); n],
            ticks: 0,
            trace: None,
            events: Vec::new(),
            admissions: Vec::new(),
            failures: Vec::new(),
            breaches: Vec::new(),
            breach_count: 0,
            min_separation: f64::INFINITY,
            violations: 0,
            peak_occupancy: vec![0; n],
            peak_held: 0,
            swaps: 0,
            leg_ratio: (0, f64::INFINITY, f64::NEG_INFINITY),
        })
    }

    /// Builds the world with arrivals generated from the scenario's workload.
    pub fn from_scenario(scenario: &Scenario, seed: u64) -> Result<Self, SimError> {
        let arrivals = scenario.arrivals(seed)?;
        Self::new(scenario, arrivals)
    }

    /// Streams a JSON Lines trace of every tick to `out`.
    pub fn with_trace(mut self, out: Box<dyn Write>, scenario_name: &str, seed: u64) -> Result<Self, SimError> {
        let mut writer = TraceWriter::new(out);
        let openings: Vec<(OpeningId, f64, usize)> =
            self.openings.iter().map(|o| (o.id, o.lambda, o.queue.capacity())).collect();
        writer.header(scenario_name, seed, &self.config, &openings)?;
        self.trace = Some(writer);
        Ok(self)
    }

    pub fn clock(&self) -> f64 {
        self.ticks as f64 * self.config.dt
    }

    pub fn openings(&self) -> &[Opening] {
        &self.openings
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn drone(&self, id: DroneId) -> Option<&Drone> {
        self.agents.get(id as usize).map(|a| &a.drone)
    }

    pub fn drones(&self) -> impl Iterator<Item = &Drone> {
        self.agents.iter().map(|a| &a.drone)
    }

    pub fn admissions(&self) -> &[Admission] {
        &self.admissions
    }

    pub fn failures(&self) -> &[Failure] {
        &self.failures
    }

    /// Drones still in the airspace.
    pub fn airborne(&self) -> Vec<(DroneId, Vec3)> {
        self.live.iter().map(|id| (*id, self.agents[*id as usize].drone.position)).collect()
    }

    /// Every opening still runs at its configured rate.
    pub fn rates_intact(&self) -> bool {
        self.orchestrator.rates_intact(&self.openings)
    }

    /// Mutable access for fault-injection tests of the audits.
    #[doc(hidden)]
    pub fn openings_mut(&mut self) -> &mut [Opening] {
        &mut self.openings
    }

    pub fn census(&self) -> Census {
        let mut c = Census { spawned: self.agents.len() as u64, ..Census::default() };
        for a in &self.agents {
            match a.drone.state {
                DroneState::Spawned => c.holding += 1,
                DroneState::Approaching { .. } => c.approaching += 1,
                DroneState::Queued { .. } => c.queued += 1,
                DroneState::Swapping { .. } => c.swapping += 1,
                DroneState::Admitted => c.admitted += 1,
                DroneState::Failed => c.failed += 1,
            }
        }
        c
    }

    /// True once every arrival spawned and every drone left the airspace.
    pub fn finished(&self) -> bool {
        self.next_arrival == self.arrivals.len() && self.live.is_empty()
    }

    pub fn run_to_end(mut self) -> Result<RunOutput, SimError> {
        while self.clock() < self.config.horizon - EPS && !self.finished() {
            self.step();
        }
        self.finish()
    }

    /// Closes the trace and returns the metrics.
    pub fn finish(mut self) -> Result<RunOutput, SimError> {
        let metrics = self.metrics();
        if let Some(mut trace) = self.trace.take() {
            trace.event(&Event::End {
                t: self.clock(),
                admitted: metrics.admitted,
                failed: metrics.failed,
                spawned: metrics.spawned,
            });
            trace.finish()?;
        }
        Ok(RunOutput {
            metrics,
            admissions: self.admissions,
            failures: self.failures,
            breaches: self.breaches,
        })
    }

    pub fn metrics(&self) -> Metrics {
        let elapsed = self.clock();
        let rate = |n: u64| if elapsed > 0.0 { n as f64 / elapsed } else { 0.0 };
        let admitted = self.admissions.len() as u64;
        let (transit_mean, transit_max) = if admitted == 0 {
            (f64::NAN, f64::NAN)
        } else {
            let sum: f64 = self.admissions.iter().map(|a| a.transit).sum();
            let max = self.admissions.iter().map(|a| a.transit).fold(f64::NEG_INFINITY, f64::max);
            (sum / admitted as f64, max)
        };
        let (legs, lo, hi) = self.leg_ratio;
        Metrics {
            spawned: self.agents.len() as u64,
            admitted,
            failed: self.failures.len() as u64,
            elapsed,
            throughput: rate(admitted),
            transit_mean,
            transit_max,
            min_separation: self.min_separation,
            separation_violations: self.violations,
            invariant_breaches: self.breach_count,
            peak_held: self.peak_held,
            swaps: self.swaps,
            legs_measured: legs,
            leg_speed_ratio_min: if legs == 0 { f64::NAN } else { lo },
            leg_speed_ratio_max: if legs == 0 { f64::NAN } else { hi },
            per_opening: self
                .openings
                .iter()
                .enumerate()
                .map(|(i, o)| {
                    let tally = self.orchestrator.tally(o.id);
                    OpeningMetrics {
                        id: o.id,
                        lambda: o.lambda,
                        assigned: tally.assigned,
                        admitted: tally.admitted,
                        failed: tally.failed,
                        peak_occupancy: self.peak_occupancy[i],
                        throughput: rate(tally.admitted),
                    }
                })
                .collect(),
        }
    }

    /// Advances the world by one tick.
    pub fn step(&mut self) {
        let now = self.clock();
        while self.next_arrival < self.arrivals.len() && self.arrivals[self.next_arrival].time <= now + EPS {
            let arrival = self.arrivals[self.next_arrival].clone();
            self.next_arrival += 1;
            self.spawn(now, arrival);
        }
        for idx in 0..self.openings.len() {
            while self.openings[idx].queue.next_admission_time() <= now + EPS {
                self.admission(idx, now);
            }
            self.retry_held(idx, now);
        }
        self.move_agents(now);
        let later = (self.ticks + 1) as f64 * self.config.dt;
        self.drain(later);
        self.ticks += 1;
        self.audit_separation(later);
        self.audit_invariants();
        self.write_tick(later);
    }

    fn note_breach(&mut self, msg: String) {
        self.breach_count += 1;
        if self.breaches.len() < MAX_BREACH_NOTES {
            log::warn!("invariant breach at t={:.3}: {msg}", self.clock());
            self.breaches.push(msg);
        }
    }

    fn spawn(&mut self, now: f64, arrival: Arrival) {
        let id = self.agents.len() as DroneId;
        let drone = Drone::new(id, arrival.position, self.config.v_max, arrival.battery)
            .with_class(arrival.class.clone());
        self.events.push(Event::Spawn {
            t: now,
            drone_id: id,
            x: arrival.position.x,
            y: arrival.position.y,
            z: arrival.position.z,
            remaining_s: arrival.battery,
            class: arrival.class,
        });
        self.agents.push(Agent {
            drone,
            spawn_time: now,
            initial_battery: arrival.battery,
            opening: None,
            motion: Motion::Hold,
            yielded: 0,
        });
        self.live.insert(id);
        let decision = match self.orchestrator.assign(&self.agents[id as usize].drone, &self.openings) {
            Ok(d) => d,
            Err(e) => {
                // left hovering at its spawn point; the audit keeps flagging it
                self.note_breach(format!("drone {id} could not be dispatched: {e}"));
                return;
            }
        };
        let idx = self.openings.iter().position(|o| o.id == decision.opening).expect("assigned opening exists");
        self.agents[id as usize].opening = Some(idx);
        let slot = self.try_enqueue(idx, id);
        self.events.push(assign_event(now, &decision, slot));
        if slot.is_none() {
            self.held[idx].push(id);
            self.openings[idx].inbound += 1;
            self.events.push(Event::Hold { t: now, drone_id: id, opening: decision.opening });
        }
    }

    /// Reserves the slot behind the tail and starts the approach.
    fn try_enqueue(&mut self, idx: usize, id: DroneId) -> Option<usize> {
        let agent = &mut self.agents[id as usize];
        match self.openings[idx].queue.enqueue(&agent.drone) {
            Ok(Enqueued::Slot { index, .. }) => {
                agent.drone.state = DroneState::Approaching { target_slot: index };
                agent.motion = Motion::Approach(Phase::Climb);
                Some(index)
            }
            Ok(Enqueued::Hold) => None,
            Err(e) => {
                let msg = format!("enqueue of drone {id} failed: {e}");
                self.note_breach(msg);
                None
            }
        }
    }

    fn retry_held(&mut self, idx: usize, now: f64) {
        if self.held[idx].is_empty() {
            return;
        }
        let mut order = std::mem::take(&mut self.held[idx]);
        if self.openings[idx].queue.policy().kind == PolicyKind::LeastRemainingFlightTimeFirst {
            let agents = &self.agents;
            order.sort_by(|a, b| {
                let ra = agents[*a as usize].drone.remaining_flight_time;
                let rb = agents[*b as usize].drone.remaining_flight_time;
                ra.total_cmp(&rb).then(a.cmp(b))
            });
        } else {
            order.sort_unstable();
        }
        let mut still = Vec::new();
        let mut full = false;
        for id in order {
            if !full {
                if let Some(slot) = self.try_enqueue(idx, id) {
                    self.openings[idx].inbound -= 1;
                    self.events.push(Event::Reserve {
                        t: now,
                        drone_id: id,
                        opening: self.openings[idx].id,
                        slot,
                    });
                    continue;
                }
                full = true;
            }
            still.push(id);
        }
        still.sort_unstable();
        self.held[idx] = still;
    }

    /// Time a queued drone gets for one leg: the admission interval rounded
    /// down to whole ticks, so every leg ends on or before the next admission.
    fn leg_time(&self, idx: usize) -> f64 {
        let dt = self.config.dt;
        let ticks = (self.openings[idx].queue.interval() / dt + 1e-6).floor().max(1.0);
        ticks * dt
    }

    fn admission(&mut self, idx: usize, now: f64) {
        let opening_id = self.openings[idx].id;
        let outcome = match self.openings[idx].queue.admission_tick(now) {
            Ok(o) => o,
            Err(e) => {
                self.note_breach(format!("admission tick at opening {opening_id}: {e}"));
                return;
            }
        };
        if let Some(id) = outcome.admitted {
            let agent = &mut self.agents[id as usize];
            agent.drone.state = DroneState::Admitted;
            agent.motion = Motion::Gone;
            let transit = now - agent.spawn_time;
            self.live.remove(&id);
            if let Err(e) = self.orchestrator.release(opening_id, id, Outcome::Admitted) {
                self.note_breach(e.to_string());
            }
            self.admissions.push(Admission { t: now, drone: id, opening: opening_id, transit });
            self.events.push(Event::Admit { t: now, drone_id: id, opening: opening_id, transit_s: transit });
        }
        let leg_time = self.leg_time(idx);
        let slots = self.openings[idx].queue.pattern().slots().to_vec();
        for mv in outcome.moves {
            let agent = &mut self.agents[mv.drone as usize];
            match agent.motion {
                Motion::Approach(_) => {
                    agent.drone.state = DroneState::Approaching { target_slot: mv.to };
                }
                _ => {
                    let (from, to) = (slots[mv.from], slots[mv.to]);
                    let speed = (from.distance(to) / leg_time).min(agent.drone.v_max);
                    agent.motion = Motion::Leg { from, to, start: now, speed };
                    agent.drone.state = DroneState::Queued { slot_index: mv.to };
                }
            }
        }
        if self.openings[idx].queue.policy().kind == PolicyKind::LeastRemainingFlightTimeFirst {
            self.gossip(idx, now, leg_time);
        }
    }

    /// Queued drone sitting at the start of its motion for this interval.
    fn swap_ready(&self, id: DroneId, now: f64) -> bool {
        match &self.agents[id as usize].motion {
            Motion::Hover => true,
            Motion::Leg { start, .. } => (*start - now).abs() < EPS,
            _ => false,
        }
    }

    fn gossip(&mut self, idx: usize, now: f64, leg_time: f64) {
        let agents = &self.agents;
        let queue = &mut self.openings[idx].queue;
        queue.refresh_metadata(|id| agents[id as usize].drone.remaining_flight_time);
        let pairs = match queue.gossip_round() {
            Ok(p) => p,
            Err(_) => return,
        };
        let policy = *self.openings[idx].queue.policy();
        let normal = self.openings[idx].queue.pattern().normal();
        let slots = self.openings[idx].queue.pattern().slots().to_vec();
        for (k, _) in pairs {
            let queue = &self.openings[idx].queue;
            let (Some(a), Some(b)) = (queue.occupant(k).copied(), queue.occupant(k + 1).copied()) else {
                continue;
            };
            if !(self.swap_ready(a.drone, now) && self.swap_ready(b.drone, now)) {
                continue;
            }
            let (pa, pb) = (self.agents[a.drone as usize].drone.position, self.agents[b.drone as usize].drone.position);
            let sweep = (pb - pa) - (slots[k] - slots[k + 1]);
            // bulge out of the pattern plane, away from the neighbors
            let plane = normal.cross(sweep).normalized().unwrap_or(normal);
            let exchange = policy.swap_duration.min(leg_time);
            let traj = SwapTrajectory::new(
                pa,
                slots[k + 1],
                pb,
                slots[k],
                policy.lateral_offset,
                plane,
                now,
                exchange,
                leg_time,
            );
            let v_cap = self.agents[a.drone as usize].drone.v_max.min(self.agents[b.drone as usize].drone.v_max);
            if traj.peak_speed() > v_cap + EPS || traj.min_separation() < self.config.delta_min {
                continue;
            }
            if self.openings[idx].queue.execute_swap(k, now).is_err() {
                continue;
            }
            self.swaps += 1;
            for (id, partner, first) in [(a.drone, b.drone, true), (b.drone, a.drone, false)] {
                let agent = &mut self.agents[id as usize];
                agent.drone.state = DroneState::Swapping { partner_id: partner };
                agent.motion = Motion::Swap { traj: Box::new(traj.clone()), first };
            }
            self.events.push(Event::Swap {
                t: now,
                opening: self.openings[idx].id,
                slots: [k, k + 1],
                drones: [a.drone, b.drone],
            });
        }
    }

    fn move_agents(&mut self, now: f64) {
        let dt = self.config.dt;
        let later = now + dt;
        self.approach_all(self.config.approach_offset());
        let ids: Vec<DroneId> = self.live.iter().copied().collect();
        for id in ids {
            let agent = &self.agents[id as usize];
            let Some(idx) = agent.opening else { continue };
            match agent.motion.clone() {
                Motion::Hold | Motion::Hover | Motion::Gone | Motion::Approach(_) => {}
                Motion::Leg { from, to, start, speed } => {
                    let agent = &mut self.agents[id as usize];
                    let (pos, arrived) = step_toward(agent.drone.position, to, speed * dt);
                    agent.drone.position = pos;
                    if arrived {
                        agent.motion = Motion::Hover;
                        let lambda = self.openings[idx].lambda;
                        let length = from.distance(to);
                        let ratio = (length / (later - start)) / (lambda * length);
                        let (n, lo, hi) = self.leg_ratio;
                        self.leg_ratio = (n + 1, lo.min(ratio), hi.max(ratio));
                        if let Err(e) = self.openings[idx].queue.settle(id) {
                            self.note_breach(format!("drone {id} finished a leg outside the queue: {e}"));
                        }
                    }
                }
                Motion::Swap { traj, first } => {
                    let (p, q) = traj.positions(later);
                    let agent = &mut self.agents[id as usize];
                    agent.drone.position = if first { p } else { q };
                    if traj.finished(later) {
                        agent.motion = Motion::Hover;
                        match self.openings[idx].queue.settle(id) {
                            Ok(slot) => self.agents[id as usize].drone.state = DroneState::Queued { slot_index: slot },
                            Err(e) => self.note_breach(format!("drone {id} finished a swap outside the queue: {e}")),
                        }
                    }
                }
            }
        }
    }

    /// Next position and motion of an approaching drone: climb to the lane
    /// above the pattern, cross to the point over the reserved slot, descend.
    fn plan_approach(&self, id: DroneId, idx: usize, mut phase: Phase, offset: f64) -> Option<ApproachStep> {
        let pattern = self.openings[idx].queue.pattern();
        let (anchor, normal) = (pattern.anchor(), pattern.normal());
        let lane = pattern.top_height() + offset;
        let agent = &self.agents[id as usize];
        let DroneState::Approaching { target_slot } = agent.drone.state else {
            return None;
        };
        let slot = pattern.slots()[target_slot];
        let height = |p: Vec3| (p - anchor).dot(normal);
        let pos = agent.drone.position;
        if phase == Phase::Climb && height(pos) >= lane - EPS {
            phase = Phase::Transit;
        }
        let target = match phase {
            Phase::Climb => pos + normal * (lane - height(pos)),
            Phase::Transit => slot + normal * (lane - height(slot)),
            Phase::Descend => slot,
        };
        let (next, arrived) = step_toward(pos, target, agent.drone.v_max * self.config.dt);
        let (phase, slot) = match (arrived, phase) {
            (false, p) => (p, None),
            (true, Phase::Climb) => (Phase::Transit, None),
            (true, Phase::Transit) => (Phase::Descend, None),
            (true, Phase::Descend) => (Phase::Descend, Some(target_slot)),
        };
        Some(ApproachStep { position: next, phase, arrived_at: slot })
    }

    /// Approaching drones whose next step would close in on another drone
    /// inside the guard radius give way by stepping straight away from it.
    /// When two approaching drones close in on each other the lower id keeps
    /// its course. Nobody gives way for longer than [`MAX_YIELD_S`].
    fn give_way(&self, plans: &[(DroneId, ApproachStep)]) -> BTreeMap<DroneId, Vec3> {
        let guard = 2.0 * self.config.delta_min;
        let max_wait = (MAX_YIELD_S / self.config.dt) as u32;
        let planned: BTreeMap<DroneId, Vec3> = plans.iter().map(|(id, p)| (*id, p.position)).collect();
        let closes = |i: DroneId, j: DroneId| -> bool {
            let Some(next) = planned.get(&i) else { return false };
            let (pi, pj) = (self.agents[i as usize].drone.position, self.agents[j as usize].drone.position);
            let d = next.distance(pj);
            d < guard && d < pi.distance(pj)
        };
        let mut out = BTreeMap::new();
        for (i, _) in plans {
            let agent = &self.agents[*i as usize];
            if agent.yielded >= max_wait {
                continue;
            }
            let pi = agent.drone.position;
            let nearest = self
                .live
                .iter()
                .filter(|&&j| j != *i && closes(*i, j) && !(planned.contains_key(&j) && closes(j, *i) && *i < j))
                .map(|&j| (pi.distance(self.agents[j as usize].drone.position), j))
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some((_, j)) = nearest {
                let idx = agent.opening.expect("approaching drones are assigned");
                let away = (pi - self.agents[j as usize].drone.position)
                    .normalized()
                    .unwrap_or_else(|| self.openings[idx].queue.pattern().normal());
                out.insert(*i, pi + away * (agent.drone.v_max * self.config.dt));
            }
        }
        out
    }

    fn approach_all(&mut self, offset: f64) {
        let plans: Vec<(DroneId, ApproachStep)> = self
            .live
            .iter()
            .filter_map(|&id| {
                let agent = &self.agents[id as usize];
                match (agent.opening, &agent.motion) {
                    (Some(idx), Motion::Approach(phase)) => {
                        self.plan_approach(id, idx, *phase, offset).map(|p| (id, p))
                    }
                    _ => None,
                }
            })
            .collect();
        let escapes = self.give_way(&plans);
        for (id, plan) in plans {
            let agent = &mut self.agents[id as usize];
            if let Some(escape) = escapes.get(&id) {
                agent.drone.position = *escape;
                agent.yielded += 1;
                continue;
            }
            agent.yielded = 0;
            agent.drone.position = plan.position;
            agent.motion = Motion::Approach(plan.phase);
            if let Some(slot) = plan.arrived_at {
                agent.motion = Motion::Hover;
                agent.drone.state = DroneState::Queued { slot_index: slot };
                let idx = agent.opening.expect("approaching drones are assigned");
                if let Err(e) = self.openings[idx].queue.arrive(id) {
                    self.note_breach(format!("drone {id} reached an unreserved slot: {e}"));
                }
            }
        }
    }

    fn drain(&mut self, later: f64) {
        let dt = self.config.dt;
        let ids: Vec<DroneId> = self.live.iter().copied().collect();
        for id in ids {
            let agent = &mut self.agents[id as usize];
            agent.drone.remaining_flight_time -= dt;
            if agent.drone.remaining_flight_time > 0.0 {
                continue;
            }
            agent.drone.state = DroneState::Failed;
            agent.motion = Motion::Gone;
            let airborne = later - agent.spawn_time;
            let initial_battery = agent.initial_battery;
            self.live.remove(&id);
            let (mut opening, mut slot) = (None, None);
            if let Some(idx) = self.agents[id as usize].opening {
                let oid = self.openings[idx].id;
                opening = Some(oid);
                slot = self.openings[idx].queue.remove(id);
                if let Some(pos) = self.held[idx].iter().position(|h| *h == id) {
                    self.held[idx].remove(pos);
                    self.openings[idx].inbound -= 1;
                }
                if let Err(e) = self.orchestrator.release(oid, id, Outcome::Failed) {
                    self.note_breach(e.to_string());
                }
            }
            self.failures.push(Failure { t: later, drone: id, opening, airborne, initial_battery });
            self.events.push(Event::Fail { t: later, drone_id: id, opening, slot });
        }
    }

    fn audit_separation(&mut self, now: f64) {
        let airborne = self.airborne();
        let (min, violations) = check_separation(&airborne, self.config.delta_min);
        self.min_separation = self.min_separation.min(min);
        self.violations += violations.len() as u64;
        for (a, b, d) in violations {
            self.events.push(Event::Violation { t: now, drones: [a, b], distance: d });
        }
    }

    fn audit_invariants(&mut self) {
        let mut problems = Vec::new();
        let census = self.census();
        if !census.conserved() {
            problems.push(format!("conservation broken: {census:?}"));
        }
        let held_total: usize = self.held.iter().map(Vec::len).sum();
        self.peak_held = self.peak_held.max(held_total);
        if held_total as u64 != census.holding {
            problems.push(format!("{} drones holding but {held_total} on hold lists", census.holding));
        }
        for (idx, opening) in self.openings.iter().enumerate() {
            let queue = &opening.queue;
            if let Err(e) = queue.check_invariants() {
                problems.push(format!("opening {}: {e}", opening.id));
            }
            if opening.inbound != self.held[idx].len() {
                problems.push(format!("opening {}: inbound count drifted", opening.id));
            }
            for (&k, occ) in queue.occupancy() {
                let agent = &self.agents[occ.drone as usize];
                let ok = agent.opening == Some(idx)
                    && match (occ.status, agent.drone.state) {
                        (OccupantStatus::Approaching, DroneState::Approaching { target_slot }) => target_slot == k,
                        (OccupantStatus::Queued { .. }, DroneState::Queued { slot_index }) => slot_index == k,
                        (OccupantStatus::Queued { .. }, DroneState::Swapping { .. }) => true,
                        _ => false,
                    };
                if !ok {
                    problems.push(format!("opening {}: slot {k} and drone {} disagree", opening.id, occ.drone));
                }
            }
        }
        let in_queues: usize = self.openings.iter().map(|o| o.queue.len()).sum();
        if in_queues as u64 != census.approaching + census.queued + census.swapping {
            problems.push("queued drones missing from the slot maps".into());
        }
        if !self.orchestrator.rates_intact(&self.openings) {
            problems.push("opening rates changed mid-run".into());
        }
        for (idx, opening) in self.openings.iter().enumerate() {
            self.peak_occupancy[idx] = self.peak_occupancy[idx].max(opening.queue.len());
        }
        for p in problems {
            self.note_breach(p);
        }
    }

    fn write_tick(&mut self, now: f64) {
        let events = std::mem::take(&mut self.events);
        let Some(trace) = self.trace.as_mut() else { return };
        for e in &events {
            trace.event(e);
        }
        for id in &self.live {
            let agent = &self.agents[*id as usize];
            let (opening, slot) = match agent.opening {
                Some(idx) => {
                    let queue = &self.openings[idx].queue;
                    (Some(self.openings[idx].id), queue.slot_of(*id))
                }
                None => (None, None),
            };
            let p = agent.drone.position;
            trace.drone(&DroneRecord {
                t: now,
                drone_id: *id,
                x: p.x,
                y: p.y,
                z: p.z,
                state: agent.drone.state.label(),
                slot,
                opening,
                remaining_s: agent.drone.remaining_flight_time,
            });
        }
    }
}

fn assign_event(t: f64, d: &AssignmentDecision, slot: Option<usize>) -> Event {
    Event::Assign {
        t,
        drone_id: d.drone,
        opening: d.opening,
        estimated_wait: d.estimated_wait,
        travel_time: d.travel_time,
        feasible: d.feasible,
        slot,
    }
}

/// Straight move toward `target` by at most `budget`, landing exactly on it when in reach.
fn step_toward(pos: Vec3, target: Vec3, budget: f64) -> (Vec3, bool) {
    let gap = target - pos;
    let dist = gap.norm();
    if dist <= budget + EPS {
        (target, true)
    } else {
        (pos + gap * (budget / dist), false)
    }
}

/// Runs a scenario to completion with arrivals drawn from `seed`.
pub fn run(scenario: &Scenario, seed: u64, trace: Option<Box<dyn Write>>) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::from_scenario(scenario, seed)?;
    if let Some(out) = trace {
        sim = sim.with_trace(out, &scenario.name, seed)?;
    }
    sim.run_to_end()
}
