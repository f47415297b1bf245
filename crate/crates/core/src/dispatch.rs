//! The Orchestrator: routes drones to openings and keeps assignment records.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::pattern_queue::{Drone, DroneId, PatternQueue};

pub type OpeningId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("rate mismatch: opening rates sum to {sum} but the shared total is {total} (residual {residual})")]
    RateMismatch { sum: f64, total: f64, residual: f64 },
    #[error("no openings to dispatch to")]
    EmptyOpeningSet,
    #[error("drone class `{0}` is not mapped to any opening")]
    UnmappedDroneClass(String),
    #[error("opening {0} does not exist")]
    UnknownOpening(OpeningId),
    #[error("drone {drone} has no open assignment at opening {opening}")]
    UnknownAssignment { opening: OpeningId, drone: DroneId },
    #[error("invalid dispatch config: {0}")]
    InvalidConfig(String),
}

/// A passage point with its own admission rate and staging queue.
#[derive(Debug, Clone)]
pub struct Opening {
    pub id: OpeningId,
    pub position: Vec3,
    pub lambda: f64,
    pub queue: PatternQueue,
    /// Drones routed here that are still holding for a slot.
    pub inbound: usize,
}

impl Opening {
    pub fn new(id: OpeningId, queue: PatternQueue) -> Self {
        Self { id, position: queue.pattern().anchor(), lambda: queue.lambda(), queue, inbound: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DispatchMode {
    Exclusive { partition: BTreeMap<String, OpeningId> },
    Shared { lambda_total: f64 },
    Hybrid { groups: Vec<HybridGroup> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridGroup {
    pub openings: Vec<OpeningId>,
    /// Drone classes served by this group; empty means every class not claimed elsewhere.
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(flatten)]
    pub mode: GroupMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "group_mode", rename_all = "snake_case")]
pub enum GroupMode {
    /// One partition behind a single opening.
    Exclusive,
    Shared { lambda_total: f64 },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchConfig {
    #[serde(flatten)]
    pub mode: DispatchMode,
    #[serde(default = "one")]
    pub w_wait: f64,
    #[serde(default = "one")]
    pub w_travel: f64,
    /// Count drones already routed to an opening but still holding in its wait estimate.
    #[serde(default)]
    pub count_inbound: bool,
}

impl DispatchConfig {
    pub fn shared(lambda_total: f64) -> Self {
        Self::with_mode(DispatchMode::Shared { lambda_total })
    }

    pub fn with_mode(mode: DispatchMode) -> Self {
        Self { mode, w_wait: 1.0, w_travel: 1.0, count_inbound: false }
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            DispatchMode::Exclusive { .. } => "exclusive",
            DispatchMode::Shared { .. } => "shared",
            DispatchMode::Hybrid { .. } => "hybrid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AssignmentDecision {
    pub drone: DroneId,
    pub opening: OpeningId,
    pub estimated_wait: f64,
    pub travel_time: f64,
    pub feasible: bool,
}

/// Passes iff the opening rates add up to the shared total (relative 1e-12).
pub fn validate_rates(
    rates: impl IntoIterator<Item = f64>,
    lambda_total: f64,
) -> Result<(), DispatchError> {
    let sum: f64 = rates.into_iter().sum();
    let residual = sum - lambda_total;
    if residual.abs() <= 1e-12 * lambda_total.abs().max(f64::MIN_POSITIVE) && sum.is_finite() {
        Ok(())
    } else {
        Err(DispatchError::RateMismatch { sum, total: lambda_total, residual })
    }
}

/// Checks the config against the openings it will route to. Returns every problem found.
pub fn validate_config(config: &DispatchConfig, openings: &[(OpeningId, f64)]) -> Vec<DispatchError> {
    let mut errors = Vec::new();
    if openings.is_empty() {
        errors.push(DispatchError::EmptyOpeningSet);
        return errors;
    }
    let rate_of: BTreeMap<OpeningId, f64> = openings.iter().copied().collect();
    for (name, w) in [("w_wait", config.w_wait), ("w_travel", config.w_travel)] {
        if !(w.is_finite() && w >= 0.0) {
            errors.push(DispatchError::InvalidConfig(format!("{name} must be >= 0, got {w}")));
        }
    }
    match &config.mode {
        DispatchMode::Shared { lambda_total } => {
            if let Err(e) = validate_rates(rate_of.values().copied(), *lambda_total) {
                errors.push(e);
            }
        }
        DispatchMode::Exclusive { partition } => {
            if partition.is_empty() {
                errors.push(DispatchError::InvalidConfig("exclusive partition is empty".into()));
            }
            for id in partition.values() {
                if !rate_of.contains_key(id) {
                    errors.push(DispatchError::UnknownOpening(*id));
                }
            }
        }
        DispatchMode::Hybrid { groups } => {
            let mut seen = BTreeSet::new();
            let mut catch_all = 0;
            let mut claimed = BTreeSet::new();
            for (g, group) in groups.iter().enumerate() {
                if group.classes.is_empty() {
                    catch_all += 1;
                }
                for class in &group.classes {
                    if !claimed.insert(class.clone()) {
                        errors.push(DispatchError::InvalidConfig(format!(
                            "class `{class}` is claimed by more than one hybrid group"
                        )));
                    }
                }
                for id in &group.openings {
                    if !rate_of.contains_key(id) {
                        errors.push(DispatchError::UnknownOpening(*id));
                    } else if !seen.insert(*id) {
                        errors.push(DispatchError::InvalidConfig(format!(
                            "opening {id} appears in more than one hybrid group"
                        )));
                    }
                }
                match group.mode {
                    GroupMode::Exclusive if group.openings.len() != 1 => {
                        errors.push(DispatchError::InvalidConfig(format!(
                            "hybrid group {g} is exclusive and needs exactly one opening"
                        )));
                    }
                    GroupMode::Shared { lambda_total } => {
                        let rates = group.openings.iter().filter_map(|id| rate_of.get(id).copied());
                        if let Err(e) = validate_rates(rates, lambda_total) {
                            errors.push(e);
                        }
                    }
                    _ => {}
                }
            }
            if catch_all > 1 {
                errors.push(DispatchError::InvalidConfig(
                    "at most one hybrid group may leave `classes` empty".into(),
                ));
            }
            for id in rate_of.keys() {
                if !seen.contains(id) {
                    errors.push(DispatchError::InvalidConfig(format!(
                        "opening {id} is not in any hybrid group"
                    )));
                }
            }
        }
    }
    errors
}

/// Wait estimate, travel time and scalarized cost of sending `drone` to `opening`.
fn evaluate(drone: &Drone, opening: &Opening, config: &DispatchConfig) -> (f64, f64, f64) {
    let mut queued = opening.queue.len();
    if config.count_inbound {
        queued += opening.inbound;
    }
    let wait = queued as f64 / opening.lambda;
    let travel = drone.position.distance(opening.position) / drone.v_max;
    (wait, travel, config.w_wait * wait + config.w_travel * travel)
}

fn decide(drone: &Drone, opening: &Opening, config: &DispatchConfig) -> AssignmentDecision {
    let (estimated_wait, travel_time, _) = evaluate(drone, opening, config);
    AssignmentDecision {
        drone: drone.id,
        opening: opening.id,
        estimated_wait,
        travel_time,
        feasible: estimated_wait + travel_time < drone.remaining_flight_time,
    }
}

/// Cheapest feasible opening among `candidates`, ties to the lowest id. Falls
/// back to the cheapest overall, flagged infeasible.
fn cheapest<'a>(
    drone: &Drone,
    candidates: impl Iterator<Item = &'a Opening>,
    config: &DispatchConfig,
) -> Result<AssignmentDecision, DispatchError> {
    let mut best_feasible: Option<(f64, OpeningId, &Opening)> = None;
    let mut best_any: Option<(f64, OpeningId, &Opening)> = None;
    for opening in candidates {
        let (wait, travel, cost) = evaluate(drone, opening, config);
        let key = (cost, opening.id, opening);
        let better = |cur: &Option<(f64, OpeningId, &Opening)>| match cur {
            None => true,
            Some((c, id, _)) => cost < *c || (cost == *c && opening.id < *id),
        };
        if better(&best_any) {
            best_any = Some(key);
        }
        if wait + travel < drone.remaining_flight_time && better(&best_feasible) {
            best_feasible = Some(key);
        }
    }
    let (_, _, opening) = best_feasible.or(best_any).ok_or(DispatchError::EmptyOpeningSet)?;
    Ok(decide(drone, opening, config))
}

/// Picks the opening for a newly spawned drone.
pub fn assign_opening(
    drone: &Drone,
    openings: &[Opening],
    config: &DispatchConfig,
) -> Result<AssignmentDecision, DispatchError> {
    if openings.is_empty() {
        return Err(DispatchError::EmptyOpeningSet);
    }
    let find = |id: OpeningId| {
        openings.iter().find(|o| o.id == id).ok_or(DispatchError::UnknownOpening(id))
    };
    match &config.mode {
        DispatchMode::Shared { .. } => cheapest(drone, openings.iter(), config),
        DispatchMode::Exclusive { partition } => {
            let id = partition
                .get(&drone.class)
                .ok_or_else(|| DispatchError::UnmappedDroneClass(drone.class.clone()))?;
            Ok(decide(drone, find(*id)?, config))
        }
        DispatchMode::Hybrid { groups } => {
            let group = groups
                .iter()
                .find(|g| g.classes.contains(&drone.class))
                .or_else(|| groups.iter().find(|g| g.classes.is_empty()))
                .ok_or_else(|| DispatchError::UnmappedDroneClass(drone.class.clone()))?;
            match group.mode {
                GroupMode::Exclusive => {
                    let id = *group.openings.first().ok_or(DispatchError::EmptyOpeningSet)?;
                    Ok(decide(drone, find(id)?, config))
                }
                GroupMode::Shared { .. } => {
                    let members: Vec<&Opening> =
                        group.openings.iter().map(|id| find(*id)).collect::<Result<_, _>>()?;
                    cheapest(drone, members.into_iter(), config)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Admitted,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssignmentRecord {
    pub decision: AssignmentDecision,
    pub closed: Option<Outcome>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpeningTally {
    pub assigned: u64,
    pub admitted: u64,
    pub failed: u64,
}

/// Serial dispatch actor: one decision per spawned drone, one release per
/// terminal drone, and a frozen copy of the configured rates.
#[derive(Debug, Clone)]
pub struct Orchestrator {
    config: DispatchConfig,
    rates: BTreeMap<OpeningId, f64>,
    records: BTreeMap<DroneId, AssignmentRecord>,
    tallies: BTreeMap<OpeningId, OpeningTally>,
}

impl Orchestrator {
    pub fn new(config: DispatchConfig, openings: &[Opening]) -> Result<Self, Vec<DispatchError>> {
        let rates: Vec<(OpeningId, f64)> = openings.iter().map(|o| (o.id, o.lambda)).collect();
        let errors = validate_config(&config, &rates);
        if !errors.is_empty() {
            return Err(errors);
        }
        Ok(Self {
            config,
            tallies: rates.iter().map(|(id, _)| (*id, OpeningTally::default())).collect(),
            rates: rates.into_iter().collect(),
            records: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &DispatchConfig {
        &self.config
    }

    pub fn assign(&mut self, drone: &Drone, openings: &[Opening]) -> Result<AssignmentDecision, DispatchError> {
        if self.records.contains_key(&drone.id) {
            return Err(DispatchError::InvalidConfig(format!("drone {} was already assigned", drone.id)));
        }
        let decision = assign_opening(drone, openings, &self.config)?;
        self.records.insert(drone.id, AssignmentRecord { decision, closed: None });
        self.tallies.entry(decision.opening).or_default().assigned += 1;
        Ok(decision)
    }

    pub fn assignment(&self, drone: DroneId) -> Option<&AssignmentRecord> {
        self.records.get(&drone)
    }

    /// Closes the assignment of a drone that passed or failed.
    pub fn release(&mut self, opening: OpeningId, drone: DroneId, outcome: Outcome) -> Result<(), DispatchError> {
        let record = self
            .records
            .get_mut(&drone)
            .filter(|r| r.decision.opening == opening && r.closed.is_none())
            .ok_or(DispatchError::UnknownAssignment { opening, drone })?;
        record.closed = Some(outcome);
        let tally = self.tallies.entry(opening).or_default();
        match outcome {
            Outcome::Admitted => tally.admitted += 1,
            Outcome::Failed => tally.failed += 1,
        }
        Ok(())
    }

    pub fn tally(&self, opening: OpeningId) -> OpeningTally {
        self.tallies.get(&opening).copied().unwrap_or_default()
    }

    /// True while every opening still runs at its configured rate.
    pub fn rates_intact(&self, openings: &[Opening]) -> bool {
        openings.len() == self.rates.len()
            && openings.iter().all(|o| {
                self.rates.get(&o.id) == Some(&o.lambda) && o.queue.lambda() == o.lambda
            })
            && match self.config.mode {
                DispatchMode::Shared { lambda_total } => {
                    validate_rates(openings.iter().map(|o| o.lambda), lambda_total).is_ok()
                }
                _ => true,
            }
    }
}
