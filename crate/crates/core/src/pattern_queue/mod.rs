//! Slot-occupancy state machine for one pattern bound to one opening.
//!
//! The queue only tracks which drone holds which slot. Motion is the
//! simulator's job: it reports arrivals back through [`PatternQueue::arrive`]
//! and [`PatternQueue::settle`], and reads the slot moves returned by
//! [`PatternQueue::admission_tick`].

mod swap;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pattern, Vec3};

pub use swap::SwapTrajectory;

pub type DroneId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum DroneState {
    Spawned,
    Approaching { target_slot: usize },
    Queued { slot_index: usize },
    Swapping { partner_id: DroneId },
    Admitted,
    Failed,
}

impl DroneState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, DroneState::Admitted | DroneState::Failed)
    }

    pub fn label(&self) -> &'static str {
        match self {
            DroneState::Spawned => "spawned",
            DroneState::Approaching { .. } => "approaching",
            DroneState::Queued { .. } => "queued",
            DroneState::Swapping { .. } => "swapping",
            DroneState::Admitted => "admitted",
            DroneState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drone {
    pub id: DroneId,
    pub position: Vec3,
    pub v_max: f64,
    pub remaining_flight_time: f64,
    pub state: DroneState,
    /// Partition key used by exclusive dispatch.
    pub class: String,
}

impl Drone {
    pub fn new(id: DroneId, position: Vec3, v_max: f64, remaining_flight_time: f64) -> Self {
        Self {
            id,
            position,
            v_max,
            remaining_flight_time,
            state: DroneState::Spawned,
            class: String::from("default"),
        }
    }

    pub fn with_class(mut self, class: impl Into<String>) -> Self {
        self.class = class.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "fifo")]
    Fifo,
    /// Least remaining flight time first.
    #[serde(rename = "lrf")]
    LeastRemainingFlightTimeFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub swap_duration: f64,
    #[serde(default)]
    pub lateral_offset: f64,
}

impl Default for Policy {
    fn default() -> Self {
        Self::fifo()
    }
}

impl Policy {
    pub fn fifo() -> Self {
        Self { kind: PolicyKind::Fifo, swap_duration: 0.0, lateral_offset: 0.0 }
    }

    pub fn lrf(swap_duration: f64, lateral_offset: f64) -> Self {
        Self { kind: PolicyKind::LeastRemainingFlightTimeFirst, swap_duration, lateral_offset }
    }

    pub fn validate(&self) -> Result<(), QueueError> {
        if !(self.swap_duration.is_finite() && self.swap_duration >= 0.0) {
            return Err(QueueError::InvalidPolicy(format!(
                "swap_duration must be >= 0, got {}",
                self.swap_duration
            )));
        }
        if self.kind == PolicyKind::LeastRemainingFlightTimeFirst
            && !(self.lateral_offset.is_finite() && self.lateral_offset > 0.0)
        {
            return Err(QueueError::InvalidPolicy(format!(
                "lateral_offset must be > 0 under lrf, got {}",
                self.lateral_offset
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueError {
    #[error("drone {0} is already in the queue")]
    DuplicateDrone(DroneId),
    #[error("drone {id} cannot be enqueued from state {state}")]
    NotEnqueueable { id: DroneId, state: &'static str },
    #[error("gossip rounds only run under the lrf policy")]
    PolicyMismatch,
    #[error("swap needs {needed} s but only {window} s remain before the next admission")]
    SwapWindowTooShort { window: f64, needed: f64 },
    #[error("slot {0} is empty")]
    SlotEmpty(usize),
    #[error("drone in slot {0} is still approaching")]
    NotQueued(usize),
    #[error("slot {slot} out of range for a {slots}-slot pattern")]
    SlotOutOfRange { slot: usize, slots: usize },
    #[error("admission tick at {now} s is before the scheduled {due} s")]
    NotDue { now: f64, due: f64 },
    #[error("drone {0} is not in this queue")]
    UnknownDrone(DroneId),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("invalid admission rate {0}")]
    InvalidRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccupantStatus {
    /// Slot reserved, drone still flying in from its spawn point.
    Approaching,
    /// Drone belongs to the queue; `in_position` once it hovers at the slot.
    Queued { in_position: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occupant {
    pub drone: DroneId,
    pub status: OccupantStatus,
    /// Last gossiped remaining flight time, seconds.
    pub remaining_flight_time: f64,
}

impl Occupant {
    fn is_queued(&self) -> bool {
        matches!(self.status, OccupantStatus::Queued { .. })
    }

    fn is_dwelling(&self) -> bool {
        self.status == OccupantStatus::Queued { in_position: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Enqueued {
    Slot { index: usize, position: Vec3 },
    Hold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMove {
    pub drone: DroneId,
    pub from: usize,
    pub to: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickOutcome {
    pub admitted: Option<DroneId>,
    pub moves: Vec<SlotMove>,
}

#[derive(Debug, Clone)]
pub struct PatternQueue {
    pattern: Pattern,
    lambda: f64,
    policy: Policy,
    occupancy: BTreeMap<usize, Occupant>,
    start_time: f64,
    ticks_fired: u64,
    // parity bookkeeping for odd-even transposition
    gossip_rounds: u64,
    head_shifts: u64,
}

impl PatternQueue {
    pub fn new(pattern: Pattern, lambda: f64, policy: Policy) -> Result<Self, QueueError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(QueueError::InvalidRate(lambda));
        }
        policy.validate()?;
        Ok(Self { pattern, lambda, policy, occupancy: BTreeMap::new(), start_time: 0.0, ticks_fired: 0, gossip_rounds: 0, head_shifts: 0 })
    }

    pub fn pattern(&self) -> &Pattern {
        &self.pattern
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn capacity(&self) -> usize {
        self.pattern.slot_count()
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn occupancy(&self) -> &BTreeMap<usize, Occupant> {
        &self.occupancy
    }

    pub fn occupant(&self, slot: usize) -> Option<&Occupant> {
        self.occupancy.get(&slot)
    }

    pub fn slot_of(&self, drone: DroneId) -> Option<usize> {
        self.occupancy.iter().find(|(_, o)| o.drone == drone).map(|(k, _)| *k)
    }

    /// Drone ids from head to tail.
    pub fn order(&self) -> Vec<DroneId> {
        self.occupancy.values().map(|o| o.drone).collect()
    }

    pub fn interval(&self) -> f64 {
        1.0 / self.lambda
    }

    pub fn admissions_fired(&self) -> u64 {
        self.ticks_fired
    }

    /// Time of the next admission tick. Ticks sit on the grid `k / lambda`.
    pub fn next_admission_time(&self) -> f64 {
        self.start_time + (self.ticks_fired + 1) as f64 / self.lambda
    }

    /// Orchestrator slot assignment: the slot right behind the current tail.
    pub fn enqueue(&mut self, drone: &Drone) -> Result<Enqueued, QueueError> {
        if !matches!(drone.state, DroneState::Spawned | DroneState::Approaching { .. }) {
            return Err(QueueError::NotEnqueueable { id: drone.id, state: drone.state.label() });
        }
        if self.slot_of(drone.id).is_some() {
            return Err(QueueError::DuplicateDrone(drone.id));
        }
        let index = match self.occupancy.keys().next_back() {
            None => 0,
            Some(&tail) if tail + 1 < self.capacity() => tail + 1,
            Some(_) => return Ok(Enqueued::Hold),
        };
        self.occupancy.insert(
            index,
            Occupant {
                drone: drone.id,
                status: OccupantStatus::Approaching,
                remaining_flight_time: drone.remaining_flight_time,
            },
        );
        let position = self.pattern.slots()[index];
        Ok(Enqueued::Slot { index, position })
    }

    /// An approaching drone reached its reserved slot.
    pub fn arrive(&mut self, drone: DroneId) -> Result<usize, QueueError> {
        let slot = self.slot_of(drone).ok_or(QueueError::UnknownDrone(drone))?;
        let occ = self.occupancy.get_mut(&slot).expect("slot found");
        occ.status = OccupantStatus::Queued { in_position: true };
        Ok(slot)
    }

    /// A queued drone finished its leg (or swap) and hovers at its slot.
    pub fn settle(&mut self, drone: DroneId) -> Result<usize, QueueError> {
        let slot = self.slot_of(drone).ok_or(QueueError::UnknownDrone(drone))?;
        let occ = self.occupancy.get_mut(&slot).expect("slot found");
        if !occ.is_queued() {
            return Err(QueueError::NotQueued(slot));
        }
        occ.status = OccupantStatus::Queued { in_position: true };
        Ok(slot)
    }

    /// Drops a drone (failure); its slot becomes a hole.
    pub fn remove(&mut self, drone: DroneId) -> Option<usize> {
        let slot = self.slot_of(drone)?;
        self.occupancy.remove(&slot);
        Some(slot)
    }

    /// Refreshes the flight-time metadata the drones gossip to their neighbors.
    pub fn refresh_metadata(&mut self, mut remaining: impl FnMut(DroneId) -> f64) {
        for occ in self.occupancy.values_mut() {
            occ.remaining_flight_time = remaining(occ.drone);
        }
    }

    /// Fires the opening: admits a head drone hovering at slot 0, then moves
    /// every eligible drone one slot forward into a free slot.
    ///
    /// Dwelling queued drones fly the next leg; approaching drones just have
    /// their reservation moved forward. A drone still on a leg stays put.
    pub fn admission_tick(&mut self, now: f64) -> Result<TickOutcome, QueueError> {
        let due = self.next_admission_time();
        if now + 1e-9 < due {
            return Err(QueueError::NotDue { now, due });
        }
        let mut outcome = TickOutcome::default();
        if self.occupancy.get(&0).is_some_and(Occupant::is_dwelling) {
            outcome.admitted = self.occupancy.remove(&0).map(|o| o.drone);
            self.head_shifts += 1;
        }
        for k in 1..self.capacity() {
            let Some(occ) = self.occupancy.get(&k).copied() else { continue };
            let movable = match occ.status {
                OccupantStatus::Approaching => true,
                OccupantStatus::Queued { in_position } => in_position,
            };
            if movable && !self.occupancy.contains_key(&(k - 1)) {
                let mut moved = occ;
                if moved.is_queued() {
                    moved.status = OccupantStatus::Queued { in_position: false };
                }
                self.occupancy.remove(&k);
                self.occupancy.insert(k - 1, moved);
                outcome.moves.push(SlotMove { drone: occ.drone, from: k, to: k - 1 });
            }
        }
        self.ticks_fired += 1;
        Ok(outcome)
    }

    /// One gossip exchange between slot neighbors. Returns the adjacent slot
    /// pairs `(k, k + 1)` whose drones should trade places. Rounds alternate
    /// between pairs starting on even and odd slots (counted relative to the
    /// drones, so an admission that shifts everyone keeps the alternation),
    /// which sorts a static queue in at most M rounds.
    pub fn gossip_round(&mut self) -> Result<Vec<(usize, usize)>, QueueError> {
        if self.policy.kind != PolicyKind::LeastRemainingFlightTimeFirst {
            return Err(QueueError::PolicyMismatch);
        }
        let start = ((self.gossip_rounds + self.head_shifts) % 2) as usize;
        self.gossip_rounds += 1;
        let mut pairs = Vec::new();
        let mut k = start;
        while k + 1 < self.capacity() {
            if let (Some(a), Some(b)) = (self.occupancy.get(&k), self.occupancy.get(&(k + 1))) {
                if a.is_queued() && b.is_queued() && a.remaining_flight_time > b.remaining_flight_time {
                    pairs.push((k, k + 1));
                }
            }
            k += 2;
        }
        Ok(pairs)
    }

    /// Exchanges the drones in slots `k` and `k + 1`. The caller flies them
    /// along a [`SwapTrajectory`]; both must be queued and the swap must fit
    /// before the next admission tick.
    pub fn execute_swap(&mut self, k: usize, now: f64) -> Result<(DroneId, DroneId), QueueError> {
        let slots = self.capacity();
        if k + 1 >= slots {
            return Err(QueueError::SlotOutOfRange { slot: k + 1, slots });
        }
        let a = *self.occupancy.get(&k).ok_or(QueueError::SlotEmpty(k))?;
        let b = *self.occupancy.get(&(k + 1)).ok_or(QueueError::SlotEmpty(k + 1))?;
        if !a.is_queued() {
            return Err(QueueError::NotQueued(k));
        }
        if !b.is_queued() {
            return Err(QueueError::NotQueued(k + 1));
        }
        let window = self.next_admission_time() - now;
        if window + 1e-9 < self.policy.swap_duration {
            return Err(QueueError::SwapWindowTooShort { window, needed: self.policy.swap_duration });
        }
        let in_flight = OccupantStatus::Queued { in_position: false };
        self.occupancy.insert(k, Occupant { status: in_flight, ..b });
        self.occupancy.insert(k + 1, Occupant { status: in_flight, ..a });
        Ok((a.drone, b.drone))
    }

    /// Slot map sanity: one drone per slot, one slot per drone, within capacity.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.occupancy.len() > self.capacity() {
            return Err(format!("{} occupants exceed {} slots", self.occupancy.len(), self.capacity()));
        }
        if let Some((&k, _)) = self.occupancy.iter().next_back() {
            if k >= self.capacity() {
                return Err(format!("slot {k} beyond capacity"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for occ in self.occupancy.values() {
            if !seen.insert(occ.drone) {
                return Err(format!("drone {} holds two slots", occ.drone));
            }
        }
        Ok(())
    }
}
