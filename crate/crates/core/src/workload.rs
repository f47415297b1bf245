//! Arrival processes: staggered flocks, Poisson streams, bursts and CSV replay.

use std::io::{Read, Write};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;

/// Flocks in transit for the 65K-drone rose display.
pub const ROSE_FLOCKS: u32 = 218;
/// Staggering interval between flocks, seconds.
pub const ROSE_STAGGER_S: f64 = 1.36;
/// Flight time on a full battery, seconds.
pub const FULL_FLIGHT_TIME_S: f64 = 300.0;
/// Time to fully charge a depleted battery, seconds.
pub const FULL_CHARGE_TIME_S: f64 = 600.0;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    InvalidSpec(String),
    #[error("invalid scale {0}: must be in (0, 1] and give at least one flock")]
    InvalidScale(f64),
    #[error("arrival file: {0}")]
    Io(#[from] std::io::Error),
    #[error("arrival csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    /// `h` batches of `drones_per_flock`, one batch every `s` seconds from t = 0.
    StagFlocks {
        h: u32,
        s: f64,
        #[serde(default = "one_per_flock")]
        drones_per_flock: u32,
    },
    PoissonArrivals { rate: f64, horizon: f64 },
    Burst { n: u32, at: f64 },
    /// Arrivals read from a CSV written by [`write_arrivals_csv`].
    Replay { file: PathBuf },
}

fn one_per_flock() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpawnRegion {
    Box {
        min: Vec3,
        max: Vec3,
    },
    /// Spherical shell; `upper_half` keeps only points with `z >= center.z`.
    Shell {
        center: Vec3,
        inner_radius: f64,
        outer_radius: f64,
        #[serde(default)]
        upper_half: bool,
    },
}

impl SpawnRegion {
    pub fn contains(&self, p: Vec3) -> bool {
        const EPS: f64 = 1e-9;
        match self {
            SpawnRegion::Box { min, max } => {
                p.x >= min.x - EPS
                    && p.x <= max.x + EPS
                    && p.y >= min.y - EPS
                    && p.y <= max.y + EPS
                    && p.z >= min.z - EPS
                    && p.z <= max.z + EPS
            }
            SpawnRegion::Shell { center, inner_radius, outer_radius, upper_half } => {
                let r = p.distance(*center);
                r >= inner_radius - EPS
                    && r <= outer_radius + EPS
                    && (!upper_half || p.z >= center.z - EPS)
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            SpawnRegion::Box { min, max } => {
                if !(min.is_finite() && max.is_finite()) {
                    return Err("spawn box corners must be finite".into());
                }
                if min.x > max.x || min.y > max.y || min.z > max.z {
                    return Err("spawn box min must not exceed max".into());
                }
                Ok(())
            }
            SpawnRegion::Shell { center, inner_radius, outer_radius, .. } => {
                if !center.is_finite() {
                    return Err("spawn shell center must be finite".into());
                }
                if !(*inner_radius >= 0.0 && outer_radius >= inner_radius && outer_radius.is_finite()) {
                    return Err("spawn shell needs 0 <= inner_radius <= outer_radius".into());
                }
                Ok(())
            }
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        match self {
            SpawnRegion::Box { min, max } => Vec3::new(
                uniform(rng, min.x, max.x),
                uniform(rng, min.y, max.y),
                uniform(rng, min.z, max.z),
            ),
            SpawnRegion::Shell { center, inner_radius, outer_radius, upper_half } => {
                // uniform direction from a normalized Gaussian-free rejection in the cube
                let dir = loop {
                    let v = Vec3::new(
                        uniform(rng, -1.0, 1.0),
                        uniform(rng, -1.0, 1.0),
                        uniform(rng, -1.0, 1.0),
                    );
                    let n = v.norm();
                    if n > 1e-6 && n <= 1.0 {
                        break v * (1.0 / n);
                    }
                };
                let dir = if *upper_half && dir.z < 0.0 { Vec3::new(dir.x, dir.y, -dir.z) } else { dir };
                let (a, b) = (inner_radius.powi(3), outer_radius.powi(3));
                let r = uniform(rng, a, b).cbrt();
                *center + dir * r
            }
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BatteryDistribution {
    Fixed { value: f64 },
    Uniform { min: f64, max: f64 },
}

impl BatteryDistribution {
    /// Nearly drained drones heading to charge: uniform between the time
    /// they need to get through and one minute.
    pub fn almost_depleted(bound: f64) -> Self {
        BatteryDistribution::Uniform { min: bound, max: 60.0_f64.max(bound) }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            BatteryDistribution::Fixed { value } => (value, value),
            BatteryDistribution::Uniform { min, max } => (min, max),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            BatteryDistribution::Fixed { value } => value,
            BatteryDistribution::Uniform { min, max } => uniform(rng, min, max),
        }
    }
}

/// Drones spawning inside `region` get `class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRule {
    pub class: String,
    pub region: SpawnRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub kind: WorkloadKind,
    /// Where drones appear; the scenario fills in a shell around the patterns when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spawn_region: Option<SpawnRegion>,
    /// Initial remaining flight time; the scenario falls back to a full battery when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub battery: Option<BatteryDistribution>,
    /// Minimum distance between any two generated spawn points.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub min_spacing: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassRule>,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: f64,
    pub position: Vec3,
    pub battery: f64,
    pub class: String,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, spawn_region: SpawnRegion, battery: BatteryDistribution) -> Self {
        Self { kind, spawn_region: Some(spawn_region), battery: Some(battery), min_spacing: 0.0, classes: Vec::new() }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        match &self.kind {
            WorkloadKind::StagFlocks { h, s, drones_per_flock } => {
                if *h < 1 {
                    errors.push("stag_flocks h must be >= 1".into());
                }
                if !(s.is_finite() && *s > 0.0) {
                    errors.push(format!("stag_flocks s must be > 0, got {s}"));
                }
                if *drones_per_flock < 1 {
                    errors.push("stag_flocks drones_per_flock must be >= 1".into());
                }
            }
            WorkloadKind::PoissonArrivals { rate, horizon } => {
                if !(rate.is_finite() && *rate > 0.0) {
                    errors.push(format!("poisson rate must be > 0, got {rate}"));
                }
                if !(horizon.is_finite() && *horizon > 0.0) {
                    errors.push(format!("poisson horizon must be > 0, got {horizon}"));
                }
            }
            WorkloadKind::Burst { n, at } => {
                if *n < 1 {
                    errors.push("burst n must be >= 1".into());
                }
                if !(at.is_finite() && *at >= 0.0) {
                    errors.push(format!("burst time must be >= 0, got {at}"));
                }
            }
            WorkloadKind::Replay { .. } => {}
        }
        if let Some(battery) = &self.battery {
            let (lo, hi) = battery.support();
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi >= lo) {
                errors.push(format!("battery values must be > 0 with min <= max, got [{lo}, {hi}]"));
            }
        }
        if let Some(region) = &self.spawn_region {
            if let Err(e) = region.validate() {
                errors.push(e);
            }
        }
        for rule in &self.classes {
            if let Err(e) = rule.region.validate() {
                errors.push(format!("class `{}`: {e}", rule.class));
            }
        }
        if !(self.min_spacing.is_finite() && self.min_spacing >= 0.0) {
            errors.push("min_spacing must be >= 0".into());
        }
        errors
    }

    /// Every class this workload can produce.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.classes.iter().map(|c| c.class.clone()).collect();
        names.push("default".into());
        names.dedup();
        names
    }

    fn classify(&self, p: Vec3) -> String {
        self.classes
            .iter()
            .find(|c| c.region.contains(p))
            .map(|c| c.class.clone())
            .unwrap_or_else(|| "default".into())
    }
}

/// Arrival list for `spec`, ordered by time. A pure function of its inputs.
pub fn generate(spec: &WorkloadSpec, seed: u64) -> Result<Vec<Arrival>, WorkloadError> {
    let errors = spec.validate();
    if !errors.is_empty() {
        return Err(WorkloadError::InvalidSpec(errors.join("; ")));
    }
    if let WorkloadKind::Replay { file } = &spec.kind {
        let f = std::fs::File::open(file)?;
        return read_arrivals_csv(f);
    }
    let battery = spec
        .battery
        .as_ref()
        .ok_or_else(|| WorkloadError::InvalidSpec("battery distribution is required".into()))?;
    let region = spec
        .spawn_region
        .as_ref()
        .ok_or_else(|| WorkloadError::InvalidSpec("spawn_region is required".into()))?;
    let times: Vec<f64> = match spec.kind {
        WorkloadKind::StagFlocks { h, s, drones_per_flock } => (0..h)
            .flat_map(|i| std::iter::repeat_n(i as f64 * s, drones_per_flock as usize))
            .collect(),
        WorkloadKind::Burst { n, at } => vec![at; n as usize],
        WorkloadKind::PoissonArrivals { .. } | WorkloadKind::Replay { .. } => Vec::new(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Arrival> = Vec::with_capacity(times.len());
    let push = |rng: &mut ChaCha8Rng, time: f64, out: &mut Vec<Arrival>| -> Result<(), WorkloadError> {
        let position = spaced_sample(region, spec.min_spacing, out, rng)?;
        let battery = battery.sample(rng);
        out.push(Arrival { time, position, battery, class: spec.classify(position) });
        Ok(())
    };
    if let WorkloadKind::PoissonArrivals { rate, horizon } = spec.kind {
        let gaps = Exp::new(rate).map_err(|e| WorkloadError::InvalidSpec(e.to_string()))?;
        let mut t = 0.0;
        loop {
            t += gaps.sample(&mut rng);
            if t >= horizon {
                break;
            }
            push(&mut rng, t, &mut out)?;
        }
    } else {
        for t in times {
            push(&mut rng, t, &mut out)?;
        }
    }
    Ok(out)
}

fn spaced_sample(
    region: &SpawnRegion,
    min_spacing: f64,
    taken: &[Arrival],
    rng: &mut ChaCha8Rng,
) -> Result<Vec3, WorkloadError> {
    const ATTEMPTS: usize = 10_000;
    for _ in 0..ATTEMPTS {
        let p = region.sample(rng);
        if min_spacing == 0.0 || taken.iter().all(|a| a.position.distance(p) >= min_spacing) {
            return Ok(p);
        }
    }
    Err(WorkloadError::InvalidSpec(format!(
        "spawn region cannot fit {} drones {min_spacing} m apart",
        taken.len() + 1
    )))
}

/// Workload and opening rate for a rose display scaled down by `scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoseDesk {
    pub workload: WorkloadSpec,
    /// Charging-station admission rate, one drone per staggering interval.
    pub lambda: f64,
    pub initial_flight_time: f64,
    pub charge_time: f64,
}

pub fn rose_desk_scale(scale: f64, spawn_region: SpawnRegion) -> Result<RoseDesk, WorkloadError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(WorkloadError::InvalidScale(scale));
    }
    let h = (ROSE_FLOCKS as f64 * scale).round() as u32;
    if h < 1 {
        return Err(WorkloadError::InvalidScale(scale));
    }
    let workload = WorkloadSpec::new(
        WorkloadKind::StagFlocks { h, s: ROSE_STAGGER_S, drones_per_flock: 1 },
        spawn_region,
        BatteryDistribution::Fixed { value: FULL_FLIGHT_TIME_S },
    );
    Ok(RoseDesk {
        workload,
        lambda: 1.0 / ROSE_STAGGER_S,
        initial_flight_time: FULL_FLIGHT_TIME_S,
        charge_time: FULL_CHARGE_TIME_S,
    })
}

#[derive(Serialize, Deserialize)]
struct ArrivalRow {
    time: f64,
    x: f64,
    y: f64,
    z: f64,
    battery: f64,
    class: String,
}

pub fn write_arrivals_csv(arrivals: &[Arrival], out: impl Write) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(out);
    for a in arrivals {
        w.serialize(ArrivalRow {
            time: a.time,
            x: a.position.x,
            y: a.position.y,
            z: a.position.z,
            battery: a.battery,
            class: a.class.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_arrivals_csv(input: impl Read) -> Result<Vec<Arrival>, WorkloadError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ArrivalRow = row?;
        out.push(Arrival {
            time: row.time,
            position: Vec3::new(row.x, row.y, row.z),
            battery: row.battery,
            class: row.class,
        });
    }
    out.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(out)
}
