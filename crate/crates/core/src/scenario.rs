//! Scenario files: TOML schema, validation, rendering and the built-in gallery.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{
    validate_config, DispatchConfig, DispatchMode, GroupMode, HybridGroup, Opening, OpeningId,
};
use crate::geometry::{
    build_pattern, min_slot_clearance, Layer, Orientation, Pattern, PatternSpec, Shape, Vec3,
};
use crate::pattern_queue::{PatternQueue, Policy, PolicyKind};
use crate::sim::SimConfig;
use crate::workload::{
    generate, rose_desk_scale, Arrival, BatteryDistribution, SpawnRegion, WorkloadError,
    WorkloadKind, WorkloadSpec,
};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}{}: {message}", table.as_ref().map(|t| format!(" in `{t}`")).unwrap_or_default())]
    Parse { line: usize, column: usize, table: Option<String>, message: String },
    #[error("{} validation error(s):\n  {}", .0.len(), .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("render: {0}")]
    Render(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Pattern of one opening; its anchor is the opening position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternConfig {
    #[serde(flatten)]
    pub shape: Shape,
    /// Required for simple outlines; composite patterns default to the layer sum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slots: Option<usize>,
    #[serde(default)]
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpeningConfig {
    pub id: OpeningId,
    pub position: Vec3,
    pub lambda: f64,
    pub pattern: PatternConfig,
    #[serde(default)]
    pub policy: Policy,
}

impl OpeningConfig {
    pub fn pattern_spec(&self) -> PatternSpec {
        let composite = matches!(self.pattern.shape, Shape::Nested2D { .. } | Shape::Stacked3D { .. });
        let mut spec = if composite {
            PatternSpec::composite(self.pattern.shape.clone(), self.position)
        } else {
            PatternSpec::new(self.pattern.shape.clone(), self.pattern.slots.unwrap_or(0), self.position)
        };
        if let Some(m) = self.pattern.slots {
            spec.slot_count = m;
        }
        spec.with_orientation(self.pattern.orientation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub sim: SimConfig,
    pub openings: Vec<OpeningConfig>,
    pub dispatch: DispatchConfig,
    pub workload: WorkloadSpec,
}

impl Scenario {
    /// Every problem with the scenario, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.version != SCENARIO_VERSION {
            errors.push(format!(
                "unsupported scenario version {} (expected {SCENARIO_VERSION})",
                self.version
            ));
        }
        errors.extend(self.sim.validate());
        if self.openings.is_empty() {
            errors.push("at least one [[openings]] entry is required".into());
        }
        let mut ids = BTreeSet::new();
        for o in &self.openings {
            let at = format!("opening {}", o.id);
            if !ids.insert(o.id) {
                errors.push(format!("{at}: duplicate id"));
            }
            if !(o.lambda.is_finite() && o.lambda > 0.0) {
                errors.push(format!("{at}: lambda must be > 0, got {}", o.lambda));
            }
            if !o.position.is_finite() {
                errors.push(format!("{at}: position must be finite"));
            }
            let composite = matches!(o.pattern.shape, Shape::Nested2D { .. } | Shape::Stacked3D { .. });
            if !composite && o.pattern.slots.is_none() {
                errors.push(format!("{at}: pattern.slots is required for a {} pattern", o.pattern.shape.name()));
            }
            match build_pattern(&o.pattern_spec()) {
                Ok(pattern) => {
                    if let Ok(clearance) = min_slot_clearance(&pattern) {
                        if clearance < self.sim.delta_min {
                            log::warn!(
                                "{at}: slot clearance {clearance:.3} m is below delta_min; violations are likely"
                            );
                        }
                    }
                    if o.lambda > 0.0 {
                        let fastest = pattern.leg_lengths().iter().fold(0.0, |m: f64, l| m.max(*l)) * o.lambda;
                        if fastest > self.sim.v_max {
                            log::warn!("{at}: legs need {fastest:.3} m/s but v_max is {}", self.sim.v_max);
                        }
                    }
                }
                Err(e) => errors.push(format!("{at}: {e}")),
            }
            if let Err(e) = o.policy.validate() {
                errors.push(format!("{at}: {e}"));
            }
            if o.policy.kind == PolicyKind::LeastRemainingFlightTimeFirst && o.lambda > 0.0 {
                let interval = 1.0 / o.lambda;
                if !(o.policy.swap_duration > 0.0 && o.policy.swap_duration <= interval + 1e-12) {
                    errors.push(format!(
                        "{at}: lrf swap_duration must be in (0, 1/lambda = {interval}], got {}",
                        o.policy.swap_duration
                    ));
                }
            }
        }
        let rates: Vec<(OpeningId, f64)> = self.openings.iter().map(|o| (o.id, o.lambda)).collect();
        if !rates.is_empty() {
            errors.extend(validate_config(&self.dispatch, &rates).iter().map(|e| format!("dispatch: {e}")));
        }
        errors.extend(self.workload.validate().into_iter().map(|e| format!("workload: {e}")));
        let classes = self.workload.class_names();
        match &self.dispatch.mode {
            DispatchMode::Exclusive { partition } => {
                for class in &classes {
                    if !partition.contains_key(class) {
                        errors.push(format!("dispatch: drone class `{class}` is not mapped to an opening"));
                    }
                }
            }
            DispatchMode::Hybrid { groups } => {
                let catch_all = groups.iter().any(|g| g.classes.is_empty());
                for class in &classes {
                    if !catch_all && !groups.iter().any(|g| g.classes.contains(class)) {
                        errors.push(format!("dispatch: drone class `{class}` is not covered by any group"));
                    }
                }
            }
            DispatchMode::Shared { .. } => {}
        }
        errors
    }

    pub fn patterns(&self) -> Result<Vec<Pattern>, Vec<String>> {
        let mut out = Vec::new();
        let mut errors = Vec::new();
        for o in &self.openings {
            match build_pattern(&o.pattern_spec()) {
                Ok(p) => out.push(p),
                Err(e) => errors.push(format!("opening {}: {e}", o.id)),
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(errors)
        }
    }

    pub fn build_openings(&self) -> Result<Vec<Opening>, Vec<String>> {
        let patterns = self.patterns()?;
        let mut errors = Vec::new();
        let mut out = Vec::new();
        for (o, pattern) in self.openings.iter().zip(patterns) {
            match PatternQueue::new(pattern, o.lambda, o.policy) {
                Ok(queue) => out.push(Opening::new(o.id, queue)),
                Err(e) => errors.push(format!("opening {}: {e}", o.id)),
            }
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(errors)
        }
    }

    /// Spawn shell used when the workload names no region: outside the
    /// sphere enclosing every slot, upper half only.
    pub fn default_spawn_region(&self) -> SpawnRegion {
        let slots: Vec<Vec3> = self
            .patterns()
            .map(|ps| ps.iter().flat_map(|p| p.slots().to_vec()).collect())
            .unwrap_or_default();
        let n = slots.len().max(1) as f64;
        let center = slots.iter().fold(Vec3::ZERO, |acc, s| acc + *s) * (1.0 / n);
        let radius = slots.iter().map(|s| s.distance(center)).fold(0.0, f64::max);
        let inner = radius + 1.0;
        SpawnRegion::Shell { center, inner_radius: inner, outer_radius: inner + 2.0, upper_half: true }
    }

    /// The workload with the scenario defaults for spawn region and battery filled in.
    pub fn resolved_workload(&self) -> WorkloadSpec {
        let mut w = self.workload.clone();
        if w.spawn_region.is_none() {
            w.spawn_region = Some(self.default_spawn_region());
        }
        if w.battery.is_none() {
            w.battery = Some(BatteryDistribution::Fixed { value: self.sim.initial_flight_time });
        }
        w
    }

    pub fn arrivals(&self, seed: u64) -> Result<Vec<Arrival>, WorkloadError> {
        generate(&self.resolved_workload(), seed)
    }
}

/// Parses and validates a scenario.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| parse_error(text, &e))?;
    let errors = scenario.validate();
    if errors.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError::Invalid(errors))
    }
}

fn parse_error(text: &str, e: &toml::de::Error) -> ScenarioError {
    let offset = e.span().map(|s| s.start).unwrap_or(0).min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map(|i| i + 1).unwrap_or(0) + 1;
    // nearest table header at or above the error names the section
    let table = text
        .lines()
        .take(line)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .find_map(|l| {
            let l = l.trim();
            l.starts_with('[').then(|| l.trim_matches(|c| c == '[' || c == ']').trim().to_string())
        });
    ScenarioError::Parse { line, column, table, message: e.message().trim().to_string() }
}

/// Reads a scenario file; replay paths are resolved against the file's directory.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    let mut scenario: Scenario = toml::from_str(&text).map_err(|e| parse_error(&text, &e))?;
    if let WorkloadKind::Replay { file } = &mut scenario.workload.kind {
        if file.is_relative() {
            if let Some(dir) = path.parent() {
                *file = dir.join(&*file);
            }
        }
    }
    let errors = scenario.validate();
    if errors.is_empty() {
        Ok(scenario)
    } else {
        Err(ScenarioError::Invalid(errors))
    }
}

pub fn render_scenario(scenario: &Scenario) -> Result<String, ScenarioError> {
    toml::to_string(scenario).map_err(|e| ScenarioError::Render(e.to_string()))
}

// ---- gallery ----

pub const GALLERY: [&str; 6] = [
    "single-circle",
    "nested-2d",
    "stacked-3d",
    "heterogeneous-stack",
    "multi-opening-shared",
    "rose-desk",
];

fn base_sim(horizon: f64) -> SimConfig {
    SimConfig { horizon, seed: 7, ..SimConfig::default() }
}

fn circle(radius: f64, slots: usize) -> PatternConfig {
    PatternConfig { shape: Shape::Circle { radius }, slots: Some(slots), orientation: Orientation::horizontal() }
}

fn opening(id: OpeningId, position: Vec3, lambda: f64, pattern: PatternConfig, policy: Policy) -> OpeningConfig {
    OpeningConfig { id, position, lambda, pattern, policy }
}

fn stag(h: u32, s: f64, battery: BatteryDistribution) -> WorkloadSpec {
    WorkloadSpec {
        kind: WorkloadKind::StagFlocks { h, s, drones_per_flock: 1 },
        spawn_region: None,
        battery: Some(battery),
        min_spacing: 0.5,
        classes: Vec::new(),
    }
}

fn scenario(name: &str, sim: SimConfig, openings: Vec<OpeningConfig>, workload: WorkloadSpec) -> Scenario {
    let lambda_total = openings.iter().map(|o| o.lambda).sum();
    Scenario {
        version: SCENARIO_VERSION,
        name: name.into(),
        sim,
        openings,
        dispatch: DispatchConfig::shared(lambda_total),
        workload,
    }
}

/// One of the built-in scenarios by name.
pub fn gallery_scenario(name: &str) -> Option<Scenario> {
    let here = Vec3::new(0.0, 0.0, 5.0);
    let batteries = BatteryDistribution::Uniform { min: 60.0, max: 120.0 };
    let s = match name {
        "single-circle" => scenario(
            name,
            base_sim(90.0),
            vec![opening(0, here, 0.5, circle(1.0, 8), Policy::fifo())],
            stag(20, 2.5, batteries),
        ),
        "nested-2d" => {
            let ellipse = |a, b, slots| Layer::new(Shape::Ellipse { semi_major: a, semi_minor: b }, slots);
            let pattern = PatternConfig {
                shape: Shape::Nested2D { layers: vec![ellipse(1.0, 0.6, 6), ellipse(1.6, 1.1, 8), ellipse(2.2, 1.6, 10)] },
                slots: None,
                orientation: Orientation::horizontal(),
            };
            scenario(name, base_sim(120.0), vec![opening(0, here, 0.5, pattern, Policy::fifo())], stag(30, 2.0, batteries))
        }
        "stacked-3d" => {
            let ring = |slots| Layer::new(Shape::Circle { radius: 1.0 }, slots);
            let pattern = PatternConfig {
                shape: Shape::Stacked3D { layers: vec![ring(8), ring(8), ring(8)], layer_gap: 1.0 },
                slots: None,
                orientation: Orientation::horizontal(),
            };
            scenario(name, base_sim(120.0), vec![opening(0, here, 0.5, pattern, Policy::fifo())], stag(30, 1.5, batteries))
        }
        "heterogeneous-stack" => {
            let pattern = PatternConfig {
                shape: Shape::Stacked3D {
                    layers: vec![
                        Layer::new(Shape::Ellipse { semi_major: 1.2, semi_minor: 0.8 }, 8),
                        Layer::new(Shape::Rectangle { width: 2.0, height: 1.4 }, 8),
                        Layer::new(Shape::ZigZag { segment_length: 1.0, n_segments: 4, row_spacing: 0.5 }, 5),
                    ],
                    layer_gap: 1.0,
                },
                slots: None,
                orientation: Orientation::horizontal(),
            };
            scenario(
                name,
                base_sim(120.0),
                vec![opening(0, here, 0.4, pattern, Policy::lrf(2.5, 0.15))],
                stag(30, 1.5, BatteryDistribution::Uniform { min: 40.0, max: 120.0 }),
            )
        }
        "multi-opening-shared" => {
            let openings = [(-4.0, -4.0), (4.0, -4.0), (4.0, 4.0), (-4.0, 4.0)]
                .iter()
                .enumerate()
                .map(|(i, (x, y))| opening(i as OpeningId, Vec3::new(*x, *y, 5.0), 0.25, circle(1.0, 8), Policy::fifo()))
                .collect();
            scenario(name, base_sim(150.0), openings, stag(60, 1.0, BatteryDistribution::Fixed { value: 300.0 }))
        }
        "rose-desk" => {
            let rose = rose_desk_scale(1.0, SpawnRegion::Box { min: Vec3::ZERO, max: Vec3::ZERO })
                .expect("full scale is valid");
            let mut workload = rose.workload;
            workload.spawn_region = None;
            workload.min_spacing = 0.5;
            let sim = SimConfig { initial_flight_time: rose.initial_flight_time, ..base_sim(400.0) };
            scenario(name, sim, vec![opening(0, here, rose.lambda, circle(1.5, 16), Policy::fifo())], workload)
        }
        _ => return None,
    };
    Some(s)
}

pub fn gallery() -> Vec<Scenario> {
    GALLERY.iter().map(|n| gallery_scenario(n).expect("gallery names resolve")).collect()
}

/// Hybrid group helper for callers building scenarios in code.
pub fn shared_group(openings: Vec<OpeningId>, classes: Vec<String>, lambda_total: f64) -> HybridGroup {
    HybridGroup { openings, classes, mode: GroupMode::Shared { lambda_total } }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
name = "minimal"

[sim]
horizon = 30.0

[[openings]]
id = 0
position = [0.0, 0.0, 5.0]
lambda = 1.0

[openings.pattern]
shape = "circle"
radius = 1.0
slots = 4

[openings.policy]
kind = "fifo"

[dispatch]
mode = "shared"
lambda_total = 1.0

[workload]
kind = "burst"
n = 1
at = 0.0
"#;

    #[test]
    fn minimal_scenario_parses() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.openings.len(), 1);
        assert_eq!(s.sim.dt, 0.01);
        assert_eq!(s.openings[0].pattern.slots, Some(4));
        assert_eq!(s.workload.kind, WorkloadKind::Burst { n: 1, at: 0.0 });
    }

    #[test]
    fn shared_rate_mismatch_is_rejected() {
        let text = MINIMAL.replace("lambda_total = 1.0", "lambda_total = 1.111111111111111");
        let Err(ScenarioError::Invalid(errors)) = parse_scenario(&text) else { panic!("accepted") };
        assert!(errors.iter().any(|e| e.contains("rate")), "{errors:?}");
    }

    #[test]
    fn unknown_shape_names_the_table() {
        let text = MINIMAL.replace("shape = \"circle\"", "shape = \"hexagon\"");
        let err = parse_scenario(&text).unwrap_err();
        let ScenarioError::Parse { line, table, message, .. } = &err else { panic!("{err}") };
        assert!(message.contains("hexagon"), "{message}");
        assert_eq!(table.as_deref(), Some("openings.pattern"));
        assert!(*line >= 13, "line {line}");
    }

    #[test]
    fn collects_every_error() {
        let text = MINIMAL
            .replace("horizon = 30.0", "horizon = 30.0\ndt = 0.5")
            .replace("lambda = 1.0", "lambda = -1.0")
            .replace("n = 1", "n = 0");
        let Err(ScenarioError::Invalid(errors)) = parse_scenario(&text) else { panic!("accepted") };
        assert!(errors.iter().any(|e| e.contains("too coarse")), "{errors:?}");
        assert!(errors.iter().any(|e| e.contains("lambda must be > 0")), "{errors:?}");
        assert!(errors.iter().any(|e| e.contains("burst n")), "{errors:?}");
    }

    #[test]
    fn gallery_round_trips_and_validates() {
        for s in gallery() {
            assert!(s.validate().is_empty(), "{}: {:?}", s.name, s.validate());
            let text = render_scenario(&s).unwrap();
            let back = parse_scenario(&text).unwrap_or_else(|e| panic!("{}: {e}\n{text}", s.name));
            assert_eq!(back, s);
        }
    }

    #[test]
    fn gallery_patterns_clear_delta_min() {
        for s in gallery() {
            for p in s.patterns().unwrap() {
                assert!(min_slot_clearance(&p).unwrap() >= s.sim.delta_min, "{}", s.name);
            }
        }
    }

    #[test]
    fn lrf_swap_must_fit_the_interval() {
        let mut s = gallery_scenario("heterogeneous-stack").unwrap();
        s.openings[0].policy.swap_duration = 3.0;
        assert!(s.validate().iter().any(|e| e.contains("swap_duration")));
    }
}
