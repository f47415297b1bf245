//! Metrics CSV and an independent trace reader that recomputes the run
//! metrics from the JSONL records alone.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::dispatch::OpeningId;
use crate::pattern_queue::DroneId;
use crate::sim::Metrics;
use crate::trace::{TRACE_FORMAT, TRACE_VERSION};

pub const METRICS_HEADER: &str = "# flightq metrics v1";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("metrics: {0}")]
    Metrics(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One row of the metrics CSV. The `run` row carries the totals, `opening`
/// rows the per-opening breakdown; columns that do not apply stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scope: String,
    pub opening: Option<OpeningId>,
    pub lambda: Option<f64>,
    pub spawned: Option<u64>,
    pub assigned: Option<u64>,
    pub admitted: u64,
    pub failed: u64,
    pub elapsed: f64,
    pub throughput: f64,
    pub transit_mean: Option<f64>,
    pub transit_max: Option<f64>,
    pub min_separation: Option<f64>,
    pub separation_violations: Option<u64>,
    pub invariant_breaches: Option<u64>,
    pub peak_occupancy: Option<usize>,
    pub peak_held: Option<usize>,
    pub swaps: Option<u64>,
}

pub fn metrics_rows(m: &Metrics) -> Vec<MetricsRow> {
    let finite = |v: f64| v.is_finite().then_some(v);
    let mut rows = vec![MetricsRow {
        scope: "run".into(),
        opening: None,
        lambda: None,
        spawned: Some(m.spawned),
        assigned: None,
        admitted: m.admitted,
        failed: m.failed,
        elapsed: m.elapsed,
        throughput: m.throughput,
        transit_mean: finite(m.transit_mean),
        transit_max: finite(m.transit_max),
        min_separation: finite(m.min_separation),
        separation_violations: Some(m.separation_violations),
        invariant_breaches: Some(m.invariant_breaches),
        peak_occupancy: None,
        peak_held: Some(m.peak_held),
        swaps: Some(m.swaps),
    }];
    for o in &m.per_opening {
        rows.push(MetricsRow {
            scope: "opening".into(),
            opening: Some(o.id),
            lambda: Some(o.lambda),
            spawned: None,
            assigned: Some(o.assigned),
            admitted: o.admitted,
            failed: o.failed,
            elapsed: m.elapsed,
            throughput: o.throughput,
            transit_mean: None,
            transit_max: None,
            min_separation: None,
            separation_violations: None,
            invariant_breaches: None,
            peak_occupancy: Some(o.peak_occupancy),
            peak_held: None,
            swaps: None,
        });
    }
    rows
}

/// Writes the versioned metrics CSV: a comment line, then a header row.
pub fn write_metrics_csv<W: Write>(mut out: W, m: &Metrics) -> Result<(), ReportError> {
    writeln!(out, "{METRICS_HEADER}")?;
    let mut w = csv::Writer::from_writer(out);
    for row in metrics_rows(m) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> Result<Vec<MetricsRow>, ReportError> {
    let mut reader = io::BufReader::new(input);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != METRICS_HEADER {
        return Err(ReportError::Metrics(format!("expected `{METRICS_HEADER}`, found `{}`", first.trim_end())));
    }
    let mut r = csv::Reader::from_reader(reader);
    let rows = r.deserialize().collect::<Result<Vec<MetricsRow>, _>>()?;
    if rows.first().map(|r| r.scope.as_str()) != Some("run") {
        return Err(ReportError::Metrics("first row must have scope `run`".into()));
    }
    Ok(rows)
}

/// Head counts after one tick, as seen in the trace.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TickRow {
    pub t: f64,
    pub airborne: usize,
    pub holding: usize,
    pub approaching: usize,
    pub queued: usize,
    pub swapping: usize,
    pub admitted_total: u64,
    pub failed_total: u64,
    /// Closest pair this tick; empty with fewer than two drones airborne.
    pub min_separation: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct OpeningSummary {
    pub id: OpeningId,
    pub lambda: f64,
    pub slots: usize,
    pub admitted: u64,
    pub failed: u64,
    pub peak_occupancy: usize,
}

/// Metrics recomputed from a trace.
#[derive(Debug, Clone, Default)]
pub struct TraceSummary {
    pub scenario: String,
    pub seed: u64,
    pub dt: f64,
    pub delta_min: f64,
    pub spawned: u64,
    pub admitted: u64,
    pub failed: u64,
    pub elapsed: f64,
    pub throughput: f64,
    pub transit_mean: f64,
    pub transit_max: f64,
    pub min_separation: f64,
    pub separation_violations: u64,
    pub violation_events: u64,
    pub peak_held: usize,
    pub swaps: u64,
    pub openings: Vec<OpeningSummary>,
    pub ticks: Vec<TickRow>,
}

#[derive(Default)]
struct Reader {
    summary: TraceSummary,
    spawn_time: BTreeMap<DroneId, f64>,
    transits: Vec<f64>,
    ended: bool,
    tick: Option<TickAccum>,
}

struct TickAccum {
    t: f64,
    row: TickRow,
    positions: Vec<[f64; 3]>,
    occupancy: BTreeMap<OpeningId, usize>,
}

fn field<'a>(v: &'a Value, key: &str, line: usize) -> Result<&'a Value, ReportError> {
    v.get(key).ok_or_else(|| ReportError::Trace { line, message: format!("missing `{key}`") })
}

fn num(v: &Value, key: &str, line: usize) -> Result<f64, ReportError> {
    field(v, key, line)?
        .as_f64()
        .ok_or_else(|| ReportError::Trace { line, message: format!("`{key}` is not a number") })
}

fn int(v: &Value, key: &str, line: usize) -> Result<u64, ReportError> {
    field(v, key, line)?
        .as_u64()
        .ok_or_else(|| ReportError::Trace { line, message: format!("`{key}` is not an unsigned integer") })
}

impl Reader {
    fn header(&mut self, v: &Value) -> Result<(), ReportError> {
        let format = field(v, "format", 1)?.as_str().unwrap_or_default();
        let version = int(v, "version", 1)?;
        if format != TRACE_FORMAT || version != u64::from(TRACE_VERSION) {
            return Err(ReportError::Trace {
                line: 1,
                message: format!("unsupported trace `{format}` v{version}"),
            });
        }
        let s = &mut self.summary;
        s.scenario = field(v, "scenario", 1)?.as_str().unwrap_or_default().to_string();
        s.seed = int(v, "seed", 1)?;
        s.dt = num(v, "dt", 1)?;
        s.delta_min = num(v, "delta_min", 1)?;
        s.min_separation = f64::INFINITY;
        let openings = field(v, "openings", 1)?
            .as_array()
            .ok_or(ReportError::Trace { line: 1, message: "`openings` is not a list".into() })?;
        for o in openings {
            s.openings.push(OpeningSummary {
                id: int(o, "id", 1)? as OpeningId,
                lambda: num(o, "lambda", 1)?,
                slots: int(o, "slots", 1)? as usize,
                ..OpeningSummary::default()
            });
        }
        Ok(())
    }

    fn opening_mut(&mut self, id: u64, line: usize) -> Result<&mut OpeningSummary, ReportError> {
        self.summary
            .openings
            .iter_mut()
            .find(|o| o.id as u64 == id)
            .ok_or(ReportError::Trace { line, message: format!("unknown opening {id}") })
    }

    fn event(&mut self, v: &Value, kind: &str, line: usize) -> Result<(), ReportError> {
        let t = num(v, "t", line)?;
        match kind {
            "spawn" => {
                self.summary.spawned += 1;
                self.spawn_time.insert(int(v, "drone_id", line)?, t);
            }
            "admit" => {
                let id = int(v, "drone_id", line)?;
                let spawned = *self
                    .spawn_time
                    .get(&id)
                    .ok_or(ReportError::Trace { line, message: format!("drone {id} admitted before spawning") })?;
                self.transits.push(t - spawned);
                self.summary.admitted += 1;
                self.opening_mut(int(v, "opening", line)?, line)?.admitted += 1;
            }
            "fail" => {
                self.summary.failed += 1;
                if let Some(o) = field(v, "opening", line)?.as_u64() {
                    self.opening_mut(o, line)?.failed += 1;
                }
            }
            "swap" => self.summary.swaps += 1,
            "violation" => self.summary.violation_events += 1,
            "end" => {
                self.close_tick();
                self.summary.elapsed = t;
                self.ended = true;
            }
            "assign" | "hold" | "reserve" => {}
            other => return Err(ReportError::Trace { line, message: format!("unknown event `{other}`") }),
        }
        Ok(())
    }

    fn drone(&mut self, v: &Value, line: usize) -> Result<(), ReportError> {
        let t = num(v, "t", line)?;
        if self.tick.as_ref().is_some_and(|k| k.t != t) {
            self.close_tick();
        }
        let tick = self.tick.get_or_insert_with(|| TickAccum {
            t,
            row: TickRow { t, ..TickRow::default() },
            positions: Vec::new(),
            occupancy: BTreeMap::new(),
        });
        tick.positions.push([num(v, "x", line)?, num(v, "y", line)?, num(v, "z", line)?]);
        tick.row.airborne += 1;
        match field(v, "state", line)?.as_str().unwrap_or_default() {
            "spawned" => tick.row.holding += 1,
            "approaching" => tick.row.approaching += 1,
            "queued" => tick.row.queued += 1,
            "swapping" => tick.row.swapping += 1,
            other => {
                return Err(ReportError::Trace { line, message: format!("drone record in state `{other}`") });
            }
        }
        if let (Some(o), Some(_)) = (field(v, "opening", line)?.as_u64(), field(v, "slot", line)?.as_u64()) {
            *tick.occupancy.entry(o as OpeningId).or_default() += 1;
        }
        Ok(())
    }

    fn close_tick(&mut self) {
        let Some(mut tick) = self.tick.take() else { return };
        let s = &mut self.summary;
        let delta = s.delta_min;
        let mut closest = f64::INFINITY;
        for (i, a) in tick.positions.iter().enumerate() {
            for b in &tick.positions[i + 1..] {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                closest = closest.min(d);
                if d < delta {
                    s.separation_violations += 1;
                }
            }
        }
        s.min_separation = s.min_separation.min(closest);
        s.peak_held = s.peak_held.max(tick.row.holding);
        for o in &mut s.openings {
            o.peak_occupancy = o.peak_occupancy.max(tick.occupancy.get(&o.id).copied().unwrap_or(0));
        }
        tick.row.admitted_total = s.admitted;
        tick.row.failed_total = s.failed;
        tick.row.min_separation = closest.is_finite().then_some(closest);
        s.ticks.push(tick.row);
    }
}

/// Parses a JSONL trace and recomputes its metrics without touching the
/// simulator. Separation is checked by brute force over every pair.
pub fn read_trace<R: BufRead>(input: R) -> Result<TraceSummary, ReportError> {
    let mut reader = Reader::default();
    for (i, text) in input.lines().enumerate() {
        let line = i + 1;
        let text = text?;
        if reader.ended {
            return Err(ReportError::Trace { line, message: "record after the end event".into() });
        }
        let v: Value =
            serde_json::from_str(&text).map_err(|e| ReportError::Trace { line, message: e.to_string() })?;
        if line == 1 {
            reader.header(&v)?;
            continue;
        }
        match v.get("event").and_then(Value::as_str) {
            Some(kind) => {
                // a tick's drone records are contiguous and follow its events
                reader.close_tick();
                reader.event(&v, kind, line)?;
            }
            None => reader.drone(&v, line)?,
        }
    }
    if !reader.ended {
        return Err(ReportError::Trace { line: 0, message: "trace ends without an end event".into() });
    }
    let mut s = reader.summary;
    let n = reader.transits.len();
    s.transit_mean = if n == 0 { f64::NAN } else { reader.transits.iter().sum::<f64>() / n as f64 };
    s.transit_max = reader.transits.iter().copied().fold(f64::NAN, f64::max);
    s.throughput = if s.elapsed > 0.0 { s.admitted as f64 / s.elapsed } else { 0.0 };
    Ok(s)
}

/// Differences between reported metrics and a trace recomputation. Times
/// compare to within the trace's nanosecond rounding.
pub fn compare_with_metrics(summary: &TraceSummary, rows: &[MetricsRow]) -> Vec<String> {
    let mut diffs = Vec::new();
    let Some(run) = rows.iter().find(|r| r.scope == "run") else {
        return vec!["metrics have no run row".into()];
    };
    let opt = |v: Option<f64>| v.unwrap_or(f64::NAN);
    let mut num = |name: &str, reported: f64, recomputed: f64, tol: f64| {
        if let Some(d) = differs(name, reported, recomputed, tol) {
            diffs.push(d);
        }
    };
    num("spawned", run.spawned.unwrap_or(0) as f64, summary.spawned as f64, 0.0);
    num("admitted", run.admitted as f64, summary.admitted as f64, 0.0);
    num("failed", run.failed as f64, summary.failed as f64, 0.0);
    num("elapsed", run.elapsed, summary.elapsed, 1e-6);
    num("throughput", run.throughput, summary.throughput, 1e-6);
    num("transit_mean", opt(run.transit_mean), summary.transit_mean, 1e-6);
    num("transit_max", opt(run.transit_max), summary.transit_max, 1e-6);
    let reported_sep = run.min_separation.unwrap_or(f64::INFINITY);
    num("min_separation", reported_sep, summary.min_separation, 1e-9);
    num(
        "separation_violations",
        run.separation_violations.unwrap_or(0) as f64,
        summary.separation_violations as f64,
        0.0,
    );
    num("peak_held", run.peak_held.unwrap_or(0) as f64, summary.peak_held as f64, 0.0);
    num("swaps", run.swaps.unwrap_or(0) as f64, summary.swaps as f64, 0.0);
    for o in &summary.openings {
        match rows.iter().find(|r| r.scope == "opening" && r.opening == Some(o.id)) {
            None => num(&format!("opening {} present", o.id), 0.0, 1.0, 0.0),
            Some(r) => {
                let name = |f: &str| format!("opening {} {f}", o.id);
                num(&name("admitted"), r.admitted as f64, o.admitted as f64, 0.0);
                num(&name("failed"), r.failed as f64, o.failed as f64, 0.0);
                num(
                    &name("peak_occupancy"),
                    r.peak_occupancy.unwrap_or(0) as f64,
                    o.peak_occupancy as f64,
                    0.0,
                );
            }
        }
    }
    diffs
}

fn differs(name: &str, reported: f64, recomputed: f64, tol: f64) -> Option<String> {
    let same = (reported - recomputed).abs() <= tol
        || (reported.is_nan() && recomputed.is_nan())
        || (reported.is_infinite() && reported == recomputed);
    (!same).then(|| format!("{name}: reported {reported}, trace {recomputed}"))
}

pub fn write_ticks_csv<W: Write>(out: W, ticks: &[TickRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for row in ticks {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text summary table.
pub fn render_summary(s: &TraceSummary) -> String {
    let fmt = |v: f64| if v.is_finite() { format!("{v:.3}") } else { "-".into() };
    let mut out = format!("scenario {} (seed {})\n", s.scenario, s.seed);
    let rows = [
        ("spawned", s.spawned.to_string()),
        ("admitted", s.admitted.to_string()),
        ("failed", s.failed.to_string()),
        ("elapsed_s", fmt(s.elapsed)),
        ("throughput_per_s", format!("{:.4}", s.throughput)),
        ("transit_mean_s", fmt(s.transit_mean)),
        ("transit_max_s", fmt(s.transit_max)),
        ("min_separation_m", fmt(s.min_separation)),
        ("separation_violations", s.separation_violations.to_string()),
        ("peak_held", s.peak_held.to_string()),
        ("swaps", s.swaps.to_string()),
    ];
    for (k, v) in rows {
        out.push_str(&format!("  {k:<22} {v:>12}\n"));
    }
    out.push_str(&format!("  {:<8} {:>8} {:>6} {:>9} {:>7} {:>6}\n", "opening", "lambda", "slots", "admitted", "failed", "peak"));
    for o in &s.openings {
        out.push_str(&format!(
            "  {:<8} {:>8.4} {:>6} {:>9} {:>7} {:>6}\n",
            o.id, o.lambda, o.slots, o.admitted, o.failed, o.peak_occupancy
        ));
    }
    out
}
