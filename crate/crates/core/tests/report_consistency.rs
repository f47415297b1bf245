mod common;

use std::io::{self, Write};
use std::sync::{Arc, Mutex};

use common::*;
use flightq::pattern_queue::Policy;
use flightq::report::{compare_with_metrics, metrics_rows, read_metrics_csv, read_trace, write_metrics_csv};
use flightq::scenario::{gallery_scenario, Scenario};
use flightq::sim::{run, RunOutput};

#[derive(Clone, Default)]
struct Buffer(Arc<Mutex<Vec<u8>>>);

impl Write for Buffer {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.lock().unwrap().extend_from_slice(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

fn traced(s: &Scenario, seed: u64) -> (RunOutput, Vec<u8>) {
    let buf = Buffer::default();
    let out = run(s, seed, Some(Box::new(buf.clone()))).unwrap();
    let bytes = buf.0.lock().unwrap().clone();
    (out, bytes)
}

fn assert_consistent(s: &Scenario, seed: u64) {
    let (out, trace) = traced(s, seed);
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &out.metrics).unwrap();
    let rows = read_metrics_csv(csv.as_slice()).unwrap();
    assert_eq!(rows, metrics_rows(&out.metrics));
    let summary = read_trace(trace.as_slice()).unwrap();
    let diffs = compare_with_metrics(&summary, &rows);
    assert!(diffs.is_empty(), "{}: {diffs:#?}", s.name);
    assert_eq!(summary.violation_events, summary.separation_violations);
    assert!(summary.ticks.iter().all(|t| t.airborne == t.holding + t.approaching + t.queued + t.swapping));
}

#[test]
fn gallery_reports_match_their_traces() {
    for name in ["single-circle", "heterogeneous-stack", "multi-opening-shared"] {
        let s = gallery_scenario(name).unwrap();
        assert_consistent(&s, s.sim.seed);
    }
}

#[test]
fn stressed_runs_with_failures_match_their_traces() {
    for seed in [3, 14] {
        assert_consistent(&lrf_stress(Policy::fifo()), seed);
        assert_consistent(&lrf_stress(Policy::lrf(2.0, 0.15)), seed);
    }
}

#[test]
fn metrics_csv_is_versioned() {
    let s = gallery_scenario("single-circle").unwrap();
    let out = run(&s, 1, None).unwrap();
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &out.metrics).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# flightq metrics v1"));
    assert!(lines.next().unwrap().starts_with("scope,opening,lambda,"));
    assert!(lines.next().unwrap().starts_with("run,,,"));
    assert_eq!(lines.count(), s.openings.len());
    assert!(read_metrics_csv(text.replacen("v1", "v9", 1).as_bytes()).is_err());
}

#[test]
fn truncated_trace_is_rejected() {
    let s = gallery_scenario("single-circle").unwrap();
    let (_, trace) = traced(&s, 1);
    let text = String::from_utf8(trace).unwrap();
    let cut: Vec<&str> = text.lines().take(50).collect();
    assert!(read_trace(cut.join("\n").as_bytes()).is_err());
    assert!(read_trace("{\"format\":\"other\",\"version\":1}".as_bytes()).is_err());
}
