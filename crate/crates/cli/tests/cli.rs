use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn flightq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flightq")).args(args).output().expect("binary runs")
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn scenario(name: &str) -> String {
    scenarios().join(name).display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_trace_and_metrics_then_report_agrees() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = flightq(&["run", "--scenario", &scenario("single_circle.toml"), "--seed", "7", "--out", out, "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).is_empty());
    let trace = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert!(trace.starts_with(r#"{"format":"flightq-trace","version":1"#));
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# flightq metrics v1\n"));

    let trace_path = dir.path().join("trace.jsonl");
    let o = flightq(&["report", "--trace", trace_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("agrees with the trace"));
    let ticks = fs::read_to_string(dir.path().join("ticks.csv")).unwrap();
    assert!(ticks.starts_with("t,airborne,holding,approaching,queued,swapping,admitted_total,failed_total,min_separation"));
}

#[test]
fn report_flags_tampered_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = flightq(&["run", "--scenario", &scenario("single_circle.toml"), "--out", out, "--quiet", "--horizon", "30"]);
    assert_eq!(o.status.code(), Some(0));
    let path = dir.path().join("metrics.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cells: Vec<&str> = lines[2].split(',').collect();
    let admitted: u64 = cells[5].parse().unwrap();
    let mut cells: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
    cells[5] = (admitted + 1).to_string();
    lines[2] = cells.join(",");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = flightq(&["report", "--trace", dir.path().join("trace.jsonl").to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("admitted"));
}

#[test]
fn run_exits_2_when_separation_is_violated() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenarios().join("single_circle.toml")).unwrap();
    // drones spawned on top of each other
    let crowded = text.replace("min_spacing = 0.5", "").replace("h = 20\ns = 2.5", "h = 1\ns = 1.0\ndrones_per_flock = 3")
        .replace("drones_per_flock = 1\n", "")
        + "\n[workload.spawn_region]\nkind = \"box\"\nmin = [3.0, 3.0, 7.0]\nmax = [3.01, 3.01, 7.01]\n";
    let path = dir.path().join("crowded.toml");
    fs::write(&path, crowded).unwrap();
    let out = dir.path().join("out");
    let o = flightq(&["run", "--scenario", path.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    assert_eq!(o.status.code(), Some(2), "{}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_lists_the_rate_mismatch() {
    let o = flightq(&["validate", "--scenario", &scenario("bad_rates.toml")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("rate mismatch"), "{}", stdout(&o));
    let o = flightq(&["validate", "--scenario", &scenario("rose_desk.toml")]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_files_and_bad_overrides_fail() {
    let o = flightq(&["run", "--scenario", "/nonexistent/x.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let o = flightq(&["run", "--scenario", &scenario("single_circle.toml"), "--dt", "0.2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dt too coarse"));
    let o = flightq(&["report", "--trace", "/nonexistent/trace.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_prints_one_row_per_seed() {
    let o = flightq(&["compare", "--a", &scenario("stress_fifo.toml"), "--b", &scenario("stress_lrf.toml"), "--seeds", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "seed,failures_a,failures_b,transit_mean_a,transit_mean_b");
    assert_eq!(lines.len(), 5);
    for (i, l) in lines[1..].iter().enumerate() {
        assert!(l.starts_with(&format!("{i},")));
        assert_eq!(l.split(',').count(), 5);
    }
    // unrelated scenarios are refused
    let o = flightq(&["compare", "--a", &scenario("stress_fifo.toml"), "--b", &scenario("rose_desk.toml"), "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn gallery_exports_loadable_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = flightq(&["gallery", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let names = stdout(&flightq(&["gallery"]));
    assert_eq!(names.lines().count(), 6);
    for entry in fs::read_dir(dir.path()).unwrap() {
        let p = entry.unwrap().path();
        let o = flightq(&["validate", "--scenario", p.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", p.display());
        // the shipped copies stay in sync with the built-in gallery
        let shipped = scenarios().join(p.file_name().unwrap());
        assert_eq!(fs::read_to_string(&p).unwrap(), fs::read_to_string(shipped).unwrap());
    }
}

#[test]
fn workload_export_is_deterministic() {
    let a = flightq(&["workload", "--scenario", &scenario("rose_desk.toml"), "--seed", "3"]);
    let b = flightq(&["workload", "--scenario", &scenario("rose_desk.toml"), "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let text = stdout(&a);
    assert!(text.starts_with("time,x,y,z,battery,class"));
    assert_eq!(text.lines().count(), 219);
}
