use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mdtx_core::trace::HistoryTrace;
use mdtx_core::{simulate, LogEntry, Protocol, Topology, WorkloadConfig};

fn mdtx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdtx")).args(args).output().expect("binary runs")
}

fn small_trace() -> HistoryTrace {
    let config = WorkloadConfig { total_txns: 12, protocol: Protocol::Cp, ..WorkloadConfig::default() };
    simulate(&Topology::preset("VVV").unwrap(), &config, 4).unwrap().trace
}

fn write_trace(dir: &Path, trace: &HistoryTrace) -> String {
    let path = dir.join("trace.jsonl");
    trace.write_jsonl(fs::File::create(&path).unwrap()).unwrap();
    path.display().to_string()
}

#[test]
fn verify_accepts_a_clean_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_trace(dir.path(), &small_trace());
    let out = mdtx(&["verify", "--trace", &path]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let verdict: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(verdict["ok"], true);
}

#[test]
fn verify_reports_divergent_replica_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let mut trace = small_trace();
    let record = trace.logs.iter_mut().find(|r| r.datacenter == 1 && r.position == 1).expect("position 1 at dc 1");
    record.entry = LogEntry::Noop;
    record.kind = "NOOP".into();
    record.txn_ids.clear();
    let path = write_trace(dir.path(), &trace);

    let out = mdtx(&["verify", "--trace", &path]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let verdict: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(verdict["ok"], false);
    let r1 = verdict["violations"].as_array().unwrap().iter().find(|v| v["property"] == "R1").expect("R1 violation");
    assert!(!r1["witness"].is_null());
    assert!(r1["witness"].to_string().contains('1'));
}

#[test]
fn verify_rejects_unparseable_trace() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    fs::write(&path, "{\"record\": \"txn\", \"oops\": 1}\n").unwrap();
    let out = mdtx(&["verify", "--trace", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_writes_csv_and_run_records() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let out = mdtx(&[
        "run",
        "--suite",
        "contention-sweep",
        "--out",
        out_dir.to_str().unwrap(),
        "--seeds",
        "1",
        "--txns",
        "20",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("contention-sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("label,preset,protocol,D,attrs"));
    assert_eq!(fs::read_dir(out_dir.join("runs")).unwrap().count(), 6);
}

#[test]
fn run_with_invalid_suite_file_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    fs::write(
        &suite,
        r#"
name = "broken"
seeds = [0]

[[cells]]
label = "bad"
preset = "VVV"

[cells.workload]
read_fraction = 1.5
"#,
    )
    .unwrap();
    let out = mdtx(&["run", "--suite", suite.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let out = mdtx(&["run", "--suite", "no-such-suite", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn promote_mutation_is_reported_as_violation() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("hot.toml");
    fs::write(
        &suite,
        r#"
name = "hot"
seeds = [0, 1, 2, 3, 4, 5, 6, 7]

[[cells]]
label = "hot-cp"
preset = "VVV"

[cells.workload]
total_txns = 60
total_attributes = 3
ops_per_txn = 4
target_txn_per_sec = 8.0
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out =
        mdtx(&["run", "--suite", suite.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--mutation", "promote"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(fs::read_dir(out_dir.join("traces")).unwrap().count() > 0);
}
