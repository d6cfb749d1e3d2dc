//! Suite runner artifacts and trace round trips.

use std::fs;

use mdtx_core::harness::{builtin_suite, run_suite, verify_trace, Overrides, RunRecord};
use mdtx_core::proposer::Mutations;
use mdtx_core::trace::HistoryTrace;
use mdtx_core::{simulate, Protocol, Topology, WorkloadConfig};

#[test]
fn suite_artifacts_match_report() {
    let dir = tempfile::tempdir().unwrap();
    let overrides = Overrides { seed_count: Some(2), total_txns: Some(30), ..Overrides::default() };
    let suite = overrides.apply(builtin_suite("replica-sweep").unwrap()).unwrap();
    let report = run_suite(&suite, Some(dir.path())).unwrap();
    assert_eq!(report.exit_code(), 0);
    assert_eq!(report.rows.len(), 8);
    assert_eq!(report.runs.len(), 16);

    let csv = fs::read_to_string(dir.path().join("replica-sweep.csv")).unwrap();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let commits: Vec<f64> = reader.records().map(|r| r.unwrap()[8].parse().unwrap()).collect();
    // Oracle: recompute each row's mean commits from the per-run JSON files.
    for (row, csv_commits) in report.rows.iter().zip(&commits) {
        let mut total = 0.0;
        for seed in &suite.seeds {
            let path = dir.path().join("runs").join(format!("{}-seed{seed}.json", row.label));
            let record: RunRecord = serde_json::from_slice(&fs::read(path).unwrap()).unwrap();
            total += record.metrics.commits as f64;
        }
        assert!((total / suite.seeds.len() as f64 - csv_commits).abs() < 1e-9, "{}", row.label);
    }
    assert!(!dir.path().join("traces").exists());
}

#[test]
fn failing_runs_leave_traces_that_verify_as_failing() {
    let dir = tempfile::tempdir().unwrap();
    let overrides = Overrides {
        seed_count: Some(6),
        protocol: Some(Protocol::Cp),
        total_txns: Some(60),
        mutations: Some(Mutations { skip_promote_check: true, ..Mutations::default() }),
        ..Overrides::default()
    };
    let mut suite = overrides.apply(builtin_suite("contention-sweep").unwrap()).unwrap();
    suite.cells.retain(|c| c.workload.total_attributes == 20);
    let report = run_suite(&suite, Some(dir.path())).unwrap();
    assert_eq!(report.exit_code(), 1);
    let traces: Vec<_> = fs::read_dir(dir.path().join("traces")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(traces.len(), report.violations().count());
    for path in traces {
        let verified = verify_trace(&path, false).unwrap();
        assert!(!verified.verdict.ok);
        assert_eq!(verified.exit_code(), 1);
    }
}

#[test]
fn trace_survives_jsonl_round_trip() {
    let config = WorkloadConfig { total_txns: 40, ..WorkloadConfig::default() };
    let trace = simulate(&Topology::preset("VOC").unwrap(), &config, 9).unwrap().trace;
    let mut bytes = Vec::new();
    trace.write_jsonl(&mut bytes).unwrap();
    let back = HistoryTrace::read_jsonl(bytes.as_slice()).unwrap();
    assert_eq!(back, trace);

    let file = tempfile::NamedTempFile::new().unwrap();
    fs::write(file.path(), &bytes).unwrap();
    let report = verify_trace(file.path(), true).unwrap();
    assert!(report.verdict.ok);
    // Forty transactions is far beyond the exhaustive search bound.
    assert!(matches!(report.brute_force, Some(Err(_))));
}
