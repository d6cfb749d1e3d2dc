//! Experiment suites: built-in sweeps and TOML suite files, run across
//! seeds in parallel, with per-run JSON, an aggregate CSV and a checker
//! verdict for every run.
//!
//! Suite file schema (every workload field is optional):
//!
//! ```toml
//! name = "my-suite"
//! seeds = [0, 1, 2]
//!
//! [[cells]]
//! label = "vvv-cp"
//! preset = "VVV"
//! loss = 0.05
//! outages = [{ datacenter = 2, from_ms = 20000.0, to_ms = 60000.0 }]
//! workload = { protocol = "cp", total_attributes = 100, total_txns = 200 }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{self, CheckerError, Verdict};
use crate::messages::MessageKind;
use crate::proposer::Mutations;
use crate::simnet::{OutageWindow, Topology, TrafficRecord};
use crate::trace::{HistoryTrace, TraceParseError};
use crate::types::{Ballot, GroupKey, ProposerId, Protocol};
use crate::workload::{self, ExperimentError, RunMetrics, WorkloadConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Suites available by name.
pub const BUILTIN_SUITES: &[&str] =
    &["replica-sweep", "contention-sweep", "concurrency-sweep", "datacenter-concurrency", "fault-drill"];

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot read or write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trace {path}: {source}")]
    Trace { path: PathBuf, source: TraceParseError },
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub label: String,
    pub preset: String,
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub outages: Vec<OutageWindow>,
    #[serde(default)]
    pub workload: WorkloadConfig,
}

impl CellSpec {
    pub fn topology(&self) -> Result<Topology, HarnessError> {
        let mut topology = Topology::preset(&self.preset).map_err(|e| HarnessError::Config(e.to_string()))?;
        topology.loss = self.loss;
        topology.outages = self.outages.clone();
        topology.validate().map_err(|e| HarnessError::Config(format!("cell {}: {e}", self.label)))?;
        Ok(topology)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub cells: Vec<CellSpec>,
    pub seeds: Vec<u64>,
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::Config(format!("suite {} lists no seeds", self.name)));
        }
        if self.cells.is_empty() {
            return Err(HarnessError::Config(format!("suite {} has no cells", self.name)));
        }
        let mut labels = std::collections::BTreeSet::new();
        for cell in &self.cells {
            if !labels.insert(&cell.label) {
                return Err(HarnessError::Config(format!("duplicate cell label {}", cell.label)));
            }
            let topology = cell.topology()?;
            cell.workload.validate(&topology).map_err(|e| HarnessError::Config(format!("cell {}: {e}", cell.label)))?;
        }
        Ok(())
    }
}

/// Command-line style adjustments applied to every cell of a suite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// First seed; with `seed_count` the suite runs `seed..seed + count`.
    pub seed: Option<u64>,
    pub seed_count: Option<usize>,
    /// Keep only cells running this protocol.
    pub protocol: Option<Protocol>,
    pub loss: Option<f64>,
    pub promotion_cap: Option<u32>,
    pub mutations: Option<Mutations>,
    pub total_txns: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, mut suite: SuiteSpec) -> Result<SuiteSpec, HarnessError> {
        match (self.seed, self.seed_count) {
            (Some(first), count) => suite.seeds = (first..first + count.unwrap_or(1) as u64).collect(),
            (None, Some(count)) => suite.seeds = (0..count as u64).collect(),
            (None, None) => {}
        }
        if let Some(p) = self.protocol {
            suite.cells.retain(|c| c.workload.protocol == p);
            if suite.cells.is_empty() {
                return Err(HarnessError::Config(format!("suite {} has no {p:?} cells", suite.name)));
            }
        }
        for cell in &mut suite.cells {
            if let Some(loss) = self.loss {
                cell.loss = loss;
            }
            if let Some(cap) = self.promotion_cap {
                cell.workload.promotion_cap = Some(cap);
            }
            if let Some(m) = self.mutations {
                cell.workload.mutations = m;
            }
            if let Some(n) = self.total_txns {
                cell.workload.total_txns = n;
            }
        }
        Ok(suite)
    }
}

fn protocol_label(p: Protocol) -> &'static str {
    match p {
        Protocol::Basic => "basic",
        Protocol::Cp => "cp",
    }
}

fn both_protocols(label: &str, preset: &str, workload: WorkloadConfig) -> Vec<CellSpec> {
    [Protocol::Basic, Protocol::Cp]
        .into_iter()
        .map(|protocol| CellSpec {
            label: format!("{label}-{}", protocol_label(protocol)),
            preset: preset.to_string(),
            loss: 0.0,
            outages: vec![],
            workload: WorkloadConfig { protocol, ..workload.clone() },
        })
        .collect()
}

/// A built-in suite by name.
pub fn builtin_suite(name: &str) -> Option<SuiteSpec> {
    let base = WorkloadConfig::default();
    let cells = match name {
        "replica-sweep" => (2..=5)
            .flat_map(|d| both_protocols(&format!("replicas-{d}"), &format!("replicas-{d}"), base.clone()))
            .collect(),
        "contention-sweep" => [20, 100, 500]
            .into_iter()
            .flat_map(|a| {
                both_protocols(&format!("attrs-{a}"), "VVV", WorkloadConfig { total_attributes: a, ..base.clone() })
            })
            .collect(),
        "concurrency-sweep" => [1.0, 2.0, 3.0, 4.0]
            .into_iter()
            .flat_map(|tps: f64| {
                both_protocols(&format!("tps-{tps}"), "VVV", WorkloadConfig { target_txn_per_sec: tps, ..base.clone() })
            })
            .collect(),
        // One client per datacenter, each at one transaction per second.
        "datacenter-concurrency" => both_protocols(
            "voc",
            "VOC",
            WorkloadConfig {
                clients: 3,
                client_dcs: vec![0, 1, 2],
                total_txns: 1500,
                target_txn_per_sec: 3.0,
                stagger_ms: 250.0,
                ..base.clone()
            },
        ),
        "fault-drill" => {
            let small = WorkloadConfig { total_txns: 200, ..base.clone() };
            let mut cells = Vec::new();
            for (label, preset, loss, outages) in [
                ("vvv-loss5", "VVV", 0.05, vec![]),
                ("vvv-loss20", "VVV", 0.20, vec![]),
                ("vvv-outage", "VVV", 0.0, vec![OutageWindow { datacenter: 2, from_ms: 10_000.0, to_ms: 60_000.0 }]),
                ("cov-outage", "COV", 0.05, vec![OutageWindow { datacenter: 0, from_ms: 10_000.0, to_ms: 60_000.0 }]),
                (
                    "replicas-5-outage",
                    "replicas-5",
                    0.05,
                    vec![OutageWindow { datacenter: 1, from_ms: 20_000.0, to_ms: 80_000.0 }],
                ),
            ] {
                for mut cell in both_protocols(label, preset, small.clone()) {
                    cell.loss = loss;
                    cell.outages = outages.clone();
                    cells.push(cell);
                }
            }
            cells
        }
        _ => return None,
    };
    Some(SuiteSpec { name: name.to_string(), cells, seeds: (0..5).collect() })
}

/// Resolves a built-in suite name or reads a TOML suite file.
pub fn load_suite(name_or_path: &str) -> Result<SuiteSpec, HarnessError> {
    if let Some(suite) = builtin_suite(name_or_path) {
        return Ok(suite);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        return Err(HarnessError::Config(format!(
            "no built-in suite or file named {name_or_path} (built-in: {})",
            BUILTIN_SUITES.join(", ")
        )));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Promotion rounds reported individually; later rounds share the last column.
pub const ROUND_COLUMNS: usize = 8;

/// Mean metrics of one cell across its seeds; one CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub preset: String,
    pub protocol: Protocol,
    #[serde(rename = "D")]
    pub datacenters: usize,
    pub attrs: usize,
    pub clients: usize,
    pub seeds: usize,
    pub issued: f64,
    pub commits: f64,
    pub commits_r0: f64,
    pub commits_r1: f64,
    pub commits_r2: f64,
    pub commits_r3: f64,
    pub commits_r4: f64,
    pub commits_r5: f64,
    pub commits_r6: f64,
    #[serde(rename = "commits_r7+")]
    pub commits_r7_plus: f64,
    pub aborts: f64,
    pub unavailable: f64,
    pub combinations: f64,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub violations: usize,
}

impl AggregateRow {
    pub fn rounds(&self) -> [f64; ROUND_COLUMNS] {
        [
            self.commits_r0,
            self.commits_r1,
            self.commits_r2,
            self.commits_r3,
            self.commits_r4,
            self.commits_r5,
            self.commits_r6,
            self.commits_r7_plus,
        ]
    }
}

fn aggregate(cell: &CellSpec, topology: &Topology, runs: &[&RunRecord]) -> AggregateRow {
    let n = runs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&RunMetrics) -> f64| runs.iter().map(|r| f(&r.metrics)).fold(0.0, |a, b| a + b) / n;
    let round = |lo: u32, hi: u32| {
        mean(&|m| m.commits_by_promotion_round.range(lo..=hi).map(|(_, c)| *c as f64).fold(0.0, |a, b| a + b))
    };
    AggregateRow {
        label: cell.label.clone(),
        preset: cell.preset.clone(),
        protocol: cell.workload.protocol,
        datacenters: topology.datacenters(),
        attrs: cell.workload.total_attributes,
        clients: cell.workload.clients,
        seeds: runs.len(),
        issued: mean(&|m| m.issued as f64),
        commits: mean(&|m| m.commits as f64),
        commits_r0: round(0, 0),
        commits_r1: round(1, 1),
        commits_r2: round(2, 2),
        commits_r3: round(3, 3),
        commits_r4: round(4, 4),
        commits_r5: round(5, 5),
        commits_r6: round(6, 6),
        commits_r7_plus: round(7, u32::MAX),
        aborts: mean(&|m| m.aborts as f64),
        unavailable: mean(&|m| m.unavailable as f64),
        combinations: mean(&|m| m.combinations as f64),
        mean_latency_ms: mean(&|m| m.mean_latency_ms),
        median_latency_ms: mean(&|m| m.median_latency_ms),
        p99_latency_ms: mean(&|m| m.p99_latency_ms),
        violations: runs.iter().filter(|r| !r.verdict.ok).count(),
    }
}

/// Outcome of one (cell, seed) run, as written to `runs/<label>-seed<seed>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub suite: String,
    pub label: String,
    pub seed: u64,
    pub metrics: RunMetrics,
    pub verdict: Verdict,
    pub parity: ParityReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub rows: Vec<AggregateRow>,
    pub runs: Vec<RunRecord>,
    pub csv_path: Option<PathBuf>,
}

impl SuiteReport {
    pub fn violations(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| !r.verdict.ok || !r.parity.ok())
    }

    pub fn exit_code(&self) -> i32 {
        if self.violations().next().is_some() {
            EXIT_VIOLATION
        } else {
            EXIT_OK
        }
    }
}

fn run_cell(suite: &str, cell: &CellSpec, seed: u64) -> Result<(RunRecord, Option<HistoryTrace>), HarnessError> {
    let topology = cell.topology()?;
    let output = match workload::run_experiment(&topology, &cell.workload, seed) {
        Ok(o) => o,
        Err(ExperimentError::Violation(o)) => *o,
        Err(ExperimentError::Config(e)) => return Err(HarnessError::Config(format!("cell {}: {e}", cell.label))),
        Err(e @ ExperimentError::Stalled(_)) => return Err(HarnessError::Config(format!("cell {}: {e}", cell.label))),
    };
    let parity = check_message_parity(&output.traffic, topology.datacenters());
    let bad = !output.verdict.ok || !parity.ok();
    let record = RunRecord {
        suite: suite.to_string(),
        label: cell.label.clone(),
        seed,
        metrics: output.metrics,
        verdict: output.verdict,
        parity,
    };
    Ok((record, bad.then_some(output.trace)))
}

/// Runs every (cell, seed) pair, in parallel, and writes artifacts under
/// `out_dir` when given: `runs/*.json`, `traces/*.jsonl` for failing runs,
/// and `<suite>.csv` with one aggregate row per cell.
pub fn run_suite(suite: &SuiteSpec, out_dir: Option<&Path>) -> Result<SuiteReport, HarnessError> {
    suite.validate()?;
    let jobs: Vec<(usize, u64)> =
        (0..suite.cells.len()).flat_map(|c| suite.seeds.iter().map(move |&s| (c, s))).collect();
    let results: Vec<_> =
        jobs.par_iter().map(|&(c, seed)| run_cell(&suite.name, &suite.cells[c], seed)).collect::<Result<_, _>>()?;

    let mut by_label: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for (record, _) in &results {
        by_label.entry(record.label.as_str()).or_default().push(record);
    }
    let mut rows = Vec::new();
    for cell in &suite.cells {
        let topology = cell.topology()?;
        rows.push(aggregate(cell, &topology, by_label.get(cell.label.as_str()).map_or(&[][..], |v| v)));
    }

    let mut csv_path = None;
    if let Some(dir) = out_dir {
        let runs_dir = dir.join("runs");
        fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;
        for (record, trace) in &results {
            let stem = format!("{}-seed{}", record.label, record.seed);
            let path = runs_dir.join(format!("{stem}.json"));
            let json = serde_json::to_vec_pretty(record).expect("record serializes");
            fs::write(&path, json).map_err(io_err(&path))?;
            if let Some(trace) = trace {
                let traces = dir.join("traces");
                fs::create_dir_all(&traces).map_err(io_err(&traces))?;
                let path = traces.join(format!("{stem}.jsonl"));
                let file = fs::File::create(&path).map_err(io_err(&path))?;
                trace.write_jsonl(std::io::BufWriter::new(file)).map_err(io_err(&path))?;
            }
        }
        let path = dir.join(format!("{}.csv", suite.name));
        write_csv(&path, &rows)?;
        csv_path = Some(path);
    }
    Ok(SuiteReport { name: suite.name.clone(), rows, runs: results.into_iter().map(|(r, _)| r).collect(), csv_path })
}

pub fn write_csv(path: &Path, rows: &[AggregateRow]) -> Result<(), HarnessError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e.into() })?;
    for row in rows {
        writer.serialize(row).map_err(|e| HarnessError::Io { path: path.to_path_buf(), source: e.into() })?;
    }
    writer.flush().map_err(io_err(path))
}

/// Result of checking a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub verdict: Verdict,
    /// Present when the brute-force oracle was requested.
    pub brute_force: Option<Result<Verdict, String>>,
}

impl VerifyReport {
    pub fn exit_code(&self) -> i32 {
        let oracle_failed = matches!(&self.brute_force, Some(Ok(v)) if !v.ok);
        if self.verdict.ok && !oracle_failed {
            EXIT_OK
        } else {
            EXIT_VIOLATION
        }
    }
}

/// Checks a JSON-lines trace; with `brute_force` also runs the exhaustive
/// oracle, whose refusal on large traces is reported but not fatal.
pub fn verify_trace(path: &Path, brute_force: bool) -> Result<VerifyReport, HarnessError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let trace = HistoryTrace::read_jsonl(BufReader::new(file))
        .map_err(|source| HarnessError::Trace { path: path.to_path_buf(), source })?;
    let verdict = checker::check(&trace);
    let brute_force = brute_force.then(|| checker::brute_force_oracle(&trace).map_err(|e: CheckerError| e.to_string()));
    Ok(VerifyReport { verdict, brute_force })
}

/// Per-instance message counts from a traffic log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParityReport {
    pub datacenters: usize,
    /// Largest number of messages of one kind sent for one (instance,
    /// proposer, ballot).
    pub max_per_round: usize,
    /// Ballot-carrying kinds other than the Paxos phase messages.
    pub unexpected_kinds: Vec<MessageKind>,
    pub breaches: Vec<String>,
}

impl ParityReport {
    pub fn ok(&self) -> bool {
        self.unexpected_kinds.is_empty() && self.breaches.is_empty()
    }
}

/// Checks that instance traffic uses only PREPARE/ACCEPT/APPLY and their
/// replies, and that no proposer sends more than one message of a kind per
/// datacenter in a single ballot round.
pub fn check_message_parity(traffic: &[TrafficRecord], datacenters: usize) -> ParityReport {
    type Key = (Option<GroupKey>, Option<u64>, Option<ProposerId>, Option<Ballot>, MessageKind);
    let mut counts: BTreeMap<Key, usize> = BTreeMap::new();
    let mut unexpected = std::collections::BTreeSet::new();
    for r in traffic.iter().filter(|r| r.meta.ballot.is_some()) {
        if !r.meta.kind.is_instance_message() {
            unexpected.insert(r.meta.kind);
        }
        let m = &r.meta;
        *counts.entry((m.group.clone(), m.position, m.proposer, m.ballot, m.kind)).or_default() += 1;
    }
    let breaches = counts
        .iter()
        .filter(|(_, &n)| n > datacenters)
        .map(|((_, position, proposer, ballot, kind), n)| {
            format!("{n} {kind} messages at position {position:?} by proposer {proposer:?} ballot {ballot:?}")
        })
        .collect();
    ParityReport {
        datacenters,
        max_per_round: counts.values().copied().max().unwrap_or(0),
        unexpected_kinds: unexpected.into_iter().collect(),
        breaches,
    }
}
