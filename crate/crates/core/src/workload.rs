//! YCSB-style workload: scripted random read/write transactions on the
//! attributes of a single row, driven by paced concurrent clients, with the
//! resulting history checked before metrics are reported.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checker::{self, Property, Verdict, Violation};
use crate::proposer::{Mutations, ProposerConfig};
use crate::service::{Cluster, ClusterSim};
use crate::simnet::{as_millis, millis_f, Sim, Topology, TopologyError, TrafficRecord};
use crate::trace::{run_digest, HistoryTrace, TxnStatus};
use crate::txn::{ClientConfig, TransactionClient};
use crate::types::{AttrMap, GroupKey, Protocol, RowKey, TxnId, Value};
use crate::wal;

/// Mixed into the run seed so the workload draws are independent of the
/// network's.
const WORKLOAD_SEED_SALT: u64 = 0x5e_ed0f_7a11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub total_txns: usize,
    pub ops_per_txn: usize,
    pub read_fraction: f64,
    pub total_attributes: usize,
    pub clients: usize,
    /// Start offset between consecutive clients.
    pub stagger_ms: f64,
    /// Aggregate offered load across all clients.
    pub target_txn_per_sec: f64,
    /// Mean client-side think time before each operation.
    pub op_latency_ms: f64,
    pub think_time: ThinkTime,
    pub protocol: Protocol,
    pub promotion_cap: Option<u32>,
    /// Home datacenter of each client, assigned round-robin.
    pub client_dcs: Vec<usize>,
    pub fast_path: bool,
    pub retry_budget: u32,
    pub combine_search_limit: usize,
    pub mutations: Mutations,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            total_txns: 500,
            ops_per_txn: 10,
            read_fraction: 0.5,
            total_attributes: 100,
            clients: 4,
            stagger_ms: 250.0,
            target_txn_per_sec: 1.0,
            op_latency_ms: 38.0,
            think_time: ThinkTime::Gamma { shape: 2.0 },
            protocol: Protocol::Cp,
            promotion_cap: None,
            client_dcs: vec![0],
            fast_path: true,
            retry_budget: 50,
            combine_search_limit: 4,
            mutations: Mutations::default(),
        }
    }
}

/// How think times are drawn; every variant has mean `op_latency_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ThinkTime {
    Fixed,
    /// Independent per operation, uniform in `mean * (1 ± jitter)`.
    Uniform {
        jitter: f64,
    },
    /// One Gamma-distributed pace per transaction shared by its operations,
    /// so some transactions run much longer than others.
    Gamma {
        shape: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Topology(#[from] TopologyError),
    #[error("invalid workload: {0}")]
    Workload(String),
}

impl WorkloadConfig {
    pub fn validate(&self, topology: &Topology) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Workload(m.to_string()));
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return bad("read_fraction must lie in [0, 1]");
        }
        if self.total_txns == 0 || self.ops_per_txn == 0 || self.total_attributes == 0 || self.clients == 0 {
            return bad("counts must be positive");
        }
        if !(self.target_txn_per_sec > 0.0) {
            return bad("target_txn_per_sec must be positive");
        }
        if self.stagger_ms < 0.0 || self.op_latency_ms < 0.0 {
            return bad("delays must be non-negative");
        }
        match self.think_time {
            ThinkTime::Uniform { jitter } if !(0.0..=1.0).contains(&jitter) => {
                return bad("think_time jitter must lie in [0, 1]");
            }
            ThinkTime::Gamma { shape } if !(shape > 0.0) => return bad("think_time shape must be positive"),
            _ => {}
        }
        if self.retry_budget == 0 {
            return bad("retry_budget must be positive");
        }
        if self.client_dcs.is_empty() {
            return bad("client_dcs must name at least one datacenter");
        }
        if let Some(dc) = self.client_dcs.iter().find(|&&dc| dc >= topology.datacenters()) {
            return Err(ConfigError::Workload(format!("client datacenter {dc} is outside the topology")));
        }
        Ok(())
    }

    fn proposer(&self) -> ProposerConfig {
        ProposerConfig {
            protocol: self.protocol,
            retry_budget: self.retry_budget,
            fast_path: self.fast_path,
            combine_search_limit: self.combine_search_limit,
            mutations: self.mutations,
        }
    }

    /// Milliseconds between consecutive transaction starts of one client.
    pub fn client_interval_ms(&self) -> f64 {
        self.clients as f64 * 1000.0 / self.target_txn_per_sec
    }
}

/// The single transaction group every workload transaction uses.
pub fn workload_group() -> GroupKey {
    GroupKey::new("g0")
}

pub fn workload_row() -> RowKey {
    RowKey::new(workload_group(), "r")
}

pub fn attribute_name(index: usize) -> String {
    format!("a{index}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum ScriptOp {
    Read { attribute: String },
    Write { attribute: String, value: Value },
}

/// One scripted transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxnScript {
    pub id: TxnId,
    pub ops: Vec<ScriptOp>,
    /// Think time before each op.
    pub think_ms: Vec<f64>,
}

impl TxnScript {
    pub fn is_read_only(&self) -> bool {
        self.ops.iter().all(|op| matches!(op, ScriptOp::Read { .. }))
    }
}

/// Draws `ops_per_txn` operations, each a read with probability
/// `read_fraction` (otherwise a write) on a uniformly chosen attribute.
/// Written values are `"<txn>:<op index>"`, unique across a run.
pub fn generate_txn(config: &WorkloadConfig, id: TxnId, rng: &mut impl Rng) -> TxnScript {
    let mean = config.op_latency_ms;
    let pace = match config.think_time {
        ThinkTime::Gamma { shape } if mean > 0.0 => Gamma::new(shape, mean / shape).expect("validated").sample(rng),
        _ => mean,
    };
    let mut think_ms = Vec::with_capacity(config.ops_per_txn);
    let ops = (0..config.ops_per_txn)
        .map(|index| {
            think_ms.push(match config.think_time {
                ThinkTime::Fixed | ThinkTime::Gamma { .. } => pace,
                ThinkTime::Uniform { jitter } => mean * (1.0 - jitter + 2.0 * jitter * rng.gen::<f64>()),
            });
            let attribute = attribute_name(rng.gen_range(0..config.total_attributes));
            if rng.gen_bool(config.read_fraction) {
                ScriptOp::Read { attribute }
            } else {
                ScriptOp::Write { attribute, value: Value::from(format!("{id}:{index}")) }
            }
        })
        .collect();
    TxnScript { id, ops, think_ms }
}

/// Scripts for every client, split as evenly as possible.
pub fn generate_scripts(config: &WorkloadConfig, seed: u64) -> Vec<Vec<TxnScript>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ WORKLOAD_SEED_SALT);
    (0..config.clients)
        .map(|c| {
            let count = config.total_txns / config.clients + usize::from(c < config.total_txns % config.clients);
            (0..count).map(|k| generate_txn(config, TxnId::new(c as u32, k as u32), &mut rng)).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientMetrics {
    pub issued: usize,
    pub commits: usize,
    pub aborts: usize,
    pub unavailable: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub protocol: Protocol,
    pub datacenters: usize,
    pub attributes: usize,
    pub clients: usize,
    pub seed: u64,
    pub issued: usize,
    pub read_write_issued: usize,
    /// Committed transactions, read-only ones included.
    pub commits: usize,
    pub read_only_commits: usize,
    /// Read/write commits keyed by the number of promotions they needed.
    pub commits_by_promotion_round: BTreeMap<u32, usize>,
    pub aborts: usize,
    /// Read/write transactions whose outcome the client could not learn.
    pub unavailable: usize,
    pub read_only_unavailable: usize,
    /// Log entries holding more than one transaction.
    pub combinations: usize,
    /// Begin-to-commit latency of each committed read/write transaction.
    pub latencies_ms: Vec<f64>,
    pub mean_latency_ms: f64,
    pub median_latency_ms: f64,
    pub p99_latency_ms: f64,
    pub per_client: BTreeMap<u32, ClientMetrics>,
    /// Simulated time at which the last client finished.
    pub duration_ms: f64,
    /// Hash of the full trace and traffic log.
    pub digest: String,
}

impl RunMetrics {
    pub fn read_write_commits(&self) -> usize {
        self.commits_by_promotion_round.values().sum()
    }

    /// Read/write commits over read/write transactions issued.
    pub fn commit_rate(&self) -> f64 {
        if self.read_write_issued == 0 {
            return 0.0;
        }
        self.read_write_commits() as f64 / self.read_write_issued as f64
    }
}

/// Percentile by nearest rank over an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn summarize(
    config: &WorkloadConfig,
    topology: &Topology,
    seed: u64,
    scripts: &[Vec<TxnScript>],
    trace: &HistoryTrace,
    traffic: &[TrafficRecord],
    duration_ms: f64,
) -> RunMetrics {
    let read_only: BTreeMap<TxnId, bool> = scripts.iter().flatten().map(|s| (s.id, s.is_read_only())).collect();
    let mut m = RunMetrics {
        protocol: config.protocol,
        datacenters: topology.datacenters(),
        attributes: config.total_attributes,
        clients: config.clients,
        seed,
        issued: trace.txns.len(),
        duration_ms,
        ..RunMetrics::default()
    };
    for t in &trace.txns {
        let ro = read_only.get(&t.id).copied().unwrap_or_else(|| t.is_read_only());
        let client = m.per_client.entry(t.id.client).or_default();
        client.issued += 1;
        if !ro {
            m.read_write_issued += 1;
        }
        match (t.status, ro) {
            (TxnStatus::Committed, true) => {
                m.commits += 1;
                m.read_only_commits += 1;
                client.commits += 1;
            }
            (TxnStatus::Committed, false) => {
                m.commits += 1;
                client.commits += 1;
                *m.commits_by_promotion_round.entry(t.promotions).or_default() += 1;
                m.latencies_ms.push(as_millis(t.finished_at - t.started_at));
            }
            (TxnStatus::Aborted, _) => {
                m.aborts += 1;
                client.aborts += 1;
            }
            (TxnStatus::Unavailable, true) => {
                m.read_only_unavailable += 1;
                client.unavailable += 1;
            }
            (TxnStatus::Unavailable, false) => {
                m.unavailable += 1;
                client.unavailable += 1;
            }
        }
    }
    m.combinations =
        checker::merged_log(trace).values().flat_map(|log| log.values()).filter(|e| e.txns().len() > 1).count();
    let mut sorted = m.latencies_ms.clone();
    sorted.sort_by(f64::total_cmp);
    if !sorted.is_empty() {
        m.mean_latency_ms = sorted.iter().sum::<f64>() / sorted.len() as f64;
        m.median_latency_ms = percentile(&sorted, 50.0);
        m.p99_latency_ms = percentile(&sorted, 99.0);
    }
    m.digest = run_digest(trace, traffic);
    m
}

/// Everything a finished run leaves behind.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub trace: HistoryTrace,
    pub traffic: Vec<TrafficRecord>,
    pub cluster: Cluster,
    pub verdict: Verdict,
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checker found {} violation(s), first: {}", .0.verdict.violations.len(),
        .0.verdict.violations.first().map_or(String::new(), |v| format!("{} {}", v.property, v.description)))]
    Violation(Box<RunOutput>),
    #[error("simulation stalled with {0} task(s) still waiting")]
    Stalled(usize),
}

async fn run_client(
    sim: ClusterSim,
    config: Rc<WorkloadConfig>,
    index: usize,
    scripts: Vec<TxnScript>,
    done: Rc<Cell<u64>>,
) {
    let home_dc = config.client_dcs[index % config.client_dcs.len()];
    let mut client_config = ClientConfig::new(index as u32, home_dc, config.protocol);
    client_config.proposer = config.proposer();
    client_config.promotion_cap = config.promotion_cap;
    let mut client = TransactionClient::new(sim.clone(), client_config);
    let group = workload_group();
    let row = workload_row();
    let first = index as f64 * config.stagger_ms;
    let interval = config.client_interval_ms();
    for (k, script) in scripts.into_iter().enumerate() {
        let start = millis_f(first + k as f64 * interval);
        if start > sim.now() {
            sim.sleep(start - sim.now()).await;
        }
        let Ok(mut txn) = client.begin(&group).await else { continue };
        debug_assert_eq!(txn.id, script.id);
        let mut live = true;
        for (op, think) in script.ops.into_iter().zip(script.think_ms) {
            sim.sleep(millis_f(think)).await;
            match op {
                ScriptOp::Read { attribute } => {
                    if client.read(&mut txn, &row, &attribute).await.is_err() {
                        live = false;
                        break;
                    }
                }
                ScriptOp::Write { attribute, value } => {
                    let attrs = AttrMap::from([(attribute, value)]);
                    client.write(&mut txn, &row, attrs).expect("workload rows stay in the group");
                }
            }
        }
        if live {
            // Unavailable outcomes are recorded in the trace by the client.
            let _ = client.commit(&mut txn).await;
        }
    }
    done.set(done.get().max(sim.now()));
}

/// Catches every datacenter up through the highest position any transaction
/// may occupy, after all outages have ended.
async fn settle(sim: ClusterSim) {
    let group = workload_group();
    let calm = sim.topology().last_outage_end();
    if calm > sim.now() {
        sim.sleep(calm - sim.now()).await;
    }
    let up_to = sim.with_state(|c| {
        let reach = c
            .txns
            .iter()
            .filter(|t| !t.is_read_only())
            .filter_map(|t| t.read_position.map(|rp| rp + 1 + u64::from(t.promotions)))
            .max()
            .unwrap_or(0);
        reach.max(c.max_decided(&group))
    });
    for dc in 0..sim.datacenters() {
        // Message loss can exhaust a budget; a later attempt resumes.
        for _ in 0..20 {
            if wal::catch_up(&sim, dc, &group, up_to).await.is_ok() {
                break;
            }
        }
    }
}

/// Runs one experiment to completion, checks its history and reports
/// metrics. A checker violation is returned as an error carrying the run.
pub fn run_experiment(topology: &Topology, config: &WorkloadConfig, seed: u64) -> Result<RunOutput, ExperimentError> {
    let output = simulate(topology, config, seed)?;
    if output.verdict.ok {
        Ok(output)
    } else {
        Err(ExperimentError::Violation(Box::new(output)))
    }
}

/// Like [`run_experiment`] but returns the output whatever the verdict.
pub fn simulate(topology: &Topology, config: &WorkloadConfig, seed: u64) -> Result<RunOutput, ExperimentError> {
    topology.validate().map_err(ConfigError::from)?;
    config.validate(topology)?;
    let sim: ClusterSim = Sim::new(topology.clone(), seed, Cluster::new(topology.datacenters()));
    let scripts = generate_scripts(config, seed);
    let shared = Rc::new(config.clone());
    let done = Rc::new(Cell::new(0));
    for (index, client_scripts) in scripts.iter().cloned().enumerate() {
        sim.spawn(run_client(sim.clone(), shared.clone(), index, client_scripts, done.clone()));
    }
    sim.run(None);
    if sim.live_tasks() > 0 {
        return Err(ExperimentError::Stalled(sim.live_tasks()));
    }
    sim.spawn(settle(sim.clone()));
    sim.run(None);
    if sim.live_tasks() > 0 {
        return Err(ExperimentError::Stalled(sim.live_tasks()));
    }

    let cluster = sim.with_state(|c| c.clone());
    let trace = HistoryTrace { txns: cluster.txns.clone(), logs: cluster.log_dump(), snapshots: cluster.snapshots() };
    let traffic = sim.traffic();
    let mut verdict = checker::check(&trace);
    if !cluster.audit.conflicting_decisions.is_empty() {
        let extra = cluster.audit.conflicting_decisions.iter().map(|c| Violation {
            property: Property::R1,
            description: format!("datacenter {} was sent a second value for position {}", c.datacenter, c.position),
            witness: serde_json::to_value(c).expect("record serializes"),
        });
        verdict.violations.extend(extra);
        verdict.ok = false;
    }
    let metrics = summarize(config, topology, seed, &scripts, &trace, &traffic, as_millis(done.get()));
    Ok(RunOutput { metrics, trace, traffic, cluster, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_txn_shape() {
        let config = WorkloadConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reads = 0;
        for k in 0..400 {
            let s = generate_txn(&config, TxnId::new(0, k), &mut rng);
            assert_eq!(s.ops.len(), 10);
            reads += s.ops.iter().filter(|o| matches!(o, ScriptOp::Read { .. })).count();
        }
        let frac = reads as f64 / 4000.0;
        assert!((0.45..0.55).contains(&frac), "{frac}");
    }

    #[test]
    fn all_reads_gives_read_only_scripts() {
        let config = WorkloadConfig { read_fraction: 1.0, ..WorkloadConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(generate_txn(&config, TxnId::new(0, 0), &mut rng).is_read_only());
    }

    #[test]
    fn small_attribute_space_bounds_footprint() {
        let config = WorkloadConfig { total_attributes: 20, ..WorkloadConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in 0..50 {
            let s = generate_txn(&config, TxnId::new(0, k), &mut rng);
            let touched: std::collections::BTreeSet<_> = s
                .ops
                .iter()
                .map(|o| match o {
                    ScriptOp::Read { attribute } | ScriptOp::Write { attribute, .. } => attribute.clone(),
                })
                .collect();
            assert!(touched.len() <= 10);
        }
    }

    #[test]
    fn written_values_are_unique() {
        let config = WorkloadConfig { total_txns: 40, ..WorkloadConfig::default() };
        let scripts = generate_scripts(&config, 5);
        let mut values = std::collections::BTreeSet::new();
        for op in scripts.iter().flatten().flat_map(|s| &s.ops) {
            if let ScriptOp::Write { value, .. } = op {
                assert!(values.insert(value.clone()));
            }
        }
        assert_eq!(scripts.iter().map(Vec::len).sum::<usize>(), 40);
    }

    #[test]
    fn percentile_nearest_rank() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 50.0), 2.0);
        assert_eq!(percentile(&v, 99.0), 4.0);
        assert_eq!(percentile(&[], 50.0), 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let topology = Topology::preset("VVV").unwrap();
        let bad = WorkloadConfig { read_fraction: 1.5, ..WorkloadConfig::default() };
        assert!(matches!(run_experiment(&topology, &bad, 0), Err(ExperimentError::Config(_))));
        let bad = WorkloadConfig { client_dcs: vec![7], ..WorkloadConfig::default() };
        assert!(matches!(run_experiment(&topology, &bad, 0), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn lone_client_commits_everything() {
        let topology = Topology::preset("VVV").unwrap();
        let config = WorkloadConfig { total_txns: 20, clients: 1, ..WorkloadConfig::default() };
        let out = run_experiment(&topology, &config, 1).unwrap();
        let m = &out.metrics;
        assert_eq!(m.commits, 20);
        assert_eq!(m.commits_by_promotion_round.keys().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(m.combinations, 0);
    }
}
