//! Records a run leaves behind: per-transaction histories, per-datacenter log
//! dumps and store snapshots, and per-instance proposer steps.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::simnet::{SimTime, TrafficRecord};
use crate::types::{Ballot, GroupKey, ProposerId, RowKey, TxnId, Value};
use crate::wal::LogDumpRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TraceOp {
    Read { row: RowKey, attribute: String, value: Option<Value>, own_write: bool },
    Write { row: RowKey, attribute: String, value: Value },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxnStatus {
    Committed,
    Aborted,
    /// The client gave up without learning the outcome; the transaction may
    /// still have been decided by someone else.
    Unavailable,
}

/// Client-side history of one transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnTrace {
    pub id: TxnId,
    pub home_dc: usize,
    pub group: GroupKey,
    /// `None` when `begin` itself failed.
    pub read_position: Option<u64>,
    pub ops: Vec<TraceOp>,
    pub status: TxnStatus,
    pub commit_position: Option<u64>,
    pub promotions: u32,
    pub combined: bool,
    pub started_at: SimTime,
    pub finished_at: SimTime,
}

impl TxnTrace {
    pub fn is_read_only(&self) -> bool {
        self.ops.iter().all(|op| matches!(op, TraceOp::Read { .. }))
    }

    /// Final value written to each item, in first-write order of the items.
    pub fn final_writes(&self) -> BTreeMap<(RowKey, String), Value> {
        let mut out = BTreeMap::new();
        for op in &self.ops {
            if let TraceOp::Write { row, attribute, value } = op {
                out.insert((row.clone(), attribute.clone()), value.clone());
            }
        }
        out
    }
}

/// Latest applied value of every item at one datacenter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub datacenter: usize,
    pub group: GroupKey,
    pub applied_through: u64,
    pub items: Vec<(RowKey, String, Value)>,
}

/// Everything the checker consumes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryTrace {
    pub txns: Vec<TxnTrace>,
    pub logs: Vec<LogDumpRecord>,
    pub snapshots: Vec<StoreSnapshot>,
}

/// One line of the JSON-lines trace file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceLine {
    Txn(TxnTrace),
    Log(LogDumpRecord),
    State(StoreSnapshot),
}

impl HistoryTrace {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        let lines = self
            .txns
            .iter()
            .cloned()
            .map(TraceLine::Txn)
            .chain(self.logs.iter().cloned().map(TraceLine::Log))
            .chain(self.snapshots.iter().cloned().map(TraceLine::State));
        for line in lines {
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, TraceParseError> {
        let mut trace = HistoryTrace::default();
        for (n, line) in input.lines().enumerate() {
            let line = line.map_err(|e| TraceParseError { line: n + 1, message: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TraceLine =
                serde_json::from_str(&line).map_err(|e| TraceParseError { line: n + 1, message: e.to_string() })?;
            match record {
                TraceLine::Txn(t) => trace.txns.push(t),
                TraceLine::Log(l) => trace.logs.push(l),
                TraceLine::State(s) => trace.snapshots.push(s),
            }
        }
        Ok(trace)
    }

    pub fn txn(&self, id: TxnId) -> Option<&TxnTrace> {
        self.txns.iter().find(|t| t.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace line {line}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub message: String,
}

/// One step of a proposer in one Paxos instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub at: SimTime,
    pub group: GroupKey,
    pub position: u64,
    pub proposer: ProposerId,
    pub ballot: Option<Ballot>,
    pub phase: String,
    pub action: String,
    pub outcome: String,
}

/// Hex SHA-256 over the serialized history and traffic of a run.
pub fn run_digest(trace: &HistoryTrace, traffic: &[TrafficRecord]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(trace).expect("trace serializes"));
    hasher.update(serde_json::to_vec(traffic).expect("traffic serializes"));
    hex::encode(hasher.finalize())
}
