//! One-copy serializability checker over a [`HistoryTrace`].
//!
//! The constructive check builds the serial order a correct run implies
//! (log positions in order, list order inside an entry, each read-only
//! transaction right after the position it read at) and replays it against
//! a single-copy, single-version store. The brute-force oracle instead tries
//! every permutation of the committed transactions and is only usable on
//! small traces; the two are meant to agree.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use itertools::Itertools;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::trace::{HistoryTrace, TraceOp, TxnStatus, TxnTrace};
use crate::types::{GroupKey, RowKey, TxnId, Value};
use crate::wal::LogEntry;

/// Largest transaction count the brute-force oracle accepts.
pub const BRUTE_FORCE_BOUND: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Property {
    R1,
    L1,
    L2,
    L3,
    A1,
    A2,
    #[serde(rename = "1SR")]
    OneSr,
    /// Extra check beyond reads-from equivalence: replicated store contents
    /// equal the replayed state.
    #[serde(rename = "FINAL_STATE")]
    FinalState,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("property serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub property: Property,
    pub description: String,
    pub witness: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl Verdict {
    fn from_violations(violations: Vec<Violation>) -> Self {
        Self { ok: violations.is_empty(), violations }
    }

    fn merge(&mut self, other: Verdict) {
        self.violations.extend(other.violations);
        self.ok = self.violations.is_empty();
    }

    pub fn has(&self, property: Property) -> bool {
        self.violations.iter().any(|v| v.property == property)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckerError {
    #[error("committed transaction {0} appears in no log position")]
    MissingEntry(TxnId),
    #[error("{count} committed transactions exceed the brute-force bound of {bound}")]
    TooLarge { count: usize, bound: usize },
}

fn violation(property: Property, description: impl Into<String>, witness: serde_json::Value) -> Violation {
    Violation { property, description: description.into(), witness }
}

type Item = (RowKey, String);

/// Union of all datacenters' logs: the first datacenter's entry wins where
/// they disagree (disagreement itself is reported by [`check_replication`]).
pub fn merged_log(trace: &HistoryTrace) -> BTreeMap<GroupKey, BTreeMap<u64, LogEntry>> {
    let mut merged: BTreeMap<GroupKey, BTreeMap<u64, LogEntry>> = BTreeMap::new();
    let mut records: Vec<_> = trace.logs.iter().collect();
    records.sort_by_key(|r| (r.datacenter, r.position));
    for r in records {
        let group = r.entry.txns().first().map(|t| t.group.clone());
        let group = group.or_else(|| trace.txns.first().map(|t| t.group.clone())).unwrap_or_else(|| GroupKey::new(""));
        merged.entry(group).or_default().entry(r.position).or_insert_with(|| r.entry.clone());
    }
    merged
}

/// R1: every position decided at several datacenters holds the same entry.
pub fn check_replication(trace: &HistoryTrace) -> Verdict {
    let mut seen: BTreeMap<u64, Vec<(usize, &LogEntry)>> = BTreeMap::new();
    for r in &trace.logs {
        seen.entry(r.position).or_default().push((r.datacenter, &r.entry));
    }
    let mut violations = Vec::new();
    for (position, entries) in seen {
        let (first_dc, first) = entries[0];
        for &(dc, entry) in &entries[1..] {
            // Entries of different groups never share a dump position in the
            // workloads here, but compare within a group only to stay general.
            let same_group = entry.txns().first().map(|t| &t.group) == first.txns().first().map(|t| &t.group);
            if entry != first && (same_group || entry.txns().is_empty() || first.txns().is_empty()) {
                violations.push(violation(
                    Property::R1,
                    format!("datacenters {first_dc} and {dc} decided different entries at position {position}"),
                    json!({
                        "position": position,
                        "datacenters": [first_dc, dc],
                        "entries": [first.txn_ids(), entry.txn_ids()],
                        "kinds": [first.kind(), entry.kind()],
                    }),
                ));
            }
        }
    }
    Verdict::from_violations(violations)
}

fn is_read_only_commit(t: &TxnTrace) -> bool {
    t.status == TxnStatus::Committed && t.is_read_only() && t.read_position.is_some()
}

/// Positions of every transaction id found in the merged log.
fn log_positions(merged: &BTreeMap<GroupKey, BTreeMap<u64, LogEntry>>) -> BTreeMap<TxnId, Vec<(GroupKey, u64)>> {
    let mut out: BTreeMap<TxnId, Vec<(GroupKey, u64)>> = BTreeMap::new();
    for (group, log) in merged {
        for (position, entry) in log {
            for t in entry.txns() {
                out.entry(t.id).or_default().push((group.clone(), *position));
            }
        }
    }
    out
}

/// Serial order implied by the logs: entries by position, list order inside
/// an entry; each read-only transaction right after the position it read at
/// (ties by transaction id, read position 0 first).
pub fn build_serial_history(trace: &HistoryTrace) -> Result<Vec<TxnId>, CheckerError> {
    let merged = merged_log(trace);
    let positions = log_positions(&merged);
    for t in &trace.txns {
        if t.status == TxnStatus::Committed && !t.is_read_only() && !positions.contains_key(&t.id) {
            return Err(CheckerError::MissingEntry(t.id));
        }
    }
    let mut read_only: BTreeMap<GroupKey, BTreeMap<u64, Vec<TxnId>>> = BTreeMap::new();
    for t in trace.txns.iter().filter(|t| is_read_only_commit(t)) {
        let rp = t.read_position.expect("checked");
        read_only.entry(t.group.clone()).or_default().entry(rp).or_default().push(t.id);
    }
    for by_rp in read_only.values_mut() {
        for ids in by_rp.values_mut() {
            ids.sort();
        }
    }
    let groups: BTreeSet<GroupKey> = merged.keys().chain(read_only.keys()).cloned().collect();
    let mut order = Vec::new();
    let mut placed = BTreeSet::new();
    for group in groups {
        let empty_log = BTreeMap::new();
        let log = merged.get(&group).unwrap_or(&empty_log);
        let empty_ro = BTreeMap::new();
        let ro = read_only.get(&group).unwrap_or(&empty_ro);
        let emit_ro = |rp: u64, order: &mut Vec<TxnId>| {
            if let Some(ids) = ro.get(&rp) {
                order.extend(ids.iter().copied());
            }
        };
        emit_ro(0, &mut order);
        let max = log.keys().next_back().copied().unwrap_or(0);
        for position in 1..=max {
            if let Some(entry) = log.get(&position) {
                for t in entry.txns() {
                    // A transaction logged twice is an L2 breach reported
                    // elsewhere; the serial history keeps its first slot.
                    if placed.insert(t.id) {
                        order.push(t.id);
                    }
                }
            }
            emit_ro(position, &mut order);
        }
        for (_, ids) in ro.range(max + 1..) {
            order.extend(ids.iter().copied());
        }
    }
    Ok(order)
}

/// Per-item version history `(position, value)` produced by the merged log.
struct PositionalHistory {
    versions: BTreeMap<Item, Vec<(u64, Value)>>,
}

impl PositionalHistory {
    fn build(log: &BTreeMap<u64, LogEntry>) -> Self {
        let mut versions: BTreeMap<Item, Vec<(u64, Value)>> = BTreeMap::new();
        for (position, entry) in log {
            for t in entry.txns() {
                for w in &t.write_set {
                    for (attr, value) in &w.attributes {
                        versions.entry((w.row.clone(), attr.clone())).or_default().push((*position, value.clone()));
                    }
                }
            }
        }
        Self { versions }
    }

    fn at(&self, item: &Item, position: u64) -> Option<&Value> {
        let vs = self.versions.get(item)?;
        let idx = vs.partition_point(|(p, _)| *p <= position);
        idx.checked_sub(1).map(|i| &vs[i].1)
    }

    fn state_at(&self, position: u64) -> BTreeMap<Item, Value> {
        self.versions.keys().filter_map(|item| self.at(item, position).map(|v| (item.clone(), v.clone()))).collect()
    }
}

/// Outcome of replaying one transaction against a state.
#[derive(Default)]
struct ReplayIssues {
    own_write: Vec<serde_json::Value>,
    external: Vec<serde_json::Value>,
}

/// Replays `txn`'s operations at the current point of `state` and applies
/// its writes.
fn replay_txn(txn: &TxnTrace, state: &mut BTreeMap<Item, Value>) -> ReplayIssues {
    let mut issues = ReplayIssues::default();
    let mut pending: BTreeMap<Item, Value> = BTreeMap::new();
    for (index, op) in txn.ops.iter().enumerate() {
        match op {
            TraceOp::Read { row, attribute, value, own_write } => {
                let item = (row.clone(), attribute.clone());
                if *own_write {
                    if pending.get(&item) != value.as_ref() {
                        issues.own_write.push(json!({"op": index, "item": format!("{row}.{attribute}"),
                            "observed": value, "pending": pending.get(&item)}));
                    }
                } else {
                    if pending.contains_key(&item) {
                        issues.own_write.push(json!({"op": index, "item": format!("{row}.{attribute}"),
                            "observed": value, "pending": pending.get(&item), "note": "read bypassed own write"}));
                    }
                    if state.get(&item) != value.as_ref() {
                        issues.external.push(json!({"op": index, "item": format!("{row}.{attribute}"),
                            "observed": value, "serial": state.get(&item)}));
                    }
                }
            }
            TraceOp::Write { row, attribute, value } => {
                pending.insert((row.clone(), attribute.clone()), value.clone());
            }
        }
    }
    state.extend(pending);
    issues
}

/// Replays `order` on a fresh single-version store and compares every
/// recorded read: own-write reads against the transaction's pending writes
/// (A1), external reads against the replay (1SR) and against the log state
/// at the transaction's read position (A2). Also checks that every committed
/// transaction occurs exactly once, and reports the first log position whose
/// prefix stops being serializable (L3).
pub fn verify_serial(trace: &HistoryTrace, order: &[TxnId]) -> Verdict {
    let mut violations = Vec::new();
    let merged = merged_log(trace);
    let positions = log_positions(&merged);
    let by_id: BTreeMap<TxnId, &TxnTrace> = trace.txns.iter().map(|t| (t.id, t)).collect();

    let mut counts: BTreeMap<TxnId, usize> = BTreeMap::new();
    for id in order {
        *counts.entry(*id).or_default() += 1;
    }
    for t in &trace.txns {
        let expected = match t.status {
            TxnStatus::Committed => 1,
            TxnStatus::Aborted => 0,
            TxnStatus::Unavailable => usize::from(positions.contains_key(&t.id)),
        };
        let got = counts.get(&t.id).copied().unwrap_or(0);
        if got != expected {
            violations.push(violation(
                Property::OneSr,
                format!("transaction {} occurs {got} times in the serial history, expected {expected}", t.id),
                json!({"txn": t.id.to_string(), "status": t.status, "occurrences": got}),
            ));
        }
    }
    for id in counts.keys().filter(|id| !by_id.contains_key(id)) {
        violations.push(violation(
            Property::OneSr,
            format!("serial history names unknown transaction {id}"),
            json!({"txn": id.to_string()}),
        ));
    }

    let histories: BTreeMap<GroupKey, PositionalHistory> =
        merged.iter().map(|(g, log)| (g.clone(), PositionalHistory::build(log))).collect();
    let mut state: BTreeMap<Item, Value> = BTreeMap::new();
    let mut first_bad_position: Option<u64> = None;
    let mut seen = BTreeSet::new();
    for id in order {
        let Some(txn) = by_id.get(id) else { continue };
        if !seen.insert(*id) {
            continue;
        }
        let issues = replay_txn(txn, &mut state);
        for w in issues.own_write {
            violations.push(violation(Property::A1, format!("{id} did not read its own write"), w));
        }
        if !issues.external.is_empty() {
            if let Some(p) = positions.get(id).and_then(|v| v.first()).map(|x| x.1) {
                first_bad_position = Some(first_bad_position.map_or(p, |q| q.min(p)));
            }
            for w in issues.external {
                violations.push(violation(
                    Property::OneSr,
                    format!("{id} read a value the serial history does not produce"),
                    w,
                ));
            }
        }
    }
    if let Some(p) = first_bad_position {
        violations.push(violation(
            Property::L3,
            format!("log prefix through position {p} is not one-copy serializable"),
            json!({"position": p}),
        ));
    }

    // A2: external reads equal the log state at the read position.
    for t in &trace.txns {
        let (Some(rp), Some(history)) = (t.read_position, histories.get(&t.group)) else { continue };
        for (index, op) in t.ops.iter().enumerate() {
            if let TraceOp::Read { row, attribute, value, own_write: false } = op {
                let expected = history.at(&(row.clone(), attribute.clone()), rp);
                if expected != value.as_ref() {
                    violations.push(violation(
                        Property::A2,
                        format!("{} read {row}.{attribute} inconsistently with read position {rp}", t.id),
                        json!({"txn": t.id.to_string(), "op": index, "observed": value, "at_read_position": expected}),
                    ));
                }
            }
        }
    }
    Verdict::from_violations(violations)
}

/// L1/L2: committed transactions appear in exactly one position with their
/// own operations, aborted ones never, in-doubt ones at most once; no
/// position below the highest decided one is missing everywhere.
pub fn check_log_membership(trace: &HistoryTrace) -> Verdict {
    let mut violations = Vec::new();
    let merged = merged_log(trace);
    let positions = log_positions(&merged);
    let by_id: BTreeMap<TxnId, &TxnTrace> = trace.txns.iter().map(|t| (t.id, t)).collect();

    for (group, log) in &merged {
        let max = log.keys().next_back().copied().unwrap_or(0);
        for p in (1..=max).filter(|p| !log.contains_key(p)) {
            violations.push(violation(
                Property::L2,
                format!("position {p} of group {group} is undecided at every datacenter"),
                json!({"group": group, "position": p}),
            ));
        }
    }
    for (id, slots) in &positions {
        let Some(txn) = by_id.get(id) else {
            violations.push(violation(
                Property::L1,
                format!("log holds unknown transaction {id}"),
                json!({"txn": id.to_string(), "positions": slots.iter().map(|s| s.1).collect::<Vec<_>>()}),
            ));
            continue;
        };
        if txn.status == TxnStatus::Aborted {
            violations.push(violation(
                Property::L1,
                format!("aborted transaction {id} is in the log"),
                json!({"txn": id.to_string(), "positions": slots.iter().map(|s| s.1).collect::<Vec<_>>()}),
            ));
        }
        if slots.len() > 1 {
            violations.push(violation(
                Property::L2,
                format!("transaction {id} occupies {} log slots", slots.len()),
                json!({"txn": id.to_string(), "positions": slots.iter().map(|s| s.1).collect::<Vec<_>>()}),
            ));
        }
        if txn.status == TxnStatus::Committed {
            if let (Some(claimed), Some((_, actual))) = (txn.commit_position, slots.first()) {
                if claimed != *actual {
                    violations.push(violation(
                        Property::L2,
                        format!("{id} reported commit at {claimed} but the log has it at {actual}"),
                        json!({"txn": id.to_string(), "claimed": claimed, "actual": actual}),
                    ));
                }
            }
        }
        // The logged record must carry exactly the transaction's operations.
        let (group, position) = &slots[0];
        let record = merged[group][position].txns().iter().find(|t| t.id == *id).expect("indexed");
        let logged_writes: BTreeMap<Item, Value> = record
            .write_set
            .iter()
            .flat_map(|w| w.attributes.iter().map(move |(a, v)| ((w.row.clone(), a.clone()), v.clone())))
            .collect();
        let logged_reads: Vec<(Item, Option<Value>)> =
            record.read_set.iter().map(|r| ((r.row.clone(), r.attribute.clone()), r.observed.clone())).collect();
        let traced_reads: Vec<(Item, Option<Value>)> = txn
            .ops
            .iter()
            .filter_map(|op| match op {
                TraceOp::Read { row, attribute, value, own_write: false } => {
                    Some(((row.clone(), attribute.clone()), value.clone()))
                }
                _ => None,
            })
            .collect();
        if logged_writes != txn.final_writes() || logged_reads != traced_reads {
            violations.push(violation(
                Property::L1,
                format!("log record of {id} differs from the operations the client issued"),
                json!({"txn": id.to_string(), "position": position}),
            ));
        }
    }
    for t in &trace.txns {
        if t.status == TxnStatus::Committed && !t.is_read_only() && !positions.contains_key(&t.id) {
            violations.push(violation(
                Property::L2,
                format!("committed transaction {} appears in no log position", t.id),
                json!({"txn": t.id.to_string()}),
            ));
        }
    }
    Verdict::from_violations(violations)
}

/// Extra check: each datacenter's store equals the log replay through its
/// applied position.
pub fn check_final_state(trace: &HistoryTrace) -> Verdict {
    let merged = merged_log(trace);
    let mut violations = Vec::new();
    for snap in &trace.snapshots {
        let empty = BTreeMap::new();
        let history = PositionalHistory::build(merged.get(&snap.group).unwrap_or(&empty));
        let expected = history.state_at(snap.applied_through);
        let actual: BTreeMap<Item, Value> =
            snap.items.iter().map(|(row, attr, v)| ((row.clone(), attr.clone()), v.clone())).collect();
        if expected != actual {
            let differing: Vec<String> = expected
                .keys()
                .chain(actual.keys())
                .filter(|k| expected.get(*k) != actual.get(*k))
                .map(|(r, a)| format!("{r}.{a}"))
                .unique()
                .take(5)
                .collect();
            violations.push(violation(
                Property::FinalState,
                format!(
                    "store of datacenter {} differs from the log replay through {}",
                    snap.datacenter, snap.applied_through
                ),
                json!({"datacenter": snap.datacenter, "items": differing}),
            ));
        }
    }
    Verdict::from_violations(violations)
}

/// Every check: R1, L1-L3, A1-A2, 1SR and the final-state comparison.
pub fn check(trace: &HistoryTrace) -> Verdict {
    let mut verdict = check_replication(trace);
    verdict.merge(check_log_membership(trace));
    match build_serial_history(trace) {
        Ok(order) => verdict.merge(verify_serial(trace, &order)),
        Err(e) => verdict.merge(Verdict::from_violations(vec![violation(Property::L2, e.to_string(), json!(null))])),
    }
    verdict.merge(check_final_state(trace));
    verdict
}

/// Searches all orders of the committed transactions for one whose replay
/// reproduces every recorded read.
pub fn brute_force_oracle(trace: &HistoryTrace) -> Result<Verdict, CheckerError> {
    let positions = log_positions(&merged_log(trace));
    let txns: Vec<&TxnTrace> = trace
        .txns
        .iter()
        .filter(|t| match t.status {
            TxnStatus::Committed => true,
            TxnStatus::Unavailable => positions.contains_key(&t.id),
            TxnStatus::Aborted => false,
        })
        .collect();
    if txns.len() > BRUTE_FORCE_BOUND {
        return Err(CheckerError::TooLarge { count: txns.len(), bound: BRUTE_FORCE_BOUND });
    }
    let found = txns.iter().permutations(txns.len()).any(|perm| {
        let mut state = BTreeMap::new();
        perm.iter().all(|t| {
            let issues = replay_txn(t, &mut state);
            issues.own_write.is_empty() && issues.external.is_empty()
        })
    });
    Ok(if found {
        Verdict::from_violations(vec![])
    } else {
        Verdict::from_violations(vec![violation(
            Property::OneSr,
            "no serial order of the committed transactions reproduces the observed reads",
            json!({"txns": txns.iter().map(|t| t.id.to_string()).collect::<Vec<_>>()}),
        )])
    })
}
