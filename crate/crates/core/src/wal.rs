//! Per-(datacenter, group) write-ahead log: decided entries, their application
//! to the data rows of the local store, and catch-up of missing positions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::mvstore::{StoreError, Timestamp, VersionedStore};
use crate::proposer::{run_instance, InstanceResult, ProposerConfig, ProposerCtx, ProposerError};
use crate::service::ClusterSim;
use crate::simnet::Endpoint;
use crate::types::{AttrMap, GroupKey, RowKey, StoreKey, TxnId, Value};

/// One external read of a transaction: the item and the value it observed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadItem {
    pub row: RowKey,
    pub attribute: String,
    pub observed: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowWrite {
    pub row: RowKey,
    pub attributes: AttrMap,
}

/// A committed (or proposed) transaction as it is stored in the log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnRecord {
    pub id: TxnId,
    pub group: GroupKey,
    /// Datacenter of the issuing client; the leader of the following position.
    pub origin_dc: usize,
    pub read_position: u64,
    pub read_set: Vec<ReadItem>,
    pub write_set: Vec<RowWrite>,
}

impl TxnRecord {
    /// Every `(row, attribute)` this transaction writes.
    pub fn written_items(&self) -> BTreeSet<(&RowKey, &str)> {
        self.write_set.iter().flat_map(|w| w.attributes.keys().map(move |a| (&w.row, a.as_str()))).collect()
    }

    /// True if this transaction read an item written by `other`.
    pub fn reads_from(&self, other: &TxnRecord) -> bool {
        let written = other.written_items();
        self.read_set.iter().any(|r| written.contains(&(&r.row, r.attribute.as_str())))
    }
}

/// Value decided for one log position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "txns")]
pub enum LogEntry {
    #[serde(rename = "NOOP")]
    Noop,
    #[serde(rename = "TXNLIST")]
    TxnList(Vec<TxnRecord>),
}

impl LogEntry {
    pub fn single(txn: TxnRecord) -> Self {
        LogEntry::TxnList(vec![txn])
    }

    pub fn txns(&self) -> &[TxnRecord] {
        match self {
            LogEntry::Noop => &[],
            LogEntry::TxnList(txns) => txns,
        }
    }

    pub fn contains(&self, id: TxnId) -> bool {
        self.txns().iter().any(|t| t.id == id)
    }

    pub fn txn_ids(&self) -> Vec<TxnId> {
        self.txns().iter().map(|t| t.id).collect()
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LogEntry::Noop => "NOOP",
            LogEntry::TxnList(_) => "TXNLIST",
        }
    }

    /// No transaction in the list reads an item written by an earlier one.
    pub fn is_internally_serializable(&self) -> bool {
        let txns = self.txns();
        txns.iter().enumerate().all(|(i, t)| txns[..i].iter().all(|earlier| !t.reads_from(earlier)))
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("log entries always serialize");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WalError {
    #[error("position {position} already decided with a different entry")]
    ConflictingDecision { position: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One line of the log dump.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogDumpRecord {
    pub datacenter: usize,
    pub position: u64,
    pub kind: String,
    pub txn_ids: Vec<TxnId>,
    pub entry: LogEntry,
}

/// A datacenter's view of one group's log. Positions are 1-based; the
/// contiguous applied prefix ends at `applied_through` (0 for an empty log).
#[derive(Debug, Clone)]
pub struct LogView {
    group: GroupKey,
    decided: BTreeMap<u64, LogEntry>,
    applied_through: u64,
}

impl LogView {
    pub fn new(group: GroupKey) -> Self {
        Self { group, decided: BTreeMap::new(), applied_through: 0 }
    }

    pub fn group(&self) -> &GroupKey {
        &self.group
    }

    /// Records `entry` as decided at `position` and applies every entry of the
    /// now-contiguous prefix. Re-applying the same entry is a no-op.
    pub fn apply_entry(
        &mut self,
        store: &mut VersionedStore<StoreKey>,
        position: u64,
        entry: LogEntry,
    ) -> Result<(), WalError> {
        assert!(position >= 1, "log positions start at 1");
        match self.decided.get(&position) {
            Some(existing) if *existing == entry => return Ok(()),
            Some(_) => return Err(WalError::ConflictingDecision { position }),
            None => {}
        }
        self.decided.insert(position, entry);
        while let Some(next) = self.decided.get(&(self.applied_through + 1)) {
            let position = self.applied_through + 1;
            for (sub, txn) in next.txns().iter().enumerate() {
                let ts = Timestamp::new(position, sub as u32);
                for w in &txn.write_set {
                    store.write(StoreKey::Row(w.row.clone()), w.attributes.clone(), Some(ts))?;
                }
            }
            self.applied_through = position;
        }
        Ok(())
    }

    /// Last position of the contiguous applied prefix.
    pub fn read_position(&self) -> u64 {
        self.applied_through
    }

    pub fn decided(&self, position: u64) -> Option<&LogEntry> {
        self.decided.get(&position)
    }

    pub fn max_decided(&self) -> u64 {
        self.decided.keys().next_back().copied().unwrap_or(0)
    }

    /// Undecided positions in `1..=up_to`.
    pub fn missing_through(&self, up_to: u64) -> Vec<u64> {
        (self.applied_through + 1..=up_to).filter(|p| !self.decided.contains_key(p)).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &LogEntry)> {
        self.decided.iter().map(|(p, e)| (*p, e))
    }

    pub fn dump(&self, datacenter: usize) -> Vec<LogDumpRecord> {
        self.decided
            .iter()
            .map(|(position, entry)| LogDumpRecord {
                datacenter,
                position: *position,
                kind: entry.kind().to_string(),
                txn_ids: entry.txn_ids(),
                entry: entry.clone(),
            })
            .collect()
    }
}

/// Learns every undecided position `<= up_to` at datacenter `dc` by running a
/// full Paxos instance that proposes NOOP; an already chosen value is
/// discovered and adopted instead. Applies everything through `up_to`.
pub async fn catch_up(sim: &ClusterSim, dc: usize, group: &GroupKey, up_to: u64) -> Result<(), ProposerError> {
    loop {
        let next = sim.with_state(|c| c.datacenters[dc].log(group).missing_through(up_to).first().copied());
        let Some(position) = next else { return Ok(()) };
        let (id, budget) = sim.with_state(|c| (c.catch_up_proposer(dc), c.catch_up_budget));
        let ctx = ProposerCtx::new(Endpoint::Service { dc }, id);
        let config = ProposerConfig::catch_up(budget);
        match run_instance(sim, &ctx, &config, group, position, LogEntry::Noop, None).await? {
            InstanceResult::Chosen { value, ballot, .. } => {
                sim.with_state(|c| c.apply(dc, group, position, ballot, value));
            }
            InstanceResult::Promote { .. } => unreachable!("catch-up runs basic Paxos"),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn group() -> GroupKey {
        GroupKey::new("g")
    }

    pub(crate) fn row() -> RowKey {
        RowKey::new(group(), "r")
    }

    pub(crate) fn txn(client: u32, reads: &[&str], writes: &[(&str, &str)]) -> TxnRecord {
        TxnRecord {
            id: TxnId::new(client, 0),
            group: group(),
            origin_dc: 0,
            read_position: 0,
            read_set: reads.iter().map(|a| ReadItem { row: row(), attribute: a.to_string(), observed: None }).collect(),
            write_set: if writes.is_empty() {
                vec![]
            } else {
                vec![RowWrite {
                    row: row(),
                    attributes: writes.iter().map(|(a, v)| (a.to_string(), Value::from(*v))).collect(),
                }]
            },
        }
    }

    fn read_attr(store: &VersionedStore<StoreKey>, at: Timestamp, attr: &str) -> Option<Value> {
        store.read(&StoreKey::Row(row()), Some(at)).and_then(|v| v.attributes.get(attr).cloned())
    }

    #[test]
    fn noop_decides_without_writing() {
        let mut store = VersionedStore::new();
        let mut log = LogView::new(group());
        for p in 1..=2 {
            log.apply_entry(&mut store, p, LogEntry::single(txn(p as u32, &[], &[("x", "v")]))).unwrap();
        }
        log.apply_entry(&mut store, 3, LogEntry::Noop).unwrap();
        assert_eq!(log.read_position(), 3);
        assert_eq!(store.versions(&StoreKey::Row(row())).len(), 2);
    }

    #[test]
    fn combined_entry_applies_in_list_order() {
        let mut store = VersionedStore::new();
        let mut log = LogView::new(group());
        for p in 1..=4 {
            log.apply_entry(&mut store, p, LogEntry::Noop).unwrap();
        }
        let t1 = txn(1, &[], &[("x", "one")]);
        let t2 = txn(2, &[], &[("x", "two")]);
        log.apply_entry(&mut store, 5, LogEntry::TxnList(vec![t1.clone(), t2.clone()])).unwrap();

        // Oracle: serial replay of the list.
        let mut replay: BTreeMap<&str, Value> = BTreeMap::new();
        for t in [&t1, &t2] {
            for w in &t.write_set {
                for (a, v) in &w.attributes {
                    replay.insert(a.as_str(), v.clone());
                }
            }
        }
        assert_eq!(read_attr(&store, Timestamp::new(5, 1), "x"), replay.get("x").cloned());
        assert_eq!(read_attr(&store, Timestamp::new(5, 0), "x"), Some(Value::from("one")));
    }

    #[test]
    fn reapplying_same_entry_is_noop_and_conflict_is_detected() {
        let mut store = VersionedStore::new();
        let mut log = LogView::new(group());
        let e = LogEntry::single(txn(1, &[], &[("x", "a")]));
        log.apply_entry(&mut store, 1, e.clone()).unwrap();
        log.apply_entry(&mut store, 1, e).unwrap();
        assert_eq!(store.versions(&StoreKey::Row(row())).len(), 1);
        let other = LogEntry::single(txn(2, &[], &[("x", "b")]));
        assert_eq!(log.apply_entry(&mut store, 1, other), Err(WalError::ConflictingDecision { position: 1 }));
    }

    #[test]
    fn read_position_is_contiguous_prefix() {
        let mut store = VersionedStore::new();
        let mut log = LogView::new(group());
        assert_eq!(log.read_position(), 0);
        for p in [1, 2, 4] {
            log.apply_entry(&mut store, p, LogEntry::Noop).unwrap();
        }
        assert_eq!(log.read_position(), 2);
        assert_eq!(log.missing_through(5), vec![3, 5]);
        log.apply_entry(&mut store, 3, LogEntry::Noop).unwrap();
        assert_eq!(log.read_position(), 4);
    }

    #[test]
    fn out_of_order_decisions_apply_at_their_own_position() {
        let mut store = VersionedStore::new();
        let mut log = LogView::new(group());
        log.apply_entry(&mut store, 2, LogEntry::single(txn(2, &[], &[("x", "late")]))).unwrap();
        assert!(store.versions(&StoreKey::Row(row())).is_empty());
        log.apply_entry(&mut store, 1, LogEntry::single(txn(1, &[], &[("x", "early")]))).unwrap();
        assert_eq!(read_attr(&store, Timestamp::end_of(1), "x"), Some(Value::from("early")));
        assert_eq!(read_attr(&store, Timestamp::end_of(2), "x"), Some(Value::from("late")));
    }

    #[test]
    fn internal_serializability_predicate() {
        let w = txn(1, &[], &[("x", "1")]);
        let r = txn(2, &["x"], &[]);
        assert!(LogEntry::TxnList(vec![r.clone(), w.clone()]).is_internally_serializable());
        assert!(!LogEntry::TxnList(vec![w, r]).is_internally_serializable());
    }

    #[test]
    fn entry_json_shape() {
        let json = serde_json::to_value(LogEntry::Noop).unwrap();
        assert_eq!(json, serde_json::json!({"kind": "NOOP"}));
        let e = LogEntry::single(txn(1, &["y"], &[("x", "1")]));
        let json = serde_json::to_value(&e).unwrap();
        assert_eq!(json["kind"], "TXNLIST");
        assert_eq!(serde_json::from_value::<LogEntry>(json).unwrap(), e);
    }
}
