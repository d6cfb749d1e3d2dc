//! Transaction Client: `begin`, `read`, `write`, `commit` over one
//! transaction group, with read-your-writes, a fixed read position, and
//! failover to remote Transaction Services.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposer::{self, InstanceResult, PromoteDecision, ProposerConfig, ProposerCtx};
use crate::service::{self, ClusterSim};
use crate::simnet::{Endpoint, SimTime};
use crate::trace::{TraceOp, TxnStatus, TxnTrace};
use crate::types::{AttrMap, GroupKey, Protocol, RowKey, TxnId, Value};
use crate::wal::{LogEntry, ReadItem, RowWrite, TxnRecord};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxnError {
    #[error("no datacenter could serve the request")]
    Unavailable,
    #[error("row {row} is outside transaction group {group}")]
    GroupMismatch { group: GroupKey, row: RowKey },
    #[error("transaction is no longer active")]
    NotActive,
    #[error("a transaction on group {0} is already active")]
    AlreadyActive(GroupKey),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub id: u32,
    pub home_dc: usize,
    pub proposer: ProposerConfig,
    /// Maximum promotions per transaction; `None` means unlimited.
    pub promotion_cap: Option<u32>,
    /// How many times `begin` and `read` walk the full datacenter ring.
    pub failover_passes: u32,
}

impl ClientConfig {
    pub fn new(id: u32, home_dc: usize, protocol: Protocol) -> Self {
        Self {
            id,
            home_dc,
            proposer: ProposerConfig { protocol, ..ProposerConfig::default() },
            promotion_cap: None,
            failover_passes: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxnState {
    Active,
    Committed,
    Aborted,
    Unavailable,
}

/// A transaction in progress.
#[derive(Debug, Clone)]
pub struct ActiveTxn {
    pub id: TxnId,
    pub group: GroupKey,
    pub read_position: u64,
    pub read_set: Vec<ReadItem>,
    pub write_set: BTreeMap<RowKey, AttrMap>,
    pub state: TxnState,
    leader: usize,
    ops: Vec<TraceOp>,
    started_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Commit,
    Abort,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitOutcome {
    pub decision: Decision,
    /// Log position holding the transaction; `None` for read-only commits and aborts.
    pub final_position: Option<u64>,
    pub promotions: u32,
    /// Whether the transaction shared its log entry with others.
    pub combined: bool,
}

pub struct TransactionClient {
    sim: ClusterSim,
    config: ClientConfig,
    proposer: ProposerCtx,
    next_seq: u32,
    active: BTreeSet<GroupKey>,
}

impl TransactionClient {
    pub fn new(sim: ClusterSim, config: ClientConfig) -> Self {
        let endpoint = Endpoint::Client { id: config.id, dc: config.home_dc };
        let proposer = ProposerCtx::new(endpoint, config.id);
        Self { sim, config, proposer, next_seq: 0, active: BTreeSet::new() }
    }

    pub fn endpoint(&self) -> Endpoint {
        Endpoint::Client { id: self.config.id, dc: self.config.home_dc }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    /// Datacenters in failover order: home first, then around the ring.
    fn ring(&self) -> Vec<usize> {
        let d = self.sim.datacenters();
        let passes = self.config.failover_passes.max(1) as usize;
        (0..d * passes).map(|i| (self.config.home_dc + i) % d).collect()
    }

    fn finish(&mut self, txn: &mut ActiveTxn, state: TxnState, outcome: Option<&CommitOutcome>) {
        txn.state = state;
        self.active.remove(&txn.group);
        let status = match state {
            TxnState::Committed => TxnStatus::Committed,
            TxnState::Aborted => TxnStatus::Aborted,
            TxnState::Unavailable | TxnState::Active => TxnStatus::Unavailable,
        };
        let trace = TxnTrace {
            id: txn.id,
            home_dc: self.config.home_dc,
            group: txn.group.clone(),
            read_position: Some(txn.read_position),
            ops: std::mem::take(&mut txn.ops),
            status,
            commit_position: outcome.and_then(|o| o.final_position),
            promotions: outcome.map_or(0, |o| o.promotions),
            combined: outcome.is_some_and(|o| o.combined),
            started_at: txn.started_at,
            finished_at: self.sim.now(),
        };
        self.sim.with_state(|c| c.txns.push(trace));
    }

    /// Starts a transaction at the latest applied position of the first
    /// datacenter that answers.
    pub async fn begin(&mut self, group: &GroupKey) -> Result<ActiveTxn, TxnError> {
        if self.active.contains(group) {
            return Err(TxnError::AlreadyActive(group.clone()));
        }
        let id = TxnId::new(self.config.id, self.next_seq);
        self.next_seq += 1;
        let started_at = self.sim.now();
        for dc in self.ring() {
            if let Some(reply) = service::read_position(&self.sim, self.endpoint(), dc, group).await {
                self.active.insert(group.clone());
                return Ok(ActiveTxn {
                    id,
                    group: group.clone(),
                    read_position: reply.read_position,
                    read_set: Vec::new(),
                    write_set: BTreeMap::new(),
                    state: TxnState::Active,
                    leader: reply.leader,
                    ops: Vec::new(),
                    started_at,
                });
            }
        }
        let trace = TxnTrace {
            id,
            home_dc: self.config.home_dc,
            group: group.clone(),
            read_position: None,
            ops: Vec::new(),
            status: TxnStatus::Unavailable,
            commit_position: None,
            promotions: 0,
            combined: false,
            started_at,
            finished_at: self.sim.now(),
        };
        self.sim.with_state(|c| c.txns.push(trace));
        Err(TxnError::Unavailable)
    }

    fn check_row(txn: &ActiveTxn, row: &RowKey) -> Result<(), TxnError> {
        if txn.state != TxnState::Active {
            return Err(TxnError::NotActive);
        }
        if row.group != txn.group {
            return Err(TxnError::GroupMismatch { group: txn.group.clone(), row: row.clone() });
        }
        Ok(())
    }

    /// Reads one attribute: the transaction's own pending write if there is
    /// one, otherwise the value as of the read position. If no datacenter
    /// can serve the read the transaction is abandoned.
    pub async fn read(
        &mut self,
        txn: &mut ActiveTxn,
        row: &RowKey,
        attribute: &str,
    ) -> Result<Option<Value>, TxnError> {
        Self::check_row(txn, row)?;
        if let Some(value) = txn.write_set.get(row).and_then(|attrs| attrs.get(attribute)) {
            let value = value.clone();
            txn.ops.push(TraceOp::Read {
                row: row.clone(),
                attribute: attribute.to_string(),
                value: Some(value.clone()),
                own_write: true,
            });
            return Ok(Some(value));
        }
        for dc in self.ring() {
            if let Some(value) = service::read(&self.sim, self.endpoint(), dc, row, attribute, txn.read_position).await
            {
                txn.read_set.push(ReadItem {
                    row: row.clone(),
                    attribute: attribute.to_string(),
                    observed: value.clone(),
                });
                txn.ops.push(TraceOp::Read {
                    row: row.clone(),
                    attribute: attribute.to_string(),
                    value: value.clone(),
                    own_write: false,
                });
                return Ok(value);
            }
        }
        self.finish(txn, TxnState::Unavailable, None);
        Err(TxnError::Unavailable)
    }

    /// Buffers a write locally.
    pub fn write(&mut self, txn: &mut ActiveTxn, row: &RowKey, attributes: AttrMap) -> Result<(), TxnError> {
        Self::check_row(txn, row)?;
        for (attribute, value) in &attributes {
            txn.ops.push(TraceOp::Write { row: row.clone(), attribute: attribute.clone(), value: value.clone() });
        }
        txn.write_set.entry(row.clone()).or_default().extend(attributes);
        Ok(())
    }

    /// Commits at the position after the read position. Read-only
    /// transactions commit without any messages.
    pub async fn commit(&mut self, txn: &mut ActiveTxn) -> Result<CommitOutcome, TxnError> {
        if txn.state != TxnState::Active {
            return Err(TxnError::NotActive);
        }
        if txn.write_set.is_empty() {
            let outcome =
                CommitOutcome { decision: Decision::Commit, final_position: None, promotions: 0, combined: false };
            self.finish(txn, TxnState::Committed, Some(&outcome));
            return Ok(outcome);
        }
        let record = TxnRecord {
            id: txn.id,
            group: txn.group.clone(),
            origin_dc: self.config.home_dc,
            read_position: txn.read_position,
            read_set: txn.read_set.clone(),
            write_set: txn
                .write_set
                .iter()
                .map(|(row, attributes)| RowWrite { row: row.clone(), attributes: attributes.clone() })
                .collect(),
        };
        let ctx = self.proposer.clone();
        let proposer = self.config.proposer.clone();
        let mut position = txn.read_position + 1;
        let mut leader = Some(txn.leader);
        let mut promotions = 0;
        loop {
            let own = LogEntry::single(record.clone());
            let result = proposer::run_instance(&self.sim, &ctx, &proposer, &txn.group, position, own, leader).await;
            let winners = match result {
                Err(_) => {
                    let outcome =
                        CommitOutcome { decision: Decision::Abort, final_position: None, promotions, combined: false };
                    self.finish(txn, TxnState::Unavailable, Some(&outcome));
                    return Err(TxnError::Unavailable);
                }
                Ok(InstanceResult::Chosen { value, own_won: true, .. }) => {
                    let outcome = CommitOutcome {
                        decision: Decision::Commit,
                        final_position: Some(position),
                        promotions,
                        combined: value.txns().len() > 1,
                    };
                    self.finish(txn, TxnState::Committed, Some(&outcome));
                    return Ok(outcome);
                }
                Ok(InstanceResult::Chosen { value, .. }) => value,
                Ok(InstanceResult::Promote { winners }) => winners,
            };
            let may_promote = proposer.protocol == Protocol::Cp
                && self.config.promotion_cap.is_none_or(|cap| promotions < cap)
                && proposer::try_promote(&record, &winners, !proposer.mutations.skip_promote_check)
                    == PromoteDecision::Proceed;
            if !may_promote {
                let outcome =
                    CommitOutcome { decision: Decision::Abort, final_position: None, promotions, combined: false };
                self.finish(txn, TxnState::Aborted, Some(&outcome));
                return Ok(outcome);
            }
            promotions += 1;
            position += 1;
            leader = None;
        }
    }
}
