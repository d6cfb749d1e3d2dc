//! Transaction Service: the per-datacenter server that owns the store, the
//! log views and the acceptor cells, and answers client and proposer requests.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::acceptor::{self, AcceptReply, PrepareReply};
use crate::messages::{MessageKind, MessageMeta};
use crate::mvstore::{Timestamp, VersionedStore};
use crate::simnet::{Endpoint, Responder, Sim, SimTime};
use crate::trace::{InstanceRecord, StoreSnapshot, TxnTrace};
use crate::types::{Ballot, GroupKey, ProposerId, RowKey, StoreKey, Value};
use crate::wal::{self, LogDumpRecord, LogEntry, LogView};

pub type ClusterSim = Sim<Cluster>;

/// State of one datacenter's service tier.
#[derive(Debug, Clone)]
pub struct Datacenter {
    pub id: usize,
    pub store: VersionedStore<StoreKey>,
    logs: BTreeMap<GroupKey, LogView>,
    leader_registrations: BTreeMap<(GroupKey, u64), ProposerId>,
    /// Highest position known to be decided somewhere, learned from traffic.
    known_frontier: BTreeMap<GroupKey, u64>,
    catching_up: BTreeSet<GroupKey>,
    next_catch_up_id: u32,
}

impl Datacenter {
    pub fn new(id: usize) -> Self {
        Self {
            id,
            store: VersionedStore::new(),
            logs: BTreeMap::new(),
            leader_registrations: BTreeMap::new(),
            known_frontier: BTreeMap::new(),
            catching_up: BTreeSet::new(),
            next_catch_up_id: 0,
        }
    }

    pub fn log(&mut self, group: &GroupKey) -> &mut LogView {
        self.logs.entry(group.clone()).or_insert_with(|| LogView::new(group.clone()))
    }

    pub fn logs(&self) -> impl Iterator<Item = &LogView> {
        self.logs.values()
    }

    pub fn applied_through(&self, group: &GroupKey) -> u64 {
        self.logs.get(group).map_or(0, LogView::read_position)
    }

    /// Leader of the position after the applied prefix: the datacenter of the
    /// client whose transaction heads the last applied entry (datacenter 0 for
    /// an empty log or a NOOP).
    pub fn next_leader(&self, group: &GroupKey) -> usize {
        let Some(log) = self.logs.get(group) else { return 0 };
        log.decided(log.read_position()).and_then(|e| e.txns().first()).map_or(0, |t| t.origin_dc)
    }

    fn note_frontier(&mut self, group: &GroupKey, position: u64) {
        let f = self.known_frontier.entry(group.clone()).or_insert(0);
        *f = (*f).max(position);
    }

    pub fn snapshot(&self, group: &GroupKey) -> StoreSnapshot {
        let mut items = Vec::new();
        for key in self.store.keys() {
            if let StoreKey::Row(row) = key {
                if &row.group != group {
                    continue;
                }
                if let Some(version) = self.store.read(key, None) {
                    for (attr, value) in &version.attributes {
                        items.push((row.clone(), attr.clone(), value.clone()));
                    }
                }
            }
        }
        StoreSnapshot { datacenter: self.id, group: group.clone(), applied_through: self.applied_through(group), items }
    }
}

/// A second value applied at an already-decided position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub datacenter: usize,
    pub group: GroupKey,
    pub position: u64,
    pub kept: String,
    pub rejected: String,
}

/// A combination decided while some value already held a majority of votes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowViolation {
    pub group: GroupKey,
    pub position: u64,
    pub proposer: ProposerId,
    pub ballot: Ballot,
    pub votes: usize,
}

/// Global observations only a simulator can make.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub conflicting_decisions: Vec<ConflictRecord>,
    pub combine_window: Vec<WindowViolation>,
}

/// Application state of a simulation: every datacenter plus run records.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub datacenters: Vec<Datacenter>,
    pub txns: Vec<TxnTrace>,
    pub instances: Vec<InstanceRecord>,
    pub audit: Audit,
    /// Retry budget used by catch-up instances.
    pub catch_up_budget: u32,
}

impl Cluster {
    pub fn new(datacenters: usize) -> Self {
        Self {
            datacenters: (0..datacenters).map(Datacenter::new).collect(),
            txns: Vec::new(),
            instances: Vec::new(),
            audit: Audit::default(),
            catch_up_budget: 50,
        }
    }

    /// Applies a chosen value at one datacenter; a conflicting value is
    /// recorded in the audit instead of being applied.
    pub fn apply(&mut self, dc: usize, group: &GroupKey, position: u64, ballot: Ballot, value: LogEntry) {
        let datacenter = &mut self.datacenters[dc];
        datacenter.note_frontier(group, position);
        let log = datacenter.logs.entry(group.clone()).or_insert_with(|| LogView::new(group.clone()));
        let kept = log.decided(position).map(LogEntry::digest);
        if let Err(err) = acceptor::on_apply(&mut datacenter.store, log, position, ballot, value.clone()) {
            match err {
                wal::WalError::ConflictingDecision { .. } => self.audit.conflicting_decisions.push(ConflictRecord {
                    datacenter: dc,
                    group: group.clone(),
                    position,
                    kept: kept.unwrap_or_default(),
                    rejected: value.digest(),
                }),
                wal::WalError::Store(e) => panic!("log application out of timestamp order: {e}"),
            }
        }
    }

    /// Proposer id for a catch-up instance run by a datacenter's service.
    pub fn catch_up_proposer(&mut self, dc: usize) -> ProposerId {
        let datacenter = &mut self.datacenters[dc];
        datacenter.next_catch_up_id += 1;
        1_000_000 + dc as u32 * 100_000 + datacenter.next_catch_up_id
    }

    pub fn log_dump(&self) -> Vec<LogDumpRecord> {
        self.datacenters.iter().flat_map(|dc| dc.logs().flat_map(|log| log.dump(dc.id))).collect()
    }

    pub fn snapshots(&self) -> Vec<StoreSnapshot> {
        let groups: BTreeSet<GroupKey> =
            self.datacenters.iter().flat_map(|dc| dc.logs().map(|l| l.group().clone())).collect();
        self.datacenters.iter().flat_map(|dc| groups.iter().map(|g| dc.snapshot(g))).collect()
    }

    pub fn max_decided(&self, group: &GroupKey) -> u64 {
        self.datacenters.iter().filter_map(|dc| dc.logs.get(group).map(LogView::max_decided)).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadPositionReply {
    pub read_position: u64,
    pub leader: usize,
}

fn service(dc: usize) -> Endpoint {
    Endpoint::Service { dc }
}

/// Sends one request to one datacenter's service and waits for its reply.
async fn ask<R: 'static>(
    sim: &ClusterSim,
    from: Endpoint,
    dc: usize,
    meta: MessageMeta,
    handler: impl Fn(&ClusterSim, Endpoint, Responder<R>) + 'static,
) -> Option<R> {
    let replies = sim.request(from, &[service(dc)], move |_| meta.clone(), handler).await;
    replies.into_iter().next().map(|(_, r)| r)
}

/// Starts a background catch-up at `dc` if it is known to lag behind.
fn maybe_catch_up(sim: &ClusterSim, dc: usize, group: &GroupKey) {
    let target = sim.with_state(|c| {
        let d = &mut c.datacenters[dc];
        let frontier = d.known_frontier.get(group).copied().unwrap_or(0);
        if frontier > d.applied_through(group) && d.catching_up.insert(group.clone()) {
            Some(frontier)
        } else {
            None
        }
    });
    if let Some(up_to) = target {
        let sim2 = sim.clone();
        let group = group.clone();
        sim.spawn(async move {
            let _ = wal::catch_up(&sim2, dc, &group, up_to).await;
            sim2.with_state(|c| c.datacenters[dc].catching_up.remove(&group));
        });
    }
}

pub async fn read_position(sim: &ClusterSim, from: Endpoint, dc: usize, group: &GroupKey) -> Option<ReadPositionReply> {
    let g = group.clone();
    ask(sim, from, dc, MessageMeta::new(MessageKind::ReadPosition), move |sim, to, r| {
        let dc = to.dc();
        let reply = sim.with_state(|c| {
            let d = &c.datacenters[dc];
            ReadPositionReply { read_position: d.applied_through(&g), leader: d.next_leader(&g) }
        });
        maybe_catch_up(sim, dc, &g);
        r.reply(sim, MessageMeta::new(MessageKind::ReadPositionReply), reply);
    })
    .await
}

/// Reads one attribute as of the end of `read_position`, catching the
/// serving datacenter's log up first if needed.
pub async fn read(
    sim: &ClusterSim,
    from: Endpoint,
    dc: usize,
    row: &RowKey,
    attribute: &str,
    read_position: u64,
) -> Option<Option<Value>> {
    let row = row.clone();
    let attribute = attribute.to_string();
    ask(sim, from, dc, MessageMeta::new(MessageKind::Read), move |sim, to, r| {
        let dc = to.dc();
        let group = row.group.clone();
        let key = StoreKey::Row(row.clone());
        let attribute = attribute.clone();
        let lookup = move |c: &mut Cluster| {
            c.datacenters[dc]
                .store
                .read(&key, Some(Timestamp::end_of(read_position)))
                .and_then(|v| v.attributes.get(&attribute).cloned())
        };
        let ready = sim.with_state(|c| c.datacenters[dc].applied_through(&group) >= read_position);
        if ready {
            let value = sim.with_state(lookup);
            r.reply(sim, MessageMeta::new(MessageKind::ReadReply), value);
        } else {
            let sim2 = sim.clone();
            sim.spawn(async move {
                if wal::catch_up(&sim2, dc, &group, read_position).await.is_ok() {
                    let value = sim2.with_state(lookup);
                    r.reply(&sim2, MessageMeta::new(MessageKind::ReadReply), value);
                }
            });
        }
    })
    .await
}

/// Registers `proposer` with the leader of `position`; `Some(true)` iff it
/// was first. A repeated registration by the same proposer is refused too.
pub async fn register_leader(
    sim: &ClusterSim,
    from: Endpoint,
    leader: usize,
    group: &GroupKey,
    position: u64,
    proposer: ProposerId,
) -> Option<bool> {
    let g = group.clone();
    let mut meta = MessageMeta::new(MessageKind::RegisterLeader);
    meta.group = Some(group.clone());
    meta.position = Some(position);
    meta.proposer = Some(proposer);
    ask(sim, from, leader, meta, move |sim, to, r| {
        let first = sim.with_state(|c| {
            let regs = &mut c.datacenters[to.dc()].leader_registrations;
            match regs.entry((g.clone(), position)) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(proposer);
                    true
                }
                std::collections::btree_map::Entry::Occupied(_) => false,
            }
        });
        r.reply(sim, MessageMeta::new(MessageKind::RegisterLeaderReply), first);
    })
    .await
}

fn all_services(sim: &ClusterSim) -> Vec<Endpoint> {
    (0..sim.datacenters()).map(service).collect()
}

pub async fn prepare_round(
    sim: &ClusterSim,
    from: Endpoint,
    group: &GroupKey,
    position: u64,
    ballot: Ballot,
) -> Vec<(usize, PrepareReply)> {
    let meta = MessageMeta::instance(MessageKind::Prepare, group, position, ballot, ballot.proposer);
    let reply_meta = meta.clone();
    let g = group.clone();
    let replies = sim
        .request(
            from,
            &all_services(sim),
            move |_| meta.clone(),
            move |sim, to, r| {
                let reply = sim.with_state(|c| {
                    let d = &mut c.datacenters[to.dc()];
                    d.note_frontier(&g, position.saturating_sub(1));
                    acceptor::on_prepare(&mut d.store, &g, position, ballot)
                });
                let kind = match reply {
                    PrepareReply::Ok { .. } => MessageKind::PrepareOk,
                    PrepareReply::Fail { .. } => MessageKind::PrepareFail,
                };
                r.reply(sim, reply_meta.with_kind(kind), reply);
            },
        )
        .await;
    replies.into_iter().map(|(to, r)| (to.dc(), r)).collect()
}

pub async fn accept_round(
    sim: &ClusterSim,
    from: Endpoint,
    group: &GroupKey,
    position: u64,
    ballot: Ballot,
    value: &LogEntry,
) -> Vec<(usize, AcceptReply)> {
    let meta = MessageMeta::instance(MessageKind::Accept, group, position, ballot, ballot.proposer);
    let reply_meta = meta.clone();
    let g = group.clone();
    let value = value.clone();
    let replies = sim
        .request(
            from,
            &all_services(sim),
            move |_| meta.clone(),
            move |sim, to, r| {
                let reply = sim.with_state(|c| {
                    let d = &mut c.datacenters[to.dc()];
                    d.note_frontier(&g, position.saturating_sub(1));
                    acceptor::on_accept(&mut d.store, &g, position, ballot, &value)
                });
                let kind = match reply {
                    AcceptReply::Ok => MessageKind::AcceptOk,
                    AcceptReply::Fail => MessageKind::AcceptFail,
                };
                r.reply(sim, reply_meta.with_kind(kind), reply);
            },
        )
        .await;
    replies.into_iter().map(|(to, r)| (to.dc(), r)).collect()
}

/// Fire-and-forget APPLY of a chosen value to every datacenter.
pub fn apply_broadcast(
    sim: &ClusterSim,
    from: Endpoint,
    group: &GroupKey,
    position: u64,
    ballot: Ballot,
    value: &LogEntry,
) {
    let meta = MessageMeta::instance(MessageKind::Apply, group, position, ballot, ballot.proposer);
    for to in all_services(sim) {
        let g = group.clone();
        let value = value.clone();
        sim.send(from, to, meta.clone(), move |sim| {
            sim.with_state(|c| c.apply(to.dc(), &g, position, ballot, value));
        });
    }
}

/// Latest time any outage window ends, for callers that need a stable cluster.
pub fn outages_over_at(sim: &ClusterSim) -> SimTime {
    sim.topology().last_outage_end()
}
