//! Transaction Client side of a Paxos instance: basic Paxos, the Paxos-CP
//! decision between combination, promotion and plain value adoption, and
//! the leader fast path.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acceptor::{self, AcceptReply, PrepareReply};
use crate::service::{self, ClusterSim, WindowViolation};
use crate::simnet::Endpoint;
use crate::trace::InstanceRecord;
use crate::types::{majority, Ballot, GroupKey, ProposerId, Protocol, TxnId};
use crate::wal::{LogEntry, TxnRecord};

/// Safety checks that can be switched off to confirm the checker notices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutations {
    /// Combine transactions without the read-after-write predicate.
    #[serde(default)]
    pub skip_combine_check: bool,
    /// Promote without comparing the read set to the winners' writes.
    #[serde(default)]
    pub skip_promote_check: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposerConfig {
    pub protocol: Protocol,
    /// Maximum PREPARE cycles per instance before giving up.
    pub retry_budget: u32,
    pub fast_path: bool,
    /// Candidate count up to which combination searches exhaustively.
    pub combine_search_limit: usize,
    pub mutations: Mutations,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Cp,
            retry_budget: 50,
            fast_path: true,
            combine_search_limit: 4,
            mutations: Mutations::default(),
        }
    }
}

impl ProposerConfig {
    /// Settings for a service learning a missing position.
    pub fn catch_up(retry_budget: u32) -> Self {
        Self { protocol: Protocol::Basic, retry_budget, fast_path: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoteStatus {
    Success,
    Failure,
}

/// One acceptor's answer to PREPARE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteResponse {
    pub datacenter: usize,
    pub status: VoteStatus,
    pub last_vote_ballot: Option<Ballot>,
    pub last_vote_value: Option<LogEntry>,
    /// Promise that caused a refusal.
    pub promise: Option<Ballot>,
}

impl VoteResponse {
    pub fn from_reply(datacenter: usize, reply: PrepareReply) -> Self {
        match reply {
            PrepareReply::Ok { last_vote_ballot, last_vote_value, .. } => {
                Self { datacenter, status: VoteStatus::Success, last_vote_ballot, last_vote_value, promise: None }
            }
            PrepareReply::Fail { current_promise, .. } => Self {
                datacenter,
                status: VoteStatus::Failure,
                last_vote_ballot: None,
                last_vote_value: None,
                promise: current_promise,
            },
        }
    }

    pub fn vote(&self) -> Option<(Ballot, &LogEntry)> {
        match (self.status, self.last_vote_ballot, &self.last_vote_value) {
            (VoteStatus::Success, Some(b), Some(v)) => Some((b, v)),
            _ => None,
        }
    }
}

/// Value of the highest-ballot vote among the successes, else `prop_val`.
pub fn find_winning_val(responses: &[VoteResponse], prop_val: &LogEntry) -> LogEntry {
    let mut best: Option<(Ballot, &LogEntry)> = None;
    for (ballot, value) in responses.iter().filter_map(VoteResponse::vote) {
        match best {
            Some((b, v)) if b == ballot => debug_assert_eq!(v, value, "two values voted at ballot {ballot}"),
            Some((b, _)) if b > ballot => {}
            _ => best = Some((ballot, value)),
        }
    }
    best.map_or_else(|| prop_val.clone(), |(_, v)| v.clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpDecision {
    Combine(LogEntry),
    Promote(LogEntry),
    Basic(LogEntry),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CombineOptions {
    pub search_limit: usize,
    pub check_conflicts: bool,
}

impl Default for CombineOptions {
    fn default() -> Self {
        Self { search_limit: 4, check_conflicts: true }
    }
}

/// Paxos-CP value selection over the successful PREPARE responses.
///
/// Votes are tallied per value regardless of ballot. If even the best value
/// could not reach a majority with every silent acceptor's help, no value
/// can have been chosen and the proposer combines. Promotion needs certainty
/// that another value was chosen, so it requires a majority of votes cast at
/// one ballot for one value that does not contain the proposer's transaction.
/// Otherwise the proposer falls back to [`find_winning_val`].
pub fn decide_cp(
    responses: &[VoteResponse],
    prop_val: &LogEntry,
    datacenters: usize,
    options: CombineOptions,
) -> CpDecision {
    let m = majority(datacenters);
    let answered = responses.iter().filter(|r| r.status == VoteStatus::Success).count();
    let mut per_value: Vec<(&LogEntry, usize)> = Vec::new();
    let mut per_ballot: BTreeMap<Ballot, (&LogEntry, usize)> = BTreeMap::new();
    for (ballot, value) in responses.iter().filter_map(VoteResponse::vote) {
        match per_value.iter_mut().find(|(v, _)| *v == value) {
            Some((_, n)) => *n += 1,
            None => per_value.push((value, 1)),
        }
        per_ballot.entry(ballot).or_insert((value, 0)).1 += 1;
    }
    let max_votes = per_value.iter().map(|(_, n)| *n).max().unwrap_or(0);
    if max_votes + datacenters.saturating_sub(answered) < m {
        return CpDecision::Combine(generate_combined_value(responses, prop_val, options));
    }
    let own: BTreeSet<TxnId> = prop_val.txn_ids().into_iter().collect();
    if let Some((value, _)) = per_ballot.values().find(|(_, n)| *n >= m) {
        if !value.txns().iter().any(|t| own.contains(&t.id)) {
            return CpDecision::Promote((*value).clone());
        }
    }
    CpDecision::Basic(find_winning_val(responses, prop_val))
}

fn can_append(list: &[&TxnRecord], candidate: &TxnRecord) -> bool {
    list.iter().all(|earlier| !candidate.reads_from(earlier))
}

/// Ordered list starting with the proposer's own transaction, extended with
/// voted transactions such that none reads an item written earlier in the
/// list. Exhaustive for up to `search_limit` candidates (longest list, then
/// lowest transaction ids), one greedy pass beyond that.
pub fn generate_combined_value(responses: &[VoteResponse], prop_val: &LogEntry, options: CombineOptions) -> LogEntry {
    let own = prop_val.txns();
    let own_ids: BTreeSet<TxnId> = own.iter().map(|t| t.id).collect();
    let mut candidates: BTreeMap<TxnId, &TxnRecord> = BTreeMap::new();
    for (_, value) in responses.iter().filter_map(VoteResponse::vote) {
        for t in value.txns() {
            if !own_ids.contains(&t.id) {
                candidates.entry(t.id).or_insert(t);
            }
        }
    }
    let candidates: Vec<&TxnRecord> = candidates.into_values().collect();
    let base: Vec<&TxnRecord> = own.iter().collect();
    let fits = |list: &[&TxnRecord], c: &TxnRecord| !options.check_conflicts || can_append(list, c);

    let chosen: Vec<&TxnRecord> = if candidates.len() <= options.search_limit {
        let mut best = base.clone();
        let mut current = base.clone();
        let mut used = vec![false; candidates.len()];
        search(&candidates, &mut used, &mut current, &mut best, &fits);
        best
    } else {
        let mut list = base.clone();
        for c in &candidates {
            if fits(&list, c) {
                list.push(c);
            }
        }
        list
    };
    LogEntry::TxnList(chosen.into_iter().cloned().collect())
}

/// Depth-first enumeration in lexicographic candidate order; keeps the first
/// strictly longest list found.
fn search<'a>(
    candidates: &[&'a TxnRecord],
    used: &mut [bool],
    current: &mut Vec<&'a TxnRecord>,
    best: &mut Vec<&'a TxnRecord>,
    fits: &dyn Fn(&[&TxnRecord], &TxnRecord) -> bool,
) {
    if current.len() > best.len() {
        *best = current.clone();
    }
    for i in 0..candidates.len() {
        if used[i] || !fits(current, candidates[i]) {
            continue;
        }
        used[i] = true;
        current.push(candidates[i]);
        search(candidates, used, current, best, fits);
        current.pop();
        used[i] = false;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromoteDecision {
    Proceed,
    Abort,
}

/// A losing transaction may move to the next position iff none of the
/// winners wrote anything it read.
pub fn try_promote(txn: &TxnRecord, winners: &LogEntry, check_conflicts: bool) -> PromoteDecision {
    if check_conflicts && winners.txns().iter().any(|w| txn.reads_from(w)) {
        PromoteDecision::Abort
    } else {
        PromoteDecision::Proceed
    }
}

/// Ballot above every counter seen in `responses` and `current`.
pub fn next_prop_number(responses: &[VoteResponse], current: Ballot) -> Ballot {
    let seen = responses
        .iter()
        .flat_map(|r| [r.promise, r.last_vote_ballot])
        .flatten()
        .map(|b| b.counter)
        .chain([current.counter])
        .max()
        .unwrap_or(0);
    Ballot::new(seen + 1, current.proposer)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceResult {
    Chosen {
        value: LogEntry,
        ballot: Ballot,
        own_won: bool,
    },
    /// Another value was chosen; the proposer stopped before ACCEPT.
    Promote {
        winners: LogEntry,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProposerError {
    #[error("no majority reachable for position {position} within the retry budget")]
    Unavailable { position: u64 },
}

/// Highest ballot counter a proposer has used at each log position, so a
/// later instance at the same position never reuses a ballot for another
/// value.
#[derive(Debug, Clone, Default)]
pub struct BallotMemory(Rc<RefCell<BTreeMap<(GroupKey, u64), u64>>>);

impl BallotMemory {
    pub fn used(&self, group: &GroupKey, position: u64) -> Option<u64> {
        self.0.borrow().get(&(group.clone(), position)).copied()
    }

    fn note(&self, group: &GroupKey, position: u64, counter: u64) {
        let mut map = self.0.borrow_mut();
        let c = map.entry((group.clone(), position)).or_insert(counter);
        *c = (*c).max(counter);
    }
}

/// Who is proposing.
#[derive(Debug, Clone)]
pub struct ProposerCtx {
    pub endpoint: Endpoint,
    pub id: ProposerId,
    pub ballots: BallotMemory,
}

impl ProposerCtx {
    pub fn new(endpoint: Endpoint, id: ProposerId) -> Self {
        Self { endpoint, id, ballots: BallotMemory::default() }
    }
}

fn own_won(own: &LogEntry, chosen: &LogEntry) -> bool {
    match own {
        LogEntry::Noop => *chosen == LogEntry::Noop,
        LogEntry::TxnList(txns) => txns.iter().all(|t| chosen.contains(t.id)),
    }
}

fn record(
    sim: &ClusterSim,
    ctx: &ProposerCtx,
    group: &GroupKey,
    position: u64,
    ballot: Option<Ballot>,
    phase: &str,
    action: &str,
    outcome: &str,
) {
    let at = sim.now();
    sim.with_state(|c| {
        c.instances.push(InstanceRecord {
            at,
            group: group.clone(),
            position,
            proposer: ctx.id,
            ballot,
            phase: phase.into(),
            action: action.into(),
            outcome: outcome.into(),
        })
    });
}

/// Votes cast below `ballot` for each value across every acceptor.
fn check_combine_window(sim: &ClusterSim, group: &GroupKey, position: u64, ballot: Ballot, proposer: ProposerId) {
    let d = sim.datacenters();
    sim.with_state(|c| {
        let mut tally: Vec<(LogEntry, usize)> = Vec::new();
        for dc in &c.datacenters {
            let cell = acceptor::load_cell(&dc.store, group, position);
            if let (Some(b), Some(v)) = (cell.ballot_number, cell.value) {
                if b < ballot {
                    match tally.iter_mut().find(|(x, _)| *x == v) {
                        Some((_, n)) => *n += 1,
                        None => tally.push((v, 1)),
                    }
                }
            }
        }
        let votes = tally.iter().map(|(_, n)| *n).max().unwrap_or(0);
        if votes >= majority(d) {
            c.audit.combine_window.push(WindowViolation { group: group.clone(), position, proposer, ballot, votes });
        }
    });
}

/// Drives one log position until a value is chosen (or, in CP mode, until
/// promotion is signalled). `leader` enables the fast path through that
/// datacenter.
pub async fn run_instance(
    sim: &ClusterSim,
    ctx: &ProposerCtx,
    config: &ProposerConfig,
    group: &GroupKey,
    position: u64,
    own: LogEntry,
    leader: Option<usize>,
) -> Result<InstanceResult, ProposerError> {
    let d = sim.datacenters();
    let m = majority(d);

    // The zero ballot is only safe for a proposer's first attempt here.
    let fresh = ctx.ballots.used(group, position).is_none();
    if let Some(leader) = leader.filter(|_| config.fast_path && fresh) {
        ctx.ballots.note(group, position, 0);
        let first = service::register_leader(sim, ctx.endpoint, leader, group, position, ctx.id).await;
        let outcome = match first {
            Some(true) => "first",
            Some(false) => "not_first",
            None => "unavailable",
        };
        record(sim, ctx, group, position, None, "register", "fast_path", outcome);
        if first == Some(true) {
            let ballot = Ballot::zero(ctx.id);
            let replies = service::accept_round(sim, ctx.endpoint, group, position, ballot, &own).await;
            let oks = replies.iter().filter(|(_, r)| *r == AcceptReply::Ok).count();
            if oks >= m {
                record(sim, ctx, group, position, Some(ballot), "accept", "fast_path", "chosen");
                service::apply_broadcast(sim, ctx.endpoint, group, position, ballot, &own);
                return Ok(InstanceResult::Chosen { value: own, ballot, own_won: true });
            }
            record(sim, ctx, group, position, Some(ballot), "accept", "fast_path", "no_quorum");
        }
    }

    let mut ballot = Ballot::new(ctx.ballots.used(group, position).map_or(1, |c| c + 1), ctx.id);
    let options = CombineOptions {
        search_limit: config.combine_search_limit,
        check_conflicts: !config.mutations.skip_combine_check,
    };
    for _ in 0..config.retry_budget {
        ctx.ballots.note(group, position, ballot.counter);
        let replies = service::prepare_round(sim, ctx.endpoint, group, position, ballot).await;
        let responses: Vec<VoteResponse> = replies.into_iter().map(|(dc, r)| VoteResponse::from_reply(dc, r)).collect();
        let promised = responses.iter().filter(|r| r.status == VoteStatus::Success).count();
        if promised >= m {
            let (value, action) = match config.protocol {
                Protocol::Basic => (find_winning_val(&responses, &own), "basic"),
                Protocol::Cp => match decide_cp(&responses, &own, d, options) {
                    CpDecision::Combine(v) => {
                        check_combine_window(sim, group, position, ballot, ctx.id);
                        (v, "combine")
                    }
                    CpDecision::Promote(winners) => {
                        record(sim, ctx, group, position, Some(ballot), "prepare", "promote", "quorum");
                        return Ok(InstanceResult::Promote { winners });
                    }
                    CpDecision::Basic(v) => (v, "basic"),
                },
            };
            record(sim, ctx, group, position, Some(ballot), "prepare", action, "quorum");
            let replies = service::accept_round(sim, ctx.endpoint, group, position, ballot, &value).await;
            let oks = replies.iter().filter(|(_, r)| *r == AcceptReply::Ok).count();
            if oks >= m {
                record(sim, ctx, group, position, Some(ballot), "accept", action, "chosen");
                service::apply_broadcast(sim, ctx.endpoint, group, position, ballot, &value);
                let own_won = own_won(&own, &value);
                return Ok(InstanceResult::Chosen { value, ballot, own_won });
            }
            record(sim, ctx, group, position, Some(ballot), "accept", action, "no_quorum");
        } else {
            record(sim, ctx, group, position, Some(ballot), "prepare", "basic", "no_quorum");
        }
        ballot = next_prop_number(&responses, ballot);
        let rtt_max = sim.rtt_max().max(1);
        let backoff = sim.with_rng(|rng| rand::Rng::gen_range(rng, rtt_max..=2 * rtt_max));
        sim.sleep(backoff).await;
    }
    record(sim, ctx, group, position, Some(ballot), "prepare", "give_up", "unavailable");
    Err(ProposerError::Unavailable { position })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{RowKey, Value};
    use crate::wal::{ReadItem, RowWrite};
    use itertools::Itertools;

    fn group() -> GroupKey {
        GroupKey::new("g")
    }

    fn rec(client: u32, reads: &[&str], writes: &[&str]) -> TxnRecord {
        let row = RowKey::new(group(), "r");
        TxnRecord {
            id: TxnId::new(client, 0),
            group: group(),
            origin_dc: 0,
            read_position: 0,
            read_set: reads
                .iter()
                .map(|a| ReadItem { row: row.clone(), attribute: a.to_string(), observed: None })
                .collect(),
            write_set: if writes.is_empty() {
                vec![]
            } else {
                vec![RowWrite {
                    row,
                    attributes: writes.iter().map(|a| (a.to_string(), Value::from(format!("{client}")))).collect(),
                }]
            },
        }
    }

    fn entry(client: u32) -> LogEntry {
        LogEntry::single(rec(client, &[], &["w"]))
    }

    fn ok(dc: usize, vote: Option<(u64, u32, LogEntry)>) -> VoteResponse {
        VoteResponse {
            datacenter: dc,
            status: VoteStatus::Success,
            last_vote_ballot: vote.as_ref().map(|(c, p, _)| Ballot::new(*c, *p)),
            last_vote_value: vote.map(|(_, _, v)| v),
            promise: None,
        }
    }

    fn fail(dc: usize, promise: Ballot) -> VoteResponse {
        VoteResponse {
            datacenter: dc,
            status: VoteStatus::Failure,
            last_vote_ballot: None,
            last_vote_value: None,
            promise: Some(promise),
        }
    }

    #[test]
    fn winning_value_defaults_to_own_proposal() {
        let own = entry(9);
        assert_eq!(find_winning_val(&[ok(0, None), ok(1, None)], &own), own);
    }

    #[test]
    fn winning_value_is_highest_ballot_vote() {
        let resp = [ok(0, Some((2, 1, entry(1)))), ok(1, Some((5, 2, entry(2)))), ok(2, None)];
        assert_eq!(find_winning_val(&resp, &entry(9)), entry(2));
        let same = [ok(0, Some((5, 2, entry(2)))), ok(1, Some((5, 2, entry(2))))];
        assert_eq!(find_winning_val(&same, &entry(9)), entry(2));
    }

    #[test]
    fn cp_combines_when_no_value_can_reach_a_majority() {
        let resp =
            [ok(0, Some((1, 1, entry(1)))), ok(1, Some((1, 2, entry(2)))), ok(2, None), ok(3, None), ok(4, None)];
        let own = entry(9);
        match decide_cp(&resp, &own, 5, CombineOptions::default()) {
            // Oracle: 1 vote + 0 silent < 3.
            CpDecision::Combine(v) => assert_eq!(v.txns()[0].id, TxnId::new(9, 0)),
            other => panic!("expected combine, got {other:?}"),
        }
    }

    #[test]
    fn cp_promotes_behind_a_majority_value() {
        let resp = [ok(0, Some((3, 1, entry(1)))), ok(1, Some((3, 1, entry(1)))), ok(2, None)];
        assert_eq!(decide_cp(&resp, &entry(9), 3, CombineOptions::default()), CpDecision::Promote(entry(1)));
    }

    #[test]
    fn cp_window_boundary_reverts_to_basic() {
        // 1 vote + 2 silent = 3 = majority of 5: the value might still win.
        let resp = [ok(0, Some((1, 1, entry(1)))), ok(1, None), ok(2, None)];
        assert_eq!(decide_cp(&resp, &entry(9), 5, CombineOptions::default()), CpDecision::Basic(entry(1)));
    }

    #[test]
    fn cp_does_not_promote_on_votes_split_across_ballots() {
        // Value A holds two votes, but at different ballots: it is not known to
        // be chosen, so the proposer must adopt the highest vote instead.
        let a = entry(1);
        let resp = [ok(0, Some((1, 1, a.clone()))), ok(1, Some((3, 1, a.clone()))), ok(2, Some((2, 2, entry(2))))];
        assert_eq!(decide_cp(&resp, &entry(9), 3, CombineOptions::default()), CpDecision::Basic(a));
    }

    #[test]
    fn cp_with_own_txn_in_majority_value_is_basic() {
        let resp = [ok(0, Some((3, 1, entry(9)))), ok(1, Some((3, 1, entry(9))))];
        assert_eq!(decide_cp(&resp, &entry(9), 3, CombineOptions::default()), CpDecision::Basic(entry(9)));
    }

    /// Oracle: enumerate every ordered subset of the candidates by brute force.
    fn oracle_longest(own: &TxnRecord, cands: &[TxnRecord]) -> usize {
        let mut best = 1;
        for k in 0..=cands.len() {
            for perm in cands.iter().permutations(k) {
                let mut list = vec![own];
                if perm.iter().all(|c| {
                    let ok = can_append(&list, c);
                    list.push(c);
                    ok
                }) {
                    best = best.max(k + 1);
                }
            }
        }
        best
    }

    #[test]
    fn combination_of_own_only() {
        let own = LogEntry::single(rec(9, &["x"], &["x"]));
        assert_eq!(generate_combined_value(&[ok(0, None)], &own, CombineOptions::default()), own);
    }

    #[test]
    fn combination_appends_disjoint_candidate() {
        let own = rec(9, &["x"], &["x"]);
        let t = rec(1, &[], &["y"]);
        let resp = [ok(0, Some((1, 1, LogEntry::single(t.clone()))))];
        let v = generate_combined_value(&resp, &LogEntry::single(own.clone()), CombineOptions::default());
        assert_eq!(v, LogEntry::TxnList(vec![own, t]));
        assert!(v.is_internally_serializable());
    }

    #[test]
    fn combination_rejects_candidate_reading_own_write() {
        let own = rec(9, &[], &["x"]);
        let t = rec(1, &["x"], &["y"]);
        let resp = [ok(0, Some((1, 1, LogEntry::single(t.clone()))))];
        let v = generate_combined_value(&resp, &LogEntry::single(own.clone()), CombineOptions::default());
        assert_eq!(v, LogEntry::single(own.clone()));
        // With the predicate disabled the conflicting candidate slips in.
        let mutated = CombineOptions { check_conflicts: false, ..CombineOptions::default() };
        assert_eq!(generate_combined_value(&resp, &LogEntry::single(own.clone()), mutated).txns().len(), 2);
    }

    #[test]
    fn exhaustive_search_matches_oracle_and_dedups() {
        let own = rec(9, &["a"], &["b"]);
        let cands =
            vec![rec(1, &["c"], &["d"]), rec(2, &["d"], &["e"]), rec(3, &["e"], &["c"]), rec(4, &["b"], &["f"])];
        let resp: Vec<VoteResponse> = cands
            .iter()
            .enumerate()
            .flat_map(|(i, c)| {
                // Each candidate is reported twice (by two acceptors).
                let v = LogEntry::single(c.clone());
                [ok(i, Some((1, i as u32, v.clone()))), ok(i + 10, Some((1, i as u32, v)))]
            })
            .collect();
        let v = generate_combined_value(&resp, &LogEntry::single(own.clone()), CombineOptions::default());
        assert!(v.is_internally_serializable());
        assert_eq!(v.txns()[0], own);
        assert_eq!(v.txns().len(), oracle_longest(&own, &cands));
        let ids: BTreeSet<TxnId> = v.txn_ids().into_iter().collect();
        assert_eq!(ids.len(), v.txns().len());
    }

    #[test]
    fn greedy_beyond_search_limit_stays_serializable() {
        let own = rec(9, &["a"], &["b"]);
        let cands: Vec<TxnRecord> =
            (0..8).map(|i| rec(i, &[&format!("r{i}")], &[&format!("r{}", (i + 1) % 8)])).collect();
        let resp: Vec<VoteResponse> =
            cands.iter().enumerate().map(|(i, c)| ok(i, Some((1, i as u32, LogEntry::single(c.clone()))))).collect();
        let v = generate_combined_value(&resp, &LogEntry::single(own), CombineOptions::default());
        assert!(v.is_internally_serializable());
        assert!(v.txns().len() > 1);
    }

    #[test]
    fn promotion_requires_disjoint_reads() {
        let t = rec(9, &["a"], &["z"]);
        assert_eq!(try_promote(&t, &LogEntry::single(rec(1, &[], &["b"])), true), PromoteDecision::Proceed);
        assert_eq!(try_promote(&t, &LogEntry::single(rec(1, &[], &["a"])), true), PromoteDecision::Abort);
        assert_eq!(try_promote(&t, &LogEntry::single(rec(1, &[], &["a"])), false), PromoteDecision::Proceed);
    }

    #[test]
    fn next_ballot_exceeds_everything_seen() {
        assert_eq!(next_prop_number(&[fail(0, Ballot::new(5, 3))], Ballot::new(2, 1)), Ballot::new(6, 1));
        assert_eq!(next_prop_number(&[], Ballot::new(2, 1)), Ballot::new(3, 1));
        let seen = [fail(0, Ballot::new(5, 3))];
        let a = next_prop_number(&seen, Ballot::new(1, 1));
        let b = next_prop_number(&seen, Ballot::new(1, 2));
        assert_ne!(a, b);
        assert_eq!((a.counter, b.counter), (6, 6));
    }
}
