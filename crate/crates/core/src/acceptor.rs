//! Transaction Service side of a Paxos instance per log position.
//!
//! The acceptor state `<nextBal, ballotNumber, value>` of each position is a
//! row of the datacenter's store, and every transition goes through
//! `check_and_write`, so acceptor atomicity is inherited from the store.

use serde::{Deserialize, Serialize};

use crate::mvstore::{CheckStatus, VersionedStore};
use crate::types::{AttrMap, Ballot, GroupKey, StoreKey, Value};
use crate::wal::{LogEntry, LogView, WalError};

const NEXT_BAL: &str = "nextBal";
const BALLOT_NUMBER: &str = "ballotNumber";
const VALUE: &str = "value";

/// Acceptor state for one log position. `None` stands for the initial `-1` / `⊥`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaxosCell {
    pub next_bal: Option<Ballot>,
    pub ballot_number: Option<Ballot>,
    pub value: Option<LogEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrepareReply {
    Ok { ballot: Ballot, last_vote_ballot: Option<Ballot>, last_vote_value: Option<LogEntry> },
    Fail { ballot: Ballot, current_promise: Option<Ballot> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcceptReply {
    Ok,
    Fail,
}

fn cell_key(group: &GroupKey, position: u64) -> StoreKey {
    StoreKey::Cell { group: group.clone(), position }
}

fn encode<T: Serialize>(v: &T) -> Value {
    Value::new(serde_json::to_vec(v).expect("acceptor state serializes"))
}

fn decode<T: for<'de> Deserialize<'de>>(v: &Value) -> T {
    serde_json::from_slice(v.as_bytes()).expect("acceptor cell holds valid state")
}

pub fn load_cell(store: &VersionedStore<StoreKey>, group: &GroupKey, position: u64) -> PaxosCell {
    let Some(row) = store.read(&cell_key(group, position), None) else {
        return PaxosCell::default();
    };
    PaxosCell {
        next_bal: row.attributes.get(NEXT_BAL).map(decode),
        ballot_number: row.attributes.get(BALLOT_NUMBER).map(decode),
        value: row.attributes.get(VALUE).map(decode),
    }
}

/// PREPARE: promise `ballot` if it exceeds every earlier promise and report the last vote.
pub fn on_prepare(
    store: &mut VersionedStore<StoreKey>,
    group: &GroupKey,
    position: u64,
    ballot: Ballot,
) -> PrepareReply {
    let key = cell_key(group, position);
    loop {
        let cell = load_cell(store, group, position);
        if Some(ballot) <= cell.next_bal {
            return PrepareReply::Fail { ballot, current_promise: cell.next_bal };
        }
        let expected = cell.next_bal.as_ref().map(encode);
        let update = AttrMap::from([(NEXT_BAL.to_string(), encode(&ballot))]);
        let status = store
            .check_and_write(&key, NEXT_BAL, expected.as_ref(), key.clone(), update)
            .expect("generated timestamps never conflict");
        if status == CheckStatus::Success {
            return PrepareReply::Ok { ballot, last_vote_ballot: cell.ballot_number, last_vote_value: cell.value };
        }
        // nextBal changed between the read and the conditional write: re-read.
    }
}

/// ACCEPT: vote for `value` iff `ballot` is the current promise. A zero
/// ballot is treated as implicitly promised while the cell is still fresh.
pub fn on_accept(
    store: &mut VersionedStore<StoreKey>,
    group: &GroupKey,
    position: u64,
    ballot: Ballot,
    value: &LogEntry,
) -> AcceptReply {
    let key = cell_key(group, position);
    let mut vote = AttrMap::from([(BALLOT_NUMBER.to_string(), encode(&ballot)), (VALUE.to_string(), encode(value))]);
    let current = load_cell(store, group, position).next_bal;
    let expected = if ballot.is_zero() && current.is_none() {
        vote.insert(NEXT_BAL.to_string(), encode(&ballot));
        None
    } else {
        Some(encode(&ballot))
    };
    let status = store
        .check_and_write(&key, NEXT_BAL, expected.as_ref(), key.clone(), vote)
        .expect("generated timestamps never conflict");
    match status {
        CheckStatus::Success => AcceptReply::Ok,
        CheckStatus::Failure => AcceptReply::Fail,
    }
}

/// APPLY: record the chosen value in the cell and hand it to the log.
///
/// The cell keeps `nextBal >= ballotNumber`: the promise is raised to the
/// applied ballot if it lags, and a vote already cast at a higher ballot is
/// left in place (by Paxos safety it carries the same value).
pub fn on_apply(
    store: &mut VersionedStore<StoreKey>,
    log: &mut LogView,
    position: u64,
    ballot: Ballot,
    value: LogEntry,
) -> Result<(), WalError> {
    let group = log.group().clone();
    let cell = load_cell(store, &group, position);
    let mut update = AttrMap::new();
    if cell.ballot_number.is_none_or(|b| b <= ballot) {
        update.insert(BALLOT_NUMBER.to_string(), encode(&ballot));
        update.insert(VALUE.to_string(), encode(&value));
    }
    if cell.next_bal < Some(ballot) {
        update.insert(NEXT_BAL.to_string(), encode(&ballot));
    }
    if !update.is_empty() {
        store.write(cell_key(&group, position), update, None)?;
    }
    log.apply_entry(store, position, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wal::tests::{group, txn};
    use proptest::prelude::*;

    fn entry(client: u32) -> LogEntry {
        LogEntry::single(txn(client, &[], &[("x", "v")]))
    }

    #[test]
    fn fresh_cell_promises_and_reports_no_vote() {
        let mut s = VersionedStore::new();
        let reply = on_prepare(&mut s, &group(), 1, Ballot::new(0, 1));
        assert_eq!(
            reply,
            PrepareReply::Ok { ballot: Ballot::new(0, 1), last_vote_ballot: None, last_vote_value: None }
        );
        assert_eq!(load_cell(&s, &group(), 1).next_bal, Some(Ballot::new(0, 1)));
    }

    #[test]
    fn lower_prepare_is_refused_with_current_promise() {
        let mut s = VersionedStore::new();
        on_prepare(&mut s, &group(), 1, Ballot::new(5, 2));
        let reply = on_prepare(&mut s, &group(), 1, Ballot::new(5, 1));
        assert_eq!(reply, PrepareReply::Fail { ballot: Ballot::new(5, 1), current_promise: Some(Ballot::new(5, 2)) });
        // Equal ballot is not "greater" either.
        assert!(matches!(on_prepare(&mut s, &group(), 1, Ballot::new(5, 2)), PrepareReply::Fail { .. }));
    }

    #[test]
    fn prepare_reports_previous_vote() {
        let mut s = VersionedStore::new();
        let b = Ballot::new(3, 1);
        on_prepare(&mut s, &group(), 2, b);
        assert_eq!(on_accept(&mut s, &group(), 2, b, &entry(7)), AcceptReply::Ok);
        let reply = on_prepare(&mut s, &group(), 2, Ballot::new(4, 2));
        assert_eq!(
            reply,
            PrepareReply::Ok { ballot: Ballot::new(4, 2), last_vote_ballot: Some(b), last_vote_value: Some(entry(7)) }
        );
    }

    #[test]
    fn accept_requires_matching_promise() {
        let mut s = VersionedStore::new();
        let b = Ballot::new(4, 2);
        on_prepare(&mut s, &group(), 1, b);
        assert_eq!(on_accept(&mut s, &group(), 1, Ballot::new(3, 9), &entry(1)), AcceptReply::Fail);
        assert_eq!(load_cell(&s, &group(), 1).value, None);
        assert_eq!(on_accept(&mut s, &group(), 1, b, &entry(1)), AcceptReply::Ok);
        let cell = load_cell(&s, &group(), 1);
        assert_eq!((cell.ballot_number, cell.value), (Some(b), Some(entry(1))));
    }

    #[test]
    fn zero_ballot_fast_path_on_fresh_cell_only() {
        let mut s = VersionedStore::new();
        assert_eq!(on_accept(&mut s, &group(), 1, Ballot::zero(3), &entry(3)), AcceptReply::Ok);
        let cell = load_cell(&s, &group(), 1);
        assert_eq!(cell.next_bal, Some(Ballot::zero(3)));
        assert_eq!(cell.ballot_number, Some(Ballot::zero(3)));
        // A second fast-path registrant cannot overwrite the vote.
        assert_eq!(on_accept(&mut s, &group(), 1, Ballot::zero(4), &entry(4)), AcceptReply::Fail);
        // Once a PREPARE raised the promise, the zero ballot is no longer admitted.
        on_prepare(&mut s, &group(), 2, Ballot::new(1, 1));
        assert_eq!(on_accept(&mut s, &group(), 2, Ballot::zero(3), &entry(3)), AcceptReply::Fail);
    }

    #[test]
    fn apply_is_idempotent_and_detects_conflicts() {
        let mut s = VersionedStore::new();
        let mut log = LogView::new(group());
        let b = Ballot::new(1, 1);
        on_apply(&mut s, &mut log, 1, b, entry(1)).unwrap();
        on_apply(&mut s, &mut log, 1, b, entry(1)).unwrap();
        assert_eq!(log.decided(1), Some(&entry(1)));
        assert_eq!(log.read_position(), 1);
        assert_eq!(
            on_apply(&mut s, &mut log, 1, Ballot::new(2, 2), entry(2)),
            Err(WalError::ConflictingDecision { position: 1 })
        );
    }

    #[test]
    fn apply_keeps_promise_above_vote() {
        let mut s = VersionedStore::new();
        let mut log = LogView::new(group());
        on_apply(&mut s, &mut log, 1, Ballot::new(6, 2), entry(2)).unwrap();
        let cell = load_cell(&s, &group(), 1);
        assert!(cell.next_bal >= cell.ballot_number);
    }

    #[derive(Debug, Clone)]
    enum Msg {
        Prepare(u64, u32),
        Accept(u64, u32),
    }

    proptest! {
        #[test]
        fn promises_and_votes_are_monotone(msgs in proptest::collection::vec(
            prop_oneof![
                (0u64..6, 0u32..3).prop_map(|(c, p)| Msg::Prepare(c, p)),
                (0u64..6, 0u32..3).prop_map(|(c, p)| Msg::Accept(c, p)),
            ], 0..40)) {
            let mut s = VersionedStore::new();
            let mut prev = load_cell(&s, &group(), 1);
            for m in msgs {
                match m {
                    Msg::Prepare(c, p) => { on_prepare(&mut s, &group(), 1, Ballot::new(c, p)); }
                    Msg::Accept(c, p) => { on_accept(&mut s, &group(), 1, Ballot::new(c, p), &entry(p)); }
                }
                let cell = load_cell(&s, &group(), 1);
                prop_assert!(cell.next_bal >= prev.next_bal);
                prop_assert!(cell.ballot_number >= prev.ballot_number);
                prop_assert!(cell.next_bal >= cell.ballot_number);
                if cell.ballot_number != prev.ballot_number {
                    // A vote is only ever cast at the current promise.
                    prop_assert_eq!(cell.ballot_number, cell.next_bal);
                }
                prev = cell;
            }
        }
    }
}
