//! Message labels recorded in the traffic log.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{Ballot, GroupKey, ProposerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    ReadPosition,
    ReadPositionReply,
    Read,
    ReadReply,
    RegisterLeader,
    RegisterLeaderReply,
    Prepare,
    PrepareOk,
    PrepareFail,
    Accept,
    AcceptOk,
    AcceptFail,
    Apply,
}

impl MessageKind {
    /// Message kinds that belong to a Paxos instance (requests and their replies).
    pub fn is_instance_message(self) -> bool {
        matches!(
            self,
            MessageKind::Prepare
                | MessageKind::PrepareOk
                | MessageKind::PrepareFail
                | MessageKind::Accept
                | MessageKind::AcceptOk
                | MessageKind::AcceptFail
                | MessageKind::Apply
        )
    }

    /// The kinds a proposer itself sends during an instance.
    pub fn is_instance_request(self) -> bool {
        matches!(self, MessageKind::Prepare | MessageKind::Accept | MessageKind::Apply)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("kind serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// What a message is about, for the traffic log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageMeta {
    pub kind: MessageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ballot: Option<Ballot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposer: Option<ProposerId>,
}

impl MessageMeta {
    pub fn new(kind: MessageKind) -> Self {
        Self { kind, group: None, position: None, ballot: None, proposer: None }
    }

    pub fn instance(kind: MessageKind, group: &GroupKey, position: u64, ballot: Ballot, proposer: ProposerId) -> Self {
        Self {
            kind,
            group: Some(group.clone()),
            position: Some(position),
            ballot: Some(ballot),
            proposer: Some(proposer),
        }
    }

    pub fn with_kind(&self, kind: MessageKind) -> Self {
        Self { kind, ..self.clone() }
    }
}
