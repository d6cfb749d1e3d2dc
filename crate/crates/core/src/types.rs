//! Identifiers and value types shared by every layer of the datastore.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Key of a transaction group: the unit of serializability and of the write-ahead log.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupKey(pub String);

impl GroupKey {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A data row inside a transaction group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub group: GroupKey,
    pub row: String,
}

impl RowKey {
    pub fn new(group: GroupKey, row: impl Into<String>) -> Self {
        Self { group, row: row.into() }
    }
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.group, self.row)
    }
}

/// Key space of a datacenter's store: application rows, plus one Paxos
/// acceptor cell per (group, log position).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StoreKey {
    Row(RowKey),
    Cell { group: GroupKey, position: u64 },
}

/// Opaque attribute value.
///
/// Serialized as a JSON string when the bytes are valid UTF-8 and as a byte
/// array otherwise.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Value(Vec<u8>);

impl Value {
    pub fn new(bytes: impl Into<Vec<u8>>) -> Self {
        Self(bytes.into())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Self(s.as_bytes().to_vec())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Self(s.into_bytes())
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) => write!(f, "{s:?}"),
            Err(_) => write!(f, "0x{}", hex::encode(&self.0)),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match std::str::from_utf8(&self.0) {
            Ok(s) => serializer.serialize_str(s),
            Err(_) => self.0.serialize(serializer),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Bytes(Vec<u8>),
        }
        Ok(match Repr::deserialize(deserializer)? {
            Repr::Text(s) => Value(s.into_bytes()),
            Repr::Bytes(b) => Value(b),
        })
    }
}

/// Flat attribute map of one row version.
pub type AttrMap = BTreeMap<String, Value>;

/// Globally unique transaction identifier: issuing client plus a per-client sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxnId {
    pub client: u32,
    pub seq: u32,
}

impl TxnId {
    pub fn new(client: u32, seq: u32) -> Self {
        Self { client, seq }
    }
}

impl fmt::Display for TxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}-t{}", self.client, self.seq)
    }
}

/// Identity of a proposer: a transaction client or a transaction service doing catch-up.
pub type ProposerId = u32;

/// Proposal number, totally ordered by `(counter, proposer)`.
///
/// Counter 0 is reserved for the leader fast path; ballots obtained through a
/// PREPARE round start at counter 1. "No ballot" (the `-1` of the acceptor's
/// initial state) is modelled as `Option::<Ballot>::None`, which orders below
/// every ballot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Ballot {
    pub counter: u64,
    pub proposer: ProposerId,
}

impl Ballot {
    pub const fn new(counter: u64, proposer: ProposerId) -> Self {
        Self { counter, proposer }
    }

    /// The implicitly promised ballot a fast-path leader registrant uses.
    pub const fn zero(proposer: ProposerId) -> Self {
        Self { counter: 0, proposer }
    }

    pub fn is_zero(&self) -> bool {
        self.counter == 0
    }
}

impl fmt::Display for Ballot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.counter, self.proposer)
    }
}

/// Which commit protocol a client runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// One transaction per log position; losers abort.
    #[default]
    Basic,
    /// Paxos with combination and promotion.
    Cp,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Basic => f.write_str("basic"),
            Protocol::Cp => f.write_str("cp"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "basic" | "paxos" => Ok(Protocol::Basic),
            "cp" | "paxos-cp" => Ok(Protocol::Cp),
            other => Err(format!("unknown protocol `{other}` (expected basic|cp)")),
        }
    }
}

/// Majority threshold `floor(D/2) + 1`.
pub fn majority(datacenters: usize) -> usize {
    datacenters / 2 + 1
}
