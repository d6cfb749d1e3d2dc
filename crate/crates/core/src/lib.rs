//! Transactional multi-datacenter datastore on per-position Paxos.

pub mod acceptor;
pub mod checker;
pub mod harness;
pub mod messages;
pub mod mvstore;
pub mod proposer;
pub mod service;
pub mod simnet;
pub mod trace;
pub mod txn;
pub mod types;
pub mod wal;
pub mod workload;

pub use checker::{check, Property, Verdict, Violation};
pub use harness::{run_suite, verify_trace, SuiteSpec};
pub use mvstore::{Timestamp, VersionedStore};
pub use simnet::{Endpoint, Sim, SimTime, Topology};
pub use trace::{HistoryTrace, TxnStatus, TxnTrace};
pub use txn::{CommitOutcome, Decision, TransactionClient, TxnError};
pub use types::{AttrMap, Ballot, GroupKey, Protocol, RowKey, TxnId, Value};
pub use wal::{LogEntry, TxnRecord};
pub use workload::{run_experiment, simulate, RunMetrics, WorkloadConfig};
