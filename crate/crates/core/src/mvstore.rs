//! In-memory multi-version key-value store, one instance per datacenter.
//!
//! Provides the three atomic row operations the transaction tier is built on:
//! timestamped `read`, timestamped `write`, and `check_and_write`. Every
//! version carries the full row: attributes not named by a write are carried
//! forward from the previous version, which gives the same observable
//! behaviour as per-cell versioning because writes only ever append in
//! timestamp order.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AttrMap, Value};

/// Version timestamp: the log position, plus the index of the transaction
/// inside a combined log entry (always 0 for single-transaction entries).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Timestamp {
    pub position: u64,
    pub sub_index: u32,
}

impl Timestamp {
    pub const fn new(position: u64, sub_index: u32) -> Self {
        Self { position, sub_index }
    }

    /// Upper bound covering every transaction of a log position.
    pub const fn end_of(position: u64) -> Self {
        Self { position, sub_index: u32::MAX }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.position, self.sub_index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowVersion {
    pub timestamp: Timestamp,
    pub attributes: AttrMap,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("version {existing} already exists; cannot write at {attempted}")]
    VersionOrder { existing: Timestamp, attempted: Timestamp },
}

/// Outcome of a conditional write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckStatus {
    Success,
    Failure,
}

/// Multi-version map from row key to its versions in ascending timestamp order.
#[derive(Debug, Clone)]
pub struct VersionedStore<K> {
    rows: BTreeMap<K, Vec<RowVersion>>,
}

impl<K> Default for VersionedStore<K> {
    fn default() -> Self {
        Self { rows: BTreeMap::new() }
    }
}

impl<K: Ord + Clone> VersionedStore<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the version with the greatest timestamp `<= at`, or the latest
    /// version when `at` is `None`.
    pub fn read(&self, key: &K, at: Option<Timestamp>) -> Option<&RowVersion> {
        let versions = self.rows.get(key)?;
        match at {
            None => versions.last(),
            Some(bound) => {
                let idx = versions.partition_point(|v| v.timestamp <= bound);
                idx.checked_sub(1).map(|i| &versions[i])
            }
        }
    }

    /// Creates a new version of `key`. An explicit timestamp must be strictly
    /// greater than every existing version; without one, a timestamp is
    /// generated just above the latest version.
    pub fn write(&mut self, key: K, attributes: AttrMap, at: Option<Timestamp>) -> Result<Timestamp, StoreError> {
        let versions = self.rows.entry(key).or_default();
        let latest = versions.last().map(|v| v.timestamp);
        let timestamp = match (at, latest) {
            (Some(ts), Some(existing)) if existing >= ts => {
                return Err(StoreError::VersionOrder { existing, attempted: ts });
            }
            (Some(ts), _) => ts,
            (None, Some(existing)) => Timestamp::new(existing.position, existing.sub_index + 1),
            (None, None) => Timestamp::new(0, 0),
        };
        let mut merged = versions.last().map(|v| v.attributes.clone()).unwrap_or_default();
        merged.extend(attributes);
        versions.push(RowVersion { timestamp, attributes: merged });
        Ok(timestamp)
    }

    /// Writes `attributes` to `key` iff the latest version of `test_key` has
    /// `test_attribute == expected`. `expected = None` is the "unset" sentinel
    /// and matches a missing row or a missing attribute.
    pub fn check_and_write(
        &mut self,
        test_key: &K,
        test_attribute: &str,
        expected: Option<&Value>,
        key: K,
        attributes: AttrMap,
    ) -> Result<CheckStatus, StoreError> {
        let current = self.read(test_key, None).and_then(|v| v.attributes.get(test_attribute));
        if current != expected {
            return Ok(CheckStatus::Failure);
        }
        self.write(key, attributes, None)?;
        Ok(CheckStatus::Success)
    }

    /// All versions of a key, oldest first.
    pub fn versions(&self, key: &K) -> &[RowVersion] {
        self.rows.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.rows.keys()
    }
}
