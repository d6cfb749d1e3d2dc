//! Datacenter layout: round-trip matrix, loss, timeout and outage schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{millis_f, SimTime};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("topology needs at least one datacenter")]
    Empty,
    #[error("rtt matrix must be square ({0} rows, row {1} has {2} entries)")]
    NotSquare(usize, usize, usize),
    #[error("rtt matrix must be symmetric with zero diagonal (at {0},{1})")]
    Asymmetric(usize, usize),
    #[error("rtt entries must be finite and non-negative (at {0},{1})")]
    NegativeRtt(usize, usize),
    #[error("loss probability {0} outside [0, 1)")]
    Loss(f64),
    #[error("jitter fraction {0} outside [0, 1)")]
    Jitter(f64),
    #[error("timeout {timeout_ms} ms does not exceed the largest one-way latency {max_one_way_ms} ms")]
    Timeout { timeout_ms: f64, max_one_way_ms: f64 },
    #[error("outage window for datacenter {0} is invalid (unknown datacenter or from >= to)")]
    Outage(usize),
    #[error("unknown topology preset `{0}`")]
    UnknownPreset(String),
}

/// Interval `[from_ms, to_ms)` during which a datacenter is offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutageWindow {
    pub datacenter: usize,
    pub from_ms: f64,
    pub to_ms: f64,
}

impl OutageWindow {
    pub fn contains(&self, at: SimTime) -> bool {
        millis_f(self.from_ms) <= at && at < millis_f(self.to_ms)
    }
}

fn default_jitter() -> f64 {
    0.1
}

fn default_timeout() -> f64 {
    2000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    /// Optional site letters, one per datacenter (V, O, C for presets).
    #[serde(default)]
    pub sites: Vec<String>,
    /// Round-trip times in milliseconds.
    pub rtt_ms: Vec<Vec<f64>>,
    /// One-way latency varies uniformly by up to this fraction either way.
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default)]
    pub loss: f64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: f64,
    #[serde(default)]
    pub outages: Vec<OutageWindow>,
}

/// Round trips between the sites of the experimental clusters.
fn site_rtt(a: char, b: char) -> f64 {
    match (a, b) {
        ('V', 'V') => 1.5,
        ('O', 'C') | ('C', 'O') => 20.0,
        ('V', _) | (_, 'V') => 90.0,
        // Two nodes in the same non-Virginia region do not occur in the presets;
        // treat them like the Virginia availability zones.
        _ => 1.5,
    }
}

/// Names accepted by [`Topology::preset`].
pub const PRESETS: &[&str] = &["VV", "VVV", "OV", "COV", "VOC", "replicas-2", "replicas-3", "replicas-4", "replicas-5"];

impl Topology {
    /// Builds a topology from site letters such as `"VOC"`.
    pub fn from_sites(sites: &str) -> Self {
        let letters: Vec<char> = sites.chars().map(|c| c.to_ascii_uppercase()).collect();
        let rtt_ms = letters
            .iter()
            .enumerate()
            .map(|(i, a)| {
                letters.iter().enumerate().map(|(j, b)| if i == j { 0.0 } else { site_rtt(*a, *b) }).collect()
            })
            .collect();
        Self {
            sites: letters.iter().map(|c| c.to_string()).collect(),
            rtt_ms,
            jitter: default_jitter(),
            loss: 0.0,
            timeout_ms: default_timeout(),
            outages: Vec::new(),
        }
    }

    /// Cluster presets. `replicas-N` grows the Virginia cluster with Oregon
    /// and California nodes, so every size keeps a Virginia majority.
    pub fn preset(name: &str) -> Result<Self, TopologyError> {
        let sites = match name {
            "replicas-2" => "VV",
            "replicas-3" => "VVV",
            "replicas-4" => "VVVO",
            "replicas-5" => "VVVOC",
            other if !other.is_empty() && other.chars().all(|c| matches!(c, 'V' | 'O' | 'C')) => other,
            other => return Err(TopologyError::UnknownPreset(other.to_string())),
        };
        Ok(Self::from_sites(sites))
    }

    pub fn datacenters(&self) -> usize {
        self.rtt_ms.len()
    }

    pub fn rtt(&self, a: usize, b: usize) -> SimTime {
        millis_f(self.rtt_ms[a][b])
    }

    /// Largest round trip in the matrix.
    pub fn rtt_max(&self) -> SimTime {
        let max = self.rtt_ms.iter().flatten().copied().fold(0.0, f64::max);
        millis_f(max)
    }

    pub fn timeout(&self) -> SimTime {
        millis_f(self.timeout_ms)
    }

    pub fn is_down(&self, datacenter: usize, at: SimTime) -> bool {
        self.outages.iter().any(|o| o.datacenter == datacenter && o.contains(at))
    }

    /// End of the last scheduled outage, or 0.
    pub fn last_outage_end(&self) -> SimTime {
        self.outages.iter().map(|o| millis_f(o.to_ms)).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let n = self.rtt_ms.len();
        if n == 0 {
            return Err(TopologyError::Empty);
        }
        for (i, row) in self.rtt_ms.iter().enumerate() {
            if row.len() != n {
                return Err(TopologyError::NotSquare(n, i, row.len()));
            }
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.rtt_ms[i][j];
                if !v.is_finite() || v < 0.0 {
                    return Err(TopologyError::NegativeRtt(i, j));
                }
                if v != self.rtt_ms[j][i] || (i == j && v != 0.0) {
                    return Err(TopologyError::Asymmetric(i, j));
                }
            }
        }
        if !(0.0..1.0).contains(&self.loss) {
            return Err(TopologyError::Loss(self.loss));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(TopologyError::Jitter(self.jitter));
        }
        let max_one_way_ms = self.rtt_ms.iter().flatten().copied().fold(0.0, f64::max) / 2.0 * (1.0 + self.jitter);
        if self.timeout_ms <= max_one_way_ms {
            return Err(TopologyError::Timeout { timeout_ms: self.timeout_ms, max_one_way_ms });
        }
        for o in &self.outages {
            if o.datacenter >= n || o.from_ms >= o.to_ms {
                return Err(TopologyError::Outage(o.datacenter));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_use_cluster_round_trips() {
        let t = Topology::preset("VOC").unwrap();
        assert_eq!(t.rtt_ms[0][1], 90.0);
        assert_eq!(t.rtt_ms[1][2], 20.0);
        assert_eq!(Topology::preset("VVV").unwrap().rtt_ms[0][2], 1.5);
        for name in PRESETS {
            Topology::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(Topology::preset("replicas-5").unwrap().datacenters(), 5);
        assert!(Topology::preset("XYZ").is_err());
    }

    #[test]
    fn validation_rejects_bad_matrices() {
        let mut t = Topology::preset("VV").unwrap();
        t.rtt_ms[0][1] = 5.0;
        assert!(matches!(t.validate(), Err(TopologyError::Asymmetric(..))));
        let mut t = Topology::preset("OV").unwrap();
        t.timeout_ms = 40.0;
        assert!(matches!(t.validate(), Err(TopologyError::Timeout { .. })));
        let mut t = Topology::preset("OV").unwrap();
        t.loss = 1.0;
        assert!(t.validate().is_err());
    }

    #[test]
    fn outage_windows_are_half_open() {
        let mut t = Topology::preset("VVV").unwrap();
        t.outages.push(OutageWindow { datacenter: 1, from_ms: 10.0, to_ms: 20.0 });
        assert!(!t.is_down(1, millis_f(9.999)));
        assert!(t.is_down(1, millis_f(10.0)));
        assert!(!t.is_down(1, millis_f(20.0)));
        assert!(!t.is_down(0, millis_f(15.0)));
    }
}
