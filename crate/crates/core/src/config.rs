//! Node configuration, loaded from TOML.
//!
//! ```toml
//! step_limit = 1000000
//! peers = ["B@127.0.0.1:7001"]
//!
//! [costs]
//! checkpoint = 1.716
//!
//! [memory]
//! capacity = 1073741824
//! high_watermark = 0.8
//!
//! [policy]
//! idle_timeout_default = 600
//! suspend_mode = "checkpoint"
//!
//! [migration]
//! chunk_size = 65536
//! timeout = 30
//!
//! [backup]
//! interval = 60
//! retain = 3
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::policy::{CostModel, MemoryModel, PolicyError, SuspendPolicy};
use crate::sim::DEFAULT_STEP_LIMIT;
use crate::types::{NodeId, SimTime};

pub const DEFAULT_CHUNK_SIZE: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeConfig {
    pub costs: CostModel,
    pub memory: MemoryModel,
    pub policy: PolicyConfig,
    pub migration: MigrationConfig,
    pub backup: BackupConfig,
    pub peers: Vec<PeerSpec>,
    /// Simulated steps one invocation may execute before it is failed.
    pub step_limit: u64,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            costs: CostModel::default(),
            memory: MemoryModel::default(),
            policy: PolicyConfig::default(),
            migration: MigrationConfig::default(),
            backup: BackupConfig::default(),
            peers: Vec::new(),
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub idle_timeout_default: SimTime,
    pub suspend_mode: SuspendPolicy,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { idle_timeout_default: SimTime::from_secs(600), suspend_mode: SuspendPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MigrationConfig {
    pub chunk_size: usize,
    /// Wall-clock seconds to wait for a peer before giving up.
    pub timeout: f64,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        MigrationConfig { chunk_size: DEFAULT_CHUNK_SIZE, timeout: 30.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackupConfig {
    /// Periodic backups are off unless set.
    pub interval: Option<SimTime>,
    /// Archives kept per instance when backups garbage-collect.
    pub retain: Option<usize>,
}

/// `node_id@host:port`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerSpec {
    pub node_id: NodeId,
    pub address: String,
}

impl FromStr for PeerSpec {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ConfigError::InvalidPeer(s.to_owned());
        let (id, addr) = s.split_once('@').ok_or_else(bad)?;
        let (host, port) = addr.rsplit_once(':').ok_or_else(bad)?;
        if id.is_empty() || host.is_empty() || port.parse::<u16>().is_err() {
            return Err(bad());
        }
        Ok(PeerSpec { node_id: NodeId::new(id), address: addr.to_owned() })
    }
}

impl fmt::Display for PeerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.node_id, self.address)
    }
}

impl Serialize for PeerSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PeerSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid peer {0:?}, expected node_id@host:port")]
    InvalidPeer(String),
    #[error("duplicate peer {0}")]
    DuplicatePeer(NodeId),
    #[error("chunk size must be positive")]
    ZeroChunkSize,
    #[error("backup interval must be positive")]
    ZeroBackupInterval,
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
}

impl NodeConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: NodeConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.costs.validate()?;
        self.memory.validate()?;
        if self.migration.chunk_size == 0 {
            return Err(ConfigError::ZeroChunkSize);
        }
        if self.backup.interval == Some(SimTime::ZERO) {
            return Err(ConfigError::ZeroBackupInterval);
        }
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.peers {
            if !seen.insert(&p.node_id) {
                return Err(ConfigError::DuplicatePeer(p.node_id.clone()));
            }
        }
        Ok(())
    }

    pub fn peer(&self, id: &NodeId) -> Option<&PeerSpec> {
        self.peers.iter().find(|p| &p.node_id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = NodeConfig::from_toml("").unwrap();
        assert_eq!(c, NodeConfig::default());
        assert_eq!(c.costs.start_cold, 1.463);
    }

    #[test]
    fn parses_all_sections() {
        let c = NodeConfig::from_toml(
            r#"
            peers = ["B@127.0.0.1:7001"]
            step_limit = 50
            [costs]
            pause = 1.0
            [memory]
            capacity = 100
            high_watermark = 0.5
            [policy]
            idle_timeout_default = 30
            suspend_mode = "adaptive"
            [migration]
            chunk_size = 1024
            [backup]
            interval = 10
            "#,
        )
        .unwrap();
        assert_eq!(c.peers[0].node_id, NodeId::new("B"));
        assert_eq!(c.costs.pause, 1.0);
        assert_eq!(c.costs.unpause, 0.850);
        assert_eq!(c.memory.capacity, 100);
        assert_eq!(c.policy.suspend_mode, SuspendPolicy::Adaptive);
        assert_eq!(c.backup.interval, Some(SimTime::from_secs(10)));
        assert_eq!(c.step_limit, 50);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(NodeConfig::from_toml("peers = [\"nohost\"]").is_err());
        assert!(NodeConfig::from_toml("peers = [\"B@h:1\", \"B@h:2\"]").is_err());
        assert!(NodeConfig::from_toml("[costs]\ncheckpoint = -1.0").is_err());
        assert!(NodeConfig::from_toml("[memory]\nhigh_watermark = 1.5").is_err());
        assert!(NodeConfig::from_toml("unknown_key = 1").is_err());
    }
}
