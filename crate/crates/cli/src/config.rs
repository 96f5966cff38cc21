//! Node configuration file.

use std::collections::BTreeSet;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("{0}")]
    Invalid(String),
}

fn default_api() -> String {
    "127.0.0.1:8008".into()
}
fn default_internal() -> String {
    "127.0.0.1:4004".into()
}
fn default_consensus() -> String {
    "127.0.0.1:5050".into()
}
fn default_min() -> usize {
    3
}
fn default_max() -> usize {
    8
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusParams {
    #[serde(default = "default_mean_wait")]
    pub mean_wait_ms: u64,
    #[serde(default = "default_pbft_timeout")]
    pub pbft_timeout_ms: u64,
    #[serde(default = "default_max_batches")]
    pub max_batches_per_block: usize,
}

fn default_mean_wait() -> u64 {
    2000
}
fn default_pbft_timeout() -> u64 {
    2000
}
fn default_max_batches() -> usize {
    100
}

impl Default for ConsensusParams {
    fn default() -> Self {
        Self {
            mean_wait_ms: default_mean_wait(),
            pbft_timeout_ms: default_pbft_timeout(),
            max_batches_per_block: default_max_batches(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub key_file: PathBuf,
    #[serde(default = "default_api")]
    pub api_endpoint: String,
    #[serde(default = "default_internal")]
    pub internal_endpoint: String,
    #[serde(default = "default_consensus")]
    pub consensus_endpoint: String,
    /// Consensus endpoints of nodes to contact first.
    #[serde(default)]
    pub peers: Vec<String>,
    #[serde(default = "default_min")]
    pub min_connectivity: usize,
    #[serde(default = "default_max")]
    pub max_connectivity: usize,
    #[serde(default)]
    pub consensus: ConsensusParams,
    pub genesis: PathBuf,
    pub data_dir: PathBuf,
}

impl NodeConfig {
    /// Reads a TOML file; relative paths in it are taken from the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.into(), reason: e.to_string() })?;
        let mut cfg: NodeConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), reason: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.key_file, &mut cfg.genesis, &mut cfg.data_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut ports = BTreeSet::new();
        for (name, ep) in [
            ("api_endpoint", &self.api_endpoint),
            ("internal_endpoint", &self.internal_endpoint),
            ("consensus_endpoint", &self.consensus_endpoint),
        ] {
            let addr: SocketAddr = ep
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{name} {ep:?} is not host:port")))?;
            if !ports.insert(addr.port()) {
                return Err(ConfigError::Invalid(format!("{name} reuses port {}", addr.port())));
            }
        }
        if self.min_connectivity == 0 || self.min_connectivity > self.max_connectivity {
            return Err(ConfigError::Invalid(format!(
                "connectivity bounds {}..{} are not 1 <= min <= max",
                self.min_connectivity, self.max_connectivity
            )));
        }
        if self.consensus.mean_wait_ms == 0 || self.consensus.pbft_timeout_ms == 0 || self.consensus.max_batches_per_block == 0 {
            return Err(ConfigError::Invalid("consensus parameters must be positive".into()));
        }
        fs::create_dir_all(&self.data_dir)
            .and_then(|_| {
                let probe = self.data_dir.join(".write-probe");
                fs::write(&probe, b"")?;
                fs::remove_file(probe)
            })
            .map_err(|e| ConfigError::Invalid(format!("data directory {} is not writable: {e}", self.data_dir.display())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("node.toml");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "key_file = \"k\"\ngenesis = \"g.json\"\ndata_dir = \"data\"\n");
        let cfg = NodeConfig::load(&path).unwrap();
        assert_eq!(cfg.key_file, dir.path().join("k"));
        assert_eq!(cfg.api_endpoint, "127.0.0.1:8008");
        assert_eq!(cfg.consensus.mean_wait_ms, 2000);
        assert!(dir.path().join("data").is_dir());
    }

    #[test]
    fn shared_ports_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "key_file = \"k\"\ngenesis = \"g\"\ndata_dir = \"d\"\napi_endpoint = \"127.0.0.1:5050\"\n",
        );
        assert!(matches!(NodeConfig::load(&path), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn unknown_fields_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "key_file = \"k\"\ngenesis = \"g\"\ndata_dir = \"d\"\nport = 1\n");
        assert!(matches!(NodeConfig::load(&path), Err(ConfigError::Parse { .. })));
    }
}
