//! Pluggable consensus engines and the glue for switching between them at
//! runtime through the `consensus.algorithm` setting.
//!
//! Each engine is a deterministic state machine driven by a `step` function;
//! randomness arrives through seeded generators owned by the caller.

pub mod analysis;
pub mod pbft;
pub mod poet;
pub mod raft;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::family::settings::{SettingPayload, CONSENSUS_ALGORITHM_KEY, FAMILY_NAME as SETTINGS_FAMILY};
use crate::ledger::{Block, Transaction};

pub use analysis::{max_faults, sybil_threshold, ztest_winrate, ZTest};

/// Validators are identified by their public key hex.
pub type NodeId = String;

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("unknown consensus algorithm {0:?}")]
    UnknownAlgorithm(String),
    #[error("not a consensus.algorithm settings transaction")]
    NotAnAlgorithmSetting,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no waits to elect from")]
    EmptyWaits,
    #[error("insufficient data: {rounds} rounds observed, need {needed}")]
    InsufficientData { rounds: u64, needed: u64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("consensus payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Pbft,
    PoetCft,
    Raft,
}

impl Algorithm {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "pbft" => Some(Algorithm::Pbft),
            "poet_cft" => Some(Algorithm::PoetCft),
            "raft" => Some(Algorithm::Raft),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Pbft => "pbft",
            Algorithm::PoetCft => "poet_cft",
            Algorithm::Raft => "raft",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusParams {
    /// Total validator count.
    pub n: u64,
    /// Assumed number of malicious validators.
    pub m: u64,
    pub algorithm: Algorithm,
    pub target_block_interval_ms: u64,
}

impl ConsensusParams {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        if self.n < 1 {
            return Err(ConsensusError::InvalidParams("n must be at least 1".into()));
        }
        if self.m >= self.n {
            return Err(ConsensusError::InvalidParams("m must be below n".into()));
        }
        if self.algorithm == Algorithm::Pbft && self.n < 3 * self.m + 1 {
            return Err(ConsensusError::InvalidParams(format!(
                "pbft needs n >= 3m + 1 (n={}, m={})",
                self.n, self.m
            )));
        }
        Ok(())
    }
}

/// Engine-tagged record carried in `BlockHeader::consensus_payload`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "engine", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConsensusPayload {
    Genesis,
    Pbft { view: u64, sequence: u64 },
    PoetCft { round: u64, wait_ms: u64 },
    Raft { term: u64 },
}

impl ConsensusPayload {
    pub fn encode(&self) -> Vec<u8> {
        codec::to_canonical(self).expect("payload holds only integers")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ConsensusError> {
        codec::from_canonical(bytes).map_err(|e| ConsensusError::Payload(e.to_string()))
    }

    pub fn algorithm(&self) -> Option<Algorithm> {
        match self {
            ConsensusPayload::Genesis => None,
            ConsensusPayload::Pbft { .. } => Some(Algorithm::Pbft),
            ConsensusPayload::PoetCft { .. } => Some(Algorithm::PoetCft),
            ConsensusPayload::Raft { .. } => Some(Algorithm::Raft),
        }
    }
}

/// Result of committing a `consensus.algorithm` setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineActivation {
    pub algorithm: Algorithm,
    /// First block number governed by the new engine.
    pub effective_from: u64,
}

/// A `consensus.algorithm` setting committed in block `at_block_num` governs
/// blocks from `at_block_num + 1` on.
pub fn engine_switch(settings_txn: &Transaction, at_block_num: u64) -> Result<EngineActivation, ConsensusError> {
    if settings_txn.header.family_name != SETTINGS_FAMILY {
        return Err(ConsensusError::NotAnAlgorithmSetting);
    }
    let setting: SettingPayload =
        codec::from_canonical(&settings_txn.payload).map_err(|_| ConsensusError::NotAnAlgorithmSetting)?;
    if setting.key != CONSENSUS_ALGORITHM_KEY {
        return Err(ConsensusError::NotAnAlgorithmSetting);
    }
    let algorithm = Algorithm::parse(&setting.value).ok_or(ConsensusError::UnknownAlgorithm(setting.value.clone()))?;
    Ok(EngineActivation {
        algorithm,
        effective_from: at_block_num + 1,
    })
}

/// Which engine governs which heights, reconstructed from a chain.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EngineSchedule {
    activations: BTreeMap<u64, Algorithm>,
}

impl EngineSchedule {
    pub fn new(genesis_algorithm: Algorithm) -> Self {
        let mut activations = BTreeMap::new();
        activations.insert(1, genesis_algorithm);
        Self { activations }
    }

    pub fn record(&mut self, activation: EngineActivation) {
        self.activations.insert(activation.effective_from, activation.algorithm);
    }

    pub fn algorithm_at(&self, block_num: u64) -> Option<Algorithm> {
        self.activations.range(..=block_num).next_back().map(|(_, a)| *a)
    }

    /// Scans a chain (genesis first) for algorithm settings.
    pub fn from_chain<'a>(blocks: impl IntoIterator<Item = &'a Block>) -> Self {
        let mut schedule = Self::default();
        for block in blocks {
            for txn in block.batches.iter().flat_map(|b| &b.transactions) {
                if let Ok(activation) = engine_switch(txn, block.num()) {
                    schedule.record(activation);
                }
            }
        }
        schedule
    }

    pub fn activations(&self) -> impl Iterator<Item = (u64, Algorithm)> + '_ {
        self.activations.iter().map(|(h, a)| (*h, *a))
    }
}

/// Leader of a pBFT view over a sorted member list.
pub fn view_leader(members: &[NodeId], view: u64) -> &NodeId {
    &members[(view % members.len() as u64) as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::family::settings;
    use crate::ledger::build_transaction;

    fn setting_txn(value: &str) -> Transaction {
        let key = KeyPair::from_seed(&[2u8; 32]).unwrap();
        build_transaction(
            &SettingPayload::new(CONSENSUS_ALGORITHM_KEY, value).encode(),
            &settings::family_spec(),
            &key,
        )
        .unwrap()
    }

    #[test]
    fn switch_activates_on_next_block() {
        let activation = engine_switch(&setting_txn("raft"), 7).unwrap();
        assert_eq!(activation, EngineActivation { algorithm: Algorithm::Raft, effective_from: 8 });
        let mut schedule = EngineSchedule::new(Algorithm::PoetCft);
        schedule.record(activation);
        assert_eq!(schedule.algorithm_at(7), Some(Algorithm::PoetCft));
        assert_eq!(schedule.algorithm_at(8), Some(Algorithm::Raft));
        assert_eq!(schedule.algorithm_at(0), None);
    }

    #[test]
    fn unknown_algorithm_is_rejected() {
        assert_eq!(
            engine_switch(&setting_txn("sha-chain"), 3),
            Err(ConsensusError::UnknownAlgorithm("sha-chain".into()))
        );
    }

    #[test]
    fn params_enforce_pbft_bound() {
        let mut p = ConsensusParams { n: 4, m: 1, algorithm: Algorithm::Pbft, target_block_interval_ms: 1000 };
        assert!(p.validate().is_ok());
        p.m = 2;
        assert!(p.validate().is_err());
        p.algorithm = Algorithm::Raft;
        assert!(p.validate().is_ok());
        p.m = 4;
        assert!(p.validate().is_err());
    }

    #[test]
    fn payload_is_engine_tagged() {
        let p = ConsensusPayload::Pbft { view: 2, sequence: 9 };
        assert_eq!(String::from_utf8(p.encode()).unwrap(), r#"{"engine":"pbft","sequence":9,"view":2}"#);
        assert_eq!(ConsensusPayload::decode(&p.encode()).unwrap(), p);
        let q = ConsensusPayload::PoetCft { round: 3, wait_ms: 17 };
        assert_eq!(String::from_utf8(q.encode()).unwrap(), r#"{"engine":"poet_cft","round":3,"wait_ms":17}"#);
    }
}
