//! Proof-of-Elapsed-Time lottery (crash-fault-tolerant variant).
//!
//! Every validator draws an exponentially distributed wait for the next
//! height; the shortest wait publishes. Without an enclave the wait is
//! self-reported, so misbehaviour is policed statistically by
//! [`ztest_winrate`](super::ztest_winrate) over the observed win counts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ztest_winrate, Algorithm, ConsensusError, ConsensusPayload, NodeId, ZTest};
use crate::ledger::Block;

/// Wait for a uniform draw `u` in (0, 1]: ceil(-mean · ln u).
pub fn wait_from_uniform(mean_wait_ms: u64, u: f64) -> u64 {
    let wait = (-(mean_wait_ms as f64) * u.ln()).ceil();
    if wait <= 0.0 {
        0
    } else {
        wait as u64
    }
}

pub fn poet_draw_wait(mean_wait_ms: u64, rng: &mut impl Rng) -> Result<u64, ConsensusError> {
    if mean_wait_ms == 0 {
        return Err(ConsensusError::InvalidParams("mean wait must be positive".into()));
    }
    // gen::<f64>() is in [0, 1); flip it into (0, 1]
    let u = 1.0 - rng.gen::<f64>();
    Ok(wait_from_uniform(mean_wait_ms, u))
}

/// Shortest wait wins; equal waits go to the smaller node id.
pub fn poet_elect(waits: &BTreeMap<NodeId, u64>) -> Result<NodeId, ConsensusError> {
    waits
        .iter()
        .min_by(|a, b| a.1.cmp(b.1).then_with(|| a.0.cmp(b.0)))
        .map(|(id, _)| id.clone())
        .ok_or(ConsensusError::EmptyWaits)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoetState {
    pub round: u64,
    pub mean_wait_ms: u64,
    pub wins: BTreeMap<NodeId, u64>,
    pub rounds_observed: u64,
}

impl PoetState {
    pub fn new(mean_wait_ms: u64) -> Self {
        assert!(mean_wait_ms > 0, "mean wait must be positive");
        Self {
            round: 0,
            mean_wait_ms,
            wins: BTreeMap::new(),
            rounds_observed: 0,
        }
    }

    pub fn record_win(&mut self, winner: &str) {
        *self.wins.entry(winner.to_string()).or_default() += 1;
        self.rounds_observed += 1;
        self.round += 1;
    }

    pub fn wins_of(&self, node: &str) -> u64 {
        self.wins.get(node).copied().unwrap_or(0)
    }

    pub fn ztest(&self, node: &str, n: u64) -> Result<ZTest, ConsensusError> {
        ztest_winrate(self.wins_of(node), self.rounds_observed, n)
    }

    /// Win counts over the PoET-governed blocks of a chain.
    pub fn from_chain<'a>(mean_wait_ms: u64, blocks: impl IntoIterator<Item = &'a Block>) -> Self {
        let mut state = Self::new(mean_wait_ms);
        for block in blocks {
            if let Ok(ConsensusPayload::PoetCft { .. }) = ConsensusPayload::decode(&block.header.consensus_payload) {
                state.record_win(&block.header.signer_public_key);
            }
        }
        state
    }
}

/// Lottery participants for round-level simulation.
#[derive(Debug, Clone)]
pub struct LotteryConfig {
    pub nodes: Vec<NodeId>,
    /// Nodes that always claim a zero wait.
    pub cheaters: BTreeSet<NodeId>,
    pub mean_wait_ms: u64,
    pub seed: u64,
}

/// Runs the lottery round by round with one seeded generator per node.
pub struct Lottery {
    config: LotteryConfig,
    rngs: Vec<ChaCha8Rng>,
    pub state: PoetState,
}

impl Lottery {
    pub fn new(config: LotteryConfig) -> Self {
        let rngs = (0..config.nodes.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect();
        let state = PoetState::new(config.mean_wait_ms);
        Self { config, rngs, state }
    }

    pub fn round(&mut self) -> NodeId {
        let mut waits = BTreeMap::new();
        for (node, rng) in self.config.nodes.iter().zip(self.rngs.iter_mut()) {
            let drawn = poet_draw_wait(self.config.mean_wait_ms, rng).expect("mean validated");
            let wait = if self.config.cheaters.contains(node) { 0 } else { drawn };
            waits.insert(node.clone(), wait);
        }
        let winner = poet_elect(&waits).expect("at least one node");
        self.state.record_win(&winner);
        winner
    }

    /// Runs up to `max_rounds` and returns the first round after which `node`
    /// is flagged.
    pub fn rounds_until_flagged(&mut self, node: &str, max_rounds: u64) -> Option<u64> {
        let n = self.config.nodes.len() as u64;
        for r in 1..=max_rounds {
            self.round();
            if let Ok(z) = self.state.ztest(node, n) {
                if z.flagged {
                    return Some(r);
                }
            }
        }
        None
    }
}

/// Timer the validator should arm for the current round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoetTimer {
    pub round: u64,
    pub after_ms: u64,
}

#[derive(Debug, Clone)]
struct PendingRound {
    round: u64,
    wait_ms: u64,
    expired: bool,
}

/// Per-validator PoET driver.
#[derive(Debug)]
pub struct PoetEngine {
    mean_wait_ms: u64,
    rng: ChaCha8Rng,
    cheat: bool,
    current: Option<PendingRound>,
}

impl PoetEngine {
    pub fn new(mean_wait_ms: u64, seed: u64, cheat: bool) -> Self {
        Self {
            mean_wait_ms,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cheat,
            current: None,
        }
    }

    /// Starts the round for the block after `head_num`. Calling it again for
    /// the same head keeps the already drawn wait.
    pub fn on_new_head(&mut self, head_num: u64) -> Option<PoetTimer> {
        let round = head_num + 1;
        if self.current.as_ref().is_some_and(|c| c.round == round) {
            return None;
        }
        let drawn = poet_draw_wait(self.mean_wait_ms, &mut self.rng).expect("mean validated");
        let wait_ms = if self.cheat { 0 } else { drawn };
        self.current = Some(PendingRound {
            round,
            wait_ms,
            expired: false,
        });
        Some(PoetTimer { round, after_ms: wait_ms })
    }

    /// Marks the wait for `round` as elapsed.
    pub fn on_timer(&mut self, round: u64) {
        if let Some(c) = self.current.as_mut() {
            if c.round == round {
                c.expired = true;
            }
        }
    }

    /// Whether this validator may publish the block after `head_num` now.
    pub fn may_publish(&self, head_num: u64) -> bool {
        self.current
            .as_ref()
            .is_some_and(|c| c.round == head_num + 1 && c.expired)
    }

    pub fn payload(&self) -> Option<ConsensusPayload> {
        self.current.as_ref().map(|c| ConsensusPayload::PoetCft {
            round: c.round,
            wait_ms: c.wait_ms,
        })
    }
}

/// Structural check of a PoET block.
pub fn verify_block(block: &Block, members: &[NodeId]) -> Result<(), String> {
    match ConsensusPayload::decode(&block.header.consensus_payload) {
        Ok(ConsensusPayload::PoetCft { round, .. }) if round == block.num() => {}
        Ok(other) => return Err(format!("expected poet payload for round {}, got {other:?}", block.num())),
        Err(e) => return Err(e.to_string()),
    }
    if !members.contains(&block.header.signer_public_key) {
        return Err("signer is not a validator".into());
    }
    Ok(())
}

/// Fork preference between equal-height PoET blocks: the shorter claimed
/// wait is preferred (`Ordering::Less` means `a` wins).
pub fn prefer(a: &Block, b: &Block) -> Ordering {
    let wait = |blk: &Block| match ConsensusPayload::decode(&blk.header.consensus_payload) {
        Ok(ConsensusPayload::PoetCft { wait_ms, .. }) => wait_ms,
        _ => u64::MAX,
    };
    wait(a).cmp(&wait(b))
}

pub const ALGORITHM: Algorithm = Algorithm::PoetCft;
