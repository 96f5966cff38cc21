//! Deterministic discrete-event transport. Time only moves when the next
//! event is popped; latency, drops, and partitions come from one seeded
//! generator, so a (config, seed) pair always replays the same trace.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt::Debug;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha512};
use thiserror::Error;

use crate::consensus::NodeId;

#[derive(Debug, Error, PartialEq)]
pub enum SimConfigError {
    #[error("drop rate {0} outside [0, 1]")]
    DropRate(f64),
    #[error("node {0} appears in two partitions")]
    OverlappingPartitions(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyModel {
    pub base_ms: u64,
    /// Uniform extra delay in `[0, jitter_ms]`.
    pub jitter_ms: u64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self { base_ms: 5, jitter_ms: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimTransportConfig {
    #[serde(default)]
    pub latency_ms: LatencyModel,
    #[serde(default)]
    pub drop_rate: f64,
    #[serde(default)]
    pub partitions: Vec<BTreeSet<NodeId>>,
    #[serde(default)]
    pub seed: u64,
}

impl SimTransportConfig {
    pub fn validate(&self) -> Result<(), SimConfigError> {
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(SimConfigError::DropRate(self.drop_rate));
        }
        check_partitions(&self.partitions)
    }
}

fn check_partitions(partitions: &[BTreeSet<NodeId>]) -> Result<(), SimConfigError> {
    let mut seen = BTreeSet::new();
    for node in partitions.iter().flatten() {
        if !seen.insert(node) {
            return Err(SimConfigError::OverlappingPartitions(node.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimEvent<M, T> {
    Deliver { from: NodeId, to: NodeId, msg: M },
    Timer { node: NodeId, timer: T },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub timers_fired: u64,
}

pub struct Simulator<M, T> {
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: HashMap<u64, SimEvent<M, T>>,
    rng: ChaCha8Rng,
    config: SimTransportConfig,
    down: BTreeSet<NodeId>,
    trace: Sha512,
    pub stats: SimStats,
}

impl<M: Serialize, T: Debug> Simulator<M, T> {
    pub fn new(config: SimTransportConfig) -> Result<Self, SimConfigError> {
        config.validate()?;
        Ok(Self {
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            events: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            down: BTreeSet::new(),
            trace: Sha512::new(),
            stats: SimStats::default(),
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn is_down(&self, node: &str) -> bool {
        self.down.contains(node)
    }

    /// A crashed node receives nothing and loses its armed timers.
    pub fn crash(&mut self, node: &str) {
        self.down.insert(node.to_string());
    }

    pub fn recover(&mut self, node: &str) {
        self.down.remove(node);
    }

    pub fn set_partitions(&mut self, partitions: Vec<BTreeSet<NodeId>>) -> Result<(), SimConfigError> {
        check_partitions(&partitions)?;
        self.config.partitions = partitions;
        Ok(())
    }

    /// Nodes outside every listed partition form one more group.
    pub fn connected(&self, a: &str, b: &str) -> bool {
        let group = |n: &str| self.config.partitions.iter().position(|p| p.contains(n));
        group(a) == group(b)
    }

    fn push(&mut self, at: u64, event: SimEvent<M, T>) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.events.insert(self.seq, event);
    }

    /// Schedules delivery; returns false when the copy is lost.
    pub fn send(&mut self, from: &str, to: &str, msg: M) -> bool {
        self.stats.sent += 1;
        let lost = self.config.drop_rate > 0.0 && self.rng.gen_bool(self.config.drop_rate);
        if lost || !self.connected(from, to) || self.down.contains(from) {
            self.stats.dropped += 1;
            return false;
        }
        let latency = self.config.latency_ms;
        let delay = latency.base_ms + self.rng.gen_range(0..=latency.jitter_ms);
        self.push(self.now + delay, SimEvent::Deliver { from: from.to_string(), to: to.to_string(), msg });
        true
    }

    pub fn schedule(&mut self, node: &str, after_ms: u64, timer: T) {
        self.push(self.now + after_ms, SimEvent::Timer { node: node.to_string(), timer });
    }

    /// Time of the next pending event.
    pub fn peek_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Pops the next event addressed to a live node, advancing the clock.
    pub fn next_event(&mut self) -> Option<(u64, SimEvent<M, T>)> {
        while let Some(Reverse((at, seq))) = self.queue.pop() {
            let event = self.events.remove(&seq).expect("queued events are stored");
            self.now = at;
            let target = match &event {
                SimEvent::Deliver { to, .. } => to,
                SimEvent::Timer { node, .. } => node,
            };
            if self.down.contains(target) {
                if matches!(event, SimEvent::Deliver { .. }) {
                    self.stats.dropped += 1;
                }
                continue;
            }
            self.trace.update(at.to_be_bytes());
            match &event {
                SimEvent::Deliver { from, to, msg } => {
                    self.stats.delivered += 1;
                    self.trace.update(b"d");
                    self.trace.update(from.as_bytes());
                    self.trace.update(to.as_bytes());
                    self.trace.update(serde_json::to_vec(msg).unwrap_or_default());
                }
                SimEvent::Timer { node, timer } => {
                    self.stats.timers_fired += 1;
                    self.trace.update(b"t");
                    self.trace.update(node.as_bytes());
                    self.trace.update(format!("{timer:?}").as_bytes());
                }
            }
            return Some((at, event));
        }
        None
    }

    /// Moves the clock forward without an event (idle time).
    pub fn advance_to(&mut self, t: u64) {
        if t > self.now {
            self.now = t;
        }
    }

    /// Digest over every event processed so far.
    pub fn trace_digest(&self) -> String {
        hex::encode(self.trace.clone().finalize())
    }
}
