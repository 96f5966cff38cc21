//! Discrete-event runs of a whole validator network with injected faults,
//! followed by safety and liveness checks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec;
use crate::consensus::raft::Role;
use crate::consensus::{Algorithm, ConsensusPayload, NodeId};
use crate::crypto::{sha512_bytes, KeyPair};
use crate::family::airquality::{CalibrationModel, SourceFlag};
use crate::family::settings::{self as settings_family, SettingPayload, CONSENSUS_ALGORITHM_KEY};
use crate::family::TxnContext;
use crate::ingest::{BatchTriggerConfig, Device, DeviceSpec};
use crate::journal::store::BlockStore;
use crate::journal::{build_genesis, Journal};
use crate::ledger::{build_batch, build_transaction_with_nonce, Batch, Block};
use crate::network::peering::{Directory, PeeringNetwork};
use crate::network::sim::{LatencyModel, SimEvent, SimTransportConfig, Simulator};
use crate::network::Message;
use crate::node::{Fault, Input, Output, Timer, Validator, ValidatorConfig};
use crate::registry::Registry;
use crate::trie::StateTrie;

const HARNESS: &str = "harness";
const PEERING_ROUNDS: usize = 100;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario: {0}")]
    Config(String),
    #[error("scenario setup: {0}")]
    Setup(String),
}

fn default_name() -> String {
    "unnamed".into()
}
fn default_time_base() -> i64 {
    1_700_000_000
}
fn default_settle() -> u64 {
    30
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    pub nodes: usize,
    /// Simulated seconds of workload and faults.
    pub duration_s: u64,
    /// Quiet simulated seconds after the workload before checks run.
    #[serde(default = "default_settle")]
    pub settle_s: u64,
    #[serde(default = "default_time_base")]
    pub time_base_s: i64,
    pub consensus: ConsensusSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub peering: PeeringSection,
    #[serde(default)]
    pub workload: Workload,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn default_mean_wait() -> u64 {
    2_000
}
fn default_pbft_timeout() -> u64 {
    1_000
}
fn default_max_batches() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConsensusSection {
    pub algorithm: String,
    #[serde(default = "default_mean_wait")]
    pub mean_wait_ms: u64,
    #[serde(default = "default_pbft_timeout")]
    pub pbft_timeout_ms: u64,
    #[serde(default = "default_max_batches")]
    pub max_batches_per_block: usize,
    #[serde(default)]
    pub switches: Vec<Switch>,
}

/// Submit a `consensus.algorithm` change once the chain reaches `at_height`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Switch {
    pub at_height: u64,
    pub algorithm: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    pub base_ms: u64,
    pub jitter_ms: u64,
    pub drop_rate: f64,
}

impl Default for TransportSection {
    fn default() -> Self {
        let l = LatencyModel::default();
        Self { base_ms: l.base_ms, jitter_ms: l.jitter_ms, drop_rate: 0.0 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeeringSection {
    pub min: usize,
    pub max: usize,
}

impl Default for PeeringSection {
    fn default() -> Self {
        Self { min: 3, max: 8 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Workload {
    pub sensors: usize,
    pub sample_interval_s: u64,
    pub flush_readings: usize,
    pub flush_interval_s: i64,
}

impl Default for Workload {
    fn default() -> Self {
        Self { sensors: 0, sample_interval_s: 10, flush_readings: 10, flush_interval_s: 60 }
    }
}

/// Node indices refer to validators ordered by public key, so node 0 leads
/// the first pBFT view.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultSpec {
    /// These nodes equivocate and collude with each other.
    Equivocate { nodes: Vec<usize> },
    CheatWait { node: usize },
    Crash {
        node: usize,
        at_s: u64,
        #[serde(default)]
        recover_s: Option<u64>,
    },
    /// Crash whichever node leads Raft every `every_s`, for `down_s`.
    CrashLeader { every_s: u64, down_s: u64 },
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Config(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Config(m));
        if self.nodes == 0 {
            return bad("nodes must be at least 1".into());
        }
        if Algorithm::parse(&self.consensus.algorithm).is_none() {
            return bad(format!("unknown algorithm {:?}", self.consensus.algorithm));
        }
        for s in &self.consensus.switches {
            if Algorithm::parse(&s.algorithm).is_none() {
                return bad(format!("unknown algorithm {:?}", s.algorithm));
            }
        }
        if self.consensus.mean_wait_ms == 0 || self.consensus.pbft_timeout_ms == 0 {
            return bad("consensus timings must be positive".into());
        }
        if self.workload.sensors > 0 && (self.workload.sample_interval_s == 0 || self.workload.flush_readings == 0) {
            return bad("workload intervals must be positive".into());
        }
        let check = |node: usize| {
            if node >= self.nodes {
                Err(ScenarioError::Config(format!("fault names node {node} of {}", self.nodes)))
            } else {
                Ok(())
            }
        };
        for f in &self.faults {
            match f {
                FaultSpec::Equivocate { nodes } => nodes.iter().try_for_each(|n| check(*n))?,
                FaultSpec::CheatWait { node } => check(*node)?,
                FaultSpec::Crash { node, at_s, recover_s } => {
                    check(*node)?;
                    if recover_s.is_some_and(|r| r <= *at_s) {
                        return bad("recovery must follow the crash".into());
                    }
                }
                FaultSpec::CrashLeader { every_s, down_s } => {
                    if *every_s == 0 || down_s >= every_s {
                        return bad("crash_leader needs 0 < down_s < every_s".into());
                    }
                }
            }
        }
        let transport = self.transport_config();
        transport.validate().map_err(|e| ScenarioError::Config(e.to_string()))?;
        Ok(())
    }

    fn transport_config(&self) -> SimTransportConfig {
        SimTransportConfig {
            latency_ms: LatencyModel { base_ms: self.transport.base_ms, jitter_ms: self.transport.jitter_ms },
            drop_rate: self.transport.drop_rate,
            partitions: Vec::new(),
            seed: self.seed,
        }
    }
}

/// Key `index` of a run seeded with `seed`.
pub fn node_key(seed: u64, index: usize) -> KeyPair {
    let mut counter = 0u32;
    loop {
        let digest = sha512_bytes(format!("airchain-node/{seed}/{index}/{counter}").as_bytes());
        let mut bytes = [0u8; 32];
        bytes.copy_from_slice(&digest[..32]);
        if let Ok(key) = KeyPair::from_seed(&bytes) {
            return key;
        }
        counter += 1;
    }
}

#[derive(Debug)]
enum SimTimer {
    Node(Timer),
    Sensor(usize),
    Crash(usize),
    Recover(usize),
    CrashLeader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeReport {
    pub label: String,
    pub node_id: String,
    pub role: String,
    pub height: u64,
    pub head_id: String,
    pub blocks_published: u64,
    pub fork_switches: u64,
    pub view_changes: u64,
    pub refused_batches: u64,
    pub wins: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_milli: Option<i64>,
    pub anomaly: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub simulated_ms: u64,
    pub nodes: Vec<NodeReport>,
    pub messages: BTreeMap<String, u64>,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub batches_accepted: u64,
    pub batches_committed: u64,
    pub readings_produced: u64,
    /// (height, algorithm) where the chain's engine changes.
    pub engine_changes: Vec<(u64, String)>,
    pub raft_leader_terms: u64,
    pub peering_rounds: u64,
    pub flagged: Vec<String>,
    pub violations: Vec<String>,
    pub trace_digest: String,
}

impl Report {
    pub fn canonical(&self) -> Vec<u8> {
        codec::to_canonical(self).expect("report holds no floats or booleans")
    }

    /// 0 when every invariant held, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.violations.is_empty() {
            0
        } else {
            1
        }
    }

    /// Honest nodes' common head height, if they agree.
    pub fn agreed_height(&self) -> Option<u64> {
        let mut honest = self.nodes.iter().filter(|n| n.role == "honest");
        let first = honest.next()?;
        honest.all(|n| n.head_id == first.head_id).then_some(first.height)
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {} (seed {}), {} ms simulated", self.scenario, self.seed, self.simulated_ms)?;
        writeln!(
            f,
            "{:<5} {:<10} {:<10} {:>6} {:<18} {:>9} {:>6} {:>6} {:>6} {:>8}",
            "node", "id", "role", "height", "head", "published", "forks", "views", "wins", "z"
        )?;
        for n in &self.nodes {
            let z = n.z_milli.map_or("-".to_string(), |z| format!("{:.3}", z as f64 / 1000.0));
            writeln!(
                f,
                "{:<5} {:<10} {:<10} {:>6} {:<18} {:>9} {:>6} {:>6} {:>6} {:>8}{}",
                n.label,
                &n.node_id[..8.min(n.node_id.len())],
                n.role,
                n.height,
                &n.head_id[..16.min(n.head_id.len())],
                n.blocks_published,
                n.fork_switches,
                n.view_changes,
                n.wins,
                z,
                if n.anomaly == "flagged" { "  FLAGGED" } else { "" },
            )?;
        }
        let kinds: Vec<String> = self.messages.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(f, "messages: sent {} dropped {} ({})", self.messages_sent, self.messages_dropped, kinds.join(" "))?;
        writeln!(
            f,
            "batches: accepted {} committed {}; readings produced {}",
            self.batches_accepted, self.batches_committed, self.readings_produced
        )?;
        if !self.engine_changes.is_empty() {
            let changes: Vec<String> = self.engine_changes.iter().map(|(h, a)| format!("{a}@{h}")).collect();
            writeln!(f, "engines: {}", changes.join(" -> "))?;
        }
        if self.raft_leader_terms > 0 {
            writeln!(f, "raft leader terms: {}", self.raft_leader_terms)?;
        }
        writeln!(f, "peering converged after {} rounds", self.peering_rounds)?;
        if !self.flagged.is_empty() {
            writeln!(f, "flagged: {}", self.flagged.join(", "))?;
        }
        if self.violations.is_empty() {
            writeln!(f, "invariants: ok")?;
        } else {
            for v in &self.violations {
                writeln!(f, "VIOLATION: {v}")?;
            }
        }
        write!(f, "trace {}", &self.trace_digest[..16])
    }
}

/// A configured network ready to run.
pub struct Harness {
    scenario: Scenario,
    sim: Simulator<Message, SimTimer>,
    validators: Vec<Validator>,
    ids: Vec<NodeId>,
    roles: Vec<String>,
    devices: Vec<Device>,
    down: BTreeSet<usize>,
    accepted: Vec<String>,
    message_counts: BTreeMap<String, u64>,
    next_switch: usize,
    switch_nonce: u64,
    leader_down: Option<usize>,
    peering_rounds: u64,
    registry: Registry,
    genesis: Block,
}

impl Harness {
    pub fn new(scenario: Scenario) -> Result<Self, ScenarioError> {
        scenario.validate()?;
        let setup = |e: String| ScenarioError::Setup(e);
        let mut keys: Vec<KeyPair> = (0..scenario.nodes).map(|i| node_key(scenario.seed, i)).collect();
        keys.sort_by(|a, b| a.public_key_hex().cmp(b.public_key_hex()));
        let ids: Vec<NodeId> = keys.iter().map(|k| k.public_key_hex().to_string()).collect();

        let mut roles = vec!["honest".to_string(); scenario.nodes];
        let mut faults: Vec<Option<Fault>> = vec![None; scenario.nodes];
        for f in &scenario.faults {
            match f {
                FaultSpec::Equivocate { nodes } => {
                    let accomplices: BTreeSet<NodeId> = nodes.iter().map(|n| ids[*n].clone()).collect();
                    for n in nodes {
                        roles[*n] = "equivocate".into();
                        faults[*n] = Some(Fault::Equivocate { accomplices: accomplices.clone() });
                    }
                }
                FaultSpec::CheatWait { node } => {
                    roles[*node] = "cheat".into();
                    faults[*node] = Some(Fault::CheatWait);
                }
                _ => {}
            }
        }

        let algorithm = Algorithm::parse(&scenario.consensus.algorithm).expect("validated");
        let ctx = TxnContext { clock_s: scenario.time_base_s };
        let genesis = {
            let trie = Arc::new(StateTrie::new());
            build_genesis(&trie, algorithm, &ids, &keys[0], &ctx).map_err(|e| setup(e.to_string()))?
        };

        let mut network = PeeringNetwork::new(
            Directory::fully_reachable(ids.iter().cloned()),
            scenario.peering.min,
            scenario.peering.max,
        );
        let peering_rounds = network.run(PEERING_ROUNDS) as u64;
        let links = network.links();

        let mut validators = Vec::with_capacity(scenario.nodes);
        for (i, key) in keys.into_iter().enumerate() {
            let mut journal = Journal::new(BlockStore::in_memory(), Arc::new(StateTrie::new()));
            journal.init_genesis(genesis.clone(), &ctx).map_err(|e| setup(e.to_string()))?;
            let mut cfg = ValidatorConfig::new(key);
            cfg.endpoint = format!("sim://{}", ids[i]);
            cfg.mean_wait_ms = scenario.consensus.mean_wait_ms;
            cfg.pbft_timeout_ms = scenario.consensus.pbft_timeout_ms;
            cfg.max_batches_per_block = scenario.consensus.max_batches_per_block;
            cfg.time_base_s = scenario.time_base_s;
            cfg.seed = scenario.seed.wrapping_add(i as u64 + 1);
            cfg.min_connectivity = scenario.peering.min;
            cfg.max_connectivity = scenario.peering.max;
            cfg.fault = faults[i].clone();
            let mut v = Validator::new(cfg, journal);
            for peer in links.get(&ids[i]).into_iter().flatten() {
                v.peers.add_peer(peer.clone(), format!("sim://{peer}"));
            }
            validators.push(v);
        }

        let w = &scenario.workload;
        let devices = (0..w.sensors)
            .map(|i| {
                let spec = DeviceSpec {
                    key_seed: scenario.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1),
                    lat_udeg: 37_400_000 + (i as i64 % 5) * 20_000,
                    lon_udeg: -122_100_000 + (i as i64 / 5) * 20_000,
                    source_flag: [SourceFlag::Citizen, SourceFlag::Government, SourceFlag::Institutional][i % 3],
                    base_pm2_5: 10.0 + (i % 7) as f64 * 4.0,
                    amplitude: 5.0,
                    period_s: 3600.0,
                    temp_c: 20.0,
                    humidity_pct: 50.0,
                    noise: None,
                    trigger: Some(BatchTriggerConfig {
                        count_threshold: w.flush_readings,
                        age_threshold_s: w.flush_interval_s,
                    }),
                };
                Device::new(spec, CalibrationModel::identity())
            })
            .collect();

        let sim = Simulator::new(scenario.transport_config()).map_err(|e| setup(e.to_string()))?;
        Ok(Self {
            scenario,
            sim,
            validators,
            ids,
            roles,
            devices,
            down: BTreeSet::new(),
            accepted: Vec::new(),
            message_counts: BTreeMap::new(),
            next_switch: 0,
            switch_nonce: 0,
            leader_down: None,
            peering_rounds,
            registry: Registry::in_memory(),
            genesis,
        })
    }

    pub fn validators(&self) -> &[Validator] {
        &self.validators
    }

    pub fn genesis(&self) -> &Block {
        &self.genesis
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn is_honest(&self, index: usize) -> bool {
        self.roles[index] == "honest"
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    /// Ids of batches a validator queued, in acceptance order.
    pub fn accepted(&self) -> &[String] {
        &self.accepted
    }

    fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|n| n == id)
    }

    fn dispatch(&mut self, from: usize, outputs: Vec<Output>) {
        for o in outputs {
            match o {
                Output::Send { to, msg } => {
                    *self.message_counts.entry(msg.kind().to_string()).or_default() += 1;
                    let from_id = self.ids[from].clone();
                    self.sim.send(&from_id, &to, msg);
                }
                Output::Timer { after_ms, timer } => {
                    let node = self.ids[from].clone();
                    self.sim.schedule(&node, after_ms, SimTimer::Node(timer));
                }
            }
        }
    }

    fn submit(&mut self, target: usize, batch: Batch) {
        let n = self.validators.len();
        let Some(node) = (0..n).map(|k| (target + k) % n).find(|i| !self.down.contains(i)) else {
            return;
        };
        let id = batch.id().to_string();
        let before = self.validators[node].stats.refused_batches;
        let now = self.sim.now();
        let out = self.validators[node].handle(now, Input::Submit(batch));
        if self.validators[node].stats.refused_batches == before {
            self.accepted.push(id);
        }
        self.dispatch(node, out);
    }

    fn crash(&mut self, node: usize) {
        if self.down.insert(node) {
            let id = self.ids[node].clone();
            self.sim.crash(&id);
        }
    }

    fn recover(&mut self, node: usize) {
        if self.down.remove(&node) {
            let id = self.ids[node].clone();
            self.sim.recover(&id);
            let now = self.sim.now();
            let out = self.validators[node].restart(now);
            self.dispatch(node, out);
        }
    }

    fn current_raft_leader(&self) -> Option<usize> {
        (0..self.validators.len())
            .filter(|i| !self.down.contains(i))
            .filter_map(|i| match self.validators[i].raft_role() {
                Some((Role::Leader, term)) => Some((term, i)),
                _ => None,
            })
            .max()
            .map(|(_, i)| i)
    }

    /// Submits the next scheduled engine change once an honest node's chain
    /// is tall enough.
    fn maybe_switch(&mut self) {
        let Some(switch) = self.scenario.consensus.switches.get(self.next_switch).cloned() else {
            return;
        };
        let Some(proposer) = (0..self.validators.len()).find(|i| self.is_honest(*i) && !self.down.contains(i)) else {
            return;
        };
        if self.validators[proposer].head().num() < switch.at_height {
            return;
        }
        self.next_switch += 1;
        self.switch_nonce += 1;
        let key = &self.validators[proposer].key().clone();
        let txn = build_transaction_with_nonce(
            &SettingPayload::new(CONSENSUS_ALGORITHM_KEY, &switch.algorithm).encode(),
            &settings_family::family_spec(),
            key,
            format!("{:032x}", (1u128 << 64) + self.switch_nonce as u128),
        );
        let batch = txn.and_then(|t| build_batch(vec![t], key));
        if let Ok(batch) = batch {
            self.submit(proposer, batch);
        }
    }

    pub fn run(&mut self) -> Report {
        let duration_ms = self.scenario.duration_s * 1000;
        let end_ms = duration_ms + self.scenario.settle_s * 1000;

        for i in 0..self.validators.len() {
            let out = self.validators[i].start(0);
            self.dispatch(i, out);
        }
        let w = self.scenario.workload.clone();
        for i in 0..self.devices.len() {
            // spread sensors across the first interval
            let offset = (i as u64 * 997) % (w.sample_interval_s * 1000);
            self.sim.schedule(HARNESS, offset, SimTimer::Sensor(i));
        }
        for f in self.scenario.faults.clone() {
            match f {
                FaultSpec::Crash { node, at_s, recover_s } => {
                    self.sim.schedule(HARNESS, at_s * 1000, SimTimer::Crash(node));
                    if let Some(r) = recover_s {
                        self.sim.schedule(HARNESS, r * 1000, SimTimer::Recover(node));
                    }
                }
                FaultSpec::CrashLeader { every_s, .. } => {
                    self.sim.schedule(HARNESS, every_s * 1000, SimTimer::CrashLeader);
                }
                _ => {}
            }
        }

        while let Some(at) = self.sim.peek_time() {
            if at > end_ms {
                break;
            }
            let Some((now, event)) = self.sim.next_event() else { break };
            match event {
                SimEvent::Deliver { from, to, msg } => {
                    let Some(i) = self.index_of(&to) else { continue };
                    let out = self.validators[i].handle(now, Input::Message { from, msg });
                    self.dispatch(i, out);
                }
                SimEvent::Timer { node, timer } => match timer {
                    SimTimer::Node(t) => {
                        let Some(i) = self.index_of(&node) else { continue };
                        let out = self.validators[i].handle(now, Input::Timer(t));
                        self.dispatch(i, out);
                    }
                    SimTimer::Sensor(d) => {
                        if now >= duration_ms {
                            continue;
                        }
                        let t_s = self.scenario.time_base_s + (now / 1000) as i64;
                        if let Some(batch) = self.devices[d].tick(t_s) {
                            let target = d % self.validators.len();
                            self.submit(target, batch);
                        }
                        self.sim.schedule(HARNESS, w.sample_interval_s * 1000, SimTimer::Sensor(d));
                    }
                    SimTimer::Crash(n) => self.crash(n),
                    SimTimer::Recover(n) => self.recover(n),
                    SimTimer::CrashLeader => {
                        let Some(FaultSpec::CrashLeader { every_s, down_s }) = self
                            .scenario
                            .faults
                            .iter()
                            .find(|f| matches!(f, FaultSpec::CrashLeader { .. }))
                            .cloned()
                        else {
                            continue;
                        };
                        if let Some(prev) = self.leader_down.take() {
                            self.recover(prev);
                        }
                        if now + every_s * 1000 <= duration_ms {
                            self.sim.schedule(HARNESS, every_s * 1000, SimTimer::CrashLeader);
                        }
                        if let Some(leader) = self.current_raft_leader() {
                            self.crash(leader);
                            self.leader_down = Some(leader);
                            self.sim.schedule(HARNESS, down_s * 1000, SimTimer::Recover(leader));
                        }
                    }
                },
            }
            self.maybe_switch();
        }
        self.sim.advance_to(end_ms);
        self.report(end_ms)
    }

    fn report(&mut self, end_ms: u64) -> Report {
        let mut violations = Vec::new();
        let honest: Vec<usize> = (0..self.validators.len()).filter(|i| self.is_honest(*i)).collect();
        let live_honest: Vec<usize> = honest.iter().copied().filter(|i| !self.down.contains(i)).collect();

        // agreement-engine commits are final: no two honest nodes may differ
        // at a height, and no node may drop one
        let mut final_at: BTreeMap<u64, (String, usize)> = BTreeMap::new();
        for &i in &honest {
            let v = &self.validators[i];
            let chain_ids: BTreeMap<u64, String> = v.chain().iter().map(|b| (b.num(), b.id())).collect();
            for (h, id) in &v.stats.commits {
                let Some(block) = v.journal.block(id).cloned().or_else(|| find_block(&self.validators, id)) else {
                    continue;
                };
                if !is_final_engine(&block) {
                    continue;
                }
                match final_at.get(h) {
                    Some((other, j)) if other != id => violations.push(format!(
                        "safety: nodes n{j} and n{i} committed different blocks at height {h}"
                    )),
                    Some(_) => {}
                    None => {
                        final_at.insert(*h, (id.clone(), i));
                    }
                }
                if chain_ids.get(h) != Some(id) {
                    violations.push(format!("n{i} lost committed block at height {h}"));
                }
            }
        }

        let mut leaders: BTreeMap<(u64, u64), BTreeSet<usize>> = BTreeMap::new();
        for (i, v) in self.validators.iter().enumerate() {
            for (epoch, term) in &v.stats.leader_terms {
                leaders.entry((*epoch, *term)).or_default().insert(i);
            }
        }
        for ((epoch, term), who) in &leaders {
            if who.len() > 1 {
                violations.push(format!("raft epoch {epoch} term {term} had {} leaders", who.len()));
            }
        }

        for &i in &honest {
            let mut seen = BTreeSet::new();
            for block in self.validators[i].chain() {
                for batch in &block.batches {
                    if !seen.insert(batch.id().to_string()) {
                        violations.push(format!("n{i} committed batch {} twice", short(batch.id())));
                    }
                }
            }
        }

        if let Some(&first) = live_honest.first() {
            let head = self.validators[first].head().id();
            for &i in &live_honest[1..] {
                if self.validators[i].head().id() != head {
                    violations.push(format!("honest heads differ: n{first} and n{i}"));
                }
            }
            for &i in &live_honest {
                let on_chain: BTreeSet<&str> = self.validators[i]
                    .chain()
                    .iter()
                    .flat_map(|b| b.batches.iter().map(|x| x.id()))
                    .collect();
                let missing = self.accepted.iter().filter(|id| !on_chain.contains(id.as_str())).count();
                if missing > 0 {
                    violations.push(format!("n{i} is missing {missing} accepted batches"));
                }
            }
        }

        let reference = live_honest.first().or(honest.first()).copied().unwrap_or(0);
        let rates = self.validators[reference].win_rates();
        let mut flagged = Vec::new();
        let now_s = self.scenario.time_base_s + (end_ms / 1000) as i64;
        for r in &rates {
            if r.anomaly == "flagged" {
                if let Some(i) = self.index_of(&r.node_id) {
                    flagged.push(format!("n{i}"));
                }
                let _ = self.registry.flag(&r.node_id, "poet win rate", r.z_milli, now_s);
            }
        }

        let nodes = self
            .validators
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let rate = rates.iter().find(|r| r.node_id == *v.id());
                NodeReport {
                    label: format!("n{i}"),
                    node_id: v.id().clone(),
                    role: if self.down.contains(&i) { format!("{}-down", self.roles[i]) } else { self.roles[i].clone() },
                    height: v.head().num(),
                    head_id: v.head().id(),
                    blocks_published: v.stats.blocks_published,
                    fork_switches: v.stats.fork_switches,
                    view_changes: v.stats.view_changes,
                    refused_batches: v.stats.refused_batches,
                    wins: rate.map_or(0, |r| r.wins),
                    z_milli: rate.and_then(|r| r.z_milli),
                    anomaly: rate.map_or("normal".to_string(), |r| r.anomaly.clone()),
                }
            })
            .collect();

        let chain = self.validators[reference].chain();
        let mut engine_changes = Vec::new();
        let mut last: Option<Algorithm> = None;
        for b in chain {
            let alg = ConsensusPayload::decode(&b.header.consensus_payload).ok().and_then(|p| p.algorithm());
            if alg.is_some() && alg != last {
                engine_changes.push((b.num(), alg.map_or("", Algorithm::as_str).to_string()));
                last = alg;
            }
        }

        Report {
            scenario: self.scenario.name.clone(),
            seed: self.scenario.seed,
            simulated_ms: end_ms,
            nodes,
            messages: self.message_counts.clone(),
            messages_sent: self.sim.stats.sent,
            messages_dropped: self.sim.stats.dropped,
            batches_accepted: self.accepted.len() as u64,
            batches_committed: chain.iter().skip(1).map(|b| b.batches.len() as u64).sum(),
            readings_produced: self.devices.iter().map(|d| d.produced).sum(),
            engine_changes,
            raft_leader_terms: leaders.len() as u64,
            peering_rounds: self.peering_rounds,
            flagged,
            violations,
            trace_digest: self.sim.trace_digest(),
        }
    }
}

fn short(id: &str) -> &str {
    &id[..16.min(id.len())]
}

fn is_final_engine(block: &Block) -> bool {
    matches!(
        ConsensusPayload::decode(&block.header.consensus_payload),
        Ok(ConsensusPayload::Pbft { .. } | ConsensusPayload::Raft { .. })
    )
}

fn find_block(validators: &[Validator], id: &str) -> Option<Block> {
    validators.iter().find_map(|v| v.journal.block(id).cloned())
}

/// Runs a scenario file's contents end to end.
pub fn run_scenario(text: &str) -> Result<Report, ScenarioError> {
    let scenario = Scenario::from_toml(text)?;
    let mut harness = Harness::new(scenario)?;
    Ok(harness.run())
}
