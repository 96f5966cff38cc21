//! The validator: journal, consensus engine and peer traffic behind one
//! synchronous event handler. Transports feed it [`Input`]s and carry out
//! the [`Output`]s it returns.

use std::collections::{BTreeMap, BTreeSet};
use std::cmp::Ordering;
use std::sync::Arc;

use serde::Serialize;
use tracing::{debug, warn};

use crate::api::{ChainSnapshot, PeerEntry, StatusReport, WinRate};
use crate::consensus::pbft::{self, Byzantine, PbftEngine, PbftEvent, PbftMessage, PbftOutput, Target};
use crate::consensus::poet::{self, PoetEngine, PoetState};
use crate::consensus::raft::{self, RaftEngine, RaftEvent, RaftMessage, RaftOutput, TimerKind};
use crate::consensus::{max_faults, ztest_winrate, Algorithm, NodeId};
use crate::crypto::KeyPair;
use crate::family::TxnContext;
use crate::journal::{BatchSubmission, Completion, Consideration, ConsensusRules, Journal};
use crate::ledger::{Batch, Block};
use crate::network::gossip::SeenFilter;
use crate::network::peering::{PeerTable, DEFAULT_MAX_CONNECTIVITY, DEFAULT_MIN_CONNECTIVITY};
use crate::network::Message;

const DEFERRED_LIMIT: usize = 4096;
const SEEN_CAPACITY: usize = 16_384;

/// Misbehaviour a validator can be told to exhibit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fault {
    /// As pBFT leader, propose two conflicting blocks; as replica, vote for
    /// everything.
    Equivocate { accomplices: BTreeSet<NodeId> },
    /// Always claim a zero PoET wait.
    CheatWait,
}

#[derive(Debug, Clone)]
pub struct ValidatorConfig {
    pub key: KeyPair,
    /// Endpoint announced to peers.
    pub endpoint: String,
    pub mean_wait_ms: u64,
    pub pbft_timeout_ms: u64,
    pub max_batches_per_block: usize,
    /// Unix seconds at simulated/elapsed time zero.
    pub time_base_s: i64,
    pub seed: u64,
    pub min_connectivity: usize,
    pub max_connectivity: usize,
    pub fault: Option<Fault>,
}

impl ValidatorConfig {
    pub fn new(key: KeyPair) -> Self {
        Self {
            key,
            endpoint: String::new(),
            mean_wait_ms: 2_000,
            pbft_timeout_ms: 2_000,
            max_batches_per_block: 100,
            time_base_s: 0,
            seed: 0,
            min_connectivity: DEFAULT_MIN_CONNECTIVITY,
            max_connectivity: DEFAULT_MAX_CONNECTIVITY,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerId {
    Poet { epoch: u64, round: u64 },
    Pbft { epoch: u64, generation: u64 },
    Raft { epoch: u64, kind: TimerKind, generation: u64 },
}

/// Timers carry the incarnation that armed them; a restarted validator
/// ignores the ones it set before the crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timer {
    pub incarnation: u64,
    pub id: TimerId,
}

#[derive(Debug)]
pub enum Input {
    Message { from: NodeId, msg: Message },
    Timer(Timer),
    /// Batch from a local client.
    Submit(Batch),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Send { to: NodeId, msg: Message },
    Timer { after_ms: u64, timer: Timer },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidatorStats {
    pub blocks_published: u64,
    pub fork_switches: u64,
    pub rejected_blocks: u64,
    pub refused_batches: u64,
    pub view_changes: u64,
    pub equivocations_seen: u64,
    /// (epoch, term) pairs in which this node led a Raft engine.
    pub leader_terms: Vec<(u64, u64)>,
    /// Every block this node made part of its chain, in order.
    pub commits: Vec<(u64, String)>,
}

/// Consensus checks dispatched on the engine the parent state selects.
pub struct EngineRules;

impl ConsensusRules for EngineRules {
    fn verify(&self, block: &Block, algorithm: Algorithm, members: &[String]) -> Result<(), String> {
        match algorithm {
            Algorithm::PoetCft => poet::verify_block(block, members),
            Algorithm::Pbft => pbft::verify_block(block, members),
            Algorithm::Raft => {
                raft::verify_block(block)?;
                if members.contains(&block.header.signer_public_key) {
                    Ok(())
                } else {
                    Err("signer is not a validator".into())
                }
            }
        }
    }

    fn prefer(&self, a: &Block, b: &Block, algorithm: Algorithm) -> Ordering {
        match algorithm {
            Algorithm::PoetCft => poet::prefer(a, b),
            _ => Ordering::Equal,
        }
    }
}

enum Engine {
    /// No engine configured, or this node is not a member.
    Idle { epoch: u64 },
    Poet { epoch: u64, engine: PoetEngine },
    Pbft { epoch: u64, engine: PbftEngine },
    Raft { epoch: u64, engine: RaftEngine },
}

impl Engine {
    fn epoch(&self) -> u64 {
        match self {
            Engine::Idle { epoch }
            | Engine::Poet { epoch, .. }
            | Engine::Pbft { epoch, .. }
            | Engine::Raft { epoch, .. } => *epoch,
        }
    }

    fn algorithm(&self) -> Option<Algorithm> {
        match self {
            Engine::Idle { .. } => None,
            Engine::Poet { .. } => Some(Algorithm::PoetCft),
            Engine::Pbft { .. } => Some(Algorithm::Pbft),
            Engine::Raft { .. } => Some(Algorithm::Raft),
        }
    }
}

pub struct Validator {
    id: NodeId,
    cfg: ValidatorConfig,
    pub journal: Journal,
    engine: Engine,
    members: Vec<NodeId>,
    pub peers: PeerTable,
    seen: SeenFilter,
    deferred: Vec<(NodeId, Message)>,
    /// Announcements of decided pBFT blocks this node has not reached yet.
    decided_votes: BTreeMap<String, BTreeSet<NodeId>>,
    catch_up: Option<String>,
    incarnation: u64,
    now_ms: u64,
    chain: Vec<Arc<Block>>,
    pub stats: ValidatorStats,
}

impl Validator {
    /// `journal` must already hold genesis.
    pub fn new(cfg: ValidatorConfig, journal: Journal) -> Self {
        let id = cfg.key.public_key_hex().to_string();
        let peers = PeerTable::new(id.clone(), cfg.min_connectivity, cfg.max_connectivity);
        let mut v = Self {
            id,
            cfg,
            journal,
            engine: Engine::Idle { epoch: u64::MAX },
            members: Vec::new(),
            peers,
            seen: SeenFilter::new(SEEN_CAPACITY),
            deferred: Vec::new(),
            decided_votes: BTreeMap::new(),
            catch_up: None,
            incarnation: 0,
            now_ms: 0,
            chain: Vec::new(),
            stats: ValidatorStats::default(),
        };
        v.sync_chain();
        v
    }

    pub fn id(&self) -> &NodeId {
        &self.id
    }

    pub fn key(&self) -> &KeyPair {
        &self.cfg.key
    }

    pub fn algorithm(&self) -> Option<Algorithm> {
        self.engine.algorithm()
    }

    pub fn head(&self) -> &Block {
        self.chain.last().expect("journal holds genesis")
    }

    pub fn chain(&self) -> &[Arc<Block>] {
        &self.chain
    }

    pub fn is_byzantine(&self) -> bool {
        self.cfg.fault.is_some()
    }

    /// pBFT view, when a pBFT engine is active.
    pub fn pbft_view(&self) -> Option<u64> {
        match &self.engine {
            Engine::Pbft { engine, .. } => Some(engine.state.view),
            _ => None,
        }
    }

    /// Raft role and term, when a Raft engine is active.
    pub fn raft_role(&self) -> Option<(raft::Role, u64)> {
        match &self.engine {
            Engine::Raft { engine, .. } => Some((engine.role, engine.current_term)),
            _ => None,
        }
    }

    fn ctx(&self) -> TxnContext {
        TxnContext {
            clock_s: self.cfg.time_base_s + (self.now_ms / 1000) as i64,
        }
    }

    fn head_num(&self) -> u64 {
        self.head().num()
    }

    fn timer(&self, after_ms: u64, id: TimerId) -> Output {
        Output::Timer {
            after_ms,
            timer: Timer { incarnation: self.incarnation, id },
        }
    }

    /// Brings the engine up for the current head.
    pub fn start(&mut self, now_ms: u64) -> Vec<Output> {
        self.now_ms = now_ms;
        let mut out = Vec::new();
        self.sync_engine(&mut out);
        self.poet_round(&mut out);
        self.work_changed(&mut out);
        out
    }

    /// Resumes after a crash: durable state (chain, Raft term and log) is
    /// kept, timers and in-flight messages are gone.
    pub fn restart(&mut self, now_ms: u64) -> Vec<Output> {
        self.now_ms = now_ms;
        self.incarnation += 1;
        self.deferred.clear();
        let mut out = Vec::new();
        let seed = self.engine_seed(self.engine.epoch());
        let cheat = self.cfg.fault == Some(Fault::CheatWait);
        let mean = self.cfg.mean_wait_ms;
        match &mut self.engine {
            Engine::Idle { .. } => {}
            Engine::Poet { engine, .. } => *engine = PoetEngine::new(mean, seed, cheat),
            Engine::Pbft { epoch, engine } => {
                let epoch = *epoch;
                if let Some(generation) = engine.rearm() {
                    out.push(self.timer(self.cfg.pbft_timeout_ms, TimerId::Pbft { epoch, generation }));
                }
            }
            Engine::Raft { engine, .. } => {
                let o = engine.start();
                self.apply_raft(o, &mut out);
            }
        }
        self.poet_round(&mut out);
        self.work_changed(&mut out);
        out
    }

    pub fn handle(&mut self, now_ms: u64, input: Input) -> Vec<Output> {
        self.now_ms = now_ms;
        let mut out = Vec::new();
        match input {
            Input::Submit(batch) => self.on_batch(batch, None, &mut out),
            Input::Message { from, msg } => self.on_message(from, msg, &mut out),
            Input::Timer(timer) => {
                if timer.incarnation == self.incarnation {
                    self.on_timer(timer.id, &mut out);
                }
            }
        }
        out
    }

    /// One discovery step: learn from peers and try the next candidate.
    pub fn peering_round(&mut self) -> Vec<Output> {
        let mut out = Vec::new();
        for peer in self.peers.peers.keys() {
            out.push(Output::Send { to: peer.clone(), msg: Message::GetPeers });
        }
        if self.peers.is_under_connected() {
            if let Some((id, _)) = self.peers.next_candidate() {
                self.peers.attempted.insert(id.clone());
                out.push(Output::Send {
                    to: id,
                    msg: Message::Connect { endpoint: self.cfg.endpoint.clone() },
                });
            }
        }
        out
    }

    fn gossip(&self, msg: Message, except: Option<&str>, out: &mut Vec<Output>) {
        for peer in self.peers.peers.keys() {
            if Some(peer.as_str()) != except {
                out.push(Output::Send { to: peer.clone(), msg: msg.clone() });
            }
        }
    }

    fn to_members(&self, msg: Message, out: &mut Vec<Output>) {
        for m in &self.members {
            if *m != self.id {
                out.push(Output::Send { to: m.clone(), msg: msg.clone() });
            }
        }
    }

    fn on_message(&mut self, from: NodeId, msg: Message, out: &mut Vec<Output>) {
        match msg {
            Message::Connect { endpoint } => {
                let reply = if self.peers.accept(from.clone(), endpoint) {
                    Message::ConnectAccepted { endpoint: self.cfg.endpoint.clone() }
                } else {
                    Message::ConnectRefused
                };
                out.push(Output::Send { to: from, msg: reply });
            }
            Message::ConnectAccepted { endpoint } => {
                self.peers.learn(from.clone(), endpoint.clone());
                self.peers.add_peer(from, endpoint);
            }
            Message::ConnectRefused => {}
            Message::GetPeers => {
                let peers = self.peers.peer_list();
                out.push(Output::Send { to: from, msg: Message::Peers { peers } });
            }
            Message::Peers { peers } => {
                for (id, endpoint) in peers {
                    self.peers.learn(id, endpoint);
                }
            }
            Message::GossipBatch { batch } => self.on_batch(batch, Some(from), out),
            Message::GossipBlock { block } => self.on_block(block, from, out),
            Message::BlockRequest { block_id } => {
                if let Some(block) = self.journal.block(&block_id) {
                    out.push(Output::Send { to: from, msg: Message::GossipBlock { block: block.clone() } });
                }
            }
            Message::Pbft { epoch, msg } => self.on_pbft(from, epoch, msg, out),
            Message::Raft { epoch, msg } => self.on_raft(from, epoch, msg, out),
        }
    }

    fn on_timer(&mut self, id: TimerId, out: &mut Vec<Output>) {
        let current = self.engine.epoch();
        match (id, &mut self.engine) {
            (TimerId::Poet { epoch, round }, Engine::Poet { engine, .. }) if epoch == current => {
                engine.on_timer(round);
                self.try_publish_poet(out);
            }
            (TimerId::Pbft { epoch, generation }, Engine::Pbft { engine, .. }) if epoch == current => {
                let o = engine.step(PbftEvent::Timeout { generation });
                self.apply_pbft(o, out);
            }
            (TimerId::Raft { epoch, kind, generation }, Engine::Raft { engine, .. }) if epoch == current => {
                let o = engine.step(RaftEvent::Timer { kind, generation });
                self.apply_raft(o, out);
            }
            _ => {}
        }
    }

    fn on_batch(&mut self, batch: Batch, from: Option<NodeId>, out: &mut Vec<Output>) {
        if !self.seen.first_sight(batch.id()) {
            return;
        }
        let ctx = self.ctx();
        match self.journal.admit_batch(batch.clone(), &ctx) {
            BatchSubmission::Queued => {
                self.gossip(Message::GossipBatch { batch }, from.as_deref(), out);
                self.work_changed(out);
            }
            BatchSubmission::Duplicate => {}
            BatchSubmission::Rejected(_) | BatchSubmission::Unexecutable(_) => {
                self.stats.refused_batches += 1;
            }
        }
    }

    fn on_block(&mut self, block: Block, from: NodeId, out: &mut Vec<Output>) {
        match self.journal.submit_block(block) {
            Completion::Routed(blocks) => {
                for b in blocks {
                    self.route_block(b, &from, out);
                }
            }
            Completion::Pending { missing } => {
                out.push(Output::Send { to: from, msg: Message::BlockRequest { block_id: missing } });
            }
            Completion::Duplicate => {}
            Completion::Rejected(_) => self.stats.rejected_blocks += 1,
        }
    }

    /// Algorithm governing the child of `parent_id`.
    fn algorithm_after(&self, parent_id: &str) -> Option<Algorithm> {
        let parent = self.journal.block(parent_id)?;
        let root = crate::trie::StateRoot::from_hex(&parent.header.state_root_hash).ok()?;
        self.journal.consensus_settings(root).0
    }

    fn route_block(&mut self, block: Block, from: &str, out: &mut Vec<Output>) {
        let ctx = self.ctx();
        let id = block.id();
        match self.algorithm_after(block.previous_id()) {
            Some(Algorithm::PoetCft) => match self.journal.consider(&block, &EngineRules, &ctx) {
                Ok(Consideration::Extended) | Ok(Consideration::ForkSwitched { .. }) => {
                    self.seen.first_sight(&id);
                    self.gossip(Message::GossipBlock { block }, Some(from), out);
                    self.on_head_changed(out);
                }
                Ok(Consideration::StoredSideChain) => {
                    if self.seen.first_sight(&id) {
                        self.gossip(Message::GossipBlock { block }, Some(from), out);
                    }
                }
                Ok(Consideration::Rejected(r)) => {
                    debug!(block = %id, reason = %r, "rejected block");
                    self.stats.rejected_blocks += 1;
                }
                Err(e) => warn!(block = %id, error = %e, "journal error"),
            },
            Some(_) => {
                // agreement engines commit through their own protocol
                if self.journal.validate(&block, &EngineRules, &ctx).is_err() {
                    self.stats.rejected_blocks += 1;
                    return;
                }
                if let Engine::Pbft { engine, .. } = &mut self.engine {
                    let o = engine.step(PbftEvent::BlockBody(block));
                    self.apply_pbft(o, out);
                }
                self.try_catch_up(out);
            }
            None => self.stats.rejected_blocks += 1,
        }
    }

    fn defer(&mut self, from: NodeId, msg: Message) {
        if self.deferred.len() < DEFERRED_LIMIT {
            self.deferred.push((from, msg));
        }
    }

    fn replay_deferred(&mut self, out: &mut Vec<Output>) {
        let pending = std::mem::take(&mut self.deferred);
        for (from, msg) in pending {
            self.on_message(from, msg, out);
        }
    }

    fn on_pbft(&mut self, from: NodeId, epoch: u64, msg: PbftMessage, out: &mut Vec<Output>) {
        let current = self.engine.epoch();
        let sequence = match &self.engine {
            Engine::Pbft { engine, .. } if epoch == current => Some(engine.state.sequence),
            _ => None,
        };
        if let PbftMessage::Decided { sequence: s, block } = &msg {
            if sequence != Some(*s) {
                self.on_remote_decision(from, block.clone(), out);
                return;
            }
        }
        let Some(sequence) = sequence else {
            if epoch > self.head_num() {
                self.defer(from, Message::Pbft { epoch, msg });
            }
            return;
        };
        if let PbftMessage::PrePrepare { sequence: s, block, .. } = &msg {
            if *s > sequence {
                self.defer(from, Message::Pbft { epoch, msg });
                return;
            }
            if *s == sequence {
                let ctx = self.ctx();
                let valid = block.previous_id() == self.head().id()
                    && self.journal.validate(block, &EngineRules, &ctx).is_ok();
                if !valid && !self.is_byzantine() {
                    self.stats.rejected_blocks += 1;
                    return;
                }
            }
        }
        if let PbftMessage::Decided { block, .. } = &msg {
            let ctx = self.ctx();
            if self.journal.validate(block, &EngineRules, &ctx).is_err() {
                return;
            }
        }
        if let Engine::Pbft { engine, .. } = &mut self.engine {
            let o = engine.step(PbftEvent::Message { from, msg });
            self.apply_pbft(o, out);
        }
    }

    /// A block announced as decided by f + 1 members was committed by at
    /// least one honest node, so it and its ancestors are safe to adopt.
    fn on_remote_decision(&mut self, from: NodeId, block: Block, out: &mut Vec<Output>) {
        if block.num() <= self.head_num() || !self.members.contains(&from) {
            return;
        }
        let id = block.id();
        let votes = self.decided_votes.entry(id.clone()).or_default();
        votes.insert(from.clone());
        let needed = max_faults(self.members.len() as u64) as usize + 1;
        if votes.len() < needed {
            return;
        }
        let better = match &self.catch_up {
            Some(cur) => self.journal.block(cur).map_or(true, |b| b.num() < block.num()),
            None => true,
        };
        if better {
            self.catch_up = Some(id);
        }
        self.on_block(block, from, out);
        self.try_catch_up(out);
    }

    fn try_catch_up(&mut self, out: &mut Vec<Output>) {
        let Some(target) = self.catch_up.clone() else { return };
        if self.journal.store.contains(&target) {
            self.catch_up = None;
            return;
        }
        if !self.journal.is_known(&target) {
            return;
        }
        self.catch_up = None;
        match self.journal.commit(&target) {
            Ok(_) => self.after_commit(out),
            Err(e) => warn!(block = %target, error = %e, "catch-up commit failed"),
        }
    }

    fn apply_pbft(&mut self, o: PbftOutput, out: &mut Vec<Output>) {
        let Engine::Pbft { epoch, engine } = &self.engine else { return };
        let epoch = *epoch;
        self.stats.equivocations_seen = engine.equivocations_seen;
        for (target, msg) in o.messages {
            let msg = Message::Pbft { epoch, msg };
            match target {
                Target::All => self.to_members(msg, out),
                Target::Node(to) if to != self.id => out.push(Output::Send { to, msg }),
                Target::Node(_) => {}
            }
        }
        if let Some(generation) = o.arm_timer {
            out.push(self.timer(self.cfg.pbft_timeout_ms, TimerId::Pbft { epoch, generation }));
        }
        if o.entered_view.is_some() {
            self.stats.view_changes += 1;
        }
        if let Some(block) = o.commit {
            self.commit_agreed(block, epoch, out);
        }
        self.try_propose_pbft(out);
    }

    fn commit_agreed(&mut self, block: Block, epoch: u64, out: &mut Vec<Output>) {
        let ctx = self.ctx();
        let id = block.id();
        if block.previous_id() != self.head().id() {
            warn!(block = %id, "agreed block does not extend the head");
            return;
        }
        if let Err(r) = self.journal.validate(&block, &EngineRules, &ctx) {
            warn!(block = %id, reason = %r, "agreed block is invalid");
            return;
        }
        if let Err(e) = self.journal.commit(&id) {
            warn!(block = %id, error = %e, "commit failed");
            return;
        }
        let sequence = block.num();
        self.to_members(
            Message::Pbft { epoch, msg: PbftMessage::Decided { sequence, block } },
            out,
        );
        self.after_commit(out);
    }

    fn try_propose_pbft(&mut self, out: &mut Vec<Output>) {
        let next = self.head_num() + 1;
        let (payload, epoch) = match &self.engine {
            Engine::Pbft { engine, epoch } if engine.wants_proposal() && engine.state.sequence == next => {
                (engine.payload(), *epoch)
            }
            _ => return,
        };
        if self.journal.pending.batch_count() == 0 {
            return;
        }
        let ctx = self.ctx();
        let head_id = self.head().id();
        let built = match self.journal.build_block(
            &head_id,
            payload.encode(),
            &self.cfg.key,
            &ctx,
            self.cfg.max_batches_per_block,
        ) {
            Ok(b) => b,
            Err(e) => {
                warn!(error = %e, "block build failed");
                return;
            }
        };
        if built.block.batches.is_empty() {
            return;
        }
        let conflicting = match &self.cfg.fault {
            Some(Fault::Equivocate { .. }) => {
                let mut other = built.block.batches.clone();
                other.reverse();
                if other.len() < 2 {
                    other.clear();
                }
                self.journal
                    .build_with(&head_id, other, payload.encode(), &self.cfg.key, &ctx)
                    .ok()
                    .map(|b| b.block)
            }
            _ => None,
        };
        self.stats.blocks_published += 1;
        if let Engine::Pbft { engine, .. } = &mut self.engine {
            let o = engine.step(PbftEvent::Propose { block: built.block, conflicting });
            debug!(epoch, "proposed");
            self.apply_pbft(o, out);
        }
    }

    fn on_raft(&mut self, from: NodeId, epoch: u64, mut msg: RaftMessage, out: &mut Vec<Output>) {
        let current = self.engine.epoch();
        if !matches!(self.engine, Engine::Raft { .. }) || epoch != current {
            if epoch > self.head_num() {
                self.defer(from, Message::Raft { epoch, msg });
            }
            return;
        }
        if let RaftMessage::AppendEntries { entries, .. } = &mut msg {
            let ctx = self.ctx();
            let valid = entries
                .iter()
                .take_while(|e| self.journal.validate(&e.block, &EngineRules, &ctx).is_ok())
                .count();
            entries.truncate(valid);
        }
        if let Engine::Raft { engine, .. } = &mut self.engine {
            let o = engine.step(RaftEvent::Message { from, msg });
            self.apply_raft(o, out);
        }
    }

    fn apply_raft(&mut self, o: RaftOutput, out: &mut Vec<Output>) {
        let epoch = self.engine.epoch();
        for (to, msg) in o.messages {
            out.push(Output::Send { to, msg: Message::Raft { epoch, msg } });
        }
        for t in o.timers {
            out.push(self.timer(t.after_ms, TimerId::Raft { epoch, kind: t.kind, generation: t.generation }));
        }
        if let Some(term) = o.became_leader {
            self.stats.leader_terms.push((epoch, term));
        }
        let mut committed = false;
        for block in o.committed {
            let id = block.id();
            if self.journal.store.contains(&id) {
                continue;
            }
            let ctx = self.ctx();
            if let Err(r) = self.journal.validate(&block, &EngineRules, &ctx) {
                warn!(block = %id, reason = %r, "committed entry is invalid");
                break;
            }
            if let Err(e) = self.journal.commit(&id) {
                warn!(block = %id, error = %e, "commit failed");
                break;
            }
            committed = true;
        }
        if committed {
            self.after_commit(out);
        }
        self.try_propose_raft(out);
    }

    fn try_propose_raft(&mut self, out: &mut Vec<Output>) {
        let (parent_id, payload, filler) = match &self.engine {
            Engine::Raft { engine, .. } if engine.wants_proposal() => (
                engine.proposal_parent().map(Block::id),
                engine.payload(),
                engine.needs_filler(),
            ),
            _ => return,
        };
        if !filler && self.journal.pending.batch_count() == 0 {
            return;
        }
        let parent_id = parent_id.unwrap_or_else(|| self.head().id());
        let ctx = self.ctx();
        let built = match self.journal.build_block(
            &parent_id,
            payload.encode(),
            &self.cfg.key,
            &ctx,
            self.cfg.max_batches_per_block,
        ) {
            Ok(b) => b,
            Err(e) => {
                warn!(error = %e, "block build failed");
                return;
            }
        };
        if built.block.batches.is_empty() && !filler {
            return;
        }
        self.stats.blocks_published += 1;
        if let Engine::Raft { engine, .. } = &mut self.engine {
            let o = engine.step(RaftEvent::Propose(built.block));
            self.apply_raft(o, out);
        }
    }

    fn poet_round(&mut self, out: &mut Vec<Output>) {
        let head = self.head_num();
        let epoch = self.engine.epoch();
        if let Engine::Poet { engine, .. } = &mut self.engine {
            if let Some(t) = engine.on_new_head(head) {
                out.push(self.timer(t.after_ms, TimerId::Poet { epoch, round: t.round }));
            }
        }
    }

    fn try_publish_poet(&mut self, out: &mut Vec<Output>) {
        let head = self.head_num();
        let payload = match &self.engine {
            Engine::Poet { engine, .. } if engine.may_publish(head) => engine.payload(),
            _ => return,
        };
        let Some(payload) = payload else { return };
        if self.journal.pending.batch_count() == 0 {
            return;
        }
        let ctx = self.ctx();
        let head_id = self.head().id();
        let built = match self.journal.build_block(
            &head_id,
            payload.encode(),
            &self.cfg.key,
            &ctx,
            self.cfg.max_batches_per_block,
        ) {
            Ok(b) => b,
            Err(e) => {
                warn!(error = %e, "block build failed");
                return;
            }
        };
        if built.block.batches.is_empty() {
            return;
        }
        let block = built.block;
        let id = block.id();
        if let Err(e) = self.journal.commit(&id) {
            warn!(block = %id, error = %e, "commit failed");
            return;
        }
        self.stats.blocks_published += 1;
        self.seen.first_sight(&id);
        self.gossip(Message::GossipBlock { block }, None, out);
        self.on_head_changed(out);
    }

    /// New pending work or a new head: give the engine a chance to act.
    fn work_changed(&mut self, out: &mut Vec<Output>) {
        let pending = self.journal.pending.batch_count() > 0;
        match &mut self.engine {
            Engine::Idle { .. } => {}
            Engine::Poet { .. } => self.try_publish_poet(out),
            Engine::Pbft { engine, epoch } => {
                let epoch = *epoch;
                if let Some(generation) = engine.set_work_pending(pending) {
                    out.push(self.timer(self.cfg.pbft_timeout_ms, TimerId::Pbft { epoch, generation }));
                }
                self.try_propose_pbft(out);
            }
            Engine::Raft { .. } => self.try_propose_raft(out),
        }
    }

    fn after_commit(&mut self, out: &mut Vec<Output>) {
        self.sync_chain();
        let head = self.head_num();
        let pending = self.journal.pending.batch_count() > 0;
        if let Engine::Pbft { engine, .. } = &mut self.engine {
            // the flag must be current before advancing re-arms the timer
            engine.set_work_pending(pending);
            let o = engine.advance(head);
            self.apply_pbft(o, out);
        }
        self.on_head_changed(out);
    }

    fn on_head_changed(&mut self, out: &mut Vec<Output>) {
        self.sync_chain();
        let head = self.head_num();
        let journal = &self.journal;
        self.decided_votes
            .retain(|id, _| journal.block(id).map_or(true, |b| b.num() > head));
        let before = self.engine.epoch();
        self.sync_engine(out);
        self.poet_round(out);
        if self.engine.epoch() != before || !self.deferred.is_empty() {
            self.replay_deferred(out);
        }
        self.work_changed(out);
    }

    fn engine_seed(&self, epoch: u64) -> u64 {
        self.cfg
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(epoch)
            .wrapping_add(self.incarnation << 32)
    }

    /// Switches engines when the head state selects a different algorithm or
    /// member set, or when the head fell below the active engine's start.
    fn sync_engine(&mut self, out: &mut Vec<Output>) {
        let head = self.head().clone();
        let Ok(root) = crate::trie::StateRoot::from_hex(&head.header.state_root_hash) else {
            return;
        };
        let (algorithm, members) = self.journal.consensus_settings(root);
        let next = head.num() + 1;
        let same = self.engine.algorithm() == algorithm
            && members == self.members
            && self.engine.epoch() <= next;
        if same {
            return;
        }
        self.members = members;
        let epoch = next;
        let is_member = self.members.contains(&self.id);
        let seed = self.engine_seed(epoch);
        self.engine = match algorithm {
            Some(Algorithm::PoetCft) if is_member => Engine::Poet {
                epoch,
                engine: PoetEngine::new(self.cfg.mean_wait_ms, seed, self.cfg.fault == Some(Fault::CheatWait)),
            },
            Some(Algorithm::Pbft) if is_member => {
                let byzantine = match &self.cfg.fault {
                    Some(Fault::Equivocate { accomplices }) => Some(Byzantine { accomplices: accomplices.clone() }),
                    _ => None,
                };
                Engine::Pbft {
                    epoch,
                    engine: PbftEngine::new(self.id.clone(), self.members.clone(), epoch, byzantine),
                }
            }
            Some(Algorithm::Raft) if is_member => Engine::Raft {
                epoch,
                engine: RaftEngine::new(self.id.clone(), self.members.clone(), head.num(), seed),
            },
            _ => Engine::Idle { epoch },
        };
        debug!(node = %self.id, epoch, algorithm = ?algorithm, "engine switch");
        if let Engine::Raft { engine, .. } = &mut self.engine {
            let o = engine.start();
            self.apply_raft(o, out);
        }
    }

    /// Mirrors the stored chain as shared blocks and records new commits.
    fn sync_chain(&mut self) {
        let Some(height) = self.journal.store.height() else { return };
        let mut keep = self.chain.len().min(height as usize + 1);
        while keep > 0 {
            let h = keep as u64 - 1;
            let on_chain = self.journal.store.by_num(h).is_some_and(|b| b.id() == self.chain[h as usize].id());
            if on_chain {
                break;
            }
            keep -= 1;
        }
        if keep < self.chain.len() {
            self.stats.fork_switches += 1;
            self.chain.truncate(keep);
        }
        for h in keep as u64..=height {
            let block = self.journal.store.by_num(h).expect("height within store").clone();
            self.stats.commits.push((h, block.id()));
            self.chain.push(Arc::new(block));
        }
    }

    pub fn win_rates(&self) -> Vec<WinRate> {
        let state = PoetState::from_chain(self.cfg.mean_wait_ms, self.chain.iter().map(|b| b.as_ref()));
        let n = self.members.len() as u64;
        self.members
            .iter()
            .map(|m| {
                let z = ztest_winrate(state.wins_of(m), state.rounds_observed, n).ok();
                WinRate {
                    node_id: m.clone(),
                    wins: state.wins_of(m),
                    rounds: state.rounds_observed,
                    z_milli: z.map(|z| (z.z * 1000.0).round() as i64),
                    anomaly: if z.is_some_and(|z| z.flagged) { "flagged" } else { "normal" }.to_string(),
                }
            })
            .collect()
    }

    pub fn status(&self) -> StatusReport {
        StatusReport {
            node_id: self.id.clone(),
            algorithm: self.algorithm().map_or("none", Algorithm::as_str).to_string(),
            head_id: self.head().id(),
            height: self.head_num(),
            pending_batches: self.journal.pending.batch_count() as u64,
            peer_count: self.peers.peers.len() as u64,
            win_rates: self.win_rates(),
        }
    }

    pub fn snapshot(&self) -> ChainSnapshot {
        let head = self.head();
        ChainSnapshot {
            blocks: self.chain.clone(),
            trie: self.journal.trie().clone(),
            state_root: crate::trie::StateRoot::from_hex(&head.header.state_root_hash)
                .unwrap_or_else(|_| self.journal.trie().empty_root()),
            peers: self
                .peers
                .peer_list()
                .into_iter()
                .map(|(node_id, endpoint)| PeerEntry { node_id, endpoint })
                .collect(),
            status: self.status(),
        }
    }
}
