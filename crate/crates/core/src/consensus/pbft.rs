//! Simplified three-phase pBFT.
//!
//! The leader of view `v` is `members[v mod n]`. A block is proposed with a
//! pre-prepare, backups answer with prepares, and a replica that holds the
//! pre-prepare plus `2f` matching prepares from backups is *prepared*: it
//! locks the digest for that sequence and broadcasts a commit. `2f + 1`
//! matching commits commit the block. Checkpoints are omitted; view change is
//! leader rotation on timeout, with the highest-view lock carried into the
//! new view by the view-change messages.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{max_faults, view_leader, ConsensusPayload, NodeId};
use crate::ledger::Block;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PbftPhase {
    Idle,
    PrePrepared,
    Prepared,
    Committed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum PbftMessage {
    PrePrepare {
        view: u64,
        sequence: u64,
        block: Block,
    },
    Prepare {
        view: u64,
        sequence: u64,
        digest: String,
    },
    Commit {
        view: u64,
        sequence: u64,
        digest: String,
    },
    ViewChange {
        new_view: u64,
        sequence: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        locked: Option<Lock>,
    },
    /// Announces a committed block so lagging replicas can catch up; `f + 1`
    /// matching announcements include at least one honest replica.
    Decided {
        sequence: u64,
        block: Block,
    },
}

impl PbftMessage {
    pub fn sequence(&self) -> u64 {
        match self {
            PbftMessage::PrePrepare { sequence, .. }
            | PbftMessage::Prepare { sequence, .. }
            | PbftMessage::Commit { sequence, .. }
            | PbftMessage::ViewChange { sequence, .. }
            | PbftMessage::Decided { sequence, .. } => *sequence,
        }
    }
}

/// A digest this replica prepared, with the view it prepared it in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lock {
    pub view: u64,
    pub sequence: u64,
    pub block: Block,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// Every other member.
    All,
    Node(NodeId),
}

#[derive(Debug)]
pub enum PbftEvent {
    Message { from: NodeId, msg: PbftMessage },
    Timeout { generation: u64 },
    /// Block built by the leader for the current sequence; a Byzantine
    /// leader may pass a second, conflicting block.
    Propose { block: Block, conflicting: Option<Block> },
    /// A block body learned outside the protocol (gossip).
    BlockBody(Block),
}

#[derive(Debug, Default)]
pub struct PbftOutput {
    pub messages: Vec<(Target, PbftMessage)>,
    pub commit: Option<Block>,
    /// Arm a timeout with this generation after `timeout_ms`.
    pub arm_timer: Option<u64>,
    pub entered_view: Option<u64>,
}

#[derive(Debug, Clone, Default)]
pub struct MessageLog {
    pub pre_prepares: BTreeMap<(u64, u64), Block>,
    pub prepares: BTreeMap<(u64, u64, String), BTreeSet<NodeId>>,
    pub commits: BTreeMap<(u64, u64, String), BTreeSet<NodeId>>,
    pub view_changes: BTreeMap<u64, BTreeMap<NodeId, Option<Lock>>>,
    pub decided: BTreeMap<(u64, String), BTreeSet<NodeId>>,
}

#[derive(Debug, Clone)]
pub struct PbftState {
    pub view: u64,
    pub sequence: u64,
    pub phase: PbftPhase,
    pub log: MessageLog,
}

/// Misbehaviour injected into a node for fault scenarios.
#[derive(Debug, Clone, Default)]
pub struct Byzantine {
    /// Colluding nodes, which receive both halves of an equivocation.
    pub accomplices: BTreeSet<NodeId>,
}

#[derive(Debug)]
pub struct PbftEngine {
    pub state: PbftState,
    id: NodeId,
    members: Vec<NodeId>,
    f: usize,
    byzantine: Option<Byzantine>,
    lock: Option<Lock>,
    view_changing: Option<u64>,
    bodies: BTreeMap<String, Block>,
    work_pending: bool,
    timer_armed: bool,
    generation: u64,
    pub equivocations_seen: u64,
    pub view_changes: u64,
}

impl PbftEngine {
    /// `members` must be sorted; `sequence` is the first block number to agree on.
    pub fn new(id: NodeId, members: Vec<NodeId>, sequence: u64, byzantine: Option<Byzantine>) -> Self {
        let f = max_faults(members.len() as u64) as usize;
        Self {
            state: PbftState {
                view: 0,
                sequence,
                phase: PbftPhase::Idle,
                log: MessageLog::default(),
            },
            id,
            members,
            f,
            byzantine,
            lock: None,
            view_changing: None,
            bodies: BTreeMap::new(),
            work_pending: false,
            timer_armed: false,
            generation: 0,
            equivocations_seen: 0,
            view_changes: 0,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn leader(&self) -> &NodeId {
        view_leader(&self.members, self.state.view)
    }

    pub fn is_leader(&self) -> bool {
        *self.leader() == self.id
    }

    pub fn is_byzantine(&self) -> bool {
        self.byzantine.is_some()
    }

    /// True when the validator should build a block and feed it back as
    /// [`PbftEvent::Propose`].
    pub fn wants_proposal(&self) -> bool {
        self.is_leader()
            && self.view_changing.is_none()
            && self.state.phase == PbftPhase::Idle
            && !self.state.log.pre_prepares.contains_key(&(self.state.view, self.state.sequence))
    }

    /// Re-arms the view-change timer after the node lost its timers.
    pub fn rearm(&mut self) -> Option<u64> {
        self.generation += 1;
        self.timer_armed = false;
        self.maybe_arm()
    }

    pub fn payload(&self) -> ConsensusPayload {
        ConsensusPayload::Pbft {
            view: self.state.view,
            sequence: self.state.sequence,
        }
    }

    /// Tells the engine whether batches are waiting, which keeps the
    /// view-change timer running.
    pub fn set_work_pending(&mut self, pending: bool) -> Option<u64> {
        self.work_pending = pending;
        self.maybe_arm()
    }

    /// Moves to the next sequence after the validator committed `committed_num`.
    pub fn advance(&mut self, committed_num: u64) -> PbftOutput {
        let mut out = PbftOutput::default();
        if committed_num < self.state.sequence {
            return out;
        }
        self.state.sequence = committed_num + 1;
        self.state.phase = PbftPhase::Idle;
        let seq = self.state.sequence;
        self.state.log.pre_prepares.retain(|(_, s), _| *s >= seq);
        self.state.log.prepares.retain(|(_, s, _), _| *s >= seq);
        self.state.log.commits.retain(|(_, s, _), _| *s >= seq);
        self.state.log.decided.retain(|(s, _), _| *s >= seq);
        self.bodies.retain(|_, b| b.num() >= seq);
        if self.lock.as_ref().is_some_and(|l| l.sequence < seq) {
            self.lock = None;
        }
        self.generation += 1;
        self.timer_armed = false;
        // commits for the new sequence may already be in the log
        self.evaluate(&mut out);
        out.arm_timer = out.arm_timer.or(self.maybe_arm());
        out
    }

    pub fn step(&mut self, event: PbftEvent) -> PbftOutput {
        let mut out = PbftOutput::default();
        match event {
            PbftEvent::Message { from, msg } => self.on_message(from, msg, &mut out),
            PbftEvent::Timeout { generation } => {
                if generation == self.generation {
                    self.timer_armed = false;
                    self.start_view_change(&mut out);
                }
            }
            PbftEvent::Propose { block, conflicting } => self.on_propose(block, conflicting, &mut out),
            PbftEvent::BlockBody(block) => {
                if block.num() == self.state.sequence {
                    self.bodies.insert(block.id(), block);
                    self.evaluate(&mut out);
                }
            }
        }
        if out.arm_timer.is_none() {
            out.arm_timer = self.maybe_arm();
        }
        out
    }

    fn maybe_arm(&mut self) -> Option<u64> {
        let busy = self.work_pending
            || matches!(self.state.phase, PbftPhase::PrePrepared | PbftPhase::Prepared)
            || self.view_changing.is_some();
        if busy && !self.timer_armed {
            self.timer_armed = true;
            Some(self.generation)
        } else {
            None
        }
    }

    fn others(&self) -> impl Iterator<Item = &NodeId> {
        self.members.iter().filter(move |m| **m != self.id)
    }

    fn on_propose(&mut self, block: Block, conflicting: Option<Block>, out: &mut PbftOutput) {
        if !self.wants_proposal() || block.num() != self.state.sequence {
            return;
        }
        let (view, sequence) = (self.state.view, self.state.sequence);
        self.state.log.pre_prepares.insert((view, sequence), block.clone());
        self.state.phase = PbftPhase::PrePrepared;
        match (&self.byzantine, conflicting) {
            (Some(byz), Some(other)) => {
                let honest: Vec<NodeId> = self.others().filter(|m| !byz.accomplices.contains(*m)).cloned().collect();
                let accomplices: Vec<NodeId> = self.others().filter(|m| byz.accomplices.contains(*m)).cloned().collect();
                // one honest replica each sees B1, B2, or nothing
                for (i, node) in honest.iter().enumerate() {
                    let b = match i % 3 {
                        0 => block.clone(),
                        1 => other.clone(),
                        _ => continue,
                    };
                    out.messages.push((Target::Node(node.clone()), PbftMessage::PrePrepare { view, sequence, block: b }));
                }
                for node in accomplices {
                    for b in [&block, &other] {
                        out.messages.push((Target::Node(node.clone()), PbftMessage::PrePrepare { view, sequence, block: b.clone() }));
                    }
                }
                for b in [&block, &other] {
                    self.vote_everything(view, sequence, &b.id(), out);
                }
            }
            _ => out.messages.push((Target::All, PbftMessage::PrePrepare { view, sequence, block })),
        }
    }

    /// Byzantine replicas prepare and commit whatever they see.
    fn vote_everything(&mut self, view: u64, sequence: u64, digest: &str, out: &mut PbftOutput) {
        let d = digest.to_string();
        out.messages.push((Target::All, PbftMessage::Prepare { view, sequence, digest: d.clone() }));
        out.messages.push((Target::All, PbftMessage::Commit { view, sequence, digest: d }));
    }

    fn on_message(&mut self, from: NodeId, msg: PbftMessage, out: &mut PbftOutput) {
        if from == self.id || !self.members.contains(&from) {
            return;
        }
        match msg {
            PbftMessage::PrePrepare { view, sequence, block } => {
                if self.is_byzantine() {
                    self.vote_everything(view, sequence, &block.id(), out);
                    return;
                }
                if view != self.state.view
                    || self.view_changing.is_some()
                    || sequence != self.state.sequence
                    || *view_leader(&self.members, view) != from
                    || block.num() != sequence
                {
                    return;
                }
                let payload_ok = matches!(
                    ConsensusPayload::decode(&block.header.consensus_payload),
                    Ok(ConsensusPayload::Pbft { view: pv, sequence: ps }) if pv <= view && ps == sequence
                );
                if !payload_ok {
                    return;
                }
                let digest = block.id();
                if let Some(existing) = self.state.log.pre_prepares.get(&(view, sequence)) {
                    if existing.id() != digest {
                        self.equivocations_seen += 1;
                    }
                    return;
                }
                if self.lock.as_ref().is_some_and(|l| l.sequence == sequence && l.block.id() != digest) {
                    return;
                }
                self.state.log.pre_prepares.insert((view, sequence), block);
                if self.state.phase == PbftPhase::Idle {
                    self.state.phase = PbftPhase::PrePrepared;
                }
                self.state
                    .log
                    .prepares
                    .entry((view, sequence, digest.clone()))
                    .or_default()
                    .insert(self.id.clone());
                out.messages.push((Target::All, PbftMessage::Prepare { view, sequence, digest }));
                self.evaluate(out);
            }
            PbftMessage::Prepare { view, sequence, digest } => {
                if sequence < self.state.sequence || view < self.state.view {
                    return;
                }
                // the view leader's own vote is its pre-prepare
                if *view_leader(&self.members, view) == from {
                    return;
                }
                self.state.log.prepares.entry((view, sequence, digest)).or_default().insert(from);
                self.evaluate(out);
            }
            PbftMessage::Commit { view, sequence, digest } => {
                if sequence < self.state.sequence {
                    return;
                }
                self.state.log.commits.entry((view, sequence, digest)).or_default().insert(from);
                self.evaluate(out);
            }
            PbftMessage::Decided { sequence, block } => {
                if sequence < self.state.sequence || block.num() != sequence {
                    return;
                }
                let digest = block.id();
                self.bodies.insert(digest.clone(), block);
                self.state.log.decided.entry((sequence, digest)).or_default().insert(from);
                self.check_commit(out);
            }
            PbftMessage::ViewChange { new_view, locked, .. } => {
                if new_view <= self.state.view {
                    return;
                }
                self.state.log.view_changes.entry(new_view).or_default().insert(from, locked);
                self.evaluate_view_change(new_view, out);
            }
        }
    }

    fn evaluate(&mut self, out: &mut PbftOutput) {
        if self.is_byzantine() {
            // Byzantine nodes still follow commit certificates for their own chain.
            self.check_commit(out);
            return;
        }
        let (view, seq) = (self.state.view, self.state.sequence);
        if self.state.phase == PbftPhase::PrePrepared && self.view_changing.is_none() {
            if let Some(block) = self.state.log.pre_prepares.get(&(view, seq)).cloned() {
                let digest = block.id();
                let prepares = self
                    .state
                    .log
                    .prepares
                    .get(&(view, seq, digest.clone()))
                    .map_or(0, |s| s.iter().filter(|m| *m != view_leader(&self.members, view)).count());
                if prepares >= 2 * self.f {
                    self.state.phase = PbftPhase::Prepared;
                    self.lock = Some(Lock { view, sequence: seq, block });
                    self.state
                        .log
                        .commits
                        .entry((view, seq, digest.clone()))
                        .or_default()
                        .insert(self.id.clone());
                    out.messages.push((Target::All, PbftMessage::Commit { view, sequence: seq, digest }));
                }
            }
        }
        self.check_commit(out);
    }

    fn check_commit(&mut self, out: &mut PbftOutput) {
        if self.state.phase == PbftPhase::Committed || out.commit.is_some() {
            return;
        }
        let seq = self.state.sequence;
        let quorum = 2 * self.f + 1;
        let mut certified: Vec<String> = self
            .state
            .log
            .commits
            .iter()
            .filter(|((_, s, _), senders)| *s == seq && senders.len() >= quorum)
            .map(|((_, _, d), _)| d.clone())
            .collect();
        certified.extend(
            self.state
                .log
                .decided
                .iter()
                .filter(|((s, _), senders)| *s == seq && senders.len() > self.f)
                .map(|((_, d), _)| d.clone()),
        );
        for digest in certified {
            let body = self
                .state
                .log
                .pre_prepares
                .values()
                .find(|b| b.id() == digest)
                .cloned()
                .or_else(|| self.lock.as_ref().filter(|l| l.block.id() == digest).map(|l| l.block.clone()))
                .or_else(|| self.bodies.get(&digest).cloned());
            if let Some(block) = body {
                self.state.phase = PbftPhase::Committed;
                out.commit = Some(block);
                return;
            }
        }
    }

    fn start_view_change(&mut self, out: &mut PbftOutput) {
        let target = self.view_changing.unwrap_or(self.state.view) + 1;
        self.send_view_change(target, out);
    }

    fn send_view_change(&mut self, target: u64, out: &mut PbftOutput) {
        self.view_changing = Some(target);
        self.generation += 1;
        self.timer_armed = false;
        let locked = self.lock.clone().filter(|l| l.sequence == self.state.sequence);
        self.state
            .log
            .view_changes
            .entry(target)
            .or_default()
            .insert(self.id.clone(), locked.clone());
        out.messages.push((
            Target::All,
            PbftMessage::ViewChange {
                new_view: target,
                sequence: self.state.sequence,
                locked,
            },
        ));
        self.evaluate_view_change(target, out);
    }

    fn evaluate_view_change(&mut self, new_view: u64, out: &mut PbftOutput) {
        let count = self.state.log.view_changes.get(&new_view).map_or(0, BTreeMap::len);
        let joined = self.view_changing.is_some_and(|t| t >= new_view);
        if count > self.f && !joined {
            self.send_view_change(new_view, out);
            return;
        }
        if count >= 2 * self.f + 1 && joined && self.view_changing == Some(new_view) {
            self.enter_view(new_view, out);
        }
    }

    fn enter_view(&mut self, new_view: u64, out: &mut PbftOutput) {
        let carried: Option<Lock> = self
            .state
            .log
            .view_changes
            .get(&new_view)
            .into_iter()
            .flat_map(|m| m.values())
            .flatten()
            .filter(|l| l.sequence == self.state.sequence)
            .max_by_key(|l| l.view)
            .cloned();
        self.state.view = new_view;
        self.view_changing = None;
        self.view_changes += 1;
        if self.state.phase != PbftPhase::Committed {
            self.state.phase = PbftPhase::Idle;
        }
        self.state.log.view_changes.retain(|v, _| *v > new_view);
        self.generation += 1;
        self.timer_armed = false;
        out.entered_view = Some(new_view);
        if self.is_leader() && self.state.phase == PbftPhase::Idle {
            if let Some(lock) = carried {
                let (view, sequence) = (new_view, self.state.sequence);
                self.state.log.pre_prepares.insert((view, sequence), lock.block.clone());
                self.state.phase = PbftPhase::PrePrepared;
                out.messages.push((Target::All, PbftMessage::PrePrepare { view, sequence, block: lock.block }));
            }
        }
    }
}

/// Structural check of a pBFT block: the signer must lead the view named in
/// the payload.
pub fn verify_block(block: &Block, members: &[NodeId]) -> Result<(), String> {
    match ConsensusPayload::decode(&block.header.consensus_payload) {
        Ok(ConsensusPayload::Pbft { view, sequence }) if sequence == block.num() => {
            if members.is_empty() || *view_leader(members, view) != block.header.signer_public_key {
                return Err(format!("signer is not the leader of view {view}"));
            }
            Ok(())
        }
        Ok(other) => Err(format!("expected pbft payload for sequence {}, got {other:?}", block.num())),
        Err(e) => Err(e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{sha512_digest, KeyPair};
    use crate::ledger::{seal_block, BlockHeader};
    use std::collections::VecDeque;

    fn keys(n: usize) -> Vec<KeyPair> {
        let mut keys: Vec<KeyPair> = (1..=n as u8).map(|i| KeyPair::from_seed(&[i; 32]).unwrap()).collect();
        keys.sort_by(|a, b| a.public_key_hex().cmp(b.public_key_hex()));
        keys
    }

    fn block(key: &KeyPair, view: u64, seq: u64, tag: &str) -> Block {
        let header = BlockHeader {
            block_num: seq,
            previous_block_id: sha512_digest(b"parent"),
            signer_public_key: key.public_key_hex().to_string(),
            batch_ids: vec![],
            state_root_hash: sha512_digest(tag.as_bytes()),
            consensus_payload: ConsensusPayload::Pbft { view, sequence: seq }.encode(),
        };
        seal_block(header, vec![], key).unwrap()
    }

    struct Net {
        engines: Vec<PbftEngine>,
        queue: VecDeque<(NodeId, Target, PbftMessage)>,
        commits: Vec<Option<Block>>,
        timers: Vec<Option<u64>>,
    }

    impl Net {
        fn new(keys: &[KeyPair], byzantine: &[usize]) -> Self {
            let members: Vec<NodeId> = keys.iter().map(|k| k.public_key_hex().to_string()).collect();
            let accomplices: BTreeSet<NodeId> = byzantine.iter().map(|i| members[*i].clone()).collect();
            let engines = members
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let byz = byzantine.contains(&i).then(|| Byzantine { accomplices: accomplices.clone() });
                    PbftEngine::new(m.clone(), members.clone(), 1, byz)
                })
                .collect();
            Self {
                engines,
                queue: VecDeque::new(),
                commits: vec![None; keys.len()],
                timers: vec![None; keys.len()],
            }
        }

        fn absorb(&mut self, i: usize, out: PbftOutput) {
            let from = self.engines[i].id().to_string();
            for (target, msg) in out.messages {
                self.queue.push_back((from.clone(), target, msg));
            }
            if let Some(b) = out.commit {
                self.commits[i].get_or_insert(b);
            }
            if let Some(g) = out.arm_timer {
                self.timers[i] = Some(g);
            }
        }

        fn run(&mut self) {
            while let Some((from, target, msg)) = self.queue.pop_front() {
                for i in 0..self.engines.len() {
                    let id = self.engines[i].id().to_string();
                    let deliver = match &target {
                        Target::All => id != from,
                        Target::Node(n) => *n == id,
                    };
                    if deliver {
                        let out = self.engines[i].step(PbftEvent::Message { from: from.clone(), msg: msg.clone() });
                        self.absorb(i, out);
                    }
                }
            }
        }

        fn fire_timers(&mut self) {
            for i in 0..self.engines.len() {
                if let Some(g) = self.timers[i].take() {
                    let out = self.engines[i].step(PbftEvent::Timeout { generation: g });
                    self.absorb(i, out);
                }
            }
        }
    }

    #[test]
    fn honest_round_commits_everywhere() {
        let keys = keys(4);
        let mut net = Net::new(&keys, &[]);
        assert!(net.engines[0].wants_proposal());
        let b = block(&keys[0], 0, 1, "a");
        let out = net.engines[0].step(PbftEvent::Propose { block: b.clone(), conflicting: None });
        net.absorb(0, out);
        net.run();
        for c in &net.commits {
            assert_eq!(c.as_ref().map(Block::id), Some(b.id()));
        }
        assert!(net.engines.iter().all(|e| e.state.phase == PbftPhase::Committed));
    }

    #[test]
    fn equivocating_leader_causes_view_change_without_commit() {
        let keys = keys(4);
        let mut net = Net::new(&keys, &[0]);
        let (b1, b2) = (block(&keys[0], 0, 1, "one"), block(&keys[0], 0, 1, "two"));
        // leader sends b1 to one replica, b2 to another, nothing to the third
        net.queue.push_back((net.engines[0].id().into(), Target::Node(net.engines[1].id().into()), PbftMessage::PrePrepare { view: 0, sequence: 1, block: b1 }));
        net.queue.push_back((net.engines[0].id().into(), Target::Node(net.engines[2].id().into()), PbftMessage::PrePrepare { view: 0, sequence: 1, block: b2 }));
        net.run();
        assert!(net.commits.iter().skip(1).all(Option::is_none));
        for i in 1..4 {
            let out = net.engines[i].set_work_pending(true);
            net.timers[i] = out.or(net.timers[i]);
        }
        net.fire_timers();
        net.run();
        for e in net.engines.iter().skip(1) {
            assert_eq!(e.state.view, 1);
        }
        // the honest leader of view 1 proposes and everyone commits
        let leader = 1;
        assert!(net.engines[leader].wants_proposal());
        let b = block(&keys[leader], 1, 1, "fresh");
        let out = net.engines[leader].step(PbftEvent::Propose { block: b.clone(), conflicting: None });
        net.absorb(leader, out);
        net.run();
        for c in net.commits.iter().skip(1) {
            assert_eq!(c.as_ref().map(Block::id), Some(b.id()));
        }
    }

    #[test]
    fn stale_view_messages_are_ignored() {
        let keys = keys(4);
        let members: Vec<NodeId> = keys.iter().map(|k| k.public_key_hex().to_string()).collect();
        let mut engine = PbftEngine::new(members[1].clone(), members.clone(), 1, None);
        engine.state.view = 2;
        let before = (engine.state.view, engine.state.phase, engine.state.log.pre_prepares.len());
        let out = engine.step(PbftEvent::Message {
            from: members[0].clone(),
            msg: PbftMessage::PrePrepare { view: 0, sequence: 1, block: block(&keys[0], 0, 1, "x") },
        });
        assert!(out.messages.is_empty());
        let _ = engine.step(PbftEvent::Message {
            from: members[2].clone(),
            msg: PbftMessage::Prepare { view: 1, sequence: 1, digest: "d".into() },
        });
        assert_eq!(before, (engine.state.view, engine.state.phase, engine.state.log.pre_prepares.len()));
        assert!(engine.state.log.prepares.is_empty());
    }

    #[test]
    fn locked_replica_refuses_conflicting_digest() {
        let keys = keys(4);
        let members: Vec<NodeId> = keys.iter().map(|k| k.public_key_hex().to_string()).collect();
        let mut replica = PbftEngine::new(members[2].clone(), members.clone(), 1, None);
        replica.lock = Some(Lock { view: 0, sequence: 1, block: block(&keys[0], 0, 1, "locked") });
        replica.state.view = 1;
        let out = replica.step(PbftEvent::Message {
            from: members[1].clone(),
            msg: PbftMessage::PrePrepare { view: 1, sequence: 1, block: block(&keys[1], 1, 1, "other") },
        });
        assert!(out.messages.is_empty());
    }

    #[test]
    fn lagging_replica_adopts_block_announced_by_f_plus_one() {
        let keys = keys(4);
        let members: Vec<NodeId> = keys.iter().map(|k| k.public_key_hex().to_string()).collect();
        let mut replica = PbftEngine::new(members[3].clone(), members.clone(), 1, None);
        let b = block(&keys[0], 0, 1, "decided");
        let announce = |from: &NodeId, replica: &mut PbftEngine| {
            replica.step(PbftEvent::Message {
                from: from.clone(),
                msg: PbftMessage::Decided { sequence: 1, block: b.clone() },
            })
        };
        assert!(announce(&members[0], &mut replica).commit.is_none());
        assert!(announce(&members[0], &mut replica).commit.is_none());
        assert_eq!(announce(&members[1], &mut replica).commit.map(|c| c.id()), Some(b.id()));
    }

    #[test]
    fn verify_checks_view_leader() {
        let keys = keys(4);
        let members: Vec<NodeId> = keys.iter().map(|k| k.public_key_hex().to_string()).collect();
        assert!(verify_block(&block(&keys[1], 1, 5, "x"), &members).is_ok());
        assert!(verify_block(&block(&keys[2], 1, 5, "x"), &members).is_err());
    }
}
