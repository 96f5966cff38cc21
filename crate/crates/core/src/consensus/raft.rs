//! Raft over a fixed member set. Log entry `i` (1-based) carries the block at
//! height `base + i`, where `base` is the chain height when the engine took
//! over. Only the leader builds blocks, and a block commits once a majority
//! stores it.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ConsensusPayload, NodeId};
use crate::ledger::Block;

pub const ELECTION_TIMEOUT_MIN_MS: u64 = 150;
pub const ELECTION_TIMEOUT_MAX_MS: u64 = 300;
pub const HEARTBEAT_MS: u64 = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Follower,
    Candidate,
    Leader,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub term: u64,
    pub block: Block,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RaftMessage {
    RequestVote {
        term: u64,
        last_log_index: u64,
        last_log_term: u64,
    },
    VoteGranted {
        term: u64,
    },
    VoteRejected {
        term: u64,
    },
    AppendEntries {
        term: u64,
        prev_log_index: u64,
        prev_log_term: u64,
        entries: Vec<Entry>,
        leader_commit: u64,
    },
    AppendAccepted {
        term: u64,
        match_index: u64,
    },
    AppendRejected {
        term: u64,
        /// Follower's last log index, so the leader can jump back.
        hint: u64,
    },
}

impl RaftMessage {
    pub fn term(&self) -> u64 {
        match self {
            RaftMessage::RequestVote { term, .. }
            | RaftMessage::VoteGranted { term }
            | RaftMessage::VoteRejected { term }
            | RaftMessage::AppendEntries { term, .. }
            | RaftMessage::AppendAccepted { term, .. }
            | RaftMessage::AppendRejected { term, .. } => *term,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    Election,
    Heartbeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RaftTimer {
    pub kind: TimerKind,
    pub generation: u64,
    pub after_ms: u64,
}

#[derive(Debug)]
pub enum RaftEvent {
    Message { from: NodeId, msg: RaftMessage },
    Timer { kind: TimerKind, generation: u64 },
    /// Block built by the leader on top of [`RaftEngine::proposal_parent`].
    Propose(Block),
}

#[derive(Debug, Default)]
pub struct RaftOutput {
    pub messages: Vec<(NodeId, RaftMessage)>,
    /// Newly committed blocks in height order.
    pub committed: Vec<Block>,
    pub timers: Vec<RaftTimer>,
    pub became_leader: Option<u64>,
}

#[derive(Debug)]
pub struct RaftEngine {
    id: NodeId,
    members: Vec<NodeId>,
    rng: ChaCha8Rng,
    pub role: Role,
    pub current_term: u64,
    pub voted_for: Option<NodeId>,
    log: Vec<Entry>,
    base: u64,
    pub commit_index: u64,
    next_index: BTreeMap<NodeId, u64>,
    match_index: BTreeMap<NodeId, u64>,
    votes: BTreeSet<NodeId>,
    election_gen: u64,
    heartbeat_gen: u64,
    /// Terms in which this node became leader.
    pub leader_terms: Vec<u64>,
}

impl RaftEngine {
    /// `base` is the committed chain height the log extends.
    pub fn new(id: NodeId, members: Vec<NodeId>, base: u64, seed: u64) -> Self {
        Self {
            id,
            members,
            rng: ChaCha8Rng::seed_from_u64(seed),
            role: Role::Follower,
            current_term: 0,
            voted_for: None,
            log: Vec::new(),
            base,
            commit_index: 0,
            next_index: BTreeMap::new(),
            match_index: BTreeMap::new(),
            votes: BTreeSet::new(),
            election_gen: 0,
            heartbeat_gen: 0,
            leader_terms: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn last_index(&self) -> u64 {
        self.log.len() as u64
    }

    fn term_at(&self, index: u64) -> u64 {
        if index == 0 {
            0
        } else {
            self.log[(index - 1) as usize].term
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.log
    }

    /// Height of the last committed block.
    pub fn committed_height(&self) -> u64 {
        self.base + self.commit_index
    }

    fn majority(&self) -> usize {
        self.members.len() / 2 + 1
    }

    fn peers(&self) -> Vec<NodeId> {
        self.members.iter().filter(|m| **m != self.id).cloned().collect()
    }

    /// Starts (or restarts after a crash) as a follower; persistent state is
    /// kept.
    pub fn start(&mut self) -> RaftOutput {
        self.role = Role::Follower;
        self.votes.clear();
        let mut out = RaftOutput::default();
        self.arm_election(&mut out);
        out
    }

    /// The leader should build a block when it has nothing of its own term
    /// in flight.
    pub fn wants_proposal(&self) -> bool {
        self.role == Role::Leader
            && !self.log[self.commit_index as usize..].iter().any(|e| e.term == self.current_term)
    }

    /// Entries from earlier terms only commit behind a current-term entry,
    /// so the leader proposes even with nothing queued when this holds.
    pub fn needs_filler(&self) -> bool {
        self.wants_proposal() && self.last_index() > self.commit_index
    }

    /// Last uncommitted-or-committed log block to build on, or `None` to
    /// build on the committed chain head.
    pub fn proposal_parent(&self) -> Option<&Block> {
        self.log.last().map(|e| &e.block)
    }

    pub fn next_height(&self) -> u64 {
        self.base + self.last_index() + 1
    }

    pub fn payload(&self) -> ConsensusPayload {
        ConsensusPayload::Raft { term: self.current_term }
    }

    pub fn step(&mut self, event: RaftEvent) -> RaftOutput {
        let mut out = RaftOutput::default();
        match event {
            RaftEvent::Timer { kind: TimerKind::Election, generation } => {
                if generation == self.election_gen && self.role != Role::Leader {
                    self.campaign(&mut out);
                }
            }
            RaftEvent::Timer { kind: TimerKind::Heartbeat, generation } => {
                if generation == self.heartbeat_gen && self.role == Role::Leader {
                    self.broadcast_append(&mut out);
                    self.arm_heartbeat(&mut out);
                }
            }
            RaftEvent::Propose(block) => {
                if self.wants_proposal() && block.num() == self.next_height() {
                    self.log.push(Entry { term: self.current_term, block });
                    self.advance_commit(&mut out);
                    self.broadcast_append(&mut out);
                }
            }
            RaftEvent::Message { from, msg } => {
                if self.members.contains(&from) && from != self.id {
                    self.on_message(from, msg, &mut out);
                }
            }
        }
        out
    }

    fn arm_election(&mut self, out: &mut RaftOutput) {
        self.election_gen += 1;
        let after_ms = self.rng.gen_range(ELECTION_TIMEOUT_MIN_MS..=ELECTION_TIMEOUT_MAX_MS);
        out.timers.push(RaftTimer { kind: TimerKind::Election, generation: self.election_gen, after_ms });
    }

    fn arm_heartbeat(&mut self, out: &mut RaftOutput) {
        self.heartbeat_gen += 1;
        out.timers.push(RaftTimer { kind: TimerKind::Heartbeat, generation: self.heartbeat_gen, after_ms: HEARTBEAT_MS });
    }

    fn campaign(&mut self, out: &mut RaftOutput) {
        self.current_term += 1;
        self.role = Role::Candidate;
        self.voted_for = Some(self.id.clone());
        self.votes = BTreeSet::from([self.id.clone()]);
        let msg = RaftMessage::RequestVote {
            term: self.current_term,
            last_log_index: self.last_index(),
            last_log_term: self.term_at(self.last_index()),
        };
        for peer in self.peers() {
            out.messages.push((peer, msg.clone()));
        }
        self.arm_election(out);
        self.maybe_win(out);
    }

    fn step_down(&mut self, term: u64, out: &mut RaftOutput) {
        let was_leader = self.role == Role::Leader;
        if term > self.current_term {
            self.current_term = term;
            self.voted_for = None;
        }
        self.role = Role::Follower;
        self.votes.clear();
        if was_leader {
            self.heartbeat_gen += 1;
        }
        self.arm_election(out);
    }

    fn maybe_win(&mut self, out: &mut RaftOutput) {
        if self.role == Role::Candidate && self.votes.len() >= self.majority() {
            self.role = Role::Leader;
            self.election_gen += 1;
            self.leader_terms.push(self.current_term);
            out.became_leader = Some(self.current_term);
            let next = self.last_index() + 1;
            self.next_index = self.peers().into_iter().map(|p| (p, next)).collect();
            self.match_index = self.peers().into_iter().map(|p| (p, 0)).collect();
            self.broadcast_append(out);
            self.arm_heartbeat(out);
        }
    }

    fn append_for(&self, peer: &NodeId) -> RaftMessage {
        let next = self.next_index.get(peer).copied().unwrap_or(self.last_index() + 1).max(1);
        let prev = next - 1;
        RaftMessage::AppendEntries {
            term: self.current_term,
            prev_log_index: prev,
            prev_log_term: self.term_at(prev),
            entries: self.log[prev as usize..].to_vec(),
            leader_commit: self.commit_index,
        }
    }

    fn broadcast_append(&mut self, out: &mut RaftOutput) {
        for peer in self.peers() {
            let msg = self.append_for(&peer);
            out.messages.push((peer, msg));
        }
    }

    fn on_message(&mut self, from: NodeId, msg: RaftMessage, out: &mut RaftOutput) {
        let term = msg.term();
        if term > self.current_term {
            self.step_down(term, out);
        }
        match msg {
            RaftMessage::RequestVote { term, last_log_index, last_log_term } => {
                let my_last = self.last_index();
                let up_to_date = (last_log_term, last_log_index) >= (self.term_at(my_last), my_last);
                let free = self.voted_for.as_ref().map_or(true, |v| *v == from);
                if term == self.current_term && free && up_to_date {
                    self.voted_for = Some(from.clone());
                    self.arm_election(out);
                    out.messages.push((from, RaftMessage::VoteGranted { term }));
                } else {
                    out.messages.push((from, RaftMessage::VoteRejected { term: self.current_term }));
                }
            }
            RaftMessage::VoteGranted { term } => {
                if term == self.current_term && self.role == Role::Candidate {
                    self.votes.insert(from);
                    self.maybe_win(out);
                }
            }
            RaftMessage::VoteRejected { .. } => {}
            RaftMessage::AppendEntries { term, prev_log_index, prev_log_term, entries, leader_commit } => {
                if term < self.current_term {
                    out.messages.push((from, RaftMessage::AppendRejected { term: self.current_term, hint: self.last_index() }));
                    return;
                }
                if self.role != Role::Follower {
                    self.step_down(term, out);
                } else {
                    self.arm_election(out);
                }
                if prev_log_index > self.last_index() || self.term_at(prev_log_index) != prev_log_term {
                    let hint = self.last_index().min(prev_log_index.saturating_sub(1));
                    out.messages.push((from, RaftMessage::AppendRejected { term, hint }));
                    return;
                }
                let mut index = prev_log_index;
                for entry in entries {
                    index += 1;
                    if index <= self.last_index() {
                        if self.term_at(index) == entry.term {
                            continue;
                        }
                        // never truncate committed entries
                        if index <= self.commit_index {
                            return;
                        }
                        self.log.truncate((index - 1) as usize);
                    }
                    self.log.push(entry);
                }
                if leader_commit > self.commit_index {
                    self.commit_to(leader_commit.min(index), out);
                }
                out.messages.push((from, RaftMessage::AppendAccepted { term, match_index: index }));
            }
            RaftMessage::AppendAccepted { term, match_index } => {
                if self.role == Role::Leader && term == self.current_term {
                    let m = self.match_index.entry(from.clone()).or_default();
                    *m = (*m).max(match_index);
                    self.next_index.insert(from, match_index + 1);
                    self.advance_commit(out);
                }
            }
            RaftMessage::AppendRejected { term, hint } => {
                if self.role == Role::Leader && term == self.current_term {
                    let next = self.next_index.entry(from.clone()).or_insert(1);
                    *next = (hint + 1).min(next.saturating_sub(1)).max(1);
                    let msg = self.append_for(&from);
                    out.messages.push((from, msg));
                }
            }
        }
    }

    fn advance_commit(&mut self, out: &mut RaftOutput) {
        if self.role != Role::Leader {
            return;
        }
        let mut n = self.last_index();
        while n > self.commit_index {
            if self.term_at(n) == self.current_term {
                let replicas = 1 + self.match_index.values().filter(|m| **m >= n).count();
                if replicas >= self.majority() {
                    self.commit_to(n, out);
                    break;
                }
            }
            n -= 1;
        }
    }

    fn commit_to(&mut self, index: u64, out: &mut RaftOutput) {
        while self.commit_index < index {
            self.commit_index += 1;
            out.committed.push(self.log[(self.commit_index - 1) as usize].block.clone());
        }
    }
}

/// A raft block must carry a raft payload; leadership itself is checked by
/// the members at commit time.
pub fn verify_block(block: &Block) -> Result<(), String> {
    match ConsensusPayload::decode(&block.header.consensus_payload) {
        Ok(ConsensusPayload::Raft { .. }) => Ok(()),
        Ok(other) => Err(format!("expected raft payload, got {other:?}")),
        Err(e) => Err(e.to_string()),
    }
}
