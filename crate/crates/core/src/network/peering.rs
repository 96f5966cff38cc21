//! Peer discovery with CONNECT / GET_PEERS until every node reaches its
//! minimum connectivity or has run out of nodes to try.

use std::collections::{BTreeMap, BTreeSet};

use crate::consensus::NodeId;

pub const DEFAULT_MIN_CONNECTIVITY: usize = 3;
pub const DEFAULT_MAX_CONNECTIVITY: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerTable {
    pub self_id: NodeId,
    pub peers: BTreeMap<NodeId, String>,
    pub min_connectivity: usize,
    pub max_connectivity: usize,
    pub attempted: BTreeSet<NodeId>,
    /// Nodes learned from seeds and GET_PEERS replies.
    pub known: BTreeMap<NodeId, String>,
}

impl PeerTable {
    pub fn new(self_id: NodeId, min_connectivity: usize, max_connectivity: usize) -> Self {
        Self {
            self_id,
            peers: BTreeMap::new(),
            min_connectivity,
            max_connectivity,
            attempted: BTreeSet::new(),
            known: BTreeMap::new(),
        }
    }

    pub fn is_under_connected(&self) -> bool {
        self.peers.len() < self.min_connectivity
    }

    pub fn is_full(&self) -> bool {
        self.peers.len() >= self.max_connectivity
    }

    pub fn learn(&mut self, id: NodeId, endpoint: String) {
        if id != self.self_id {
            self.known.entry(id).or_insert(endpoint);
        }
    }

    /// Smallest known node that is neither a peer nor already tried.
    pub fn next_candidate(&self) -> Option<(NodeId, String)> {
        self.known
            .iter()
            .find(|(id, _)| !self.peers.contains_key(*id) && !self.attempted.contains(*id))
            .map(|(id, ep)| (id.clone(), ep.clone()))
    }

    /// Answer to an incoming CONNECT.
    pub fn accept(&mut self, from: NodeId, endpoint: String) -> bool {
        if from == self.self_id {
            return false;
        }
        if self.peers.contains_key(&from) {
            return true;
        }
        if self.is_full() {
            return false;
        }
        self.known.entry(from.clone()).or_insert(endpoint.clone());
        self.peers.insert(from, endpoint);
        true
    }

    pub fn add_peer(&mut self, id: NodeId, endpoint: String) -> bool {
        if id == self.self_id || self.is_full() {
            return false;
        }
        self.peers.insert(id, endpoint);
        true
    }

    pub fn remove_peer(&mut self, id: &str) {
        self.peers.remove(id);
    }

    pub fn peer_list(&self) -> Vec<(NodeId, String)> {
        self.peers.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

/// Who can be found and reached during discovery.
#[derive(Debug, Clone, Default)]
pub struct Directory {
    pub endpoints: BTreeMap<NodeId, String>,
    /// Nodes that answer; others time out.
    pub reachable: BTreeSet<NodeId>,
    /// Initial contacts per node. Nodes without seeds start from the whole
    /// directory.
    pub seeds: BTreeMap<NodeId, Vec<NodeId>>,
}

impl Directory {
    pub fn fully_reachable(ids: impl IntoIterator<Item = NodeId>) -> Self {
        let endpoints: BTreeMap<NodeId, String> = ids.into_iter().map(|id| (id.clone(), format!("sim://{id}"))).collect();
        let reachable = endpoints.keys().cloned().collect();
        Self { endpoints, reachable, seeds: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RoundReport {
    pub attempts: usize,
    pub accepted: usize,
    pub refused: usize,
    pub unreachable: usize,
}

pub struct PeeringNetwork {
    pub tables: BTreeMap<NodeId, PeerTable>,
    pub directory: Directory,
}

impl PeeringNetwork {
    pub fn new(directory: Directory, min: usize, max: usize) -> Self {
        let mut tables = BTreeMap::new();
        for id in directory.endpoints.keys() {
            let mut table = PeerTable::new(id.clone(), min, max);
            let seeds: Vec<NodeId> = directory
                .seeds
                .get(id)
                .cloned()
                .unwrap_or_else(|| directory.endpoints.keys().cloned().collect());
            for seed in seeds {
                if let Some(ep) = directory.endpoints.get(&seed) {
                    table.learn(seed, ep.clone());
                }
            }
            tables.insert(id.clone(), table);
        }
        Self { tables, directory }
    }

    /// Every under-connected node sends CONNECT to one untried candidate,
    /// then GET_PEERS to it if it answers.
    pub fn connect_round(&mut self) -> RoundReport {
        let mut report = RoundReport::default();
        let ids: Vec<NodeId> = self.tables.keys().cloned().collect();
        for id in ids {
            let table = &self.tables[&id];
            if !table.is_under_connected() || !self.directory.reachable.contains(&id) {
                continue;
            }
            if table.next_candidate().is_none() {
                // seeds and gossip are used up; fall back to the directory
                let me = self.tables.get_mut(&id).expect("present");
                for (other, ep) in &self.directory.endpoints {
                    me.learn(other.clone(), ep.clone());
                }
            }
            let Some((target, _)) = self.tables[&id].next_candidate() else { continue };
            report.attempts += 1;
            self.tables.get_mut(&id).expect("present").attempted.insert(target.clone());
            if !self.directory.reachable.contains(&target) || !self.tables.contains_key(&target) {
                report.unreachable += 1;
                continue;
            }
            let my_ep = self.directory.endpoints[&id].clone();
            let target_ep = self.directory.endpoints[&target].clone();
            let accepted = self.tables.get_mut(&target).expect("present").accept(id.clone(), my_ep);
            if accepted {
                let me = self.tables.get_mut(&id).expect("present");
                if me.add_peer(target.clone(), target_ep) {
                    report.accepted += 1;
                } else {
                    self.tables.get_mut(&target).expect("present").remove_peer(&id);
                    report.refused += 1;
                }
            } else {
                report.refused += 1;
            }
            let learned = self.tables[&target].peer_list();
            let me = self.tables.get_mut(&id).expect("present");
            for (peer, ep) in learned {
                me.learn(peer, ep);
            }
        }
        report
    }

    /// Peering state over the nodes that are up.
    pub fn is_fully_peered(&self) -> bool {
        let live = self.tables.values().filter(|t| self.directory.reachable.contains(&t.self_id));
        peered_within(live, self.directory.endpoints.keys())
    }

    /// Runs rounds until peered, until no node can try anything, or until
    /// `max_rounds`. Returns the number of rounds run.
    pub fn run(&mut self, max_rounds: usize) -> usize {
        for round in 0..max_rounds {
            if self.is_fully_peered() {
                return round;
            }
            if self.connect_round().attempts == 0 {
                return round + 1;
            }
        }
        max_rounds
    }

    /// Peer links as an undirected adjacency map.
    pub fn links(&self) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        self.tables
            .iter()
            .map(|(id, t)| (id.clone(), t.peers.keys().cloned().collect()))
            .collect()
    }
}

/// True when every node is at minimum connectivity, or every node below it
/// has tried every other node.
pub fn is_fully_peered<'a>(tables: impl IntoIterator<Item = &'a PeerTable>) -> bool {
    let tables: Vec<&PeerTable> = tables.into_iter().collect();
    peered_within(tables.iter().copied(), tables.iter().map(|t| &t.self_id))
}

/// [`is_fully_peered`] where "every other node" ranges over `universe`.
fn peered_within<'a>(tables: impl IntoIterator<Item = &'a PeerTable>, universe: impl IntoIterator<Item = &'a NodeId>) -> bool {
    let tables: Vec<&PeerTable> = tables.into_iter().collect();
    if tables.iter().all(|t| !t.is_under_connected()) {
        return true;
    }
    let all: BTreeSet<&NodeId> = universe.into_iter().collect();
    tables.iter().filter(|t| t.is_under_connected()).all(|t| {
        all.iter().all(|other| **other == t.self_id || t.attempted.contains(*other) || t.peers.contains_key(*other))
    })
}
