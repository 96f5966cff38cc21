//! Flooding broadcast: each node forwards a message to its peers the first
//! time it sees the message's content id.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use crate::consensus::NodeId;

/// Remembers recently seen content ids, forgetting the oldest beyond
/// `capacity`.
#[derive(Debug, Clone)]
pub struct SeenFilter {
    seen: HashSet<String>,
    order: VecDeque<String>,
    capacity: usize,
}

impl SeenFilter {
    pub fn new(capacity: usize) -> Self {
        Self { seen: HashSet::new(), order: VecDeque::new(), capacity }
    }

    /// True the first time `id` is offered.
    pub fn first_sight(&mut self, id: &str) -> bool {
        if self.seen.contains(id) {
            return false;
        }
        self.seen.insert(id.to_string());
        self.order.push_back(id.to_string());
        if self.order.len() > self.capacity {
            if let Some(old) = self.order.pop_front() {
                self.seen.remove(&old);
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeliveryReport {
    pub reached: BTreeSet<NodeId>,
    /// Copies sent over links, duplicates included.
    pub transmissions: usize,
    /// Per node, how many times it forwarded.
    pub forwards: BTreeMap<NodeId, usize>,
}

/// Floods from `origin` over `links`. `link_up(from, to)` decides whether a
/// copy survives (partitions, drops).
pub fn gossip_broadcast(
    origin: &str,
    links: &BTreeMap<NodeId, BTreeSet<NodeId>>,
    mut link_up: impl FnMut(&str, &str) -> bool,
) -> DeliveryReport {
    let mut report = DeliveryReport::default();
    let mut queue = VecDeque::from([origin.to_string()]);
    report.reached.insert(origin.to_string());
    while let Some(node) = queue.pop_front() {
        *report.forwards.entry(node.clone()).or_default() += 1;
        for peer in links.get(&node).into_iter().flatten() {
            report.transmissions += 1;
            if link_up(&node, peer) && report.reached.insert(peer.clone()) {
                queue.push_back(peer.clone());
            }
        }
    }
    report
}
