//! Peering, gossip, wire framing, and the transports messages travel over.

pub mod frame;
pub mod gossip;
pub mod peering;
pub mod sim;

use serde::{Deserialize, Serialize};

use crate::consensus::pbft::PbftMessage;
use crate::consensus::raft::RaftMessage;
use crate::consensus::NodeId;
use crate::ledger::{Batch, Block};

pub const DEFAULT_API_PORT: u16 = 8008;
pub const DEFAULT_INTERNAL_PORT: u16 = 4004;
pub const DEFAULT_CONSENSUS_PORT: u16 = 5050;

/// Everything validators say to each other.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Connect { endpoint: String },
    ConnectAccepted { endpoint: String },
    ConnectRefused,
    GetPeers,
    Peers { peers: Vec<(NodeId, String)> },
    GossipBlock { block: Block },
    GossipBatch { batch: Batch },
    BlockRequest { block_id: String },
    /// Consensus traffic is tagged with the height the engine instance
    /// started at, so messages for a retired or future engine are told apart.
    Pbft { epoch: u64, msg: PbftMessage },
    Raft { epoch: u64, msg: RaftMessage },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Connect { .. } => "connect",
            Message::ConnectAccepted { .. } => "connect_accepted",
            Message::ConnectRefused => "connect_refused",
            Message::GetPeers => "get_peers",
            Message::Peers { .. } => "peers",
            Message::GossipBlock { .. } => "gossip_block",
            Message::GossipBatch { .. } => "gossip_batch",
            Message::BlockRequest { .. } => "block_request",
            Message::Pbft { .. } => "pbft",
            Message::Raft { .. } => "raft",
        }
    }

    /// Content id used to suppress re-forwarding of gossip.
    pub fn gossip_id(&self) -> Option<String> {
        match self {
            Message::GossipBlock { block } => Some(block.id()),
            Message::GossipBatch { batch } => Some(batch.id().to_string()),
            _ => None,
        }
    }
}
