//! AirChain validator stack.

pub mod api;
pub mod codec;
pub mod consensus;
pub mod crypto;
pub mod family;
pub mod ingest;
pub mod journal;
pub mod ledger;
pub mod network;
pub mod node;
pub mod registry;
pub mod scenario;
pub mod trie;
