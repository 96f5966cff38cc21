//! A validator on real sockets and wall-clock time.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use airchain_core::api::{Api, BatchSink, SnapshotCell};
use airchain_core::codec;
use airchain_core::crypto::KeyPair;
use airchain_core::family::TxnContext;
use airchain_core::journal::{BlockStore, Journal};
use airchain_core::ledger::{Batch, Block};
use airchain_core::consensus::NodeId;
use airchain_core::network::Message;
use airchain_core::node::{Input, Output, Timer, Validator, ValidatorConfig};
use airchain_core::registry::Registry;
use airchain_core::trie::StateTrie;
use thiserror::Error;
use tracing::{info, warn};

use crate::config::NodeConfig;
use crate::http;
use crate::transport::{self, Outbox};

const PEERING_INTERVAL: Duration = Duration::from_secs(1);
const SEED_INTERVAL: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("cannot bind {endpoint}: {reason}")]
    Bind { endpoint: String, reason: String },
    #[error("key file: {0}")]
    Key(String),
    #[error("genesis: {0}")]
    Genesis(String),
    #[error("storage: {0}")]
    Storage(String),
}

impl NodeError {
    /// Bind and key problems are configuration mistakes; storage and genesis
    /// mismatches mean the node's data cannot be trusted.
    pub fn exit_code(&self) -> i32 {
        match self {
            NodeError::Bind { .. } | NodeError::Key(_) => 2,
            NodeError::Genesis(_) | NodeError::Storage(_) => 1,
        }
    }
}

enum Event {
    Inbound { from: NodeId, msg: Message },
    Submit(Batch),
    Stop,
}

struct ChannelSink(Mutex<Sender<Event>>);

impl BatchSink for ChannelSink {
    fn enqueue(&self, batch: Batch) {
        let _ = self.0.lock().expect("sink lock").send(Event::Submit(batch));
    }
}

pub fn read_genesis(path: &Path) -> Result<Block, NodeError> {
    let bytes = fs::read(path).map_err(|e| NodeError::Genesis(format!("{}: {e}", path.display())))?;
    codec::from_canonical(&bytes).map_err(|e| NodeError::Genesis(format!("{}: {e}", path.display())))
}

fn bind(endpoint: &str) -> Result<TcpListener, NodeError> {
    TcpListener::bind(endpoint).map_err(|e| NodeError::Bind { endpoint: endpoint.to_string(), reason: e.to_string() })
}

fn unix_now() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0)
}

/// Runs until interrupted. Every socket is bound before any state is opened,
/// so a port clash fails fast.
pub fn run_node(cfg: &NodeConfig) -> Result<(), NodeError> {
    let api_listener = bind(&cfg.api_endpoint)?;
    let internal_listener = bind(&cfg.internal_endpoint)?;
    let consensus_listener = bind(&cfg.consensus_endpoint)?;

    let key = KeyPair::load(&cfg.key_file).map_err(|e| NodeError::Key(e.to_string()))?;
    let genesis = read_genesis(&cfg.genesis)?;
    let storage = |e: &dyn std::fmt::Display| NodeError::Storage(e.to_string());
    let store = BlockStore::open(&cfg.data_dir.join("blocks")).map_err(|e| storage(&e))?;
    let trie = Arc::new(StateTrie::open(&cfg.data_dir.join("state.log")).map_err(|e| storage(&e))?);
    let registry = Arc::new(Registry::open(&cfg.data_dir.join("registry.log")).map_err(|e| storage(&e))?);

    let time_base_s = unix_now();
    let mut journal = Journal::new(store, trie);
    journal
        .init_genesis(genesis, &TxnContext { clock_s: time_base_s })
        .map_err(|e| NodeError::Genesis(e.to_string()))?;

    let mut vcfg = ValidatorConfig::new(key.clone());
    vcfg.endpoint = cfg.consensus_endpoint.clone();
    vcfg.mean_wait_ms = cfg.consensus.mean_wait_ms;
    vcfg.pbft_timeout_ms = cfg.consensus.pbft_timeout_ms;
    vcfg.max_batches_per_block = cfg.consensus.max_batches_per_block;
    vcfg.time_base_s = time_base_s;
    vcfg.seed = u64::from_str_radix(&key.public_key_hex()[2..18], 16).unwrap_or(0);
    vcfg.min_connectivity = cfg.min_connectivity;
    vcfg.max_connectivity = cfg.max_connectivity;
    let mut validator = Validator::new(vcfg, journal);
    info!(node = %validator.id(), height = validator.head().num(), "chain loaded");

    let (tx, rx) = mpsc::channel::<Event>();
    let cell: SnapshotCell = Arc::new(RwLock::new(Arc::new(validator.snapshot())));

    let inbound = tx.clone();
    transport::serve(consensus_listener, move |from, msg| inbound.send(Event::Inbound { from, msg }).is_ok());
    // local tooling may hand batches straight to the validator if it signs
    // with the node's own key
    let internal = tx.clone();
    let own_id = validator.id().clone();
    transport::serve(internal_listener, move |from, msg| match msg {
        Message::GossipBatch { batch } if from == own_id => internal.send(Event::Submit(batch)).is_ok(),
        _ => false,
    });

    let api = Arc::new(Api::new(registry, cell.clone(), Arc::new(ChannelSink(Mutex::new(tx.clone())))));
    let stop = tx.clone();
    thread::spawn(move || {
        if let Err(e) = http::serve(api_listener, api, move || {
            let _ = stop.send(Event::Stop);
        }) {
            warn!(error = %e, "api server stopped");
        }
    });
    info!(api = %cfg.api_endpoint, consensus = %cfg.consensus_endpoint, "listening");

    let mut runtime = Runtime {
        started: Instant::now(),
        outbox: Outbox::new(key),
        routes: HashMap::new(),
        timers: BinaryHeap::new(),
        timer_slots: HashMap::new(),
        next_timer: 0,
        own_endpoint: cfg.consensus_endpoint.clone(),
    };
    let out = validator.start(runtime.now_ms());
    runtime.dispatch(&validator, out);
    *cell.write().expect("snapshot lock") = Arc::new(validator.snapshot());

    let mut next_peering = Instant::now();
    let mut next_seed = Instant::now();
    let mut published = fingerprint(&validator);
    loop {
        let now = Instant::now();
        if now >= next_seed {
            if validator.peers.is_under_connected() {
                runtime.contact_seeds(&cfg.peers);
            }
            next_seed = now + SEED_INTERVAL;
        }
        if now >= next_peering {
            let out = validator.peering_round();
            runtime.dispatch(&validator, out);
            next_peering = now + PEERING_INTERVAL;
        }
        let wait = runtime.until_next_timer().min(next_peering.saturating_duration_since(Instant::now()));
        match rx.recv_timeout(wait) {
            Ok(Event::Stop) | Err(RecvTimeoutError::Disconnected) => break,
            Ok(Event::Inbound { from, msg }) => {
                runtime.learn(&from, &msg);
                let out = validator.handle(runtime.now_ms(), Input::Message { from, msg });
                runtime.dispatch(&validator, out);
            }
            Ok(Event::Submit(batch)) => {
                let out = validator.handle(runtime.now_ms(), Input::Submit(batch));
                runtime.dispatch(&validator, out);
            }
            Err(RecvTimeoutError::Timeout) => {}
        }
        while let Some(timer) = runtime.pop_due() {
            let out = validator.handle(runtime.now_ms(), Input::Timer(timer));
            runtime.dispatch(&validator, out);
        }
        let current = fingerprint(&validator);
        if current != published {
            *cell.write().expect("snapshot lock") = Arc::new(validator.snapshot());
            published = current;
        }
    }
    info!(height = validator.head().num(), head = %validator.head().id(), "stopped");
    Ok(())
}

/// Cheap change detector for the API snapshot.
fn fingerprint(v: &Validator) -> (String, usize, usize) {
    (v.head().id(), v.journal.pending.batch_count(), v.peers.peers.len())
}

struct Runtime {
    started: Instant,
    outbox: Outbox,
    /// Endpoints learned from the wire for nodes the peer table does not hold.
    routes: HashMap<NodeId, String>,
    timers: BinaryHeap<Reverse<(u64, u64)>>,
    timer_slots: HashMap<u64, Timer>,
    next_timer: u64,
    own_endpoint: String,
}

impl Runtime {
    fn now_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    fn learn(&mut self, from: &NodeId, msg: &Message) {
        match msg {
            Message::Connect { endpoint } | Message::ConnectAccepted { endpoint } => {
                self.routes.insert(from.clone(), endpoint.clone());
            }
            Message::Peers { peers } => {
                for (id, ep) in peers {
                    self.routes.entry(id.clone()).or_insert_with(|| ep.clone());
                }
            }
            _ => {}
        }
    }

    fn endpoint_of(&self, v: &Validator, id: &NodeId) -> Option<String> {
        v.peers
            .peers
            .get(id)
            .or_else(|| v.peers.known.get(id))
            .or_else(|| self.routes.get(id))
            .cloned()
    }

    fn dispatch(&mut self, v: &Validator, outputs: Vec<Output>) {
        for o in outputs {
            match o {
                Output::Send { to, msg } => match self.endpoint_of(v, &to) {
                    Some(ep) => self.outbox.send(&ep, &msg),
                    None => warn!(to = %&to[..12.min(to.len())], kind = msg.kind(), "no route"),
                },
                Output::Timer { after_ms, timer } => {
                    let slot = self.next_timer;
                    self.next_timer += 1;
                    self.timer_slots.insert(slot, timer);
                    self.timers.push(Reverse((self.now_ms() + after_ms, slot)));
                }
            }
        }
    }

    fn until_next_timer(&self) -> Duration {
        match self.timers.peek() {
            Some(Reverse((at, _))) => Duration::from_millis(at.saturating_sub(self.now_ms())),
            None => Duration::from_secs(1),
        }
    }

    fn pop_due(&mut self) -> Option<Timer> {
        let Reverse((at, slot)) = *self.timers.peek()?;
        if at > self.now_ms() {
            return None;
        }
        self.timers.pop();
        self.timer_slots.remove(&slot)
    }

    /// Seeds are known only by endpoint; a CONNECT tells them who we are and
    /// their reply tells us who they are.
    fn contact_seeds(&mut self, seeds: &[String]) {
        let msg = Message::Connect { endpoint: self.own_endpoint.clone() };
        for seed in seeds {
            if *seed != self.own_endpoint && !self.routes.values().any(|ep| ep == seed) {
                self.outbox.send(seed, &msg);
            }
        }
    }
}
