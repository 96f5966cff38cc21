//! The validator journal: completer, chain controller, block publisher, and
//! the block cache and store behind them. Everything here runs on the single
//! validator event loop.

pub mod store;

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use thiserror::Error;

use crate::consensus::{Algorithm, ConsensusPayload};
use crate::family::settings::{self as settings_family, read_setting, SettingPayload, CONSENSUS_ALGORITHM_KEY, CONSENSUS_MEMBERS_KEY};
use crate::family::{apply_transaction, ApplyError, StateView, TxnContext};
use crate::crypto::KeyPair;
use crate::ledger::{
    build_batch, build_transaction_with_nonce, seal_block, validate_batch, validate_block_structure, Batch, Block, BlockHeader,
    Violation, GENESIS_PREVIOUS_ID,
};
use crate::trie::{Address, SharedTrie, StateRoot, TrieError};

pub use store::{BlockStore, StoreError};

/// Blocks further than this below the head are evicted from the cache.
pub const CACHE_DEPTH: u64 = 100;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("state: {0}")]
    Trie(#[from] TrieError),
    #[error("unknown block {0}")]
    UnknownBlock(String),
    #[error("no genesis block")]
    NoGenesis,
    #[error("invalid genesis: {0}")]
    InvalidGenesis(String),
    #[error("signing: {0}")]
    Signing(String),
}

/// Why the chain controller refused a block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    Structure(Vec<Violation>),
    UnknownPredecessor(String),
    Height,
    Consensus(String),
    InvalidBatch { batch_id: String, reason: String },
    DuplicateBatch(String),
    StateRootMismatch { expected: String, actual: String },
    PreviouslyRejected,
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Rejection::Structure(v) => {
                let parts: Vec<String> = v.iter().map(ToString::to_string).collect();
                write!(f, "structure: {}", parts.join("; "))
            }
            Rejection::UnknownPredecessor(id) => write!(f, "unknown predecessor {id}"),
            Rejection::Height => f.write_str("block number does not follow its predecessor"),
            Rejection::Consensus(e) => write!(f, "consensus: {e}"),
            Rejection::InvalidBatch { batch_id, reason } => write!(f, "batch {batch_id}: {reason}"),
            Rejection::DuplicateBatch(id) => write!(f, "batch {id} already committed"),
            Rejection::StateRootMismatch { expected, actual } => {
                write!(f, "state root mismatch: header {expected}, computed {actual}")
            }
            Rejection::PreviouslyRejected => f.write_str("previously rejected"),
        }
    }
}

/// Engine-specific rules the controller consults. `algorithm` is the engine
/// the parent state selects for the block.
pub trait ConsensusRules {
    fn verify(&self, block: &Block, algorithm: Algorithm, members: &[String]) -> Result<(), String>;

    /// `Less` when `a` is preferred over `b` at equal height.
    fn prefer(&self, _a: &Block, _b: &Block, _algorithm: Algorithm) -> Ordering {
        Ordering::Equal
    }
}

/// Accepts every block; for replays that only check state.
pub struct AcceptAll;

impl ConsensusRules for AcceptAll {
    fn verify(&self, _: &Block, _: Algorithm, _: &[String]) -> Result<(), String> {
        Ok(())
    }
}

/// Greater height wins, then engine preference, then the smaller id.
pub fn resolve_fork<'a>(a: &'a Block, b: &'a Block, engine_pref: impl Fn(&Block, &Block) -> Ordering) -> &'a Block {
    let order = b
        .num()
        .cmp(&a.num())
        .then_with(|| engine_pref(a, b))
        .then_with(|| a.id().cmp(&b.id()));
    if order == Ordering::Greater {
        b
    } else {
        a
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completion {
    /// Ready for the chain controller, predecessors first.
    Routed(Vec<Block>),
    /// Parked until the named predecessor arrives.
    Pending { missing: String },
    Duplicate,
    Rejected(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchSubmission {
    Queued,
    Duplicate,
    Rejected(Vec<Violation>),
    /// Well formed, but fails to execute on the current head state.
    Unexecutable(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Consideration {
    Extended,
    ForkSwitched { requeued: usize },
    StoredSideChain,
    Rejected(Rejection),
}

#[derive(Debug, Default)]
pub struct PendingQueue {
    batches: IndexMap<String, Batch>,
    blocks: HashMap<String, Vec<Block>>,
}

impl PendingQueue {
    pub fn batches(&self) -> impl Iterator<Item = &Batch> {
        self.batches.values()
    }

    pub fn batch_count(&self) -> usize {
        self.batches.len()
    }

    pub fn contains_batch(&self, id: &str) -> bool {
        self.batches.contains_key(id)
    }

    pub fn parked_blocks(&self) -> usize {
        self.blocks.values().map(Vec::len).sum()
    }

    fn parked(&self, id: &str) -> bool {
        self.blocks.values().flatten().any(|b| b.id() == id)
    }
}

/// Result of building a block on some parent.
#[derive(Debug)]
pub struct Built {
    pub block: Block,
    /// Batches dropped from the queue because they failed execution.
    pub excluded: Vec<(String, ApplyError)>,
}

/// Reads through pending writes to a trie snapshot.
struct Overlay<'a> {
    trie: &'a SharedTrie,
    root: StateRoot,
    writes: HashMap<Address, Option<Vec<u8>>>,
}

impl StateView for Overlay<'_> {
    fn get(&self, address: &Address) -> Result<Option<Vec<u8>>, TrieError> {
        match self.writes.get(address) {
            Some(v) => Ok(v.clone()),
            None => self.trie.get(&self.root, address),
        }
    }
}

/// Read-only view of the state under a root.
pub struct Snapshot<'a> {
    pub trie: &'a SharedTrie,
    pub root: StateRoot,
}

impl StateView for Snapshot<'_> {
    fn get(&self, address: &Address) -> Result<Option<Vec<u8>>, TrieError> {
        self.trie.get(&self.root, address)
    }
}

#[derive(Debug)]
pub struct Execution {
    pub root: StateRoot,
    pub applied: Vec<Batch>,
    pub failed: Vec<(String, ApplyError)>,
}

/// Runs batches serially on `root`. A batch with any failing transaction is
/// left out entirely.
pub fn execute_batches(
    trie: &SharedTrie,
    root: StateRoot,
    batches: impl IntoIterator<Item = Batch>,
    ctx: &TxnContext,
) -> Result<Execution, TrieError> {
    let mut overlay = Overlay { trie, root, writes: HashMap::new() };
    let mut applied = Vec::new();
    let mut failed = Vec::new();
    for batch in batches {
        let mut staged: Vec<(Address, Option<Vec<u8>>)> = Vec::new();
        let mut error = None;
        for txn in &batch.transactions {
            // later transactions in the batch see earlier writes
            let before: Vec<(Address, Option<Option<Vec<u8>>>)> =
                staged.iter().map(|(a, v)| (a.clone(), overlay.writes.insert(a.clone(), v.clone()))).collect();
            let result = apply_transaction(txn, &overlay, ctx);
            for (a, prev) in before.into_iter().rev() {
                match prev {
                    Some(p) => overlay.writes.insert(a, p),
                    None => overlay.writes.remove(&a),
                };
            }
            match result {
                Ok(changes) => staged.extend(changes),
                Err(e) => {
                    error = Some(e);
                    break;
                }
            }
        }
        match error {
            Some(e) => failed.push((batch.id().to_string(), e)),
            None => {
                overlay.writes.extend(staged);
                applied.push(batch);
            }
        }
    }
    let mut changes: Vec<(Address, Option<Vec<u8>>)> = overlay.writes.into_iter().collect();
    changes.sort_by(|a, b| a.0.cmp(&b.0));
    let root = trie.apply(&root, &changes)?;
    Ok(Execution { root, applied, failed })
}

/// Builds the genesis block that installs the consensus settings. Nonces are
/// fixed so every node derives the same block from the same inputs.
pub fn build_genesis(
    trie: &SharedTrie,
    algorithm: Algorithm,
    members: &[String],
    signer: &KeyPair,
    ctx: &TxnContext,
) -> Result<Block, JournalError> {
    let mut sorted = members.to_vec();
    sorted.sort();
    let settings = [
        (CONSENSUS_ALGORITHM_KEY, algorithm.as_str().to_string()),
        (CONSENSUS_MEMBERS_KEY, sorted.join(",")),
    ];
    let sign_err = |e: crate::ledger::LedgerError| JournalError::Signing(e.to_string());
    let txns = settings
        .iter()
        .enumerate()
        .map(|(i, (key, value))| {
            build_transaction_with_nonce(
                &SettingPayload::new(key, value).encode(),
                &settings_family::family_spec(),
                signer,
                format!("{i:032x}"),
            )
            .map_err(sign_err)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let batch = build_batch(txns, signer).map_err(sign_err)?;
    let exec = execute_batches(trie, trie.empty_root(), vec![batch], ctx)?;
    if let Some((_, e)) = exec.failed.first() {
        return Err(JournalError::InvalidGenesis(e.to_string()));
    }
    let header = BlockHeader {
        block_num: 0,
        previous_block_id: GENESIS_PREVIOUS_ID.to_string(),
        signer_public_key: signer.public_key_hex().to_string(),
        batch_ids: exec.applied.iter().map(|b| b.id().to_string()).collect(),
        state_root_hash: exec.root.to_hex(),
        consensus_payload: ConsensusPayload::Genesis.encode(),
    };
    seal_block(header, exec.applied, signer).map_err(sign_err)
}

pub struct Journal {
    pub store: BlockStore,
    cache: HashMap<String, Block>,
    pub pending: PendingQueue,
    rejected: HashSet<String>,
    trie: SharedTrie,
}

impl Journal {
    pub fn new(store: BlockStore, trie: SharedTrie) -> Self {
        Self {
            store,
            cache: HashMap::new(),
            pending: PendingQueue::default(),
            rejected: HashSet::new(),
            trie,
        }
    }

    pub fn trie(&self) -> &SharedTrie {
        &self.trie
    }

    pub fn head(&self) -> Result<&Block, JournalError> {
        self.store.head().ok_or(JournalError::NoGenesis)
    }

    pub fn head_root(&self) -> Result<StateRoot, JournalError> {
        Ok(StateRoot::from_hex(&self.head()?.header.state_root_hash)?)
    }

    pub fn snapshot(&self, root: StateRoot) -> Snapshot<'_> {
        Snapshot { trie: &self.trie, root }
    }

    /// Commits the genesis block after checking its structure and state root.
    pub fn init_genesis(&mut self, genesis: Block, ctx: &TxnContext) -> Result<(), JournalError> {
        if let Some(stored) = self.store.by_num(0) {
            if stored.id() != genesis.id() {
                return Err(JournalError::InvalidGenesis("store was created from a different genesis".into()));
            }
            return Ok(());
        }
        if !genesis.is_genesis() {
            return Err(JournalError::InvalidGenesis("wrong height or predecessor".into()));
        }
        validate_block_structure(&genesis)
            .map_err(|v| JournalError::InvalidGenesis(format!("{} violations", v.len())))?;
        let exec = execute_batches(&self.trie, self.trie.empty_root(), genesis.batches.clone(), ctx)?;
        if !exec.failed.is_empty() || exec.root.to_hex() != genesis.header.state_root_hash {
            return Err(JournalError::InvalidGenesis("state does not match header".into()));
        }
        self.store.put_genesis(genesis)?;
        Ok(())
    }

    /// Engine and member list selected by the state under `root`.
    pub fn consensus_settings(&self, root: StateRoot) -> (Option<Algorithm>, Vec<String>) {
        let view = self.snapshot(root);
        let algorithm = read_setting(&view, CONSENSUS_ALGORITHM_KEY)
            .ok()
            .flatten()
            .and_then(|v| Algorithm::parse(&v));
        let mut members: Vec<String> = read_setting(&view, CONSENSUS_MEMBERS_KEY)
            .ok()
            .flatten()
            .map(|v| v.split(',').map(str::to_string).collect())
            .unwrap_or_default();
        members.sort();
        members.dedup();
        (algorithm, members)
    }

    /// Any known valid block: on the chain or in the cache.
    pub fn block(&self, id: &str) -> Option<&Block> {
        self.store.get(id).or_else(|| self.cache.get(id))
    }

    pub fn is_known(&self, id: &str) -> bool {
        self.block(id).is_some()
    }

    pub fn is_rejected(&self, id: &str) -> bool {
        self.rejected.contains(id)
    }

    pub fn cached_blocks(&self) -> usize {
        self.cache.len()
    }

    pub fn submit_batch(&mut self, batch: Batch) -> BatchSubmission {
        if let Err(v) = validate_batch(&batch) {
            return BatchSubmission::Rejected(v);
        }
        let id = batch.id().to_string();
        if self.pending.contains_batch(&id) || self.store.batch_height(&id).is_some() {
            return BatchSubmission::Duplicate;
        }
        self.pending.batches.insert(id, batch);
        BatchSubmission::Queued
    }

    /// [`submit_batch`](Self::submit_batch) followed by a trial execution
    /// on the head state, so a batch no publisher could include never
    /// lingers in the queue.
    pub fn admit_batch(&mut self, batch: Batch, ctx: &TxnContext) -> BatchSubmission {
        if let Err(v) = validate_batch(&batch) {
            return BatchSubmission::Rejected(v);
        }
        let id = batch.id().to_string();
        if self.pending.contains_batch(&id) || self.store.batch_height(&id).is_some() {
            return BatchSubmission::Duplicate;
        }
        let root = match self.head_root() {
            Ok(root) => root,
            Err(e) => return BatchSubmission::Unexecutable(e.to_string()),
        };
        match execute_batches(&self.trie, root, vec![batch.clone()], ctx) {
            Ok(exec) => {
                if let Some((_, e)) = exec.failed.into_iter().next() {
                    return BatchSubmission::Unexecutable(e.to_string());
                }
            }
            Err(e) => return BatchSubmission::Unexecutable(e.to_string()),
        }
        self.pending.batches.insert(id, batch);
        BatchSubmission::Queued
    }

    /// Completer entry for blocks arriving from gossip.
    pub fn submit_block(&mut self, block: Block) -> Completion {
        let id = block.id();
        if self.is_known(&id) || self.rejected.contains(&id) || self.pending.parked(&id) {
            return Completion::Duplicate;
        }
        if let Err(v) = validate_block_structure(&block) {
            self.rejected.insert(id);
            return Completion::Rejected(v);
        }
        let prev = block.previous_id().to_string();
        if !self.is_known(&prev) && !self.rejected.contains(&prev) {
            self.pending.blocks.entry(prev.clone()).or_default().push(block);
            return Completion::Pending { missing: prev };
        }
        let mut routed = vec![block];
        let mut i = 0;
        while i < routed.len() {
            let released = self.pending.blocks.remove(&routed[i].id()).unwrap_or_default();
            routed.extend(released);
            i += 1;
        }
        Completion::Routed(routed)
    }

    /// Walks from `id` back to the chain, returning the cached branch (oldest
    /// first) and the height of the fork point.
    fn branch_to_chain(&self, id: &str) -> Result<(Vec<Block>, u64), JournalError> {
        let mut branch = Vec::new();
        let mut cursor = id.to_string();
        loop {
            if let Some(b) = self.store.get(&cursor) {
                branch.reverse();
                return Ok((branch, b.num()));
            }
            let b = self.cache.get(&cursor).ok_or_else(|| JournalError::UnknownBlock(cursor.clone()))?;
            cursor = b.previous_id().to_string();
            branch.push(b.clone());
        }
    }

    /// Batch ids committed on the branch ending at `id` (store up to the
    /// fork point plus the cached branch).
    fn committed_on_branch(&self, id: &str) -> Result<(HashSet<String>, u64), JournalError> {
        let (branch, fork) = self.branch_to_chain(id)?;
        Ok((store::batch_ids(&branch), fork))
    }

    fn batch_on_branch(&self, batch_id: &str, branch: &HashSet<String>, fork: u64) -> bool {
        branch.contains(batch_id) || self.store.batch_height(batch_id).is_some_and(|h| h <= fork)
    }

    /// Verifies and executes `block` against its predecessor and caches it.
    pub fn validate(&mut self, block: &Block, rules: &dyn ConsensusRules, ctx: &TxnContext) -> Result<(), Rejection> {
        let id = block.id();
        if self.is_known(&id) {
            return Ok(());
        }
        if self.rejected.contains(&id) {
            return Err(Rejection::PreviouslyRejected);
        }
        let result = self.check(block, rules, ctx);
        match &result {
            Ok(()) => {
                self.cache.insert(id, block.clone());
            }
            Err(_) => {
                self.rejected.insert(id);
            }
        }
        result
    }

    fn check(&self, block: &Block, rules: &dyn ConsensusRules, ctx: &TxnContext) -> Result<(), Rejection> {
        validate_block_structure(block).map_err(Rejection::Structure)?;
        let parent = self
            .block(block.previous_id())
            .ok_or_else(|| Rejection::UnknownPredecessor(block.previous_id().to_string()))?;
        if parent.num() + 1 != block.num() {
            return Err(Rejection::Height);
        }
        let parent_root = StateRoot::from_hex(&parent.header.state_root_hash)
            .map_err(|e| Rejection::Consensus(e.to_string()))?;
        let (algorithm, members) = self.consensus_settings(parent_root);
        let algorithm = algorithm.ok_or_else(|| Rejection::Consensus("no consensus.algorithm in state".into()))?;
        rules.verify(block, algorithm, &members).map_err(Rejection::Consensus)?;
        let (branch, fork) = self
            .committed_on_branch(&parent.id())
            .map_err(|e| Rejection::UnknownPredecessor(e.to_string()))?;
        let mut seen = HashSet::new();
        for batch in &block.batches {
            if self.batch_on_branch(batch.id(), &branch, fork) || !seen.insert(batch.id()) {
                return Err(Rejection::DuplicateBatch(batch.id().to_string()));
            }
        }
        let exec = execute_batches(&self.trie, parent_root, block.batches.clone(), ctx)
            .map_err(|e| Rejection::Consensus(e.to_string()))?;
        if let Some((batch_id, e)) = exec.failed.into_iter().next() {
            return Err(Rejection::InvalidBatch { batch_id, reason: e.to_string() });
        }
        if exec.root.to_hex() != block.header.state_root_hash {
            return Err(Rejection::StateRootMismatch {
                expected: block.header.state_root_hash.clone(),
                actual: exec.root.to_hex(),
            });
        }
        Ok(())
    }

    /// Makes the validated block `id` the head, switching branches when it
    /// does not extend the current head.
    pub fn commit(&mut self, id: &str) -> Result<Consideration, JournalError> {
        if self.store.contains(id) {
            return Ok(Consideration::Extended);
        }
        let (branch, fork) = self.branch_to_chain(id)?;
        let head_num = self.head()?.num();
        let outcome = if fork == head_num {
            for block in branch.iter().cloned() {
                self.store.extend(block)?;
            }
            Consideration::Extended
        } else {
            let abandoned = self.store.switch_branch(fork, branch.clone())?;
            let kept = store::batch_ids(&branch);
            let mut requeued = 0;
            for block in &abandoned {
                for batch in &block.batches {
                    if !kept.contains(batch.id()) && self.store.batch_height(batch.id()).is_none() {
                        self.pending.batches.insert(batch.id().to_string(), batch.clone());
                        requeued += 1;
                    }
                }
                self.cache.insert(block.id(), block.clone());
            }
            Consideration::ForkSwitched { requeued }
        };
        for block in &branch {
            self.cache.remove(&block.id());
            for batch in &block.batches {
                self.pending.batches.shift_remove(batch.id());
            }
        }
        self.evict();
        Ok(outcome)
    }

    fn evict(&mut self) {
        let Some(height) = self.store.height() else { return };
        self.cache.retain(|_, b| b.num() + CACHE_DEPTH >= height);
    }

    /// Chain controller for fork-choice engines: validate, then adopt the
    /// block if it beats the current head.
    pub fn consider(&mut self, block: &Block, rules: &dyn ConsensusRules, ctx: &TxnContext) -> Result<Consideration, JournalError> {
        if let Err(r) = self.validate(block, rules, ctx) {
            return Ok(Consideration::Rejected(r));
        }
        let head = self.head()?.clone();
        if head.id() == block.previous_id() {
            return self.commit(&block.id());
        }
        if self.store.contains(&block.id()) {
            return Ok(Consideration::Extended);
        }
        let algorithm = self.consensus_settings(self.head_root()?).0.unwrap_or(Algorithm::PoetCft);
        let winner = resolve_fork(&head, block, |a, b| rules.prefer(a, b, algorithm)).id();
        if winner == block.id() {
            self.commit(&winner)
        } else {
            Ok(Consideration::StoredSideChain)
        }
    }

    /// Block publisher: executes pending batches in arrival order on top of
    /// `parent_id` and seals a block. Batches already on that branch are
    /// skipped; failing batches are dropped from the queue.
    pub fn build_block(
        &mut self,
        parent_id: &str,
        consensus_payload: Vec<u8>,
        signer: &KeyPair,
        ctx: &TxnContext,
        max_batches: usize,
    ) -> Result<Built, JournalError> {
        let (branch, fork) = self.committed_on_branch(parent_id)?;
        let candidates: Vec<Batch> = self
            .pending
            .batches()
            .filter(|b| !self.batch_on_branch(b.id(), &branch, fork))
            .take(max_batches)
            .cloned()
            .collect();
        let built = self.build_with(parent_id, candidates, consensus_payload, signer, ctx)?;
        for (id, _) in &built.excluded {
            self.pending.batches.shift_remove(id);
        }
        Ok(built)
    }

    /// Seals a block over exactly the given batches (those that execute).
    pub fn build_with(
        &mut self,
        parent_id: &str,
        batches: Vec<Batch>,
        consensus_payload: Vec<u8>,
        signer: &KeyPair,
        ctx: &TxnContext,
    ) -> Result<Built, JournalError> {
        let parent = self.block(parent_id).ok_or_else(|| JournalError::UnknownBlock(parent_id.to_string()))?.clone();
        let parent_root = StateRoot::from_hex(&parent.header.state_root_hash)?;
        let exec = execute_batches(&self.trie, parent_root, batches, ctx)?;
        let header = BlockHeader {
            block_num: parent.num() + 1,
            previous_block_id: parent.id(),
            signer_public_key: signer.public_key_hex().to_string(),
            batch_ids: exec.applied.iter().map(|b| b.id().to_string()).collect(),
            state_root_hash: exec.root.to_hex(),
            consensus_payload,
        };
        let block = seal_block(header, exec.applied, signer).map_err(|e| JournalError::Signing(e.to_string()))?;
        self.cache.insert(block.id(), block.clone());
        Ok(Built { block, excluded: exec.failed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::airquality::{self, AirReading, SourceFlag};
    use crate::ledger::build_transaction;
    use crate::trie::StateTrie;
    use std::sync::Arc;

    const NOW: i64 = 1_700_000_000;
    const CTX: TxnContext = TxnContext { clock_s: NOW };

    fn genesis(trie: &SharedTrie, key: &KeyPair) -> Block {
        build_genesis(trie, Algorithm::PoetCft, &[key.public_key_hex().to_string()], key, &CTX).unwrap()
    }

    fn reading_batch(key: &KeyPair, pm: i64, ts: i64) -> Batch {
        let r = AirReading {
            pm1_0: pm,
            pm2_5: pm,
            pm10_0: pm,
            lat_udeg: 38_818_000,
            lon_udeg: -77_168_000 + pm,
            timestamp_s: ts,
            source_flag: SourceFlag::Citizen,
            reporter_public_key: key.public_key_hex().to_string(),
        };
        let txn = build_transaction(&airquality::encode_reading(&r), &airquality::family_spec(), key).unwrap();
        build_batch(vec![txn], key).unwrap()
    }

    fn journal() -> (Journal, KeyPair) {
        let key = KeyPair::from_seed(&[5; 32]).unwrap();
        let trie: SharedTrie = Arc::new(StateTrie::new());
        let mut j = Journal::new(BlockStore::in_memory(), trie.clone());
        j.init_genesis(genesis(&trie, &key), &CTX).unwrap();
        (j, key)
    }

    fn payload() -> Vec<u8> {
        ConsensusPayload::PoetCft { round: 0, wait_ms: 1 }.encode()
    }

    #[test]
    fn publisher_keeps_arrival_order_and_drops_invalid() {
        let (mut j, key) = journal();
        let good: Vec<Batch> = (1..=3).map(|i| reading_batch(&key, i, NOW - 10)).collect();
        let bad = reading_batch(&key, 5000, NOW - 10);
        j.submit_batch(good[0].clone());
        j.submit_batch(bad.clone());
        j.submit_batch(good[1].clone());
        j.submit_batch(good[2].clone());
        let head = j.head().unwrap().id();
        let built = j.build_block(&head, payload(), &key, &CTX, 100).unwrap();
        let ids: Vec<&str> = good.iter().map(Batch::id).collect();
        assert_eq!(built.block.header.batch_ids, ids);
        assert_eq!(built.excluded.len(), 1);
        assert_eq!(built.excluded[0].0, bad.id());
        assert!(!j.pending.contains_batch(bad.id()));
        assert_eq!(j.commit(&built.block.id()).unwrap(), Consideration::Extended);
        assert_eq!(j.pending.batch_count(), 0);
        assert_eq!(j.store.batch_height(good[1].id()), Some(1));
    }

    #[test]
    fn wrong_state_root_is_rejected_for_good() {
        let (mut j, key) = journal();
        let head = j.head().unwrap().clone();
        let batch = reading_batch(&key, 7, NOW);
        let header = BlockHeader {
            block_num: 1,
            previous_block_id: head.id(),
            signer_public_key: key.public_key_hex().to_string(),
            batch_ids: vec![batch.id().to_string()],
            state_root_hash: head.header.state_root_hash.clone(),
            consensus_payload: payload(),
        };
        let block = seal_block(header, vec![batch], &key).unwrap();
        assert!(matches!(
            j.consider(&block, &AcceptAll, &CTX).unwrap(),
            Consideration::Rejected(Rejection::StateRootMismatch { .. })
        ));
        assert_eq!(j.consider(&block, &AcceptAll, &CTX).unwrap(), Consideration::Rejected(Rejection::PreviouslyRejected));
    }

    #[test]
    fn out_of_order_blocks_are_parked_then_released() {
        let (mut source, key) = journal();
        let (mut sink, _) = journal();
        let mut blocks = Vec::new();
        for i in 0..2 {
            source.submit_batch(reading_batch(&key, 10 + i, NOW));
            let head = source.head().unwrap().id();
            let built = source.build_block(&head, payload(), &key, &CTX, 10).unwrap();
            source.commit(&built.block.id()).unwrap();
            blocks.push(built.block);
        }
        assert_eq!(sink.submit_block(blocks[1].clone()), Completion::Pending { missing: blocks[0].id() });
        match sink.submit_block(blocks[0].clone()) {
            Completion::Routed(r) => {
                assert_eq!(r, blocks);
                for b in &r {
                    assert_eq!(sink.consider(b, &AcceptAll, &CTX).unwrap(), Consideration::Extended);
                }
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(sink.head().unwrap().id(), source.head().unwrap().id());
        assert_eq!(sink.submit_block(blocks[0].clone()), Completion::Duplicate);
    }

    #[test]
    fn longer_branch_wins_and_requeues_abandoned_batches() {
        let (mut j, key) = journal();
        let g = j.head().unwrap().id();
        let lone = reading_batch(&key, 1, NOW);
        let a1 = j.build_with(&g, vec![lone.clone()], payload(), &key, &CTX).unwrap().block;
        j.commit(&a1.id()).unwrap();
        let shared = reading_batch(&key, 2, NOW);
        let b1 = j.build_with(&g, vec![shared.clone()], payload(), &key, &CTX).unwrap().block;
        let b2 = j.build_with(&b1.id(), vec![reading_batch(&key, 3, NOW)], payload(), &key, &CTX).unwrap().block;
        let (mut other, _) = journal();
        other.consider(&a1, &AcceptAll, &CTX).unwrap();
        assert!(matches!(
            other.consider(&b1, &AcceptAll, &CTX).unwrap(),
            Consideration::StoredSideChain | Consideration::ForkSwitched { .. }
        ));
        let outcome = other.consider(&b2, &AcceptAll, &CTX).unwrap();
        assert!(matches!(outcome, Consideration::ForkSwitched { .. } | Consideration::Extended));
        assert_eq!(other.head().unwrap().id(), b2.id());
        assert!(other.pending.contains_batch(lone.id()));
        assert!(!other.pending.contains_batch(shared.id()));
        // a batch can not be committed twice on one branch
        let dup = j.build_with(&b2.id(), vec![shared], payload(), &key, &CTX).unwrap().block;
        assert!(matches!(other.consider(&dup, &AcceptAll, &CTX).unwrap(), Consideration::Rejected(Rejection::DuplicateBatch(_))));
    }

    #[test]
    fn resolve_fork_is_symmetric() {
        let (mut j, key) = journal();
        let g = j.head().unwrap().id();
        let mut blocks = Vec::new();
        for i in 0..6 {
            let b = j.build_with(&g, vec![reading_batch(&key, 20 + i, NOW)], payload(), &key, &CTX).unwrap().block;
            blocks.push(b);
        }
        let c = j.build_with(&blocks[0].id(), vec![], payload(), &key, &CTX).unwrap().block;
        blocks.push(c.clone());
        for a in &blocks {
            for b in &blocks {
                let x = resolve_fork(a, b, |_, _| Ordering::Equal).id();
                let y = resolve_fork(b, a, |_, _| Ordering::Equal).id();
                assert_eq!(x, y);
            }
            assert_eq!(resolve_fork(a, &c, |_, _| Ordering::Equal).id(), c.id());
        }
    }
}
