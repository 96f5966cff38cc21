//! Durable chain storage. Blocks are appended to `blocks.log` as
//! length-prefixed canonical records the first time they join the chain; the
//! head id lives in a `HEAD` sidecar replaced atomically. The chain index is
//! rebuilt on open by walking back from the head.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::codec;
use crate::ledger::{Batch, Block, GENESIS_PREVIOUS_ID};

const LOG_FILE: &str = "blocks.log";
const HEAD_FILE: &str = "HEAD";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt block store: {0}")]
    Corrupt(String),
    #[error("block {0} does not extend the head")]
    NotHeadChild(String),
}

#[derive(Debug, Default)]
pub struct BlockStore {
    blocks: HashMap<String, Block>,
    /// Chain index: position `n` holds the id of block number `n`.
    chain: Vec<String>,
    /// Committed batch id -> block number.
    batches: HashMap<String, u64>,
    recorded: HashSet<String>,
    dir: Option<PathBuf>,
    log: Option<File>,
}

impl BlockStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store under `dir`.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        fs::create_dir_all(dir)?;
        let log_path = dir.join(LOG_FILE);
        let mut blocks = HashMap::new();
        if log_path.exists() {
            let mut bytes = Vec::new();
            File::open(&log_path)?.read_to_end(&mut bytes)?;
            let mut rest = bytes.as_slice();
            while !rest.is_empty() {
                if rest.len() < 4 {
                    return Err(StoreError::Corrupt("truncated record length".into()));
                }
                let len = u32::from_be_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
                let body = rest
                    .get(4..4 + len)
                    .ok_or_else(|| StoreError::Corrupt("truncated record".into()))?;
                let block: Block = codec::from_canonical(body).map_err(|e| StoreError::Corrupt(e.to_string()))?;
                blocks.insert(block.id(), block);
                rest = &rest[4 + len..];
            }
        }
        let recorded: HashSet<String> = blocks.keys().cloned().collect();
        let mut store = Self {
            blocks,
            recorded,
            dir: Some(dir.to_path_buf()),
            log: Some(OpenOptions::new().create(true).append(true).open(&log_path)?),
            ..Self::default()
        };
        let head_path = dir.join(HEAD_FILE);
        if head_path.exists() {
            let head = fs::read_to_string(&head_path)?.trim().to_string();
            let mut path = Vec::new();
            let mut cursor = head;
            loop {
                let block = store
                    .blocks
                    .get(&cursor)
                    .ok_or_else(|| StoreError::Corrupt(format!("missing block {cursor}")))?;
                path.push(cursor.clone());
                if block.is_genesis() {
                    break;
                }
                if block.num() == 0 || block.previous_id() == GENESIS_PREVIOUS_ID {
                    return Err(StoreError::Corrupt(format!("broken link at {cursor}")));
                }
                cursor = block.previous_id().to_string();
            }
            path.reverse();
            for (n, id) in path.iter().enumerate() {
                if store.blocks[id].num() != n as u64 {
                    return Err(StoreError::Corrupt(format!("block {id} has the wrong height")));
                }
            }
            store.chain = path;
            store.reindex_batches();
        }
        Ok(store)
    }

    fn reindex_batches(&mut self) {
        self.batches.clear();
        for id in &self.chain {
            let block = &self.blocks[id];
            for batch in &block.batches {
                self.batches.insert(batch.id().to_string(), block.num());
            }
        }
    }

    fn record(&mut self, block: &Block) -> Result<(), StoreError> {
        let id = block.id();
        if self.recorded.contains(&id) {
            return Ok(());
        }
        if let Some(log) = self.log.as_mut() {
            let body = codec::to_canonical(block).expect("blocks encode");
            let mut record = Vec::with_capacity(body.len() + 4);
            record.extend_from_slice(&(body.len() as u32).to_be_bytes());
            record.extend_from_slice(&body);
            log.write_all(&record)?;
        }
        self.recorded.insert(id);
        Ok(())
    }

    fn write_head(&mut self) -> Result<(), StoreError> {
        let (Some(dir), Some(head)) = (&self.dir, self.chain.last()) else {
            return Ok(());
        };
        if let Some(log) = self.log.as_mut() {
            log.sync_data()?;
        }
        let tmp = dir.join("HEAD.tmp");
        fs::write(&tmp, head)?;
        fs::rename(tmp, dir.join(HEAD_FILE))?;
        Ok(())
    }

    pub fn head(&self) -> Option<&Block> {
        self.chain.last().map(|id| &self.blocks[id])
    }

    pub fn head_id(&self) -> Option<&str> {
        self.chain.last().map(String::as_str)
    }

    pub fn height(&self) -> Option<u64> {
        self.chain.len().checked_sub(1).map(|h| h as u64)
    }

    /// A block on the current chain.
    pub fn get(&self, id: &str) -> Option<&Block> {
        self.blocks.get(id).filter(|b| self.on_chain(b))
    }

    fn on_chain(&self, block: &Block) -> bool {
        self.chain.get(block.num() as usize).is_some_and(|id| *id == block.id())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn by_num(&self, num: u64) -> Option<&Block> {
        self.chain.get(num as usize).map(|id| &self.blocks[id])
    }

    /// Height at which a batch was committed, if it was.
    pub fn batch_height(&self, batch_id: &str) -> Option<u64> {
        self.batches.get(batch_id).copied()
    }

    pub fn committed_batches(&self) -> usize {
        self.batches.len()
    }

    /// Chain blocks from genesis to head.
    pub fn iter(&self) -> impl DoubleEndedIterator<Item = &Block> + ExactSizeIterator {
        self.chain.iter().map(|id| &self.blocks[id])
    }

    pub fn put_genesis(&mut self, block: Block) -> Result<(), StoreError> {
        if !self.chain.is_empty() || !block.is_genesis() {
            return Err(StoreError::NotHeadChild(block.id()));
        }
        self.append(block)
    }

    /// Appends a block whose predecessor is the head.
    pub fn extend(&mut self, block: Block) -> Result<(), StoreError> {
        match self.head() {
            Some(head) if head.id() == block.previous_id() && head.num() + 1 == block.num() => self.append(block),
            _ => Err(StoreError::NotHeadChild(block.id())),
        }
    }

    fn append(&mut self, block: Block) -> Result<(), StoreError> {
        self.record(&block)?;
        let id = block.id();
        for batch in &block.batches {
            self.batches.insert(batch.id().to_string(), block.num());
        }
        self.chain.push(id.clone());
        self.blocks.insert(id, block);
        self.write_head()
    }

    /// Drops the chain above `fork_num`, then appends `branch` (ordered,
    /// starting at `fork_num + 1`). Returns the abandoned blocks.
    pub fn switch_branch(&mut self, fork_num: u64, branch: Vec<Block>) -> Result<Vec<Block>, StoreError> {
        let abandoned_ids = self.chain.split_off(fork_num as usize + 1);
        let abandoned: Vec<Block> = abandoned_ids.iter().map(|id| self.blocks[id].clone()).collect();
        for block in &abandoned {
            for batch in &block.batches {
                self.batches.remove(batch.id());
            }
        }
        for block in branch {
            let head = self.head().expect("fork point stays");
            if head.id() != block.previous_id() {
                return Err(StoreError::NotHeadChild(block.id()));
            }
            self.record(&block)?;
            for batch in &block.batches {
                self.batches.insert(batch.id().to_string(), block.num());
            }
            let id = block.id();
            self.chain.push(id.clone());
            self.blocks.insert(id, block);
        }
        self.write_head()?;
        Ok(abandoned)
    }
}

/// Batch ids contained in a list of blocks.
pub fn batch_ids<'a>(blocks: impl IntoIterator<Item = &'a Block>) -> HashSet<String> {
    blocks.into_iter().flat_map(|b| b.batches.iter().map(Batch::id).map(str::to_string)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{sha512_digest, KeyPair};
    use crate::ledger::{seal_block, BlockHeader};

    fn block(num: u64, prev: &str, tag: &str) -> Block {
        let key = KeyPair::from_seed(&[3; 32]).unwrap();
        let header = BlockHeader {
            block_num: num,
            previous_block_id: prev.to_string(),
            signer_public_key: key.public_key_hex().to_string(),
            batch_ids: vec![],
            state_root_hash: sha512_digest(tag.as_bytes()),
            consensus_payload: b"{}".to_vec(),
        };
        seal_block(header, vec![], &key).unwrap()
    }

    #[test]
    fn reopen_restores_head_after_switch() {
        let dir = tempfile::tempdir().unwrap();
        let g = block(0, GENESIS_PREVIOUS_ID, "g");
        let a1 = block(1, &g.id(), "a1");
        let b1 = block(1, &g.id(), "b1");
        let b2 = block(2, &b1.id(), "b2");
        {
            let mut store = BlockStore::open(dir.path()).unwrap();
            store.put_genesis(g.clone()).unwrap();
            store.extend(a1.clone()).unwrap();
            let abandoned = store.switch_branch(0, vec![b1.clone(), b2.clone()]).unwrap();
            assert_eq!(abandoned, vec![a1.clone()]);
        }
        let store = BlockStore::open(dir.path()).unwrap();
        assert_eq!(store.head_id(), Some(b2.id().as_str()));
        assert_eq!(store.height(), Some(2));
        assert!(!store.contains(&a1.id()));
        assert_eq!(store.by_num(1).unwrap(), &b1);
    }

    #[test]
    fn extend_requires_head_child() {
        let mut store = BlockStore::in_memory();
        let g = block(0, GENESIS_PREVIOUS_ID, "g");
        store.put_genesis(g.clone()).unwrap();
        assert!(store.extend(block(2, &g.id(), "x")).is_err());
        assert!(store.extend(block(1, &sha512_digest(b"other"), "x")).is_err());
        assert!(store.extend(block(1, &g.id(), "x")).is_ok());
    }

    #[test]
    fn corrupt_log_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut store = BlockStore::open(dir.path()).unwrap();
            store.put_genesis(block(0, GENESIS_PREVIOUS_ID, "g")).unwrap();
        }
        let log = dir.path().join(LOG_FILE);
        let mut bytes = fs::read(&log).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&log, bytes).unwrap();
        assert!(matches!(BlockStore::open(dir.path()), Err(StoreError::Corrupt(_))));
    }
}
