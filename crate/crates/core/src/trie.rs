//! Persistent Merkle-radix trie over 70-hex-character addresses.
//!
//! Branching is on hex nibbles, so every stored value sits exactly 70 levels
//! below the root. Nodes are content-addressed by the SHA-512 of their
//! canonical encoding and never change once written; an update creates new
//! nodes along one path and returns a new root, leaving older roots readable.
//!
//! The empty node encodes to zero bytes, so the empty trie's root is the
//! SHA-512 of empty input. Empty children are pruned, which makes the root a
//! pure function of the address→value mapping.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, hex_bytes, is_lower_hex};
use crate::crypto::sha512_bytes;

/// Address length in hex characters (6-char namespace + 64-char location).
pub const ADDRESS_LEN: usize = 70;
pub const NAMESPACE_LEN: usize = 6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrieError {
    #[error("malformed address: {0}")]
    MalformedAddress(String),
    #[error("missing trie node {0}")]
    MissingNode(String),
    #[error("malformed proof: {0}")]
    MalformedProof(String),
    #[error("node store: {0}")]
    Storage(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Address(String);

impl Address {
    pub fn parse(s: &str) -> Result<Self, TrieError> {
        if is_lower_hex(s, ADDRESS_LEN) {
            Ok(Address(s.to_string()))
        } else {
            Err(TrieError::MalformedAddress(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn namespace(&self) -> &str {
        &self.0[..NAMESPACE_LEN]
    }

    fn nibbles(&self) -> Vec<u8> {
        self.0.bytes().map(nibble_of).collect()
    }
}

impl TryFrom<String> for Address {
    type Error = TrieError;
    fn try_from(s: String) -> Result<Self, TrieError> {
        Address::parse(&s)
    }
}

impl From<Address> for String {
    fn from(a: Address) -> String {
        a.0
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn nibble_of(c: u8) -> u8 {
    match c {
        b'0'..=b'9' => c - b'0',
        b'a'..=b'f' => c - b'a' + 10,
        _ => unreachable!("address validated as lowercase hex"),
    }
}

const HEX: &[u8; 16] = b"0123456789abcdef";

/// A trie root (or any node) digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateRoot(pub [u8; 64]);

impl StateRoot {
    pub fn empty() -> Self {
        StateRoot(sha512_bytes(b""))
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::empty()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, TrieError> {
        let bytes = hex::decode(s).map_err(|_| TrieError::Storage(format!("bad root {s}")))?;
        Ok(StateRoot(bytes.try_into().map_err(|_| TrieError::Storage(format!("bad root {s}")))?))
    }
}

impl fmt::Debug for StateRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateRoot({}…)", &self.to_hex()[..16])
    }
}

impl fmt::Display for StateRoot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrieNode {
    pub children: BTreeMap<u8, StateRoot>,
    pub value: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    children: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_hex")]
    value: Option<Vec<u8>>,
}

mod opt_hex {
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(bytes) => super::hex_bytes::serialize(bytes, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        super::hex_bytes::deserialize(d).map(Some)
    }
}

impl TrieNode {
    pub fn is_empty(&self) -> bool {
        self.children.is_empty() && self.value.is_none()
    }

    /// Canonical encoding; the empty node is zero bytes.
    pub fn encode(&self) -> Vec<u8> {
        if self.is_empty() {
            return Vec::new();
        }
        let record = NodeRecord {
            children: self
                .children
                .iter()
                .map(|(n, d)| ((HEX[*n as usize] as char).to_string(), d.to_hex()))
                .collect(),
            value: self.value.clone(),
        };
        codec::to_canonical(&record).expect("trie nodes hold only strings")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TrieError> {
        if bytes.is_empty() {
            return Ok(TrieNode::default());
        }
        let record: NodeRecord =
            codec::from_canonical(bytes).map_err(|e| TrieError::MalformedProof(e.to_string()))?;
        let mut children = BTreeMap::new();
        for (k, v) in record.children {
            let [c] = k.as_bytes() else {
                return Err(TrieError::MalformedProof(format!("child key {k}")));
            };
            if !c.is_ascii_hexdigit() || c.is_ascii_uppercase() {
                return Err(TrieError::MalformedProof(format!("child key {k}")));
            }
            let digest = StateRoot::from_hex(&v).map_err(|e| TrieError::MalformedProof(e.to_string()))?;
            children.insert(nibble_of(*c), digest);
        }
        let node = TrieNode {
            children,
            value: record.value,
        };
        if node.encode() != bytes {
            return Err(TrieError::MalformedProof("non-canonical node".into()));
        }
        Ok(node)
    }

    pub fn digest(&self) -> StateRoot {
        StateRoot(sha512_bytes(&self.encode()))
    }
}

/// Node encodings along an address path, root first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    #[serde(with = "proof_nodes")]
    pub nodes: Vec<Vec<u8>>,
}

mod proof_nodes {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(nodes: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(nodes.iter().map(hex::encode))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<u8>>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|s| hex::decode(s).map_err(D::Error::custom))
            .collect()
    }
}

/// Content-addressed node store shared by every root it has produced.
#[derive(Default)]
pub struct StateTrie {
    nodes: RwLock<HashMap<StateRoot, Arc<TrieNode>>>,
    journal: Option<Mutex<File>>,
}

impl fmt::Debug for StateTrie {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("StateTrie")
            .field("nodes", &self.nodes.read().map(|n| n.len()).unwrap_or(0))
            .field("persistent", &self.journal.is_some())
            .finish()
    }
}

pub type Change = (Address, Option<Vec<u8>>);

impl StateTrie {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens (or creates) an append-only node file: records of a 64-byte
    /// digest, a 4-byte big-endian length and the node encoding.
    pub fn open(path: &Path) -> Result<Self, TrieError> {
        let storage = |e: std::io::Error| TrieError::Storage(e.to_string());
        let mut nodes = HashMap::new();
        if path.exists() {
            let mut reader = BufReader::new(File::open(path).map_err(storage)?);
            loop {
                let mut digest = [0u8; 64];
                match reader.read_exact(&mut digest) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                    Err(e) => return Err(storage(e)),
                }
                let mut len = [0u8; 4];
                reader.read_exact(&mut len).map_err(storage)?;
                let mut body = vec![0u8; u32::from_be_bytes(len) as usize];
                reader.read_exact(&mut body).map_err(storage)?;
                let node = TrieNode::decode(&body).map_err(|e| TrieError::Storage(e.to_string()))?;
                if node.digest().0 != digest {
                    return Err(TrieError::Storage("node digest mismatch in store".into()));
                }
                nodes.insert(StateRoot(digest), Arc::new(node));
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(storage)?;
        Ok(Self {
            nodes: RwLock::new(nodes),
            journal: Some(Mutex::new(file)),
        })
    }

    pub fn empty_root(&self) -> StateRoot {
        StateRoot::empty()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.read().expect("trie lock").len()
    }

    fn load(&self, digest: &StateRoot) -> Result<Arc<TrieNode>, TrieError> {
        if digest.is_empty() {
            return Ok(Arc::new(TrieNode::default()));
        }
        self.nodes
            .read()
            .expect("trie lock")
            .get(digest)
            .cloned()
            .ok_or_else(|| TrieError::MissingNode(digest.to_hex()))
    }

    fn store(&self, node: TrieNode) -> Result<StateRoot, TrieError> {
        if node.is_empty() {
            return Ok(StateRoot::empty());
        }
        let encoded = node.encode();
        let digest = StateRoot(sha512_bytes(&encoded));
        let mut nodes = self.nodes.write().expect("trie lock");
        if !nodes.contains_key(&digest) {
            if let Some(file) = &self.journal {
                let mut file = file.lock().expect("trie file lock");
                let mut record = Vec::with_capacity(68 + encoded.len());
                record.extend_from_slice(&digest.0);
                record.extend_from_slice(&(encoded.len() as u32).to_be_bytes());
                record.extend_from_slice(&encoded);
                file.write_all(&record).map_err(|e| TrieError::Storage(e.to_string()))?;
            }
            nodes.insert(digest, Arc::new(node));
        }
        Ok(digest)
    }

    pub fn get(&self, root: &StateRoot, address: &Address) -> Result<Option<Vec<u8>>, TrieError> {
        let mut node = self.load(root)?;
        for nibble in address.nibbles() {
            match node.children.get(&nibble) {
                Some(child) => node = self.load(child)?,
                None => return Ok(None),
            }
        }
        Ok(node.value.clone())
    }

    pub fn set(&self, root: &StateRoot, address: &Address, value: Vec<u8>) -> Result<StateRoot, TrieError> {
        self.apply(root, &[(address.clone(), Some(value))])
    }

    pub fn delete(&self, root: &StateRoot, address: &Address) -> Result<StateRoot, TrieError> {
        self.apply(root, &[(address.clone(), None)])
    }

    /// Applies a list of writes (`Some`) and deletions (`None`) in one pass;
    /// later entries for the same address win.
    pub fn apply(&self, root: &StateRoot, changes: &[Change]) -> Result<StateRoot, TrieError> {
        if changes.is_empty() {
            return Ok(*root);
        }
        let mut latest: BTreeMap<Vec<u8>, Option<&[u8]>> = BTreeMap::new();
        for (address, value) in changes {
            latest.insert(address.nibbles(), value.as_deref());
        }
        let sorted: Vec<(Vec<u8>, Option<&[u8]>)> = latest.into_iter().collect();
        self.update(root, &sorted, 0)
    }

    fn update(&self, digest: &StateRoot, changes: &[(Vec<u8>, Option<&[u8]>)], depth: usize) -> Result<StateRoot, TrieError> {
        let mut node = (*self.load(digest)?).clone();
        if depth == ADDRESS_LEN {
            // a sorted, deduplicated slice has exactly one entry at full depth
            node.value = changes[0].1.map(<[u8]>::to_vec);
            return self.store(node);
        }
        let mut start = 0;
        while start < changes.len() {
            let nibble = changes[start].0[depth];
            let end = start + changes[start..].iter().take_while(|(k, _)| k[depth] == nibble).count();
            let child = node.children.get(&nibble).copied().unwrap_or_else(StateRoot::empty);
            let updated = self.update(&child, &changes[start..end], depth + 1)?;
            if updated.is_empty() {
                node.children.remove(&nibble);
            } else {
                node.children.insert(nibble, updated);
            }
            start = end;
        }
        self.store(node)
    }

    /// Collects the node encodings from the root down the address path, until
    /// the path ends or leaves the trie.
    pub fn prove(&self, root: &StateRoot, address: &Address) -> Result<Proof, TrieError> {
        let mut nodes = Vec::new();
        let mut digest = *root;
        for nibble in address.nibbles() {
            if digest.is_empty() {
                return Ok(Proof { nodes });
            }
            let node = self.load(&digest)?;
            nodes.push(node.encode());
            match node.children.get(&nibble) {
                Some(child) => digest = *child,
                None => return Ok(Proof { nodes }),
            }
        }
        if !digest.is_empty() {
            nodes.push(self.load(&digest)?.encode());
        }
        Ok(Proof { nodes })
    }

    /// Every (address, value) stored under `root` whose address starts with
    /// `prefix`, in address order.
    pub fn entries_with_prefix(&self, root: &StateRoot, prefix: &str) -> Result<Vec<(Address, Vec<u8>)>, TrieError> {
        if prefix.len() > ADDRESS_LEN || !prefix.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(TrieError::MalformedAddress(prefix.to_string()));
        }
        let mut node = self.load(root)?;
        let mut path: Vec<u8> = Vec::with_capacity(ADDRESS_LEN);
        for nibble in prefix.bytes().map(nibble_of) {
            match node.children.get(&nibble) {
                Some(child) => node = self.load(child)?,
                None => return Ok(Vec::new()),
            }
            path.push(nibble);
        }
        let mut out = Vec::new();
        self.collect(&node, &mut path, &mut out)?;
        Ok(out)
    }

    fn collect(&self, node: &TrieNode, path: &mut Vec<u8>, out: &mut Vec<(Address, Vec<u8>)>) -> Result<(), TrieError> {
        if path.len() == ADDRESS_LEN {
            if let Some(v) = &node.value {
                let text: String = path.iter().map(|n| HEX[*n as usize] as char).collect();
                out.push((Address(text), v.clone()));
            }
            return Ok(());
        }
        for (nibble, child) in &node.children {
            path.push(*nibble);
            let child = self.load(child)?;
            self.collect(&child, path, out)?;
            path.pop();
        }
        Ok(())
    }
}

/// Checks a proof that `address` maps to `value` (or is absent) under `root`.
pub fn verify_proof(root: &StateRoot, address: &Address, value: Option<&[u8]>, proof: &Proof) -> Result<bool, TrieError> {
    let nibbles = address.nibbles();
    let mut expected = *root;
    let mut depth = 0;
    for (i, bytes) in proof.nodes.iter().enumerate() {
        if StateRoot(sha512_bytes(bytes)) != expected || expected.is_empty() {
            return Ok(false);
        }
        let node = TrieNode::decode(bytes)?;
        if depth == ADDRESS_LEN {
            return Ok(i + 1 == proof.nodes.len() && node.value.as_deref() == value);
        }
        match node.children.get(&nibbles[depth]) {
            Some(child) => expected = *child,
            None => return Ok(i + 1 == proof.nodes.len() && value.is_none()),
        }
        depth += 1;
    }
    // the proof stopped at an empty subtree
    Ok(expected.is_empty() && value.is_none())
}

/// Shared handle used across the validator.
pub type SharedTrie = Arc<StateTrie>;
