//! REST boundary of a validator. Handlers are plain functions over a request
//! record so the HTTP server and the simulator share them. Writes only
//! enqueue; reads go through an immutable chain snapshot.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::consensus::NodeId;
use crate::family::airquality::{decode_reading, AirReading, SourceFlag};
use crate::family::AIRQUALITY_NAMESPACE;
use crate::ledger::{validate_batch, Batch, Block, Violation};
use crate::registry::{KeyStatus, Registry, RegistryError};
use crate::trie::{Address, SharedTrie, StateRoot};

pub const API_KEY_HEADER: &str = "x-api-key";
pub const DEFAULT_PAGE: usize = 100;
pub const MAX_PAGE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchList {
    pub batches: Vec<Batch>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmitStatus {
    Accepted,
    Invalid,
    Unauthorized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitReceipt {
    pub batch_id: String,
    pub status: SubmitStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violations: Option<Vec<Violation>>,
}

/// Win-rate monitoring for one validator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRate {
    pub node_id: NodeId,
    pub wins: u64,
    pub rounds: u64,
    /// z score times 1000, absent below the minimum round count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_milli: Option<i64>,
    /// "flagged" or "normal".
    pub anomaly: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub node_id: NodeId,
    pub algorithm: String,
    pub head_id: String,
    pub height: u64,
    pub pending_batches: u64,
    pub peer_count: u64,
    pub win_rates: Vec<WinRate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerEntry {
    pub node_id: NodeId,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadingEntry {
    pub address: String,
    pub reading: AirReading,
}

/// What the API reads: the committed chain and state at one instant.
#[derive(Clone)]
pub struct ChainSnapshot {
    /// Genesis first.
    pub blocks: Vec<Arc<Block>>,
    pub trie: SharedTrie,
    pub state_root: StateRoot,
    pub peers: Vec<PeerEntry>,
    pub status: StatusReport,
}

impl ChainSnapshot {
    pub fn empty(trie: SharedTrie) -> Self {
        let state_root = trie.empty_root();
        Self { blocks: Vec::new(), trie, state_root, peers: Vec::new(), status: StatusReport::default() }
    }
}

pub type SnapshotCell = Arc<RwLock<Arc<ChainSnapshot>>>;

/// Where accepted batches go; implementations must only enqueue.
pub trait BatchSink: Send + Sync {
    fn enqueue(&self, batch: Batch);
}

/// In-process queue drained by the owner of the journal.
#[derive(Default, Clone)]
pub struct QueueSink(pub Arc<Mutex<Vec<Batch>>>);

impl QueueSink {
    pub fn drain(&self) -> Vec<Batch> {
        std::mem::take(&mut *self.0.lock().expect("sink lock"))
    }
}

impl BatchSink for QueueSink {
    fn enqueue(&self, batch: Batch) {
        self.0.lock().expect("sink lock").push(batch);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Get,
    Post,
    Delete,
}

#[derive(Debug, Clone)]
pub struct ApiRequest {
    pub method: Method,
    /// Path with optional `?query`.
    pub target: String,
    pub api_key: Option<String>,
    pub body: Vec<u8>,
}

impl ApiRequest {
    pub fn get(target: &str) -> Self {
        Self { method: Method::Get, target: target.to_string(), api_key: None, body: Vec::new() }
    }

    pub fn post_batches(batches: Vec<Batch>, api_key: &str) -> Self {
        Self {
            method: Method::Post,
            target: "/batches".into(),
            api_key: Some(api_key.to_string()),
            body: codec::to_canonical(&BatchList { batches }).expect("batches encode"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    /// Canonical text.
    pub body: Vec<u8>,
}

impl ApiResponse {
    fn ok<T: Serialize>(status: u16, value: &T) -> Self {
        Self { status, body: codec::to_canonical(value).expect("responses encode") }
    }

    fn error(status: u16, label: &str, detail: impl Into<String>) -> Self {
        let mut m = BTreeMap::new();
        m.insert("status", label.to_string());
        m.insert("error", detail.into());
        Self::ok(status, &m)
    }

    fn not_found(detail: impl Into<String>) -> Self {
        Self::error(404, "not-found", detail)
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::error(400, "bad-request", detail)
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self) -> Result<T, codec::CodecError> {
        codec::from_canonical(&self.body)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReadingFilter {
    pub min_lat: Option<i64>,
    pub max_lat: Option<i64>,
    pub min_lon: Option<i64>,
    pub max_lon: Option<i64>,
    pub since: Option<i64>,
    pub until: Option<i64>,
    pub source: Option<SourceFlag>,
}

impl ReadingFilter {
    pub fn matches(&self, r: &AirReading) -> bool {
        let within = |v: i64, lo: Option<i64>, hi: Option<i64>| lo.map_or(true, |lo| v >= lo) && hi.map_or(true, |hi| v <= hi);
        within(r.lat_udeg, self.min_lat, self.max_lat)
            && within(r.lon_udeg, self.min_lon, self.max_lon)
            && within(r.timestamp_s, self.since, self.until)
            && self.source.map_or(true, |s| s == r.source_flag)
    }
}

/// Decodes every committed reading under `root` that passes `filter`.
pub fn query_readings(trie: &SharedTrie, root: &StateRoot, filter: &ReadingFilter) -> Result<Vec<ReadingEntry>, String> {
    let entries = trie.entries_with_prefix(root, AIRQUALITY_NAMESPACE).map_err(|e| e.to_string())?;
    Ok(entries
        .into_iter()
        .filter_map(|(address, bytes)| decode_reading(&bytes).ok().map(|r| (address, r)))
        .filter(|(_, r)| filter.matches(r))
        .map(|(address, reading)| ReadingEntry { address: address.to_string(), reading })
        .collect())
}

fn parse_query(query: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for pair in query.split('&').filter(|p| !p.is_empty()) {
        let (k, v) = pair.split_once('=').ok_or_else(|| format!("malformed parameter {pair:?}"))?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(format!("repeated parameter {k:?}"));
        }
    }
    Ok(out)
}

fn int_param(params: &BTreeMap<String, String>, name: &str) -> Result<Option<i64>, String> {
    params
        .get(name)
        .map(|v| v.parse::<i64>().map_err(|_| format!("{name} must be an integer")))
        .transpose()
}

pub struct Api {
    pub registry: Arc<Registry>,
    pub snapshot: SnapshotCell,
    pub sink: Arc<dyn BatchSink>,
}

impl Api {
    pub fn new(registry: Arc<Registry>, snapshot: SnapshotCell, sink: Arc<dyn BatchSink>) -> Self {
        Self { registry, snapshot, sink }
    }

    fn snapshot(&self) -> Arc<ChainSnapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn handle(&self, req: &ApiRequest, now: i64) -> ApiResponse {
        let (path, query) = req.target.split_once('?').unwrap_or((&req.target, ""));
        let segments: Vec<&str> = path.trim_matches('/').split('/').collect();
        let params = match parse_query(query) {
            Ok(p) => p,
            Err(e) => return ApiResponse::bad_request(e),
        };
        match (req.method, segments.as_slice()) {
            (Method::Post, ["batches"]) => self.submit_batches(&req.body, req.api_key.as_deref()),
            (Method::Get, ["blocks"]) => self.blocks(&params),
            (Method::Get, ["blocks", id]) => self.block(id),
            (Method::Get, ["state", address]) => self.state(address),
            (Method::Get, ["readings"]) => self.readings(&params),
            (Method::Get, ["peers"]) => ApiResponse::ok(200, &BTreeMap::from([("peers", self.snapshot().peers.clone())])),
            (Method::Get, ["status"]) => ApiResponse::ok(200, &self.snapshot().status),
            (Method::Post, ["accounts", account, "keys"]) => match self.registry.issue_key(account, now) {
                Ok(key) => ApiResponse::ok(200, &BTreeMap::from([("account_id", account.to_string()), ("api_key", key)])),
                Err(e) => ApiResponse::bad_request(e.to_string()),
            },
            (Method::Get, ["accounts", account]) => match self.registry.account(account) {
                Some(a) => ApiResponse::ok(200, &a),
                None => ApiResponse::not_found(format!("account {account}")),
            },
            (Method::Delete, ["keys", key]) => match self.registry.revoke_key(key, now) {
                Ok(()) => ApiResponse::ok(200, &BTreeMap::from([("key", key.to_string()), ("status", "revoked".to_string())])),
                Err(RegistryError::UnknownKey) => ApiResponse::not_found("unknown key"),
                Err(e) => ApiResponse::error(500, "error", e.to_string()),
            },
            _ => ApiResponse::not_found(format!("no route for {path}")),
        }
    }

    /// Key gate first, then structural checks; survivors are enqueued.
    pub fn submit_batches(&self, body: &[u8], api_key: Option<&str>) -> ApiResponse {
        let decoded: Result<BatchList, _> = codec::from_canonical(body);
        let authorized = api_key.is_some_and(|k| self.registry.check_key(k) == KeyStatus::Active);
        if !authorized {
            let receipts: Vec<SubmitReceipt> = decoded
                .map(|list| list.batches)
                .unwrap_or_default()
                .iter()
                .map(|b| SubmitReceipt { batch_id: b.id().to_string(), status: SubmitStatus::Unauthorized, violations: None })
                .collect();
            return ApiResponse::ok(401, &receipts);
        }
        let list = match decoded {
            Ok(list) if !list.batches.is_empty() => list,
            Ok(_) => return ApiResponse::error(400, "invalid", "empty batch list"),
            Err(e) => return ApiResponse::error(400, "invalid", e.to_string()),
        };
        let mut receipts = Vec::new();
        let mut all_ok = true;
        for batch in list.batches {
            let batch_id = batch.id().to_string();
            match validate_batch(&batch) {
                Ok(()) => {
                    self.sink.enqueue(batch);
                    receipts.push(SubmitReceipt { batch_id, status: SubmitStatus::Accepted, violations: None });
                }
                Err(v) => {
                    all_ok = false;
                    receipts.push(SubmitReceipt { batch_id, status: SubmitStatus::Invalid, violations: Some(v) });
                }
            }
        }
        ApiResponse::ok(if all_ok { 202 } else { 400 }, &receipts)
    }

    fn blocks(&self, params: &BTreeMap<String, String>) -> ApiResponse {
        let snap = self.snapshot();
        let limit = match int_param(params, "limit") {
            Ok(v) => v.unwrap_or(DEFAULT_PAGE as i64),
            Err(e) => return ApiResponse::bad_request(e),
        };
        if limit < 1 || limit as usize > MAX_PAGE {
            return ApiResponse::bad_request(format!("limit must be in 1..={MAX_PAGE}"));
        }
        let Some(height) = snap.blocks.len().checked_sub(1) else {
            return ApiResponse::ok(200, &BTreeMap::from([("blocks", Vec::<Block>::new())]));
        };
        let start = match int_param(params, "start") {
            Ok(v) => v.unwrap_or(height as i64),
            Err(e) => return ApiResponse::bad_request(e),
        };
        if start < 0 || start as usize > height {
            return ApiResponse::bad_request("start beyond head");
        }
        let page: Vec<Block> = snap.blocks[..=start as usize]
            .iter()
            .rev()
            .take(limit as usize)
            .map(|b| (**b).clone())
            .collect();
        let next = page.last().and_then(|b| b.num().checked_sub(1));
        #[derive(Serialize)]
        struct Page {
            blocks: Vec<Block>,
            #[serde(skip_serializing_if = "Option::is_none")]
            next: Option<u64>,
        }
        ApiResponse::ok(200, &Page { blocks: page, next })
    }

    fn block(&self, id: &str) -> ApiResponse {
        if !codec::is_lower_hex(id, crate::crypto::DIGEST_HEX_LEN) {
            return ApiResponse::bad_request("block id must be 128 lowercase hex characters");
        }
        match self.snapshot().blocks.iter().find(|b| b.id() == id) {
            Some(b) => ApiResponse::ok(200, &**b),
            None => ApiResponse::not_found(format!("block {id}")),
        }
    }

    fn state(&self, address: &str) -> ApiResponse {
        let Ok(address) = Address::parse(address) else {
            return ApiResponse::bad_request("address must be 70 lowercase hex characters");
        };
        let snap = self.snapshot();
        match snap.trie.get(&snap.state_root, &address) {
            Ok(Some(data)) => {
                ApiResponse::ok(200, &BTreeMap::from([("address", address.to_string()), ("data", hex::encode(data))]))
            }
            Ok(None) => ApiResponse::not_found(format!("no state at {address}")),
            Err(e) => ApiResponse::error(500, "error", e.to_string()),
        }
    }

    fn readings(&self, params: &BTreeMap<String, String>) -> ApiResponse {
        let filter = match reading_filter(params) {
            Ok(f) => f,
            Err(e) => return ApiResponse::bad_request(e),
        };
        let snap = self.snapshot();
        match query_readings(&snap.trie, &snap.state_root, &filter) {
            Ok(readings) => ApiResponse::ok(200, &BTreeMap::from([("readings", readings)])),
            Err(e) => ApiResponse::error(500, "error", e),
        }
    }
}

pub fn reading_filter(params: &BTreeMap<String, String>) -> Result<ReadingFilter, String> {
    const KNOWN: [&str; 7] = ["min_lat", "max_lat", "min_lon", "max_lon", "since", "until", "source"];
    if let Some(k) = params.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(format!("unknown parameter {k:?}"));
    }
    let source = match params.get("source") {
        Some(s) => Some(SourceFlag::parse(s).ok_or_else(|| format!("unknown source {s:?}"))?),
        None => None,
    };
    Ok(ReadingFilter {
        min_lat: int_param(params, "min_lat")?,
        max_lat: int_param(params, "max_lat")?,
        min_lon: int_param(params, "min_lon")?,
        max_lon: int_param(params, "max_lon")?,
        since: int_param(params, "since")?,
        until: int_param(params, "until")?,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyPair;
    use crate::family::airquality::{self, encode_reading, reading_address};
    use crate::ledger::{build_batch, build_transaction};
    use crate::trie::StateTrie;

    fn reading(key: &KeyPair, lat: i64, source: SourceFlag) -> AirReading {
        AirReading {
            pm1_0: 5,
            pm2_5: 9,
            pm10_0: 12,
            lat_udeg: lat,
            lon_udeg: 10_000_000,
            timestamp_s: 1_700_000_000,
            source_flag: source,
            reporter_public_key: key.public_key_hex().to_string(),
        }
    }

    fn batch(key: &KeyPair) -> Batch {
        let r = reading(key, 1, SourceFlag::Citizen);
        build_batch(vec![build_transaction(&encode_reading(&r), &airquality::family_spec(), key).unwrap()], key).unwrap()
    }

    fn api() -> (Api, QueueSink, KeyPair) {
        let trie: SharedTrie = Arc::new(StateTrie::new());
        let key = KeyPair::from_seed(&[8; 32]).unwrap();
        let a = reading(&key, 45_000_000, SourceFlag::Government);
        let b = reading(&key, -10_000_000, SourceFlag::Citizen);
        let root = trie
            .apply(&trie.empty_root(), &[(reading_address(&a), Some(encode_reading(&a))), (reading_address(&b), Some(encode_reading(&b)))])
            .unwrap();
        let mut snap = ChainSnapshot::empty(trie);
        snap.state_root = root;
        let sink = QueueSink::default();
        let api = Api::new(Arc::new(Registry::in_memory()), Arc::new(RwLock::new(Arc::new(snap))), Arc::new(sink.clone()));
        (api, sink, key)
    }

    #[test]
    fn submit_gates_on_key_then_structure() {
        let (api, sink, key) = api();
        let good = batch(&key);
        let resp = api.handle(&ApiRequest::post_batches(vec![good.clone()], &"ab".repeat(32)), 0);
        assert_eq!(resp.status, 401);
        assert!(sink.drain().is_empty());

        let api_key = api.registry.issue_key("01", 0).unwrap();
        let resp = api.handle(&ApiRequest::post_batches(vec![good.clone()], &api_key), 0);
        assert_eq!(resp.status, 202);
        let receipts: Vec<SubmitReceipt> = resp.json().unwrap();
        assert_eq!(receipts[0].batch_id, good.id());
        assert_eq!(receipts[0].status, SubmitStatus::Accepted);
        assert_eq!(sink.drain(), vec![good.clone()]);

        let mut tampered = good.clone();
        tampered.transactions[0].payload[3] ^= 1;
        let resp = api.handle(&ApiRequest::post_batches(vec![tampered.clone()], &api_key), 0);
        assert_eq!(resp.status, 400);
        let receipts: Vec<SubmitReceipt> = resp.json().unwrap();
        let violations = receipts[0].violations.clone().unwrap();
        assert!(violations.iter().any(|v| v.subject == tampered.transactions[0].header_signature));

        api.registry.revoke_key(&api_key, 1).unwrap();
        let resp = api.handle(&ApiRequest::post_batches(vec![good], &api_key), 0);
        assert_eq!(resp.status, 401);
        assert!(sink.drain().is_empty());
    }

    #[test]
    fn readings_filter_by_box_and_source() {
        let (api, _, _) = api();
        let all: BTreeMap<String, Vec<ReadingEntry>> = api.handle(&ApiRequest::get("/readings"), 0).json().unwrap();
        assert_eq!(all["readings"].len(), 2);
        let north: BTreeMap<String, Vec<ReadingEntry>> =
            api.handle(&ApiRequest::get("/readings?min_lat=0&max_lat=50000000"), 0).json().unwrap();
        assert_eq!(north["readings"].len(), 1);
        assert_eq!(north["readings"][0].reading.source_flag, SourceFlag::Government);
        let citizen: BTreeMap<String, Vec<ReadingEntry>> = api.handle(&ApiRequest::get("/readings?source=citizen"), 0).json().unwrap();
        assert_eq!(citizen["readings"][0].reading.lat_udeg, -10_000_000);
        assert_eq!(api.handle(&ApiRequest::get("/readings?min_lat=north"), 0).status, 400);
    }

    #[test]
    fn lookups_validate_identifiers() {
        let (api, _, _) = api();
        assert_eq!(api.handle(&ApiRequest::get(&format!("/state/{}", "a".repeat(69))), 0).status, 400);
        assert_eq!(api.handle(&ApiRequest::get(&format!("/state/{}", "a".repeat(70))), 0).status, 404);
        assert_eq!(api.handle(&ApiRequest::get(&format!("/blocks/{}", "0".repeat(128))), 0).status, 404);
        assert_eq!(api.handle(&ApiRequest::get("/blocks/xyz"), 0).status, 400);
        assert_eq!(api.handle(&ApiRequest::get("/nowhere"), 0).status, 404);
        let del = ApiRequest { method: Method::Delete, target: format!("/keys/{}", "1".repeat(64)), api_key: None, body: vec![] };
        assert_eq!(api.handle(&del, 0).status, 404);
    }
}
