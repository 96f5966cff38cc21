//! Acceptance suite: one PASS/FAIL line per property, non-zero exit on any failure.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use airchain_core::api::{Api, ApiRequest, QueueSink, ReadingEntry};
use airchain_core::codec;
use airchain_core::consensus::analysis::{max_faults, sybil_threshold, Z_CRITICAL};
use airchain_core::consensus::poet::{Lottery, LotteryConfig};
use airchain_core::consensus::{Algorithm, ConsensusPayload, EngineSchedule};
use airchain_core::crypto::{sha512_digest, KeyPair};
use airchain_core::family::airquality::{self, decode_reading, geohash, AirReading, SourceFlag};
use airchain_core::family::TxnContext;
use airchain_core::ingest::{emulate_sensor, SensorNoiseModel};
use airchain_core::journal::store::BlockStore;
use airchain_core::journal::{execute_batches, Journal};
use airchain_core::ledger::{build_batch, build_transaction, validate_batch, Batch, BatchHeader, FamilySpec, TransactionHeader};
use airchain_core::network::peering::{Directory, PeeringNetwork};
use airchain_core::node::EngineRules;
use airchain_core::registry::Registry;
use airchain_core::scenario::{run_scenario, Harness, Report, Scenario};
use airchain_core::trie::StateTrie;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PBFT_HONEST: &str = include_str!("../../../scenarios/pbft-honest.toml");
const PBFT_EQUIVOCATOR: &str = include_str!("../../../scenarios/pbft-equivocator.toml");
const PBFT_TWO: &str = include_str!("../../../scenarios/pbft-two-byzantine.toml");
const RAFT_CRASH: &str = include_str!("../../../scenarios/raft-leader-crash.toml");
const END_TO_END: &str = include_str!("../../../scenarios/end-to-end.toml");
const SWITCH: &str = include_str!("../../../scenarios/consensus-switch.toml");

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(name: &str, started: Instant, budget_s: u64) -> Result<(), String> {
    let took = started.elapsed();
    if took <= Duration::from_secs(budget_s) {
        Ok(())
    } else {
        Err(format!("{name} took {:.1}s, budget {budget_s}s", took.as_secs_f64()))
    }
}

fn pbft() -> Outcome {
    let started = Instant::now();
    let honest = run_scenario(PBFT_HONEST).map_err(|e| e.to_string())?;
    if !honest.violations.is_empty() {
        return Err(format!("honest run: {:?}", honest.violations));
    }
    let one = run_scenario(PBFT_EQUIVOCATOR).map_err(|e| e.to_string())?;
    let height = one.agreed_height();
    if !one.violations.is_empty() || height.unwrap_or(0) < 50 {
        return Err(format!("one equivocator: agreed height {height:?}, violations {:?}", one.violations));
    }
    let two = run_scenario(PBFT_TWO).map_err(|e| e.to_string())?;
    let stalled = two.agreed_height() == Some(0);
    if two.violations.is_empty() && !stalled {
        return Err(format!("two byzantine: progressed to {:?} without a detected violation", two.agreed_height()));
    }
    within("pbft runs", started, 60)?;
    Ok(format!(
        "f=1 honest heads agree at {}; f=2 {}",
        height.unwrap_or(0),
        if two.violations.is_empty() { "made no progress".to_string() } else { format!("flagged: {}", two.violations[0]) }
    ))
}

fn raft() -> Outcome {
    let started = Instant::now();
    let report = run_scenario(RAFT_CRASH).map_err(|e| e.to_string())?;
    within("raft run", started, 30)?;
    let height = report.agreed_height().unwrap_or(0);
    check(
        report.violations.is_empty() && height > 0 && report.raft_leader_terms >= 5,
        format!("{} leader terms, agreed height {height}, violations {:?}", report.raft_leader_terms, report.violations),
    )
}

fn poet() -> Outcome {
    let started = Instant::now();
    let nodes: Vec<String> = (0..10).map(|i| format!("node-{i:02}")).collect();
    let mut fair = Lottery::new(LotteryConfig { nodes: nodes.clone(), cheaters: BTreeSet::new(), mean_wait_ms: 2000, seed: 42 });
    for _ in 0..10_000 {
        fair.round();
    }
    // binomial(10000, 0.1): sigma = 30
    let sigma = (10_000.0f64 * 0.1 * 0.9).sqrt();
    let worst = nodes
        .iter()
        .map(|n| (fair.state.wins_of(n) as f64 - 1000.0).abs())
        .fold(0.0, f64::max);
    if worst > 4.0 * sigma {
        return Err(format!("a node's win count is {worst} from 1000 (4 sigma = {})", 4.0 * sigma));
    }
    let cheater = nodes[3].clone();
    let mut rigged = Lottery::new(LotteryConfig {
        nodes: nodes.clone(),
        cheaters: BTreeSet::from([cheater.clone()]),
        mean_wait_ms: 2000,
        seed: 42,
    });
    let flagged_at = rigged.rounds_until_flagged(&cheater, 200);
    let z = rigged.state.ztest(&cheater, 10).map(|z| z.z).unwrap_or(0.0);
    within("poet rounds", started, 30)?;
    check(
        flagged_at.is_some() && z > Z_CRITICAL,
        format!("max deviation {worst:.0} wins (4 sigma = {:.0}); cheater flagged after {flagged_at:?} rounds, z = {z:.2}", 4.0 * sigma),
    )
}

fn random_reading(rng: &mut ChaCha8Rng, key: &KeyPair) -> AirReading {
    AirReading {
        pm1_0: rng.gen_range(0..=300),
        pm2_5: rng.gen_range(0..=500),
        pm10_0: rng.gen_range(0..=1000),
        lat_udeg: rng.gen_range(-90_000_000..=90_000_000),
        lon_udeg: rng.gen_range(-180_000_000..=180_000_000),
        timestamp_s: 1_700_000_000 + rng.gen_range(0..86_400),
        source_flag: [SourceFlag::Citizen, SourceFlag::Government, SourceFlag::Institutional][rng.gen_range(0..3)],
        reporter_public_key: key.public_key_hex().to_string(),
    }
}

fn determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let keys: Vec<KeyPair> = (1..=8u8).map(|i| KeyPair::from_seed(&[i; 32]).unwrap()).collect();
    let family = airquality::family_spec();
    let batches: Vec<Batch> = (0..1000)
        .map(|i| {
            let key = &keys[i % keys.len()];
            let reading = random_reading(&mut rng, key);
            let txn = build_transaction(&airquality::encode_reading(&reading), &family, key).unwrap();
            build_batch(vec![txn], key).unwrap()
        })
        .collect();
    let ctx = TxnContext { clock_s: 1_700_100_000 };
    let mut roots = BTreeSet::new();
    for _ in 0..20 {
        let mut order = batches.clone();
        order.shuffle(&mut rng);
        let trie = Arc::new(StateTrie::new());
        let exec = execute_batches(&trie, trie.empty_root(), order, &ctx).map_err(|e| e.to_string())?;
        if !exec.failed.is_empty() {
            return Err(format!("{} batches failed to apply", exec.failed.len()));
        }
        roots.insert(exec.root.to_hex());
    }
    check(roots.len() == 1, format!("20 orders of 1000 readings gave {} distinct root(s)", roots.len()))
}

fn random_batch(rng: &mut ChaCha8Rng) -> Batch {
    let mut seed = [0u8; 32];
    rng.fill(&mut seed);
    seed[0] |= 1;
    let key = KeyPair::from_seed(&seed).unwrap();
    let family = FamilySpec::new("airquality", "1.0", "616972");
    let txns = (0..rng.gen_range(1..=3))
        .map(|_| {
            let mut payload = vec![0u8; rng.gen_range(1..=64)];
            rng.fill(payload.as_mut_slice());
            build_transaction(&payload, &family, &key).unwrap()
        })
        .collect();
    build_batch(txns, &key).unwrap()
}

/// Which bytes a mutation touches: the batch header, a transaction header, or
/// a transaction payload.
#[derive(Clone, Copy)]
enum Target {
    BatchHeader,
    TxnHeader(usize),
    Payload(usize),
}

fn targets(batch: &Batch) -> Vec<(Target, usize)> {
    let mut out = vec![(Target::BatchHeader, codec::to_canonical(&batch.header).unwrap().len())];
    for (i, t) in batch.transactions.iter().enumerate() {
        out.push((Target::TxnHeader(i), codec::to_canonical(&t.header).unwrap().len()));
        out.push((Target::Payload(i), t.payload.len()));
    }
    out
}

/// Applies one byte change. `None` when the mutated header no longer decodes,
/// which a receiver rejects before validation.
fn mutate(batch: &Batch, target: Target, pos: usize, xor: u8) -> Option<Batch> {
    let mut out = batch.clone();
    match target {
        Target::BatchHeader => {
            let mut bytes = codec::to_canonical(&batch.header).unwrap();
            bytes[pos] ^= xor;
            let header: BatchHeader = codec::from_canonical(&bytes).ok()?;
            assert_ne!(header, batch.header, "a byte change decoded to the same batch header");
            out.header = header;
        }
        Target::TxnHeader(i) => {
            let mut bytes = codec::to_canonical(&batch.transactions[i].header).unwrap();
            bytes[pos] ^= xor;
            let header: TransactionHeader = codec::from_canonical(&bytes).ok()?;
            assert_ne!(header, batch.transactions[i].header, "a byte change decoded to the same txn header");
            out.transactions[i].header = header;
        }
        Target::Payload(i) => out.transactions[i].payload[pos] ^= xor,
    }
    Some(out)
}

fn crypto() -> Outcome {
    const EMPTY: &str = "cf83e1357eefb8bdf1542850d66d8007d620e4050b5715dc83f4a921d36ce9ce47d0d13c5d85f2b0ff8318d2877eec2f63b931bd47417a81a538327af927da3e";
    if sha512_digest(b"") != EMPTY {
        return Err(format!("sha512(\"\") = {}", sha512_digest(b"")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let batches: Vec<Batch> = (0..1000).map(|_| random_batch(&mut rng)).collect();
    if let Some(bad) = batches.iter().position(|b| validate_batch(b).is_err()) {
        return Err(format!("fresh batch {bad} failed validation"));
    }
    let mut tried = 0u64;
    let mut undecodable = 0u64;
    let mut mutate_and_check = |b: &Batch, target: Target, pos: usize, xor: u8| -> Result<(), String> {
        tried += 1;
        match mutate(b, target, pos, xor) {
            None => {
                undecodable += 1;
                Ok(())
            }
            Some(m) if validate_batch(&m).is_ok() => Err(format!("mutation at byte {pos} (xor {xor:#04x}) still validates")),
            Some(_) => Ok(()),
        }
    };
    // every byte position of the first 10 batches, with a random non-zero change
    for b in &batches[..10] {
        for (target, len) in targets(b) {
            for pos in 0..len {
                mutate_and_check(b, target, pos, rng.gen_range(1..=255))?;
            }
        }
    }
    // 16 random positions of every batch
    for b in &batches {
        let spots = targets(b);
        for _ in 0..16 {
            let (target, len) = spots[rng.gen_range(0..spots.len())];
            mutate_and_check(b, target, rng.gen_range(0..len), rng.gen_range(1..=255))?;
        }
    }
    // every possible value of one byte in each region of one batch
    for (target, len) in targets(&batches[0]) {
        for xor in 1..=255u8 {
            mutate_and_check(&batches[0], target, len / 2, xor)?;
        }
    }
    Ok(format!("1000 batches validate; {tried} single-byte mutations rejected ({undecodable} at decode)"))
}

fn peering() -> Outcome {
    let mut worst_rounds = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=20);
        let ids: Vec<String> = (0..n).map(|i| format!("{seed:03}-{i:02}")).collect();
        let mut directory = Directory::fully_reachable(ids.iter().cloned());
        for id in &ids {
            if rng.gen_bool(0.1) {
                directory.reachable.remove(id);
            }
            let k = rng.gen_range(1..=3);
            let seeds: Vec<String> = ids.choose_multiple(&mut rng, k).cloned().collect();
            directory.seeds.insert(id.clone(), seeds);
        }
        let mut network = PeeringNetwork::new(directory, 3, 8);
        let rounds = network.run(100);
        worst_rounds = worst_rounds.max(rounds);
        if !network.is_fully_peered() {
            return Err(format!("seed {seed} ({n} nodes) neither peered nor exhausted after {rounds} rounds"));
        }
        if network.tables.values().any(|t| t.peers.len() > 8) {
            return Err(format!("seed {seed}: a node exceeded max connectivity"));
        }
    }
    Ok(format!("100 directories peered or exhausted, worst case {worst_rounds} rounds"))
}

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let scenario = Scenario::from_toml(END_TO_END).map_err(|e| e.to_string())?;
    let mut harness = Harness::new(scenario).map_err(|e| e.to_string())?;
    let report: Report = harness.run();
    within("end-to-end run", started, 120)?;
    if !report.violations.is_empty() {
        return Err(format!("violations: {:?}", report.violations));
    }
    let accepted: BTreeSet<&str> = harness.accepted().iter().map(String::as_str).collect();
    if accepted.is_empty() {
        return Err("no batches accepted".into());
    }
    let heads: BTreeSet<String> = harness.validators().iter().map(|v| v.head().id()).collect();
    if heads.len() != 1 {
        return Err(format!("{} distinct heads", heads.len()));
    }
    let mut served_total = 0;
    let flags: BTreeMap<&str, SourceFlag> =
        harness.devices().iter().map(|d| (d.key.public_key_hex(), d.spec.source_flag)).collect();
    for v in harness.validators() {
        let on_chain: BTreeSet<&str> = v.chain().iter().flat_map(|b| b.batches.iter().map(Batch::id)).collect();
        if let Some(missing) = accepted.iter().find(|id| !on_chain.contains(*id)) {
            return Err(format!("accepted batch {} missing from a chain", &missing[..16]));
        }
        // state keeps the newest reading per reporter, geohash cell and hour
        let mut committed: BTreeMap<(String, String, i64), AirReading> = BTreeMap::new();
        for block in v.chain() {
            for txn in block.batches.iter().flat_map(|b| &b.transactions) {
                if txn.header.family_name != airquality::FAMILY_NAME {
                    continue;
                }
                let r = decode_reading(&txn.payload).map_err(|e| e.to_string())?;
                let slot = (r.reporter_public_key.clone(), geohash(r.lat_udeg, r.lon_udeg, 5), r.timestamp_s.div_euclid(3600));
                if committed.get(&slot).map_or(true, |old| old.timestamp_s < r.timestamp_s) {
                    committed.insert(slot, r);
                }
            }
        }
        let cell = Arc::new(RwLock::new(Arc::new(v.snapshot())));
        let api = Api::new(Arc::new(Registry::in_memory()), cell, Arc::new(QueueSink::default()));
        let resp = api.handle(&ApiRequest::get("/readings"), 0);
        let body: BTreeMap<String, Vec<ReadingEntry>> = resp.json().map_err(|e| e.to_string())?;
        let served: Vec<AirReading> = body["readings"].iter().map(|e| e.reading.clone()).collect();
        let mut expected: Vec<String> = committed.values().map(|r| format!("{r:?}")).collect();
        let mut got: Vec<String> = served.iter().map(|r| format!("{r:?}")).collect();
        expected.sort();
        got.sort();
        if got != expected {
            return Err(format!("GET /readings served {} readings, chain replay expects {}", got.len(), expected.len()));
        }
        served_total = served.len();
        if let Some(r) = served.iter().find(|r| flags.get(r.reporter_public_key.as_str()) != Some(&r.source_flag)) {
            return Err(format!("reading from {} carries source {}", &r.reporter_public_key[..12], r.source_flag.as_str()));
        }
    }
    Ok(format!(
        "{} accepted batches ({} readings) on 5 identical chains at height {}; GET /readings serves the {} latest per sensor slot with matching source flags",
        accepted.len(),
        report.readings_produced,
        harness.validators()[0].head().num(),
        served_total
    ))
}

fn constants() -> Outcome {
    let model = SensorNoiseModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples = 200_000;
    let mut sq = 0.0;
    for _ in 0..samples {
        let truth = rng.gen_range(50.0..150.0);
        let err = emulate_sensor(truth, &model, &mut rng) as f64 - truth;
        sq += err * err;
    }
    let rmse = (sq / samples as f64).sqrt();
    let sybil = sybil_threshold(100.0).map_err(|e| e.to_string())?;
    check(
        (2.0..=2.45).contains(&rmse) && (sybil - 0.3316).abs() <= 1e-4 && max_faults(4) == 1,
        format!("emulator rmse {rmse:.3}; sybil_threshold(100) = {sybil:.4}; max_faults(4) = {}", max_faults(4)),
    )
}

fn dynamic_consensus() -> Outcome {
    let scenario = Scenario::from_toml(SWITCH).map_err(|e| e.to_string())?;
    let clock_s = scenario.time_base_s + (scenario.duration_s + scenario.settle_s) as i64 + 60;
    let mut harness = Harness::new(scenario).map_err(|e| e.to_string())?;
    let report = harness.run();
    if !report.violations.is_empty() {
        return Err(format!("violations: {:?}", report.violations));
    }
    let chain = harness.validators()[0].chain().to_vec();
    let ctx = TxnContext { clock_s };
    let mut journal = Journal::new(BlockStore::in_memory(), Arc::new(StateTrie::new()));
    journal.init_genesis((*chain[0]).clone(), &ctx).map_err(|e| e.to_string())?;
    for block in &chain[1..] {
        journal
            .validate(block, &EngineRules, &ctx)
            .map_err(|e| format!("block {} rejected on replay: {e}", block.num()))?;
        journal.commit(&block.id()).map_err(|e| e.to_string())?;
    }
    let replayed_head = journal.head().map_err(|e| e.to_string())?.id();
    if replayed_head != chain.last().unwrap().id() {
        return Err("replayed head differs".into());
    }
    let schedule = EngineSchedule::from_chain(chain.iter().map(|b| b.as_ref()));
    let order: Vec<Algorithm> = schedule.activations().map(|(_, a)| a).collect();
    if order != [Algorithm::PoetCft, Algorithm::Pbft, Algorithm::Raft] {
        return Err(format!("engine order {order:?}"));
    }
    for block in &chain[1..] {
        let used = ConsensusPayload::decode(&block.header.consensus_payload).ok().and_then(|p| p.algorithm());
        if used != schedule.algorithm_at(block.num()) {
            return Err(format!("block {} sealed by {used:?}, schedule says {:?}", block.num(), schedule.algorithm_at(block.num())));
        }
    }
    let at: Vec<String> = schedule.activations().map(|(h, a)| format!("{a}@{h}")).collect();
    Ok(format!("{} blocks replayed and verified across {}", chain.len() - 1, at.join(" -> ")))
}

fn main() {
    let suite: [(&str, fn() -> Outcome); 9] = [
        ("pbft safety and liveness", pbft),
        ("raft leader crashes", raft),
        ("poet fairness and detection", poet),
        ("state determinism", determinism),
        ("crypto round trips", crypto),
        ("peering", peering),
        ("end to end", end_to_end),
        ("constants", constants),
        ("dynamic consensus", dynamic_consensus),
    ];
    let mut failed = 0;
    for (name, run) in suite {
        let started = Instant::now();
        let outcome = run();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
