use std::collections::BTreeSet;
use std::sync::Arc;

use airchain_core::consensus::poet::{Lottery, LotteryConfig};
use airchain_core::crypto::{sha512_digest, verify, KeyPair};
use airchain_core::family::airquality::{self, AirReading, SourceFlag};
use airchain_core::family::TxnContext;
use airchain_core::journal::execute_batches;
use airchain_core::ledger::{build_batch, build_transaction, validate_batch, Batch};
use airchain_core::scenario::run_scenario;
use airchain_core::trie::{Address, StateTrie};
use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

fn reading_batches(n: usize) -> Vec<Batch> {
    let key = KeyPair::from_seed(&[3u8; 32]).unwrap();
    (0..n)
        .map(|i| {
            let reading = AirReading {
                pm1_0: 5,
                pm2_5: 10 + (i % 50) as i64,
                pm10_0: 20,
                lat_udeg: (i as i64 * 7_919) % 90_000_000,
                lon_udeg: (i as i64 * 104_729) % 180_000_000,
                timestamp_s: 1_700_000_000 + i as i64,
                source_flag: SourceFlag::Citizen,
                reporter_public_key: key.public_key_hex().to_string(),
            };
            let txn = build_transaction(&airquality::encode_reading(&reading), &airquality::family_spec(), &key).unwrap();
            build_batch(vec![txn], &key).unwrap()
        })
        .collect()
}

fn crypto(c: &mut Criterion) {
    let key = KeyPair::from_seed(&[1u8; 32]).unwrap();
    let msg = vec![7u8; 256];
    let sig = key.sign(&msg).unwrap();
    c.bench_function("sha512 256B", |b| b.iter(|| sha512_digest(black_box(&msg))));
    c.bench_function("sign", |b| b.iter(|| key.sign(black_box(&msg)).unwrap()));
    c.bench_function("verify", |b| b.iter(|| verify(black_box(&msg), &sig, key.public_key_hex()).unwrap()));
    let batch = reading_batches(1).pop().unwrap();
    c.bench_function("validate_batch 1 txn", |b| b.iter(|| validate_batch(black_box(&batch)).unwrap()));
}

fn state(c: &mut Criterion) {
    let trie = StateTrie::new();
    let changes: Vec<(Address, Option<Vec<u8>>)> = (0..1000u32)
        .map(|i| {
            let a = Address::parse(&format!("616972{}", &sha512_digest(&i.to_be_bytes())[..64])).unwrap();
            (a, Some(i.to_be_bytes().to_vec()))
        })
        .collect();
    c.bench_function("trie apply 1000 writes", |b| b.iter(|| trie.apply(&trie.empty_root(), black_box(&changes)).unwrap()));

    let batches = reading_batches(100);
    let ctx = TxnContext { clock_s: 1_800_000_000 };
    c.bench_function("execute 100 reading batches", |b| {
        b.iter_batched(
            || (Arc::new(StateTrie::new()), batches.clone()),
            |(trie, batches)| execute_batches(&trie, trie.empty_root(), batches, &ctx).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn consensus(c: &mut Criterion) {
    let nodes: Vec<String> = (0..10).map(|i| format!("n{i}")).collect();
    c.bench_function("poet lottery 1000 rounds n=10", |b| {
        b.iter(|| {
            let mut l = Lottery::new(LotteryConfig { nodes: nodes.clone(), cheaters: BTreeSet::new(), mean_wait_ms: 2000, seed: 1 });
            for _ in 0..1000 {
                l.round();
            }
        })
    });
    let scenario = "name = \"bench\"\nseed = 1\nnodes = 4\nduration_s = 20\nsettle_s = 5\n\
                    [consensus]\nalgorithm = \"pbft\"\n[workload]\nsensors = 4\nsample_interval_s = 1\nflush_readings = 2\n";
    let mut group = c.benchmark_group("scenario");
    group.sample_size(10);
    group.bench_function("pbft n=4 20s simulated", |b| b.iter(|| run_scenario(scenario).unwrap()));
    group.finish();
}

criterion_group!(benches, crypto, state, consensus);
criterion_main!(benches);
