//! `airchain`: run validators and scenarios, manage keys, feed and query nodes.

mod config;
mod daemon;
mod http;
mod transport;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use airchain_core::api::SubmitReceipt;
use airchain_core::codec;
use airchain_core::consensus::Algorithm;
use airchain_core::crypto::{sha512_bytes, KeyPair};
use airchain_core::family::airquality::{AirReading, CalibrationModel, SourceFlag};
use airchain_core::family::TxnContext;
use airchain_core::ingest::{readings_batch, submit_batch, BatchTriggerConfig, Device, DeviceSpec};
use airchain_core::journal::build_genesis;
use airchain_core::scenario::{Harness, Scenario};
use airchain_core::trie::StateTrie;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::NodeConfig;
use crate::http::Client;

/// Exit status for usage and configuration errors.
const USAGE: u8 = 2;
/// Exit status for failed operations and violated invariants.
const FAILED: u8 = 1;

#[derive(Parser)]
#[command(name = "airchain", version, about = "Permissioned ledger for particulate-matter telemetry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a new key file (private key line, public key line).
    Keygen {
        #[arg(long)]
        key_file: PathBuf,
        /// Derive the key from this number instead of the OS generator.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Create a genesis block that fixes the consensus engine and members.
    Genesis {
        /// Signer of the genesis block; also a member unless --member is given.
        #[arg(long)]
        key_file: PathBuf,
        #[arg(long, default_value = "poet_cft")]
        algorithm: String,
        /// Member public key; repeatable.
        #[arg(long = "member")]
        members: Vec<String>,
        /// Key file whose public key is a member; repeatable.
        #[arg(long = "member-key-file")]
        member_key_files: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a validator node until interrupted.
    Run {
        #[arg(long, env = "AIRCHAIN_CONFIG")]
        config: PathBuf,
    },
    /// Run a simulated multi-node scenario and print its report.
    Scenario {
        #[arg(long)]
        scenario: PathBuf,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
    /// Emulate a sensor and submit its readings.
    Emulate {
        #[command(flatten)]
        target: Target,
        /// Signing key; a key derived from --seed when absent.
        #[arg(long)]
        key_file: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        readings: u32,
        #[arg(long, default_value_t = 10)]
        interval_s: i64,
        #[arg(long, default_value_t = 10)]
        batch_size: usize,
        #[arg(long, default_value_t = 37_400_000)]
        lat_udeg: i64,
        #[arg(long, default_value_t = -122_100_000)]
        lon_udeg: i64,
        #[arg(long, value_enum, default_value_t = Source::Citizen)]
        source: Source,
        #[arg(long, default_value_t = 15.0)]
        base_pm2_5: f64,
    },
    /// Sign and submit one reading.
    Submit {
        #[command(flatten)]
        target: Target,
        #[arg(long)]
        key_file: PathBuf,
        #[arg(long)]
        pm1_0: i64,
        #[arg(long)]
        pm2_5: i64,
        #[arg(long)]
        pm10_0: i64,
        #[arg(long, allow_hyphen_values = true)]
        lat_udeg: i64,
        #[arg(long, allow_hyphen_values = true)]
        lon_udeg: i64,
        #[arg(long, value_enum, default_value_t = Source::Citizen)]
        source: Source,
        /// Unix seconds; now when absent.
        #[arg(long)]
        timestamp: Option<i64>,
    },
    /// GET a path from a node's API and print the response body.
    Query {
        #[arg(long, default_value = "127.0.0.1:8008")]
        endpoint: String,
        /// For example `/status` or `/readings?source=citizen`.
        path: String,
    },
    /// Issue or revoke API keys on a node.
    Keys {
        #[arg(long, default_value = "127.0.0.1:8008")]
        endpoint: String,
        #[command(subcommand)]
        action: KeyAction,
    },
}

#[derive(Subcommand)]
enum KeyAction {
    /// Issue a key for an account (lowercase hex id).
    Issue { account: String },
    Revoke { key: String },
}

#[derive(Args)]
struct Target {
    #[arg(long, default_value = "127.0.0.1:8008")]
    endpoint: String,
    #[arg(long, env = "AIRCHAIN_API_KEY")]
    api_key: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Human,
    Canonical,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Citizen,
    Government,
    Institutional,
}

impl From<Source> for SourceFlag {
    fn from(s: Source) -> Self {
        match s {
            Source::Citizen => SourceFlag::Citizen,
            Source::Government => SourceFlag::Government,
            Source::Institutional => SourceFlag::Institutional,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: USAGE, message: message.into() }
}

fn failed(message: impl Into<String>) -> Failure {
    Failure { code: FAILED, message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .init();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn unix_now() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0)
}

fn load_key(path: &Path) -> Result<KeyPair, Failure> {
    KeyPair::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn seeded_key(seed: u64) -> KeyPair {
    let digest = sha512_bytes(format!("airchain-key/{seed}").as_bytes());
    KeyPair::from_seed(digest[..32].try_into().expect("32 bytes")).expect("a hash is a valid scalar with overwhelming probability")
}

fn run(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Keygen { key_file, seed, force } => {
            if key_file.exists() && !force {
                return Err(usage(format!("{} exists; pass --force to overwrite", key_file.display())));
            }
            let key = seed.map(seeded_key).unwrap_or_else(KeyPair::random);
            key.save(&key_file).map_err(|e| failed(e.to_string()))?;
            println!("{}", key.public_key_hex());
            Ok(0)
        }
        Command::Genesis { key_file, algorithm, mut members, member_key_files, out } => {
            let key = load_key(&key_file)?;
            let algorithm = Algorithm::parse(&algorithm)
                .ok_or_else(|| usage(format!("unknown algorithm {algorithm:?}; use poet_cft, pbft or raft")))?;
            for f in &member_key_files {
                members.push(load_key(f)?.public_key_hex().to_string());
            }
            if members.is_empty() {
                members.push(key.public_key_hex().to_string());
            }
            let trie = Arc::new(StateTrie::new());
            let block = build_genesis(&trie, algorithm, &members, &key, &TxnContext { clock_s: unix_now() })
                .map_err(|e| usage(e.to_string()))?;
            let bytes = codec::to_canonical(&block).map_err(|e| failed(e.to_string()))?;
            fs::write(&out, bytes).map_err(|e| failed(format!("{}: {e}", out.display())))?;
            println!("{}", block.id());
            Ok(0)
        }
        Command::Run { config } => {
            let cfg = NodeConfig::load(&config).map_err(|e| usage(e.to_string()))?;
            daemon::run_node(&cfg).map_err(|e| Failure { code: e.exit_code() as u8, message: e.to_string() })?;
            Ok(0)
        }
        Command::Scenario { scenario, seed, format } => {
            let text = fs::read_to_string(&scenario).map_err(|e| usage(format!("{}: {e}", scenario.display())))?;
            let mut parsed = Scenario::from_toml(&text).map_err(|e| usage(e.to_string()))?;
            if let Some(seed) = seed {
                parsed.seed = seed;
            }
            let report = Harness::new(parsed).map_err(|e| usage(e.to_string()))?.run();
            let mut stdout = std::io::stdout().lock();
            let written = match format {
                Format::Human => write!(stdout, "{report}"),
                Format::Canonical => stdout.write_all(&report.canonical()).and_then(|_| writeln!(stdout)),
            };
            written.map_err(|e| failed(e.to_string()))?;
            Ok(report.exit_code() as u8)
        }
        Command::Emulate {
            target,
            key_file,
            seed,
            readings,
            interval_s,
            batch_size,
            lat_udeg,
            lon_udeg,
            source,
            base_pm2_5,
        } => {
            if readings == 0 || interval_s <= 0 || batch_size == 0 {
                return Err(usage("--readings, --interval-s and --batch-size must be positive"));
            }
            let spec = DeviceSpec {
                key_seed: seed,
                lat_udeg,
                lon_udeg,
                source_flag: source.into(),
                base_pm2_5,
                amplitude: base_pm2_5 / 4.0,
                period_s: 3600.0,
                temp_c: 20.0,
                humidity_pct: 50.0,
                noise: None,
                trigger: Some(BatchTriggerConfig { count_threshold: batch_size, age_threshold_s: interval_s * batch_size as i64 }),
            };
            let mut device = match key_file {
                Some(path) => Device::with_key(spec, CalibrationModel::identity(), load_key(&path)?),
                None => Device::new(spec, CalibrationModel::identity()),
            };
            let client = Client::new(&target.endpoint).map_err(usage)?;
            // backdate so the newest reading is stamped now
            let start = unix_now() - interval_s * (readings as i64 - 1);
            let mut batches = Vec::new();
            for i in 0..readings as i64 {
                batches.extend(device.tick(start + i * interval_s));
            }
            batches.extend(device.flush_if_due(i64::MAX / 2));
            println!("device {}", device.key.public_key_hex());
            for batch in batches {
                let receipt = submit_batch(batch, &target.api_key, &client, Duration::from_millis(200))
                    .map_err(|e| failed(e.to_string()))?;
                print_receipt(&receipt)?;
            }
            Ok(0)
        }
        Command::Submit { target, key_file, pm1_0, pm2_5, pm10_0, lat_udeg, lon_udeg, source, timestamp } => {
            let key = load_key(&key_file)?;
            let reading = AirReading {
                pm1_0,
                pm2_5,
                pm10_0,
                lat_udeg,
                lon_udeg,
                timestamp_s: timestamp.unwrap_or_else(unix_now),
                source_flag: source.into(),
                reporter_public_key: key.public_key_hex().to_string(),
            };
            let batch = readings_batch(&[reading], &key).map_err(|e| failed(e.to_string()))?;
            let client = Client::new(&target.endpoint).map_err(usage)?;
            let receipt =
                submit_batch(batch, &target.api_key, &client, Duration::from_millis(200)).map_err(|e| failed(e.to_string()))?;
            print_receipt(&receipt)?;
            Ok(0)
        }
        Command::Query { endpoint, path } => {
            let client = Client::new(&endpoint).map_err(usage)?;
            let resp = client.get(&path).map_err(|e| failed(format!("{endpoint}: {e}")))?;
            println!("{}", String::from_utf8_lossy(&resp.body));
            Ok(if resp.status < 400 { 0 } else { FAILED })
        }
        Command::Keys { endpoint, action } => {
            let client = Client::new(&endpoint).map_err(usage)?;
            let resp = match action {
                KeyAction::Issue { account } => client.post(&format!("/accounts/{account}/keys"), Vec::new(), None),
                KeyAction::Revoke { key } => client.delete(&format!("/keys/{key}")),
            }
            .map_err(|e| failed(format!("{endpoint}: {e}")))?;
            println!("{}", String::from_utf8_lossy(&resp.body));
            Ok(if resp.status < 400 { 0 } else { FAILED })
        }
    }
}

fn print_receipt(receipt: &SubmitReceipt) -> Result<(), Failure> {
    let text = codec::to_canonical(receipt).map_err(|e| failed(e.to_string()))?;
    println!("{}", String::from_utf8_lossy(&text));
    Ok(())
}
