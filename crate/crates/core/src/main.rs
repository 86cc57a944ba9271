use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use rand::rngs::OsRng;
use rand::RngCore;

use anonlimit::client::{Client, ClientConfig};
use anonlimit::clock::{Clock, SystemClock, ThreadSleep};
use anonlimit::daa::UserIdentity;
use anonlimit::harness::{bench, loopback_latency, run_scenario, BenchOp, ScenarioConfig};
use anonlimit::http::{serve_issuer, serve_verifier, HttpIssuer, HttpVerifier};
use anonlimit::issuer::{Issuer, IssuerConfig};
use anonlimit::rules::compile_ruleset;
use anonlimit::transport::RotationSink;
use anonlimit::verifier::{FileSink, Verifier, VerifierConfig};

#[derive(Parser)]
#[command(name = "anonlimit", version, about = "Rate-limited anonymous data collection")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a 32-byte Ed25519 secret key file and print its public key.
    Keygen {
        #[arg(long)]
        out: PathBuf,
    },
    Issuer {
        #[command(subcommand)]
        cmd: IssuerCmd,
    },
    Verifier {
        #[command(subcommand)]
        cmd: VerifierCmd,
    },
    Client {
        #[command(subcommand)]
        cmd: ClientCmd,
    },
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
    /// Time the DAA operations and compare with reference values.
    Bench {
        /// `all` or a comma separated list of setup,join,issue,sign,verify.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long)]
        json: bool,
    },
    /// Round-trip latency of every endpoint over loopback HTTP.
    Latency {
        #[arg(long, default_value_t = 200)]
        requests: usize,
    },
}

#[derive(Subcommand)]
enum IssuerCmd {
    Serve {
        #[arg(long, default_value = "127.0.0.1:8081")]
        bind: String,
        /// Admin signing key created with `keygen`.
        #[arg(long)]
        admin_key: PathBuf,
        /// One hex user public key per line.
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        state: Option<PathBuf>,
        /// Verifier base URL for epoch notices.
        #[arg(long)]
        verifier: String,
        #[arg(long, default_value_t = 3 * 24 * 3600)]
        key_lifetime_secs: u64,
        #[arg(long, default_value_t = 60)]
        rotation_check_secs: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

#[derive(Subcommand)]
enum VerifierCmd {
    Serve {
        #[arg(long, default_value = "127.0.0.1:8082")]
        bind: String,
        /// Ruleset files accepted by this collector.
        #[arg(long = "rules", required = true)]
        rules: Vec<PathBuf>,
        /// Hex Ed25519 public key of the issuer's admin channel.
        #[arg(long)]
        issuer_admin_key: String,
        #[arg(long)]
        state_dir: Option<PathBuf>,
        /// Accepted messages are appended here as JSON lines.
        #[arg(long, default_value = "collected.jsonl")]
        out: PathBuf,
        #[arg(long, default_value_t = 600)]
        skew_window_secs: u64,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
}

#[derive(Subcommand)]
enum ClientCmd {
    Send {
        #[arg(long)]
        rules: PathBuf,
        #[arg(long)]
        message: PathBuf,
        /// User identity key created with `keygen`.
        #[arg(long)]
        identity: PathBuf,
        #[arg(long, default_value = "client-state.json")]
        state: PathBuf,
        #[arg(long, default_value = "http://127.0.0.1:8081")]
        issuer: String,
        #[arg(long, default_value = "http://127.0.0.1:8082")]
        verifier: String,
        #[arg(long, default_value_t = 30)]
        max_delay_secs: u64,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

type AnyError = Box<dyn std::error::Error>;

fn read_key(path: &Path) -> Result<[u8; 32], AnyError> {
    let text = std::fs::read_to_string(path)?;
    let mut key = [0u8; 32];
    hex::decode_to_slice(text.trim(), &mut key).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(key)
}

fn read_registry(path: &Path) -> Result<HashSet<[u8; 32]>, AnyError> {
    let mut out = HashSet::new();
    for line in std::fs::read_to_string(path)?.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut key = [0u8; 32];
        hex::decode_to_slice(line, &mut key).map_err(|e| format!("registry entry {line:?}: {e}"))?;
        out.insert(key);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), AnyError> {
    match cli.cmd {
        Command::Keygen { out } => {
            let mut secret = [0u8; 32];
            OsRng.fill_bytes(&mut secret);
            std::fs::write(&out, hex::encode(secret))?;
            println!("{}", hex::encode(UserIdentity::from_secret_bytes(&secret).public_key()));
        }
        Command::Issuer {
            cmd:
                IssuerCmd::Serve {
                    bind,
                    admin_key,
                    registry,
                    state,
                    verifier,
                    key_lifetime_secs,
                    rotation_check_secs,
                    workers,
                },
        } => {
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            let config = IssuerConfig { key_lifetime_secs, state_path: state, ..Default::default() };
            let issuer = Arc::new(Issuer::new(config, read_registry(&registry)?, read_key(&admin_key)?, clock.now())?);
            let sink = Arc::new(HttpVerifier::new(&verifier));
            let mut wait = Duration::from_millis(500);
            while let Err(e) = sink.notify_epoch(&issuer.current_notice_body()) {
                log::warn!("verifier not ready ({e}); retrying in {wait:?}");
                std::thread::sleep(wait);
                wait = (wait * 2).min(Duration::from_secs(30));
            }
            issuer.set_notifier(sink);
            let server = serve_issuer(issuer.clone(), clock.clone(), &bind, workers)?;
            log::info!("issuer listening on {}", server.url());
            loop {
                match issuer.rotate_issuer_keys(clock.now()) {
                    Ok(outcome) => log::debug!("rotation check: {outcome:?}"),
                    Err(e) => log::error!("rotation held: {e}"),
                }
                std::thread::sleep(Duration::from_secs(rotation_check_secs.max(1)));
            }
        }
        Command::Verifier {
            cmd: VerifierCmd::Serve { bind, rules, issuer_admin_key, state_dir, out, skew_window_secs, workers },
        } => {
            let mut admin = [0u8; 32];
            hex::decode_to_slice(issuer_admin_key.trim(), &mut admin)?;
            let rulesets = rules
                .iter()
                .map(|p| Ok(compile_ruleset(&std::fs::read_to_string(p)?)?))
                .collect::<Result<Vec<_>, AnyError>>()?;
            let config = VerifierConfig { skew_window_secs, state_dir, issuer_admin_key: admin };
            let verifier =
                Arc::new(Verifier::new(config, rulesets, Arc::new(SystemClock), Arc::new(FileSink::open(&out)?))?);
            let server = serve_verifier(verifier, &bind, workers)?;
            log::info!("verifier listening on {}", server.url());
            server.join();
        }
        Command::Client {
            cmd: ClientCmd::Send { rules, message, identity, state, issuer, verifier, max_delay_secs },
        } => {
            let rs = compile_ruleset(&std::fs::read_to_string(rules)?)?;
            let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(message)?)?;
            let config = ClientConfig { max_delay_secs, state_path: Some(state), ..Default::default() };
            let mut client = Client::new(
                config,
                UserIdentity::from_secret_bytes(&read_key(&identity)?),
                Arc::new(HttpIssuer::new(&issuer)),
                Arc::new(HttpVerifier::new(&verifier)),
                Arc::new(ThreadSleep),
            )?;
            let out = client.send_message(&m, &rs, SystemClock.now())?;
            println!("{}", out.ack.as_str());
            for b in &out.submission.request.basenames {
                println!("  basename {b}");
            }
        }
        Command::Scenario { cmd: ScenarioCmd::Run { config, out } } => {
            let (cfg, rs) = ScenarioConfig::from_file(&config)?;
            let report = run_scenario(&cfg, &rs)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Command::Bench { ops, iterations, json } => {
            let report = bench(&BenchOp::parse_list(&ops)?, iterations);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
        }
        Command::Latency { requests } => {
            println!("{}", serde_json::to_string_pretty(&loopback_latency(requests)?)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
