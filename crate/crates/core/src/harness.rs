//! Scenario runner and benchmarks. A scenario wires an issuer, a verifier
//! and a set of honest and adversarial clients to one simulated clock and
//! reports what the verifier accepted.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::OsRng;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{Client, ClientConfig, ClientError, ClientStatus, StoredCredential};
use crate::clock::{RecordedDelay, SimClock};
use crate::daa::{self, IssuedCredentials, UserIdentity};
use crate::http::{serve_issuer, serve_verifier, HttpIssuer, HttpServer, HttpVerifier};
use crate::issuer::{Issuer, IssuerConfig, IssuerError};
use crate::rules::{eval_all, Basename, RuleError, RuleSet, RuleSetDocument};
use crate::transport::{IssuerTransport, RotationSink, VerifierTransport};
use crate::verifier::{MemorySink, Verifier, VerifierConfig};
use crate::wire::{decode_ack, AckCode, SubmitRequest};

pub const DEFAULT_START_TIME: u64 = 1_700_000_100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario config: {0}")]
    Config(String),
    #[error("ruleset: {0}")]
    Rules(#[from] RuleError),
    #[error("issuer: {0}")]
    Issuer(#[from] IssuerError),
    #[error("service startup: {0}")]
    Startup(String),
    #[error("client: {0}")]
    Client(#[from] ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RulesetSource {
    Inline(RuleSetDocument),
    Path(PathBuf),
}

impl RulesetSource {
    /// Relative paths are taken from `base`.
    pub fn load(&self, base: &Path) -> Result<RuleSet, HarnessError> {
        match self {
            RulesetSource::Inline(doc) => Ok(RuleSet::from_document(doc.clone())?),
            RulesetSource::Path(p) => {
                let text = std::fs::read_to_string(base.join(p))?;
                Ok(crate::rules::compile_ruleset(&text)?)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// Resends one accepted request body verbatim.
    Replay,
    /// Ignores local quota and cycles through every valid nonce.
    QuotaFlood,
    /// Signs nonces 0, 1, 2, ... regardless of the rule's limit.
    NonceScan,
    /// Keeps signing with a credential from the retired epoch.
    StaleEpoch,
    /// The issuer silently replaces an announced group key.
    KeySwapIssuer,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Replay => "replay",
            AttackKind::QuotaFlood => "quota-flood",
            AttackKind::NonceScan => "nonce-scan",
            AttackKind::StaleEpoch => "stale-epoch",
            AttackKind::KeySwapIssuer => "key-swap-issuer",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackerConfig {
    pub kind: AttackKind,
    #[serde(default = "default_sends")]
    pub sends: usize,
    /// Message the attacker submits; defaults to the first honest template.
    #[serde(default)]
    pub message: Option<Value>,
}

fn default_sends() -> usize {
    10
}

fn default_one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportMode {
    #[default]
    InProcess,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub ruleset: RulesetSource,
    #[serde(default)]
    pub users: usize,
    /// Honest message templates, assigned round-robin.
    #[serde(default)]
    pub messages: Vec<Value>,
    #[serde(default = "default_one")]
    pub sends_per_period: u64,
    #[serde(default = "default_one")]
    pub periods: u64,
    /// Simulated seconds between honest rounds.
    #[serde(default)]
    pub period_step_secs: Option<u64>,
    #[serde(default)]
    pub attackers: Vec<AttackerConfig>,
    /// Each client's clock is offset by a seeded draw from [-skew, skew].
    #[serde(default)]
    pub clock_skew_secs: u64,
    /// Rotate the issuer key after the honest rounds and send once more.
    #[serde(default)]
    pub rotate: bool,
    #[serde(default)]
    pub transport: TransportMode,
    #[serde(default)]
    pub start_time: Option<u64>,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_file(path: &Path) -> Result<(Self, RuleSet), HarnessError> {
        let cfg: ScenarioConfig =
            serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| HarnessError::Config(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rs = cfg.ruleset.load(base)?;
        Ok((cfg, rs))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub submitted: u64,
    pub accepted: u64,
    pub rejected: u64,
}

impl Counts {
    fn add(&mut self, ack: AckCode) {
        self.submitted += 1;
        if ack == AckCode::Accepted {
            self.accepted += 1;
        } else {
            self.rejected += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleCounts {
    pub accepted: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RotationReport {
    pub from_epoch: u64,
    pub to_epoch: u64,
    pub tag_store_size_after: usize,
    /// Pre-rotation request bodies replayed afterwards, and how many got in.
    pub old_epoch_replays: u64,
    pub old_epoch_accepted: u64,
    /// Honest resends of already-used pre-basenames after rotation.
    pub resubmissions: u64,
    pub resubmissions_accepted: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySwapReport {
    pub clients: usize,
    pub punished: usize,
    pub post_detection_attempts: u64,
    pub post_detection_sends: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub samples: usize,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl TimingSummary {
    pub fn from_durations(samples: &[Duration]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1000.0).collect();
        ms.sort_by(f64::total_cmp);
        Some(Self {
            samples: ms.len(),
            p50_ms: percentile(&ms, 0.50),
            p95_ms: percentile(&ms, 0.95),
            max_ms: *ms.last().unwrap(),
        })
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub submitted: u64,
    pub accepted: u64,
    pub rejected: u64,
    /// Rejections by ack reason.
    pub by_reason: BTreeMap<String, u64>,
    /// Sends the clients refused to make, by reason.
    pub local_aborts: BTreeMap<String, u64>,
    pub per_rule: BTreeMap<String, RuleCounts>,
    pub per_actor: BTreeMap<String, Counts>,
    /// Submissions dropped because a tag was already seen.
    pub linkage_events: u64,
    pub rotation: Option<RotationReport>,
    pub key_swap: Option<KeySwapReport>,
    /// Wall-clock submission latency; excluded from determinism checks.
    pub timings: Option<TimingSummary>,
}

impl ScenarioReport {
    /// The report with timings removed; equal seeds give equal values.
    pub fn deterministic(&self) -> Self {
        Self { timings: None, ..self.clone() }
    }
}

struct World {
    clock: SimClock,
    issuer: Arc<Issuer>,
    verifier: Arc<Verifier>,
    issuer_t: Arc<dyn IssuerTransport>,
    verifier_t: Arc<dyn VerifierTransport>,
    servers: Vec<HttpServer>,
}

impl World {
    fn start(rs: &RuleSet, mode: TransportMode, start: u64, admin_seed: [u8; 32]) -> Result<Self, HarnessError> {
        let clock = SimClock::new(start);
        let issuer = Arc::new(Issuer::new(IssuerConfig::default(), HashSet::new(), admin_seed, start)?);
        rs.check_key_lifetime(issuer.config().key_lifetime_secs)?;
        let verifier = Arc::new(
            Verifier::new(
                VerifierConfig::new(issuer.admin_public_key()),
                vec![rs.clone()],
                Arc::new(clock.clone()),
                Arc::new(MemorySink::default()),
            )
            .map_err(|e| HarnessError::Startup(e.to_string()))?,
        );
        let mut servers = Vec::new();
        let (issuer_t, verifier_t, sink): (
            Arc<dyn IssuerTransport>,
            Arc<dyn VerifierTransport>,
            Arc<dyn RotationSink>,
        ) = match mode {
            TransportMode::InProcess => (issuer.clone(), verifier.clone(), verifier.clone()),
            TransportMode::Http => {
                let is = serve_issuer(issuer.clone(), Arc::new(clock.clone()), "127.0.0.1:0", 4)?;
                let vs = serve_verifier(verifier.clone(), "127.0.0.1:0", 4)?;
                let out = (
                    Arc::new(HttpIssuer::new(&is.url())) as Arc<dyn IssuerTransport>,
                    Arc::new(HttpVerifier::new(&vs.url())) as Arc<dyn VerifierTransport>,
                    Arc::new(HttpVerifier::new(&vs.url())) as Arc<dyn RotationSink>,
                );
                servers.push(is);
                servers.push(vs);
                out
            }
        };
        sink.notify_epoch(&issuer.current_notice_body())
            .map_err(|e| HarnessError::Startup(format!("verifier rejected initial epoch: {e}")))?;
        issuer.set_notifier(sink);
        Ok(Self { clock, issuer, verifier, issuer_t, verifier_t, servers })
    }

    fn client(&self, rng: &mut ChaCha20Rng) -> Client {
        let identity = UserIdentity::generate(rng);
        self.issuer.register(identity.public_key());
        let config = ClientConfig { seed: Some(rng.gen()), ..Default::default() };
        Client::new(
            config,
            identity,
            self.issuer_t.clone(),
            self.verifier_t.clone(),
            Arc::new(RecordedDelay::default()),
        )
        .expect("in-memory client state")
    }

    fn shutdown(self) {
        for s in self.servers {
            s.shutdown();
        }
    }
}

struct Tally {
    report: ScenarioReport,
    latencies: Vec<Duration>,
}

impl Tally {
    fn sent(&mut self, actor: &str, ack: AckCode, latency: Duration) {
        let r = &mut self.report;
        r.submitted += 1;
        if ack == AckCode::Accepted {
            r.accepted += 1;
        } else {
            r.rejected += 1;
            *r.by_reason.entry(ack.as_str().to_owned()).or_default() += 1;
            if ack == AckCode::RateLimited {
                r.linkage_events += 1;
            }
        }
        r.per_actor.entry(actor.to_owned()).or_default().add(ack);
        self.latencies.push(latency);
    }

    fn aborted(&mut self, err: &ClientError) {
        let key = match err {
            ClientError::Punished => "punished",
            ClientError::JoinDenied(_) => "join-denied",
            ClientError::MustRefresh => "must-refresh",
            ClientError::QuotaExceeded(_) => "quota-exceeded",
            ClientError::Message(_) => "malformed-message",
            ClientError::Transport(_) => "transport",
            ClientError::Protocol(_) => "protocol",
            ClientError::Persist(_) => "persist",
        };
        *self.report.local_aborts.entry(key.to_owned()).or_default() += 1;
    }
}

enum HonestResult {
    Sent(AckCode, Duration, Vec<u8>),
    Aborted(ClientError),
}

/// Every client sends concurrently; results come back in client order.
fn honest_round(
    clients: &mut [Client],
    skews: &[i64],
    messages: &[Value],
    rs: &RuleSet,
    now: u64,
    round: u64,
    sends: u64,
) -> Vec<Vec<HonestResult>> {
    std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter_mut()
            .zip(skews)
            .enumerate()
            .map(|(i, (c, skew))| {
                s.spawn(move || {
                    let t = now.saturating_add_signed(*skew);
                    (0..sends)
                        .map(|k| {
                            let m = &messages[(i + (round * sends + k) as usize) % messages.len()];
                            let started = Instant::now();
                            match c.prepare_submission(m, rs, t) {
                                Ok(sub) => match c.dispatch(&sub.body) {
                                    Ok(ack) => HonestResult::Sent(ack, started.elapsed(), sub.body),
                                    Err(e) => HonestResult::Aborted(e),
                                },
                                Err(e) => HonestResult::Aborted(e),
                            }
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("client thread")).collect()
    })
}

fn dispatch_timed(world: &World, body: &[u8]) -> (AckCode, Duration) {
    let started = Instant::now();
    let ack = world.verifier_t.collect(body).ok().and_then(|r| decode_ack(&r).ok()).unwrap_or(AckCode::Unavailable);
    (ack, started.elapsed())
}

/// Signs `m` under explicit basenames with a stored credential, bypassing
/// every client-side check.
fn forge(rs: &RuleSet, stored: &StoredCredential, m: &Value, basenames: Vec<String>, rng: &mut ChaCha20Rng) -> Vec<u8> {
    let msg = serde_json::to_vec(m).unwrap();
    let signatures = basenames.iter().map(|b| daa::sign(&stored.gsk, &stored.cred, b.as_bytes(), &msg, rng)).collect();
    SubmitRequest { ruleset_version: rs.version.clone(), message: msg, basenames, signatures }
        .encode(rng)
        .expect("request fits")
}

fn basenames_with_nonce(rs: &RuleSet, m: &Value, now: u64, nonce: impl Fn(u64) -> u64) -> Vec<String> {
    eval_all(rs, m, now)
        .expect("attacker message evaluates")
        .into_iter()
        .map(|e| Basename { nonce: nonce(e.limit), digest: e.digest, period_index: e.period_index }.canonical())
        .collect()
}

pub fn run_scenario(cfg: &ScenarioConfig, rs: &RuleSet) -> Result<ScenarioReport, HarnessError> {
    if cfg.users > 0 && cfg.messages.is_empty() {
        return Err(HarnessError::Config("honest users need at least one message template".into()));
    }
    let default_msg = cfg.messages.first().cloned().unwrap_or_else(|| json!({}));
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let start = cfg.start_time.unwrap_or(DEFAULT_START_TIME);
    let world = World::start(rs, cfg.transport, start, rng.gen())?;
    let step = cfg
        .period_step_secs
        .unwrap_or_else(|| rs.rules.iter().map(|r| r.period_seconds).min().unwrap_or(1).min(86_400));
    let skew = cfg.clock_skew_secs as i64;

    let mut clients: Vec<Client> = (0..cfg.users).map(|_| world.client(&mut rng)).collect();
    let skews: Vec<i64> = (0..cfg.users).map(|_| rng.gen_range(-skew..=skew)).collect();
    let mut tally = Tally {
        report: ScenarioReport {
            name: cfg.name.clone(),
            seed: cfg.seed,
            submitted: 0,
            accepted: 0,
            rejected: 0,
            by_reason: BTreeMap::new(),
            local_aborts: BTreeMap::new(),
            per_rule: BTreeMap::new(),
            per_actor: BTreeMap::new(),
            linkage_events: 0,
            rotation: None,
            key_swap: None,
            timings: None,
        },
        latencies: Vec::new(),
    };

    let mut first_bodies = Vec::new();
    for round in 0..cfg.periods {
        let now = start + round * step;
        world.clock.set(now);
        let results = honest_round(&mut clients, &skews, &cfg.messages, rs, now, round, cfg.sends_per_period);
        for per_client in results {
            for r in per_client {
                match r {
                    HonestResult::Sent(ack, latency, body) => {
                        if round == 0 && first_bodies.len() < cfg.users {
                            first_bodies.push(body);
                        }
                        tally.sent("honest", ack, latency);
                    }
                    HonestResult::Aborted(e) => tally.aborted(&e),
                }
            }
        }
    }
    let mut now = start + cfg.periods.saturating_sub(1) * step;

    let mut stale = Vec::new();
    for (i, attack) in cfg.attackers.iter().enumerate() {
        let actor = format!("attacker-{i}:{}", attack.kind.as_str());
        let m = attack.message.clone().unwrap_or_else(|| default_msg.clone());
        if attack.kind == AttackKind::KeySwapIssuer {
            continue;
        }
        let mut attacker = world.client(&mut rng);
        attacker.refresh_group_keys(now)?;
        let stored = attacker.active_credential().ok_or(ClientError::MustRefresh)?;
        match attack.kind {
            AttackKind::Replay => {
                let body = attacker.prepare_submission(&m, rs, now)?.body;
                for _ in 0..attack.sends {
                    let (ack, lat) = dispatch_timed(&world, &body);
                    tally.sent(&actor, ack, lat);
                }
            }
            AttackKind::QuotaFlood | AttackKind::NonceScan => {
                for k in 0..attack.sends as u64 {
                    let bsns = basenames_with_nonce(rs, &m, now, |limit| {
                        if attack.kind == AttackKind::QuotaFlood {
                            k % limit
                        } else {
                            k
                        }
                    });
                    let body = forge(rs, &stored, &m, bsns, &mut rng);
                    let (ack, lat) = dispatch_timed(&world, &body);
                    tally.sent(&actor, ack, lat);
                }
            }
            AttackKind::StaleEpoch => stale.push((actor, stored, m, attack.sends)),
            AttackKind::KeySwapIssuer => unreachable!(),
        }
    }

    if cfg.rotate || !stale.is_empty() {
        let from = world.issuer.current_epoch();
        now = from.expiry + cfg.clock_skew_secs + 1;
        world.clock.set(now);
        world.issuer.rotate_issuer_keys(now)?;
        let to = world.issuer.current_epoch();
        let mut rot = RotationReport {
            from_epoch: from.epoch_id,
            to_epoch: to.epoch_id,
            tag_store_size_after: world.verifier.tag_count(),
            old_epoch_replays: 0,
            old_epoch_accepted: 0,
            resubmissions: 0,
            resubmissions_accepted: 0,
        };
        for body in &first_bodies {
            let (ack, lat) = dispatch_timed(&world, body);
            tally.sent("honest-replay-old-epoch", ack, lat);
            rot.old_epoch_replays += 1;
            rot.old_epoch_accepted += u64::from(ack == AckCode::Accepted);
        }
        for (actor, stored, m, sends) in &stale {
            for k in 0..*sends as u64 {
                let bsns = basenames_with_nonce(rs, m, now, |limit| k % limit);
                let body = forge(rs, stored, m, bsns, &mut rng);
                let (ack, lat) = dispatch_timed(&world, &body);
                tally.sent(actor, ack, lat);
                rot.old_epoch_replays += 1;
                rot.old_epoch_accepted += u64::from(ack == AckCode::Accepted);
            }
        }
        if cfg.users > 0 {
            let results = honest_round(&mut clients, &skews, &cfg.messages, rs, now, 0, cfg.sends_per_period);
            for r in results.into_iter().flatten() {
                match r {
                    HonestResult::Sent(ack, latency, _) => {
                        rot.resubmissions += 1;
                        rot.resubmissions_accepted += u64::from(ack == AckCode::Accepted);
                        tally.sent("honest-after-rotation", ack, latency);
                    }
                    HonestResult::Aborted(e) => tally.aborted(&e),
                }
            }
        }
        tally.report.rotation = Some(rot);
    }

    for attack in cfg.attackers.iter().filter(|a| a.kind == AttackKind::KeySwapIssuer) {
        world.issuer.tamper_replace_key(1);
        let submitted_before = tally.report.submitted;
        let mut attempts = 0;
        for (c, skew) in clients.iter_mut().zip(&skews) {
            let t = now.saturating_add_signed(*skew) + 1;
            if let Err(e) = c.refresh_group_keys(t) {
                log::info!("refresh after key swap: {e}");
            }
            for k in 0..attack.sends {
                attempts += 1;
                let m = &cfg.messages[k % cfg.messages.len()];
                match c.send_message(m, rs, t) {
                    Ok(out) => tally.sent("honest-after-key-swap", out.ack, Duration::ZERO),
                    Err(e) => tally.aborted(&e),
                }
            }
        }
        tally.report.key_swap = Some(KeySwapReport {
            clients: clients.len(),
            punished: clients.iter().filter(|c| c.status() == ClientStatus::Punished).count(),
            post_detection_attempts: attempts,
            post_detection_sends: tally.report.submitted - submitted_before,
        });
    }

    let stats = world.verifier.stats();
    for rule in &rs.rules {
        let counts = tally.report.per_rule.entry(rule.id.clone()).or_default();
        counts.accepted = tally.report.accepted;
        counts.rejected = stats.rejected_by_rule.get(&rule.id).copied().unwrap_or(0);
    }
    tally.report.timings = TimingSummary::from_durations(&tally.latencies);
    world.shutdown();
    Ok(tally.report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchOp {
    Setup,
    Join,
    Issue,
    Sign,
    Verify,
}

impl BenchOp {
    pub const ALL: [BenchOp; 5] = [BenchOp::Setup, BenchOp::Join, BenchOp::Issue, BenchOp::Sign, BenchOp::Verify];

    pub fn name(self) -> &'static str {
        match self {
            BenchOp::Setup => "setup",
            BenchOp::Join => "join",
            BenchOp::Issue => "issue",
            BenchOp::Sign => "sign",
            BenchOp::Verify => "verify",
        }
    }

    /// Reference native timings (ms) for the same operations.
    pub fn reference_ms(self) -> f64 {
        match self {
            BenchOp::Setup => 2.3,
            BenchOp::Join => 8.5,
            BenchOp::Issue => 1.6,
            BenchOp::Sign => 0.4,
            BenchOp::Verify => 6.8,
        }
    }

    /// `all` or a comma separated list.
    pub fn parse_list(s: &str) -> Result<Vec<BenchOp>, String> {
        if s == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',')
            .map(|name| {
                Self::ALL
                    .into_iter()
                    .find(|op| op.name() == name.trim())
                    .ok_or_else(|| format!("unknown operation {name:?}"))
            })
            .collect()
    }
}

pub const REFERENCE_SENDER_MSGS_PER_SEC: f64 = 125.0;
pub const REFERENCE_COLLECTOR_MSGS_PER_SEC: f64 = 140.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub op: BenchOp,
    pub iterations: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub reference_ms: f64,
}

impl BenchRow {
    pub fn ops_per_sec(&self) -> f64 {
        1000.0 / self.mean_ms
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, op: BenchOp) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.op == op)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10}", "op", "iters", "mean ms", "p95 ms", "ref ms", "ops/s")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<8} {:>6} {:>10.3} {:>10.3} {:>10.1} {:>10.1}",
                r.op.name(),
                r.iterations,
                r.mean_ms,
                r.p95_ms,
                r.reference_ms,
                r.ops_per_sec()
            )?;
        }
        if let Some(sign) = self.row(BenchOp::Sign) {
            writeln!(
                f,
                "sender throughput    {:>8.1} msg/s (reference {REFERENCE_SENDER_MSGS_PER_SEC})",
                sign.ops_per_sec()
            )?;
        }
        if let Some(verify) = self.row(BenchOp::Verify) {
            writeln!(
                f,
                "collector throughput {:>8.1} msg/s (reference {REFERENCE_COLLECTOR_MSGS_PER_SEC})",
                verify.ops_per_sec()
            )?;
        }
        Ok(())
    }
}

fn time_op(iterations: usize, mut f: impl FnMut()) -> (f64, f64) {
    // One warm-up call.
    f();
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        f();
        samples.push(t.elapsed());
    }
    let s = TimingSummary::from_durations(&samples).expect("at least one iteration");
    let mean = samples.iter().map(|d| d.as_secs_f64() * 1000.0).sum::<f64>() / iterations as f64;
    (mean, s.p95_ms)
}

pub fn bench(ops: &[BenchOp], iterations: usize) -> BenchReport {
    let iterations = iterations.max(1);
    let mut rng = OsRng;
    let (isk, gpk) = daa::setup(&mut rng);
    let id = UserIdentity::generate(&mut rng);
    let (gsk, req) = daa::join_user_init(&gpk, &id, &mut rng);
    let registry: HashSet<[u8; 32]> = [id.public_key()].into();
    let cred = daa::join_issuer(&isk, &gpk, &req, &registry, &IssuedCredentials::new(), &mut rng).unwrap();
    let bsn = b"v1|bench-service|0|0";
    let m = br#"{"bench":true}"#;
    let sig = daa::sign(&gsk, &cred, bsn, m, &mut rng);
    // The verifier keeps the current key prepared, so the bench does too.
    let prepared = gpk.prepare();
    let rows = ops
        .iter()
        .map(|&op| {
            let (mean_ms, p95_ms) = match op {
                BenchOp::Setup => time_op(iterations, || {
                    std::hint::black_box(daa::setup(&mut rng));
                }),
                BenchOp::Join => time_op(iterations, || {
                    let (k, r) = daa::join_user_init(&gpk, &id, &mut rng);
                    let c = daa::issue_credential(&isk, &r.q, &mut rng);
                    std::hint::black_box(daa::join_user_finish(&gpk, &k, &c).unwrap());
                }),
                BenchOp::Issue => time_op(iterations, || {
                    std::hint::black_box(daa::issue_credential(&isk, &req.q, &mut rng));
                }),
                BenchOp::Sign => time_op(iterations, || {
                    std::hint::black_box(daa::sign(&gsk, &cred, bsn, m, &mut rng));
                }),
                BenchOp::Verify => time_op(iterations, || {
                    assert!(daa::verify_prepared(&prepared, bsn, m, &sig));
                }),
            };
            BenchRow { op, iterations, mean_ms, p95_ms, reference_ms: op.reference_ms() }
        })
        .collect();
    BenchReport { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub group_keys: TimingSummary,
    pub join: TimingSummary,
    pub collect: TimingSummary,
    pub accepted: u64,
}

/// Round-trip latency of each endpoint over real loopback sockets. For
/// regression tracking only.
pub fn loopback_latency(requests: usize) -> Result<LatencyReport, HarnessError> {
    let rs = crate::rules::compile_ruleset(
        r#"{"version":"latency-1","rules":[
            {"id":"latency","digest_prefix":"latency-probe","period_seconds":"infinite","limit":1000000}]}"#,
    )?;
    let world = World::start(&rs, TransportMode::Http, DEFAULT_START_TIME, OsRng.gen())?;
    let mut rng = ChaCha20Rng::from_entropy();
    let requests = requests.max(1);
    let mut keys = Vec::new();
    let mut joins = Vec::new();
    for _ in 0..requests.min(20) {
        let t = Instant::now();
        world.issuer_t.group_keys().map_err(ClientError::from)?;
        keys.push(t.elapsed());
        let mut c = world.client(&mut rng);
        let t = Instant::now();
        c.obtain_credentials(&world.issuer.current_epoch())?;
        joins.push(t.elapsed());
    }
    let mut client = world.client(&mut rng);
    let mut collect = Vec::new();
    let mut accepted = 0;
    for i in 0..requests {
        let sub = client.prepare_submission(&json!({ "probe": i }), &rs, DEFAULT_START_TIME)?;
        let t = Instant::now();
        let ack = client.dispatch(&sub.body)?;
        collect.push(t.elapsed());
        accepted += u64::from(ack == AckCode::Accepted);
    }
    world.shutdown();
    Ok(LatencyReport {
        group_keys: TimingSummary::from_durations(&keys).unwrap(),
        join: TimingSummary::from_durations(&joins).unwrap(),
        collect: TimingSummary::from_durations(&collect).unwrap(),
        accepted,
    })
}
