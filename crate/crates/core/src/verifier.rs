//! Verifier/collector gate: recomputes basenames, checks every signature,
//! rejects linked (over-quota) submissions through an epoch-scoped tag
//! store, and forwards accepted messages to the collector sink.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Clock;
use crate::daa::{self, verify_identity_signature, PreparedGroupKey};
use crate::pairing::G1_LEN;
use crate::persist::{read_json, write_json_atomic};
use crate::rules::{Basename, RuleError, RuleSet};
use crate::transport::{RotationSink, TransportError, VerifierTransport};
use crate::wire::{encode_ack, AckCode, GroupKeyEpoch, RotationNotice, SubmitRequest};

pub const DEFAULT_SKEW_WINDOW_SECS: u64 = 600;
/// Granularity of the receive time stored with accepted messages.
pub const RECEIVE_PERIOD_SECS: u64 = 3600;

pub type Tag = [u8; G1_LEN];

#[derive(Debug, Error)]
pub enum VerifierError {
    #[error("rotation notice rejected: {0}")]
    BadNotice(String),
    #[error("verifier state: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
#[error("collector sink failed: {0}")]
pub struct SinkError(pub String);

/// Why a submission was dropped, and which rule (by position) tripped it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejection {
    pub code: AckCode,
    pub rule: Option<usize>,
}

impl Rejection {
    fn new(code: AckCode, rule: Option<usize>) -> Self {
        Self { code, rule }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accepted,
    Rejected(Rejection),
}

impl Verdict {
    pub fn code(&self) -> AckCode {
        match self {
            Verdict::Accepted => AckCode::Accepted,
            Verdict::Rejected(r) => r.code,
        }
    }
}

/// What the collector keeps for an accepted message. Nothing else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectedRecord {
    pub message: Value,
    pub receive_period: u64,
}

pub trait CollectorSink: Send + Sync {
    fn forward_to_collector(&self, record: &CollectedRecord) -> Result<(), SinkError>;
}

#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Mutex<Vec<CollectedRecord>>,
    pub fail: std::sync::atomic::AtomicBool,
}

impl MemorySink {
    pub fn records(&self) -> Vec<CollectedRecord> {
        self.records.lock().unwrap().clone()
    }
}

impl CollectorSink for MemorySink {
    fn forward_to_collector(&self, record: &CollectedRecord) -> Result<(), SinkError> {
        if self.fail.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(SinkError("sink disabled".into()));
        }
        self.records.lock().unwrap().push(record.clone());
        Ok(())
    }
}

/// Appends one JSON line per accepted message and syncs it.
pub struct FileSink {
    file: Mutex<File>,
}

impl FileSink {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file: Mutex::new(file) })
    }
}

impl CollectorSink for FileSink {
    fn forward_to_collector(&self, record: &CollectedRecord) -> Result<(), SinkError> {
        let mut line = serde_json::to_vec(record).map_err(|e| SinkError(e.to_string()))?;
        line.push(b'\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(&line).and_then(|_| f.sync_data()).map_err(|e| SinkError(e.to_string()))
    }
}

struct TagInner {
    epoch_id: u64,
    tags: HashSet<Tag>,
    log: Option<(PathBuf, File)>,
}

/// Seen linkability tags for the current epoch. Check-and-insert is one
/// atomic step; with a log path, tags survive restarts within an epoch.
pub struct VerifierTagStore {
    inner: Mutex<TagInner>,
}

impl VerifierTagStore {
    pub fn in_memory(epoch_id: u64) -> Self {
        Self { inner: Mutex::new(TagInner { epoch_id, tags: HashSet::new(), log: None }) }
    }

    /// Opens (or creates) an append-only tag log. The first line names the
    /// epoch; each following line is one hex tag.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut epoch_id = 0;
        let mut tags = HashSet::new();
        if let Ok(f) = File::open(path) {
            let mut lines = BufReader::new(f).lines();
            if let Some(header) = lines.next().transpose()? {
                epoch_id = header
                    .strip_prefix("epoch ")
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad tag log header"))?;
            }
            for line in lines {
                let line = line?;
                let mut tag = [0u8; G1_LEN];
                // A torn final line from a crash is ignored.
                if hex::decode_to_slice(line.trim(), &mut tag).is_ok() {
                    tags.insert(tag);
                }
            }
        } else {
            std::fs::write(path, "epoch 0\n")?;
        }
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { inner: Mutex::new(TagInner { epoch_id, tags, log: Some((path.to_owned(), file)) }) })
    }

    pub fn epoch_id(&self) -> u64 {
        self.inner.lock().unwrap().epoch_id
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, tag: &Tag) -> bool {
        self.inner.lock().unwrap().tags.contains(tag)
    }

    /// If none of `tags` has been seen, runs `commit` and records them all;
    /// returns `Ok(false)` when some tag was already present. Nothing is
    /// recorded if `commit` fails.
    pub fn check_and_insert<E>(&self, tags: &[Tag], commit: impl FnOnce() -> Result<(), E>) -> Result<bool, E> {
        let mut inner = self.inner.lock().unwrap();
        let mut fresh = HashSet::new();
        if tags.iter().any(|t| inner.tags.contains(t) || !fresh.insert(*t)) {
            return Ok(false);
        }
        commit()?;
        if let Some((_, file)) = inner.log.as_mut() {
            let mut buf = String::new();
            for t in tags {
                buf.push_str(&hex::encode(t));
                buf.push('\n');
            }
            if let Err(e) = file.write_all(buf.as_bytes()).and_then(|_| file.sync_data()) {
                log::error!("tag log append failed: {e}");
            }
        }
        inner.tags.extend(tags.iter().copied());
        Ok(true)
    }

    /// Empties the store for a new epoch and compacts the log.
    pub fn reset(&self, epoch_id: u64) -> std::io::Result<()> {
        let mut inner = self.inner.lock().unwrap();
        inner.tags.clear();
        inner.epoch_id = epoch_id;
        if let Some((path, file)) = inner.log.as_mut() {
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, format!("epoch {epoch_id}\n"))?;
            std::fs::rename(&tmp, &*path)?;
            *file = OpenOptions::new().append(true).open(&*path)?;
        }
        Ok(())
    }
}

/// Stateless checks: basenames recomputed from the message and time, then
/// every signature. Returns the extracted tags.
pub fn check_submission(
    req: &SubmitRequest,
    rs: &RuleSet,
    gpk: &PreparedGroupKey,
    now: u64,
    skew_window: u64,
) -> Result<Vec<Tag>, Rejection> {
    let malformed = |rule| Rejection::new(AckCode::Malformed, rule);
    if req.basenames.len() != rs.len() || req.signatures.len() != rs.len() {
        return Err(malformed(None));
    }
    let m: Value = serde_json::from_slice(&req.message).map_err(|_| malformed(None))?;
    for (i, (rule, raw)) in rs.rules.iter().zip(&req.basenames).enumerate() {
        let bad = Rejection::new(AckCode::BadBasename, Some(i));
        let bsn = Basename::parse(raw).map_err(|_| bad)?;
        // Only the canonical rendering is accepted.
        if bsn.canonical() != *raw {
            return Err(bad);
        }
        let expected = rule.eval(&m, now).map_err(|e| match e {
            RuleError::MissingField { .. } | RuleError::NotAnObject => malformed(Some(i)),
            _ => bad,
        })?;
        if bsn.digest != expected.digest
            || bsn.nonce >= expected.limit
            || !rule.accepted_periods(now, skew_window).contains(&bsn.period_index)
        {
            return Err(bad);
        }
    }
    for (i, (raw, sig)) in req.basenames.iter().zip(&req.signatures).enumerate() {
        if !daa::verify_prepared(gpk, raw.as_bytes(), &req.message, sig) {
            return Err(Rejection::new(AckCode::BadSignature, Some(i)));
        }
    }
    Ok(req.signatures.iter().map(daa::extract_tag).collect())
}

/// Full verification: stateless checks, then one atomic tag check-and-insert
/// that also forwards the message. A rejected submission records no tags.
pub fn verify_submission(
    req: &SubmitRequest,
    rs: &RuleSet,
    gpk: &PreparedGroupKey,
    now: u64,
    skew_window: u64,
    store: &VerifierTagStore,
    sink: &dyn CollectorSink,
) -> Verdict {
    let tags = match check_submission(req, rs, gpk, now, skew_window) {
        Ok(t) => t,
        Err(r) => return Verdict::Rejected(r),
    };
    let Ok(message) = serde_json::from_slice::<Value>(&req.message) else {
        return Verdict::Rejected(Rejection::new(AckCode::Malformed, None));
    };
    let record = CollectedRecord { message, receive_period: now / RECEIVE_PERIOD_SECS };
    match store.check_and_insert(&tags, || sink.forward_to_collector(&record)) {
        Ok(true) => Verdict::Accepted,
        Ok(false) => {
            let rule = {
                let inner = store.inner.lock().unwrap();
                tags.iter().position(|t| inner.tags.contains(t))
            };
            Verdict::Rejected(Rejection::new(AckCode::RateLimited, rule))
        }
        Err(e) => {
            log::error!("{e}");
            Verdict::Rejected(Rejection::new(AckCode::Unavailable, None))
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifierConfig {
    pub skew_window_secs: u64,
    /// Holds `epoch.json` and `tags.log` when set.
    pub state_dir: Option<PathBuf>,
    pub issuer_admin_key: [u8; 32],
}

impl VerifierConfig {
    pub fn new(issuer_admin_key: [u8; 32]) -> Self {
        Self { skew_window_secs: DEFAULT_SKEW_WINDOW_SECS, state_dir: None, issuer_admin_key }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochUpdate {
    Installed { epoch_id: u64 },
    Stale,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifierStats {
    pub accepted: u64,
    pub by_code: BTreeMap<AckCode, u64>,
    /// Rejections attributed to a rule id.
    pub rejected_by_rule: BTreeMap<String, u64>,
    pub accepted_by_ruleset: BTreeMap<String, u64>,
}

pub struct Verifier {
    config: VerifierConfig,
    rulesets: HashMap<String, RuleSet>,
    clock: Arc<dyn Clock>,
    epoch: RwLock<Option<(GroupKeyEpoch, PreparedGroupKey)>>,
    tags: VerifierTagStore,
    sink: Arc<dyn CollectorSink>,
    stats: Mutex<VerifierStats>,
}

impl Verifier {
    pub fn new(
        config: VerifierConfig,
        rulesets: Vec<RuleSet>,
        clock: Arc<dyn Clock>,
        sink: Arc<dyn CollectorSink>,
    ) -> Result<Self, VerifierError> {
        let (epoch, tags) = match &config.state_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let epoch: Option<GroupKeyEpoch> = read_json(&dir.join("epoch.json"))?;
                let tags = VerifierTagStore::open(&dir.join("tags.log"))?;
                let current = epoch.map_or(0, |e| e.epoch_id);
                if tags.epoch_id() != current {
                    tags.reset(current)?;
                }
                (epoch, tags)
            }
            None => (None, VerifierTagStore::in_memory(0)),
        };
        Ok(Self {
            config,
            rulesets: rulesets.into_iter().map(|r| (r.version.clone(), r)).collect(),
            clock,
            epoch: RwLock::new(epoch.map(|e| (e, e.gpk.prepare()))),
            tags,
            sink,
            stats: Mutex::new(VerifierStats::default()),
        })
    }

    pub fn current_epoch(&self) -> Option<GroupKeyEpoch> {
        self.epoch.read().unwrap().as_ref().map(|(e, _)| *e)
    }

    pub fn tag_count(&self) -> usize {
        self.tags.len()
    }

    pub fn stats(&self) -> VerifierStats {
        self.stats.lock().unwrap().clone()
    }

    /// Verifies and, on success, records a decoded submission.
    pub fn submit(&self, req: &SubmitRequest) -> Verdict {
        let Some(rs) = self.rulesets.get(&req.ruleset_version) else {
            return self.record(req, None, Verdict::Rejected(Rejection::new(AckCode::Malformed, None)));
        };
        // Held across verification so a rotation cannot interleave.
        let epoch = self.epoch.read().unwrap();
        let verdict = match epoch.as_ref() {
            None => Verdict::Rejected(Rejection::new(AckCode::Unavailable, None)),
            Some((_, pk)) => verify_submission(
                req,
                rs,
                pk,
                self.clock.now(),
                self.config.skew_window_secs,
                &self.tags,
                self.sink.as_ref(),
            ),
        };
        drop(epoch);
        self.record(req, Some(rs), verdict)
    }

    fn record(&self, req: &SubmitRequest, rs: Option<&RuleSet>, verdict: Verdict) -> Verdict {
        let mut stats = self.stats.lock().unwrap();
        *stats.by_code.entry(verdict.code()).or_default() += 1;
        match verdict {
            Verdict::Accepted => {
                stats.accepted += 1;
                *stats.accepted_by_ruleset.entry(req.ruleset_version.clone()).or_default() += 1;
            }
            Verdict::Rejected(r) => {
                let rule = r.rule.and_then(|i| rs.map(|rs| rs.rules[i].id.clone()));
                log::info!("rejected submission: {} (rule {:?})", r.code.as_str(), rule);
                if let Some(id) = rule {
                    *stats.rejected_by_rule.entry(id).or_default() += 1;
                }
            }
        }
        verdict
    }

    /// POST /v1/collect: padded request in, padded ack out.
    pub fn handle_collect(&self, body: &[u8]) -> Vec<u8> {
        let verdict = match SubmitRequest::decode(body) {
            Ok(req) => self.submit(&req),
            Err(_) => {
                let mut stats = self.stats.lock().unwrap();
                *stats.by_code.entry(AckCode::Malformed).or_default() += 1;
                Verdict::Rejected(Rejection::new(AckCode::Malformed, None))
            }
        };
        encode_ack(verdict.code(), &mut OsRng)
    }

    /// Installs a newer group key announced by the issuer and clears the
    /// tag store. Older or repeated notices change nothing.
    pub fn on_key_rotation(&self, notice: &RotationNotice) -> Result<EpochUpdate, VerifierError> {
        if !verify_identity_signature(
            &self.config.issuer_admin_key,
            &RotationNotice::signed_bytes(&notice.epoch),
            &notice.signature,
        ) {
            return Err(VerifierError::BadNotice("signature".into()));
        }
        if !notice.epoch.gpk.verify_proofs() {
            return Err(VerifierError::BadNotice("group key proofs".into()));
        }
        let mut epoch = self.epoch.write().unwrap();
        if let Some((current, _)) = epoch.as_ref() {
            if notice.epoch.epoch_id <= current.epoch_id || notice.epoch.gpk == current.gpk {
                return Ok(EpochUpdate::Stale);
            }
        }
        if let Some(dir) = &self.config.state_dir {
            write_json_atomic(&dir.join("epoch.json"), &notice.epoch)?;
        }
        self.tags.reset(notice.epoch.epoch_id)?;
        *epoch = Some((notice.epoch, notice.epoch.gpk.prepare()));
        Ok(EpochUpdate::Installed { epoch_id: notice.epoch.epoch_id })
    }

    pub fn handle_admin_epoch(&self, body: &[u8]) -> Result<EpochUpdate, VerifierError> {
        let notice = RotationNotice::decode(body).map_err(|e| VerifierError::BadNotice(e.to_string()))?;
        self.on_key_rotation(&notice)
    }
}

impl VerifierTransport for Verifier {
    fn collect(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        Ok(self.handle_collect(body))
    }
}

impl RotationSink for Verifier {
    fn notify_epoch(&self, body: &[u8]) -> Result<(), TransportError> {
        self.handle_admin_epoch(body).map(|_| ()).map_err(|e| TransportError::Protocol(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tag_store_is_all_or_nothing() {
        let store = VerifierTagStore::in_memory(1);
        let (a, b, c) = ([1u8; G1_LEN], [2u8; G1_LEN], [3u8; G1_LEN]);
        assert_eq!(store.check_and_insert::<()>(&[a, b], || Ok(())), Ok(true));
        assert_eq!(store.check_and_insert::<()>(&[c, a], || Ok(())), Ok(false));
        assert!(!store.contains(&c));
        assert_eq!(store.check_and_insert(&[c], || Err("sink down")), Err("sink down"));
        assert!(!store.contains(&c));
        assert_eq!(store.check_and_insert::<()>(&[c, c], || Ok(())), Ok(false));
        store.reset(2).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.epoch_id(), 2);
    }

    #[test]
    fn tag_log_survives_restart_and_compacts_on_reset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tags.log");
        let store = VerifierTagStore::open(&path).unwrap();
        store.reset(7).unwrap();
        store.check_and_insert::<()>(&[[5u8; G1_LEN]], || Ok(())).unwrap();
        drop(store);
        let reopened = VerifierTagStore::open(&path).unwrap();
        assert_eq!(reopened.epoch_id(), 7);
        assert!(reopened.contains(&[5u8; G1_LEN]));
        reopened.reset(8).unwrap();
        drop(reopened);
        let again = VerifierTagStore::open(&path).unwrap();
        assert_eq!((again.epoch_id(), again.len()), (8, 0));
    }
}
