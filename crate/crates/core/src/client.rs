//! User-side protocol state machine: group-key refresh with consistency
//! checks against a local key log, credential acquisition, user key
//! rotation, and message submission.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::clock::Delay;
use crate::daa::{self, Credential, UserDaaKey, UserIdentity, UPK_LEN};
use crate::pairing::G1_LEN;
use crate::persist::{read_json, write_json_atomic};
use crate::rules::{build_basenames, ClientTagState, RuleError, RuleSet};
use crate::transport::{IssuerTransport, TransportError, VerifierTransport};
use crate::wire::{
    decode_ack, decode_group_keys, decode_join_response, encode_join_request, AckCode, GroupKeyEpoch, JoinResponse,
    SubmitRequest,
};

pub const DEFAULT_MAX_DELAY_SECS: u64 = 30;
pub const DEFAULT_KEY_LOG_RETENTION: usize = 10;
/// Cached epochs expiring within this margin may legitimately vanish from
/// the issuer's list, since issuer and client clocks differ.
pub const DEFAULT_EXPIRY_TOLERANCE_SECS: u64 = 600;
pub const DEFAULT_REFRESH_INTERVAL_SECS: u64 = 24 * 3600;

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub max_delay_secs: u64,
    pub refresh_attempts: u32,
    pub backoff_base: Duration,
    pub refresh_interval_secs: u64,
    pub key_log_retention: usize,
    pub expiry_tolerance_secs: u64,
    pub state_path: Option<PathBuf>,
    /// Seeds the client's randomness. Only for simulations.
    pub seed: Option<u64>,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            max_delay_secs: DEFAULT_MAX_DELAY_SECS,
            refresh_attempts: 5,
            backoff_base: Duration::from_millis(200),
            refresh_interval_secs: DEFAULT_REFRESH_INTERVAL_SECS,
            key_log_retention: DEFAULT_KEY_LOG_RETENTION,
            expiry_tolerance_secs: DEFAULT_EXPIRY_TOLERANCE_SECS,
            state_path: None,
            seed: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("client is in PUNISH state")]
    Punished,
    #[error("issuer denied join for epoch {0}")]
    JoinDenied(u64),
    #[error("no usable credential; refresh required")]
    MustRefresh,
    #[error("quota exceeded for rule {0}")]
    QuotaExceeded(String),
    #[error("message rejected locally: {0}")]
    Message(RuleError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("client state: {0}")]
    Persist(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientStatus {
    Active,
    MustRefresh,
    Punished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLogEntry {
    pub epoch_id: u64,
    pub fingerprint: String,
    pub expiry: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub at: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StoredCredential {
    pub epoch_id: u64,
    pub gsk: UserDaaKey,
    pub cred: Credential,
}

/// Everything the client persists between runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientState {
    #[serde(with = "hex::serde")]
    pub user_public_key: [u8; UPK_LEN],
    pub status: ClientStatus,
    /// Known epochs, oldest first; the first is the active one.
    pub epochs: Vec<GroupKeyEpoch>,
    /// Keyed by group public key fingerprint.
    pub credentials: BTreeMap<String, StoredCredential>,
    pub tags: ClientTagState,
    pub tag_epoch: u64,
    pub key_log: Vec<KeyLogEntry>,
    pub join_denied: BTreeSet<u64>,
    pub alerts: Vec<Alert>,
    pub last_refresh: Option<u64>,
}

impl ClientState {
    fn new(user_public_key: [u8; UPK_LEN]) -> Self {
        Self {
            user_public_key,
            status: ClientStatus::MustRefresh,
            epochs: Vec::new(),
            credentials: BTreeMap::new(),
            tags: ClientTagState::new(),
            tag_epoch: 0,
            key_log: Vec::new(),
            join_denied: BTreeSet::new(),
            alerts: Vec::new(),
            last_refresh: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefreshOutcome {
    pub epochs: Vec<GroupKeyEpoch>,
    pub joins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotateOutcome {
    NoOp,
    Rotated { active_epoch: u64 },
    MustRefresh,
}

/// A signed, padded submission ready for dispatch.
#[derive(Debug, Clone)]
pub struct PreparedSubmission {
    pub request: SubmitRequest,
    pub body: Vec<u8>,
    pub epoch_id: u64,
}

impl PreparedSubmission {
    pub fn tags(&self) -> Vec<[u8; G1_LEN]> {
        self.request.signatures.iter().map(daa::extract_tag).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SendOutcome {
    pub ack: AckCode,
    pub submission: PreparedSubmission,
    pub delay: Duration,
}

pub struct Client {
    config: ClientConfig,
    identity: UserIdentity,
    state: ClientState,
    issuer: Arc<dyn IssuerTransport>,
    verifier: Arc<dyn VerifierTransport>,
    delay: Arc<dyn Delay>,
    rng: ChaCha20Rng,
}

impl Client {
    /// Loads saved state from `config.state_path` when it exists.
    pub fn new(
        config: ClientConfig,
        identity: UserIdentity,
        issuer: Arc<dyn IssuerTransport>,
        verifier: Arc<dyn VerifierTransport>,
        delay: Arc<dyn Delay>,
    ) -> Result<Self, ClientError> {
        let upk = identity.public_key();
        let state = match &config.state_path {
            Some(p) => read_json::<ClientState>(p)?,
            None => None,
        };
        let state = match state {
            Some(s) if s.user_public_key != upk => {
                return Err(ClientError::Protocol("state file belongs to another identity".into()))
            }
            Some(s) => s,
            None => ClientState::new(upk),
        };
        let rng = match config.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        Ok(Self { config, identity, state, issuer, verifier, delay, rng })
    }

    pub fn state(&self) -> &ClientState {
        &self.state
    }

    pub fn status(&self) -> ClientStatus {
        self.state.status
    }

    pub fn identity(&self) -> &UserIdentity {
        &self.identity
    }

    pub fn active_epoch(&self) -> Option<GroupKeyEpoch> {
        self.state.epochs.first().copied()
    }

    /// The key and credential for the active epoch.
    pub fn active_credential(&self) -> Option<StoredCredential> {
        let epoch = self.active_epoch()?;
        self.state.credentials.get(&epoch.gpk.fingerprint()).cloned()
    }

    /// Operator action: leave PUNISH state and forget the key log.
    pub fn reset_punishment(&mut self) -> Result<(), ClientError> {
        self.state.status = ClientStatus::MustRefresh;
        self.state.key_log.clear();
        self.save()
    }

    fn save(&self) -> Result<(), ClientError> {
        if let Some(p) = &self.config.state_path {
            write_json_atomic(p, &self.state)?;
        }
        Ok(())
    }

    fn punish(&mut self, now: u64, reason: String) -> ClientError {
        log::error!("entering PUNISH state: {reason}");
        self.state.status = ClientStatus::Punished;
        self.state.alerts.push(Alert { at: now, reason });
        if let Err(e) = self.save() {
            log::error!("could not persist PUNISH state: {e}");
        }
        ClientError::Punished
    }

    fn fetch_group_keys(&self) -> Result<Vec<u8>, ClientError> {
        let mut wait = self.config.backoff_base;
        let mut attempt = 0;
        loop {
            match self.issuer.group_keys() {
                Ok(body) => return Ok(body),
                Err(e @ TransportError::Unreachable(_)) if attempt + 1 < self.config.refresh_attempts => {
                    log::warn!("group key fetch failed, retrying: {e}");
                    self.delay.wait(wait);
                    wait *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Fetches the issuer's epoch list, checks it against everything seen
    /// before, and joins every epoch still lacking a credential.
    pub fn refresh_group_keys(&mut self, now: u64) -> Result<RefreshOutcome, ClientError> {
        if self.state.status == ClientStatus::Punished {
            return Err(ClientError::Punished);
        }
        let body = self.fetch_group_keys()?;
        let list = decode_group_keys(&body).map_err(|e| ClientError::Protocol(e.to_string()))?;
        if let Err(reason) = self.check_epoch_list(&list, now) {
            return Err(self.punish(now, reason));
        }
        for e in &list {
            if !self.state.key_log.iter().any(|l| l.epoch_id == e.epoch_id) {
                self.state.key_log.push(KeyLogEntry {
                    epoch_id: e.epoch_id,
                    fingerprint: e.gpk.fingerprint(),
                    expiry: e.expiry,
                });
            }
        }
        let excess = self.state.key_log.len().saturating_sub(self.config.key_log_retention);
        self.state.key_log.drain(..excess);

        let keep: BTreeSet<String> = list.iter().map(|e| e.gpk.fingerprint()).collect();
        self.state.credentials.retain(|fp, _| keep.contains(fp));
        let first = list.first().map(|e| e.epoch_id);
        self.state.join_denied.retain(|id| first.is_some_and(|f| *id >= f));
        self.state.epochs = list.clone();
        self.state.last_refresh = Some(now);

        let mut joins = 0;
        let mut result = Ok(());
        for epoch in &list {
            match self.obtain_credentials_inner(epoch) {
                Ok(true) => joins += 1,
                Ok(false) | Err(ClientError::JoinDenied(_)) => {}
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        self.sync_active(now);
        self.save()?;
        result.map(|_| RefreshOutcome { epochs: list, joins })
    }

    fn check_epoch_list(&self, list: &[GroupKeyEpoch], now: u64) -> Result<(), String> {
        if list.is_empty() {
            return Err("issuer announced no group keys".into());
        }
        for w in list.windows(2) {
            if w[1].expiry <= w[0].expiry || w[1].epoch_id <= w[0].epoch_id {
                return Err("epoch list not strictly increasing".into());
            }
        }
        if let Some(bad) = list.iter().find(|e| !e.gpk.verify_proofs()) {
            return Err(format!("group key for epoch {} fails its proofs", bad.epoch_id));
        }
        let horizon = now.saturating_add(self.config.expiry_tolerance_secs);
        for seen in &self.state.key_log {
            match list.iter().find(|e| e.epoch_id == seen.epoch_id) {
                Some(e) if e.gpk.fingerprint() != seen.fingerprint || e.expiry != seen.expiry => {
                    return Err(format!("group key for epoch {} changed before its expiry", seen.epoch_id));
                }
                None if seen.expiry > horizon => {
                    return Err(format!("epoch {} withdrawn before its expiry", seen.epoch_id));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Joins `epoch` unless a credential is already stored for it.
    pub fn obtain_credentials(&mut self, epoch: &GroupKeyEpoch) -> Result<StoredCredential, ClientError> {
        if self.state.status == ClientStatus::Punished {
            return Err(ClientError::Punished);
        }
        let r = self.obtain_credentials_inner(epoch);
        self.save()?;
        r?;
        Ok(self.state.credentials[&epoch.gpk.fingerprint()].clone())
    }

    fn obtain_credentials_inner(&mut self, epoch: &GroupKeyEpoch) -> Result<bool, ClientError> {
        let fp = epoch.gpk.fingerprint();
        if self.state.credentials.contains_key(&fp) {
            return Ok(false);
        }
        if self.state.join_denied.contains(&epoch.epoch_id) {
            return Err(ClientError::JoinDenied(epoch.epoch_id));
        }
        if !epoch.gpk.verify_proofs() {
            return Err(ClientError::Protocol("group key proofs do not verify".into()));
        }
        let (gsk, req) = daa::join_user_init(&epoch.gpk, &self.identity, &mut self.rng);
        let body = encode_join_request(epoch.epoch_id, &req, &mut self.rng)
            .map_err(|e| ClientError::Protocol(e.to_string()))?;
        let resp = self.issuer.join(&body)?;
        match decode_join_response(&resp).map_err(|e| ClientError::Protocol(e.to_string()))? {
            JoinResponse::Credential(cred) => match daa::join_user_finish(&epoch.gpk, &gsk, &cred) {
                Ok(cred) => {
                    self.state.credentials.insert(fp, StoredCredential { epoch_id: epoch.epoch_id, gsk, cred });
                    Ok(true)
                }
                Err(_) => {
                    log::warn!("issuer returned an invalid credential for epoch {}", epoch.epoch_id);
                    self.state.join_denied.insert(epoch.epoch_id);
                    Err(ClientError::JoinDenied(epoch.epoch_id))
                }
            },
            JoinResponse::Unregistered => {
                self.state.join_denied.insert(epoch.epoch_id);
                Err(ClientError::JoinDenied(epoch.epoch_id))
            }
            other => Err(ClientError::Protocol(format!("join failed: {other:?}"))),
        }
    }

    /// Drops expired epochs. When the active epoch changes, the tag state is
    /// cleared so quotas start over.
    pub fn rotate_user_keys(&mut self, now: u64) -> Result<RotateOutcome, ClientError> {
        if self.state.status == ClientStatus::Punished {
            return Err(ClientError::Punished);
        }
        match self.state.epochs.first() {
            Some(e) if e.expiry > now => return Ok(RotateOutcome::NoOp),
            _ => {}
        }
        while self.state.epochs.first().is_some_and(|e| e.expiry <= now) {
            let old = self.state.epochs.remove(0);
            self.state.credentials.remove(&old.gpk.fingerprint());
        }
        let outcome = self.sync_active(now);
        self.save()?;
        Ok(outcome)
    }

    fn sync_active(&mut self, now: u64) -> RotateOutcome {
        while self.state.epochs.len() > 1 && self.state.epochs[0].expiry <= now {
            let old = self.state.epochs.remove(0);
            self.state.credentials.remove(&old.gpk.fingerprint());
        }
        let Some(active) = self.active_epoch().filter(|e| e.expiry > now) else {
            if self.state.status != ClientStatus::Punished {
                self.state.status = ClientStatus::MustRefresh;
            }
            return RotateOutcome::MustRefresh;
        };
        if self.state.tag_epoch != active.epoch_id {
            self.state.tags.clear();
            self.state.tag_epoch = active.epoch_id;
        }
        if self.state.status == ClientStatus::Punished {
            return RotateOutcome::MustRefresh;
        }
        let has_cred = self.state.credentials.contains_key(&active.gpk.fingerprint());
        let denied = self.state.join_denied.contains(&active.epoch_id);
        if has_cred || denied {
            self.state.status = ClientStatus::Active;
            RotateOutcome::Rotated { active_epoch: active.epoch_id }
        } else {
            self.state.status = ClientStatus::MustRefresh;
            RotateOutcome::MustRefresh
        }
    }

    fn keys_stale(&self, now: u64) -> bool {
        match (self.state.last_refresh, self.active_epoch()) {
            (Some(last), Some(e)) => e.expiry <= now || now.saturating_sub(last) >= self.config.refresh_interval_secs,
            _ => true,
        }
    }

    /// Builds basenames, consumes quota, and signs once per rule. Nothing is
    /// sent; the tag state is persisted before returning.
    pub fn prepare_submission(
        &mut self,
        message: &Value,
        rs: &RuleSet,
        now: u64,
    ) -> Result<PreparedSubmission, ClientError> {
        if self.state.status == ClientStatus::Punished {
            return Err(ClientError::Punished);
        }
        self.rotate_user_keys(now)?;
        if self.state.status == ClientStatus::MustRefresh || self.keys_stale(now) {
            self.refresh_group_keys(now)?;
        }
        let active = self.active_epoch().ok_or(ClientError::MustRefresh)?;
        if self.state.join_denied.contains(&active.epoch_id) {
            return Err(ClientError::JoinDenied(active.epoch_id));
        }
        let stored = self.active_credential().ok_or(ClientError::MustRefresh)?;
        let basenames =
            build_basenames(rs, message, now, &mut self.state.tags, &mut self.rng).map_err(|e| match e {
                RuleError::QuotaExceeded { rule } => ClientError::QuotaExceeded(rule),
                other => ClientError::Message(other),
            })?;
        let m = serde_json::to_vec(message).expect("JSON value serializes");
        let basenames: Vec<String> = basenames.iter().map(|b| b.canonical()).collect();
        let signatures = basenames
            .iter()
            .map(|bsn| daa::sign(&stored.gsk, &stored.cred, bsn.as_bytes(), &m, &mut self.rng))
            .collect();
        let request = SubmitRequest { ruleset_version: rs.version.clone(), message: m, basenames, signatures };
        let body = request.encode(&mut self.rng).map_err(|e| ClientError::Protocol(e.to_string()))?;
        self.save()?;
        Ok(PreparedSubmission { request, body, epoch_id: active.epoch_id })
    }

    /// Samples the randomized pre-send delay.
    pub fn sample_delay(&mut self) -> Duration {
        Duration::from_millis(self.rng.gen_range(0..=self.config.max_delay_secs * 1000))
    }

    /// Prepares, waits out the randomized delay, and dispatches.
    pub fn send_message(&mut self, message: &Value, rs: &RuleSet, now: u64) -> Result<SendOutcome, ClientError> {
        let submission = self.prepare_submission(message, rs, now)?;
        let delay = self.sample_delay();
        self.delay.wait(delay);
        let ack = self.dispatch(&submission.body)?;
        Ok(SendOutcome { ack, submission, delay })
    }

    pub fn dispatch(&self, body: &[u8]) -> Result<AckCode, ClientError> {
        let resp = self.verifier.collect(body)?;
        decode_ack(&resp).map_err(|e| ClientError::Protocol(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::RecordedDelay;
    use crate::issuer::{Issuer, IssuerConfig};
    use crate::rules::compile_ruleset;
    use crate::transport::RotationSink;
    use crate::verifier::{MemorySink, Verifier, VerifierConfig};
    use rand::rngs::OsRng;
    use serde_json::json;
    use std::collections::HashSet;

    const T0: u64 = 1_700_000_000;
    const HEATMAP: &str = r#"{"version":"heatmap-1","rules":[
        {"id":"heatmap","digest_prefix":"heatmap-service-1","period_seconds":300,"limit":1}]}"#;

    struct Setup {
        issuer: Arc<Issuer>,
        verifier: Arc<Verifier>,
        rs: RuleSet,
    }

    fn setup() -> Setup {
        let issuer = Arc::new(Issuer::new(IssuerConfig::default(), HashSet::new(), [7; 32], T0).unwrap());
        let clock = Arc::new(crate::clock::SimClock::new(T0));
        let rs = compile_ruleset(HEATMAP).unwrap();
        let verifier = Arc::new(
            Verifier::new(
                VerifierConfig::new(issuer.admin_public_key()),
                vec![rs.clone()],
                clock,
                Arc::new(MemorySink::default()),
            )
            .unwrap(),
        );
        verifier.notify_epoch(&issuer.current_notice_body()).unwrap();
        issuer.set_notifier(verifier.clone());
        Setup { issuer, verifier, rs }
    }

    fn client(s: &Setup) -> Client {
        let id = UserIdentity::generate(&mut OsRng);
        s.issuer.register(id.public_key());
        Client::new(
            ClientConfig::default(),
            id,
            s.issuer.clone(),
            s.verifier.clone(),
            Arc::new(RecordedDelay::default()),
        )
        .unwrap()
    }

    #[test]
    fn refresh_joins_once_per_epoch() {
        let s = setup();
        let mut c = client(&s);
        assert_eq!(c.refresh_group_keys(T0).unwrap().joins, 3);
        assert_eq!(c.refresh_group_keys(T0 + 10).unwrap().joins, 0);
        assert_eq!(c.status(), ClientStatus::Active);
        assert_eq!(s.issuer.issued_count(1), 1);
    }

    #[test]
    fn swapped_key_punishes() {
        let s = setup();
        let mut c = client(&s);
        c.refresh_group_keys(T0).unwrap();
        s.issuer.tamper_replace_key(1);
        assert!(matches!(c.refresh_group_keys(T0 + 10), Err(ClientError::Punished)));
        assert_eq!(c.state().alerts.len(), 1);
        assert!(matches!(c.send_message(&json!({}), &s.rs, T0 + 20), Err(ClientError::Punished)));
    }

    #[test]
    fn unregistered_user_is_denied() {
        let s = setup();
        let mut c = Client::new(
            ClientConfig::default(),
            UserIdentity::generate(&mut OsRng),
            s.issuer.clone(),
            s.verifier.clone(),
            Arc::new(RecordedDelay::default()),
        )
        .unwrap();
        c.refresh_group_keys(T0).unwrap();
        assert_eq!(c.state().join_denied.len(), 3);
        assert!(matches!(c.send_message(&json!({}), &s.rs, T0), Err(ClientError::JoinDenied(1))));
    }

    #[test]
    fn send_then_quota_abort() {
        let s = setup();
        let mut c = client(&s);
        let out = c.send_message(&json!({"lat": 1}), &s.rs, T0).unwrap();
        assert_eq!(out.ack, AckCode::Accepted);
        assert!(out.delay <= Duration::from_secs(30));
        assert!(matches!(c.send_message(&json!({"lat": 2}), &s.rs, T0 + 1), Err(ClientError::QuotaExceeded(_))));
        assert_eq!(c.send_message(&json!({"lat": 3}), &s.rs, T0 + 300).unwrap().ack, AckCode::Accepted);
    }

    #[test]
    fn rotation_clears_tags_or_pauses() {
        let s = setup();
        let mut c = client(&s);
        c.send_message(&json!({}), &s.rs, T0).unwrap();
        assert_eq!(c.rotate_user_keys(T0 + 5).unwrap(), RotateOutcome::NoOp);
        assert_eq!(c.state().tags.len(), 1);
        let expiry = c.active_epoch().unwrap().expiry;
        assert_eq!(c.rotate_user_keys(expiry).unwrap(), RotateOutcome::Rotated { active_epoch: 2 });
        assert!(c.state().tags.is_empty());

        let mut lonely = client(&s);
        lonely.refresh_group_keys(T0).unwrap();
        lonely.state.credentials.retain(|_, v| v.epoch_id == 1);
        assert_eq!(lonely.rotate_user_keys(expiry).unwrap(), RotateOutcome::MustRefresh);
        assert_eq!(lonely.status(), ClientStatus::MustRefresh);
    }

    #[test]
    fn state_round_trips_through_disk() {
        let s = setup();
        let dir = tempfile::tempdir().unwrap();
        let id = UserIdentity::generate(&mut OsRng);
        s.issuer.register(id.public_key());
        let config = ClientConfig { state_path: Some(dir.path().join("client.json")), ..Default::default() };
        let mut c = Client::new(
            config.clone(),
            id.clone(),
            s.issuer.clone(),
            s.verifier.clone(),
            Arc::new(RecordedDelay::default()),
        )
        .unwrap();
        c.send_message(&json!({}), &s.rs, T0).unwrap();
        drop(c);
        let mut c =
            Client::new(config, id, s.issuer.clone(), s.verifier.clone(), Arc::new(RecordedDelay::default())).unwrap();
        assert_eq!(c.state().credentials.len(), 3);
        assert!(matches!(c.send_message(&json!({}), &s.rs, T0 + 1), Err(ClientError::QuotaExceeded(_))));
    }
}
