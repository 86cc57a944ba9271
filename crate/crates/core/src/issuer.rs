//! Issuer service: owns the group secret keys, announces current and future
//! group keys, answers joins, and rotates keys on schedule.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use ed25519_dalek::{Signer, SigningKey};
use rand::rngs::OsRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::daa::{self, Credential, IssuedCredentials, IssuerSecretKey, UPK_LEN};
use crate::persist::{read_json, write_json_atomic};
use crate::transport::{IssuerTransport, RotationSink, TransportError};
use crate::wire::{
    decode_join_request, encode_group_keys, encode_join_response, GroupKeyEpoch, JoinResponse, RotationNotice,
};

pub const DEFAULT_KEY_LIFETIME_SECS: u64 = 3 * 24 * 3600;
pub const DEFAULT_FUTURE_EPOCHS: usize = 2;

#[derive(Debug, Error)]
pub enum IssuerError {
    #[error("verifier did not acknowledge rotation: {0}")]
    VerifierUnreachable(TransportError),
    #[error("issuer state: {0}")]
    Persist(#[from] std::io::Error),
    #[error("invalid issuer configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone)]
pub struct IssuerConfig {
    pub key_lifetime_secs: u64,
    /// Epochs announced beyond the current one.
    pub future_epochs: usize,
    pub state_path: Option<PathBuf>,
}

impl Default for IssuerConfig {
    fn default() -> Self {
        Self { key_lifetime_secs: DEFAULT_KEY_LIFETIME_SECS, future_epochs: DEFAULT_FUTURE_EPOCHS, state_path: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationOutcome {
    NotDue,
    Rotated { current_epoch: u64, steps: usize },
}

struct EpochKeys {
    isk: IssuerSecretKey,
    epoch: GroupKeyEpoch,
    issued: IssuedCredentials,
}

#[derive(Serialize, Deserialize)]
struct EpochSnapshot {
    isk: IssuerSecretKey,
    epoch: GroupKeyEpoch,
    issued: Vec<(String, Credential)>,
}

#[derive(Serialize, Deserialize)]
struct IssuerSnapshot {
    epochs: Vec<EpochSnapshot>,
}

pub struct Issuer {
    config: IssuerConfig,
    registry: RwLock<HashSet<[u8; UPK_LEN]>>,
    admin: SigningKey,
    epochs: RwLock<Vec<EpochKeys>>,
    notifier: RwLock<Option<Arc<dyn RotationSink>>>,
    persist_lock: Mutex<()>,
}

impl Issuer {
    /// Loads state from `config.state_path` if present, otherwise generates
    /// the current epoch plus `future_epochs` announced ones starting at `now`.
    pub fn new(
        config: IssuerConfig,
        registry: HashSet<[u8; UPK_LEN]>,
        admin_secret: [u8; 32],
        now: u64,
    ) -> Result<Self, IssuerError> {
        if config.future_epochs == 0 || config.key_lifetime_secs == 0 {
            return Err(IssuerError::Config("need at least one future epoch and a nonzero lifetime".into()));
        }
        let loaded = match &config.state_path {
            Some(p) => read_json::<IssuerSnapshot>(p)?,
            None => None,
        };
        let epochs = match loaded {
            Some(snap) => snap
                .epochs
                .into_iter()
                .map(|e| {
                    let issued = IssuedCredentials::new();
                    for (upk, cred) in e.issued {
                        let mut key = [0u8; UPK_LEN];
                        hex::decode_to_slice(&upk, &mut key)
                            .map_err(|err| IssuerError::Config(format!("bad stored user key: {err}")))?;
                        issued.insert(key, cred);
                    }
                    Ok(EpochKeys { isk: e.isk, epoch: e.epoch, issued })
                })
                .collect::<Result<Vec<_>, IssuerError>>()?,
            None => (0..=config.future_epochs as u64)
                .map(|i| {
                    let (isk, gpk) = daa::setup(&mut OsRng);
                    EpochKeys {
                        isk,
                        epoch: GroupKeyEpoch { epoch_id: i + 1, expiry: now + (i + 1) * config.key_lifetime_secs, gpk },
                        issued: IssuedCredentials::new(),
                    }
                })
                .collect(),
        };
        let issuer = Self {
            config,
            registry: RwLock::new(registry),
            admin: SigningKey::from_bytes(&admin_secret),
            epochs: RwLock::new(epochs),
            notifier: RwLock::new(None),
            persist_lock: Mutex::new(()),
        };
        issuer.persist(&issuer.epochs.read().unwrap())?;
        Ok(issuer)
    }

    pub fn config(&self) -> &IssuerConfig {
        &self.config
    }

    pub fn admin_public_key(&self) -> [u8; 32] {
        self.admin.verifying_key().to_bytes()
    }

    pub fn set_notifier(&self, sink: Arc<dyn RotationSink>) {
        *self.notifier.write().unwrap() = Some(sink);
    }

    pub fn register(&self, u_pk: [u8; UPK_LEN]) {
        self.registry.write().unwrap().insert(u_pk);
    }

    pub fn epochs(&self) -> Vec<GroupKeyEpoch> {
        self.epochs.read().unwrap().iter().map(|e| e.epoch).collect()
    }

    pub fn current_epoch(&self) -> GroupKeyEpoch {
        self.epochs.read().unwrap()[0].epoch
    }

    pub fn issued_count(&self, epoch_id: u64) -> usize {
        self.epochs.read().unwrap().iter().find(|e| e.epoch.epoch_id == epoch_id).map_or(0, |e| e.issued.len())
    }

    /// Signed admin notice announcing `epoch` as current.
    pub fn notice_for(&self, epoch: &GroupKeyEpoch) -> RotationNotice {
        let sig = self.admin.sign(&RotationNotice::signed_bytes(epoch)).to_bytes();
        RotationNotice { epoch: *epoch, signature: sig }
    }

    pub fn current_notice_body(&self) -> Vec<u8> {
        self.notice_for(&self.current_epoch()).encode(&mut OsRng).expect("notice fits admin body")
    }

    /// Padded epoch list. Identical state gives byte-identical bodies.
    pub fn serve_group_keys(&self) -> Vec<u8> {
        encode_group_keys(&self.epochs()).expect("epoch list fits the response body")
    }

    /// Handles a padded join body; returns an HTTP-style status and the padded response.
    pub fn handle_join(&self, body: &[u8]) -> (u16, Vec<u8>) {
        let resp = self.join_response(body);
        let out = encode_join_response(&resp, &mut OsRng).expect("join response fits");
        (resp.http_status(), out)
    }

    fn join_response(&self, body: &[u8]) -> JoinResponse {
        let Ok((epoch_id, req)) = decode_join_request(body) else {
            return JoinResponse::Malformed;
        };
        let epochs = self.epochs.read().unwrap();
        let Some(keys) = epochs.iter().find(|e| e.epoch.epoch_id == epoch_id) else {
            return JoinResponse::UnknownEpoch;
        };
        let fresh = keys.issued.get(&req.u_pk).is_none();
        let registry = self.registry.read().unwrap();
        let result = daa::join_issuer(&keys.isk, &keys.epoch.gpk, &req, &*registry, &keys.issued, &mut OsRng);
        drop(registry);
        match result {
            Ok(cred) => {
                if fresh {
                    if let Err(e) = self.persist(&epochs) {
                        log::error!("failed to persist issued credential: {e}");
                    }
                }
                JoinResponse::Credential(cred)
            }
            Err(daa::JoinError::Unregistered) => JoinResponse::Unregistered,
            Err(daa::JoinError::BadProof) => JoinResponse::BadProof,
        }
    }

    /// Retires every expired epoch, announcing a fresh one for each. The
    /// verifier is told about the new current key before the switch is
    /// committed; if it cannot be reached the rotation is held.
    pub fn rotate_issuer_keys(&self, now: u64) -> Result<RotationOutcome, IssuerError> {
        let mut epochs = self.epochs.write().unwrap();
        let mut steps = 0;
        while epochs[0].epoch.expiry <= now {
            let next = epochs[1].epoch;
            if let Some(sink) = self.notifier.read().unwrap().as_ref() {
                let body = self.notice_for(&next).encode(&mut OsRng).expect("notice fits");
                sink.notify_epoch(&body).map_err(IssuerError::VerifierUnreachable)?;
            }
            let last = epochs.last().unwrap().epoch;
            let (isk, gpk) = daa::setup(&mut OsRng);
            // Dropping the retired key overwrites its scalars.
            epochs.remove(0);
            epochs.push(EpochKeys {
                isk,
                epoch: GroupKeyEpoch {
                    epoch_id: last.epoch_id + 1,
                    expiry: last.expiry + self.config.key_lifetime_secs,
                    gpk,
                },
                issued: IssuedCredentials::new(),
            });
            self.persist(&epochs)?;
            steps += 1;
        }
        Ok(if steps == 0 {
            RotationOutcome::NotDue
        } else {
            RotationOutcome::Rotated { current_epoch: epochs[0].epoch.epoch_id, steps }
        })
    }

    /// Adversarial hook for the key-swap scenario: silently replaces the key
    /// announced at `index` while keeping its id and expiry.
    pub fn tamper_replace_key(&self, index: usize) {
        let mut epochs = self.epochs.write().unwrap();
        let (isk, gpk) = daa::setup(&mut OsRng);
        let slot = &mut epochs[index];
        slot.isk = isk;
        slot.epoch.gpk = gpk;
        slot.issued = IssuedCredentials::new();
    }

    fn persist(&self, epochs: &[EpochKeys]) -> Result<(), IssuerError> {
        let Some(path) = &self.config.state_path else {
            return Ok(());
        };
        let _guard = self.persist_lock.lock().unwrap();
        let snap = IssuerSnapshot {
            epochs: epochs
                .iter()
                .map(|e| EpochSnapshot {
                    isk: IssuerSecretKey::from_bytes(&e.isk.to_bytes()).unwrap(),
                    epoch: e.epoch,
                    issued: e.issued.entries().into_iter().map(|(k, c)| (hex::encode(k), c)).collect(),
                })
                .collect(),
        };
        write_json_atomic(path, &snap)?;
        Ok(())
    }
}

impl IssuerTransport for Issuer {
    fn group_keys(&self) -> Result<Vec<u8>, TransportError> {
        Ok(self.serve_group_keys())
    }

    fn join(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        Ok(self.handle_join(body).1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::daa::{join_user_finish, join_user_init, UserIdentity};
    use crate::wire::{
        decode_group_keys, decode_join_response, encode_join_request, GROUP_KEYS_RESPONSE_LEN, JOIN_RESPONSE_BODY_LEN,
    };
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn issuer_with(id: &UserIdentity) -> Issuer {
        Issuer::new(IssuerConfig::default(), HashSet::from([id.public_key()]), [9u8; 32], 1_000).unwrap()
    }

    #[derive(Default)]
    struct CountingSink {
        calls: AtomicUsize,
        fail: bool,
    }

    impl RotationSink for CountingSink {
        fn notify_epoch(&self, _body: &[u8]) -> Result<(), TransportError> {
            if self.fail {
                return Err(TransportError::Unreachable("down".into()));
            }
            self.calls.fetch_add(1, Ordering::SeqCst);
            Ok(())
        }
    }

    #[test]
    fn serves_three_padded_epochs_deterministically() {
        let id = UserIdentity::generate(&mut OsRng);
        let issuer = issuer_with(&id);
        let body = issuer.serve_group_keys();
        assert_eq!(body.len(), GROUP_KEYS_RESPONSE_LEN);
        assert_eq!(body, issuer.serve_group_keys());
        let epochs = decode_group_keys(&body).unwrap();
        assert_eq!(epochs.len(), 3);
        assert!(epochs[0].expiry > 1_000);
        assert!(epochs.windows(2).all(|w| w[0].expiry < w[1].expiry));
    }

    #[test]
    fn join_is_idempotent_and_gated() {
        let id = UserIdentity::generate(&mut OsRng);
        let issuer = issuer_with(&id);
        let epoch = issuer.current_epoch();
        let (gsk, req) = join_user_init(&epoch.gpk, &id, &mut OsRng);
        let body = encode_join_request(epoch.epoch_id, &req, &mut OsRng).unwrap();
        let (status, resp) = issuer.handle_join(&body);
        assert_eq!((status, resp.len()), (200, JOIN_RESPONSE_BODY_LEN));
        let JoinResponse::Credential(c1) = decode_join_response(&resp).unwrap() else { panic!() };
        join_user_finish(&epoch.gpk, &gsk, &c1).unwrap();
        let JoinResponse::Credential(c2) = decode_join_response(&issuer.handle_join(&body).1).unwrap() else {
            panic!()
        };
        assert_eq!(c1.to_bytes(), c2.to_bytes());

        let stranger = UserIdentity::generate(&mut OsRng);
        let (_, req) = join_user_init(&epoch.gpk, &stranger, &mut OsRng);
        let body = encode_join_request(epoch.epoch_id, &req, &mut OsRng).unwrap();
        let (status, resp) = issuer.handle_join(&body);
        assert_eq!(status, 403);
        assert_eq!(decode_join_response(&resp).unwrap(), JoinResponse::Unregistered);
        assert_eq!(issuer.handle_join(&[0u8; 10]).0, 400);
    }

    #[test]
    fn rotation_is_scheduled_and_held_when_verifier_is_down() {
        let id = UserIdentity::generate(&mut OsRng);
        let issuer = issuer_with(&id);
        let before = issuer.epochs();
        assert_eq!(issuer.rotate_issuer_keys(before[0].expiry - 1).unwrap(), RotationOutcome::NotDue);

        issuer.set_notifier(Arc::new(CountingSink { fail: true, ..Default::default() }));
        assert!(matches!(issuer.rotate_issuer_keys(before[0].expiry), Err(IssuerError::VerifierUnreachable(_))));
        assert_eq!(issuer.epochs(), before);

        let sink = Arc::new(CountingSink::default());
        issuer.set_notifier(sink.clone());
        let out = issuer.rotate_issuer_keys(before[0].expiry).unwrap();
        assert_eq!(out, RotationOutcome::Rotated { current_epoch: before[1].epoch_id, steps: 1 });
        let after = issuer.epochs();
        assert_eq!(after[..2], before[1..]);
        assert_eq!(after[2].epoch_id, before[2].epoch_id + 1);
        assert_eq!(sink.calls.load(Ordering::SeqCst), 1);
        // Second call for the same instant is a no-op.
        assert_eq!(issuer.rotate_issuer_keys(before[0].expiry).unwrap(), RotationOutcome::NotDue);
    }

    #[test]
    fn concurrent_rotation_happens_once() {
        let id = UserIdentity::generate(&mut OsRng);
        let issuer = Arc::new(issuer_with(&id));
        let sink = Arc::new(CountingSink::default());
        issuer.set_notifier(sink.clone());
        let due = issuer.current_epoch().expiry;
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let issuer = issuer.clone();
                std::thread::spawn(move || issuer.rotate_issuer_keys(due).unwrap())
            })
            .collect();
        let rotated = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|o| matches!(o, RotationOutcome::Rotated { .. }))
            .count();
        assert_eq!(rotated, 1);
        assert_eq!(sink.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn state_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let config = IssuerConfig { state_path: Some(dir.path().join("issuer.json")), ..Default::default() };
        let id = UserIdentity::generate(&mut OsRng);
        let reg = HashSet::from([id.public_key()]);
        let issuer = Issuer::new(config.clone(), reg.clone(), [1u8; 32], 0).unwrap();
        let epoch = issuer.current_epoch();
        let (_, req) = join_user_init(&epoch.gpk, &id, &mut OsRng);
        let body = encode_join_request(epoch.epoch_id, &req, &mut OsRng).unwrap();
        let first = decode_join_response(&issuer.handle_join(&body).1).unwrap();
        let epochs = issuer.epochs();
        drop(issuer);
        let reopened = Issuer::new(config, reg, [1u8; 32], 0).unwrap();
        assert_eq!(reopened.epochs(), epochs);
        assert_eq!(decode_join_response(&reopened.handle_join(&body).1).unwrap(), first);
    }
}
