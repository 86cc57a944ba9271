//! Python bindings for the anonlimit core crate.

#![allow(clippy::useless_conversion)]

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use anonlimit::client::{Client, ClientConfig};
use anonlimit::clock::{Clock, RecordedDelay, SimClock};
use anonlimit::daa::{self, LinkResult};
use anonlimit::fpe::FpeKey;
use anonlimit::harness::{self, BenchOp, ScenarioConfig};
use anonlimit::issuer::{Issuer, IssuerConfig, RotationOutcome};
use anonlimit::rules::{self, Basename, ClientTagState};
use anonlimit::verifier::{MemorySink, Verifier, VerifierConfig};
use anonlimit::wire;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::rngs::OsRng;
use serde_json::Value;

create_exception!(anonlimit_py, AnonlimitError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    AnonlimitError::new_err(e.to_string())
}

fn json_arg(s: &str) -> PyResult<Value> {
    serde_json::from_str(s).map_err(err)
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

#[pyclass(module = "anonlimit_py")]
#[derive(Clone)]
pub struct GroupPublicKey(daa::GroupPublicKey);

#[pymethods]
impl GroupPublicKey {
    #[staticmethod]
    fn from_bytes(b: &[u8]) -> PyResult<Self> {
        daa::GroupPublicKey::from_bytes(b).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.0.to_bytes())
    }

    fn verify_proofs(&self) -> bool {
        self.0.verify_proofs()
    }

    fn fingerprint(&self) -> String {
        self.0.fingerprint()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0.to_bytes() == other.0.to_bytes()
    }
}

#[pyclass(module = "anonlimit_py")]
pub struct IssuerSecretKey(daa::IssuerSecretKey);

#[pymethods]
impl IssuerSecretKey {
    #[staticmethod]
    fn from_bytes(b: &[u8]) -> PyResult<Self> {
        daa::IssuerSecretKey::from_bytes(b).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.0.to_bytes())
    }
}

#[pyclass(module = "anonlimit_py")]
pub struct UserIdentity(daa::UserIdentity);

#[pymethods]
impl UserIdentity {
    #[new]
    #[pyo3(signature = (secret=None))]
    fn new(secret: Option<[u8; 32]>) -> Self {
        match secret {
            Some(s) => Self(daa::UserIdentity::from_secret_bytes(&s)),
            None => Self(daa::UserIdentity::generate(&mut OsRng)),
        }
    }

    fn public_key<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.0.public_key())
    }
}

#[pyclass(module = "anonlimit_py")]
#[derive(Clone)]
pub struct UserDaaKey(daa::UserDaaKey);

#[pymethods]
impl UserDaaKey {
    #[staticmethod]
    fn from_bytes(b: &[u8]) -> PyResult<Self> {
        daa::UserDaaKey::from_bytes(b).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.0.to_bytes())
    }
}

#[pyclass(module = "anonlimit_py")]
#[derive(Clone)]
pub struct JoinRequest(daa::JoinRequest);

#[pymethods]
impl JoinRequest {
    #[staticmethod]
    fn from_bytes(b: &[u8]) -> PyResult<Self> {
        daa::JoinRequest::from_bytes(b).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.0.to_bytes())
    }
}

#[pyclass(module = "anonlimit_py")]
#[derive(Clone)]
pub struct Credential(daa::Credential);

#[pymethods]
impl Credential {
    #[staticmethod]
    fn from_bytes(b: &[u8]) -> PyResult<Self> {
        daa::Credential::from_bytes(b).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.0.to_bytes())
    }
}

#[pyclass(module = "anonlimit_py")]
#[derive(Clone)]
pub struct Signature(daa::DaaSignature);

#[pymethods]
impl Signature {
    #[staticmethod]
    fn from_bytes(b: &[u8]) -> PyResult<Self> {
        daa::DaaSignature::from_bytes(b).map(Self).map_err(err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.0.to_bytes())
    }

    fn tag<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &daa::extract_tag(&self.0))
    }
}

/// Returns `(isk, gpk)`.
#[pyfunction]
fn setup() -> (IssuerSecretKey, GroupPublicKey) {
    let (isk, gpk) = daa::setup(&mut OsRng);
    (IssuerSecretKey(isk), GroupPublicKey(gpk))
}

/// Returns `(gsk, request)`.
#[pyfunction]
fn join_user_init(gpk: &GroupPublicKey, identity: &UserIdentity) -> (UserDaaKey, JoinRequest) {
    let (gsk, req) = daa::join_user_init(&gpk.0, &identity.0, &mut OsRng);
    (UserDaaKey(gsk), JoinRequest(req))
}

/// Issues a credential if the request is valid and its identity is in `registered`.
#[pyfunction]
fn join_issuer(
    isk: &IssuerSecretKey,
    gpk: &GroupPublicKey,
    request: &JoinRequest,
    registered: Vec<[u8; 32]>,
) -> PyResult<Credential> {
    let registry: HashSet<[u8; 32]> = registered.into_iter().collect();
    let issued = daa::IssuedCredentials::new();
    daa::join_issuer(&isk.0, &gpk.0, &request.0, &registry, &issued, &mut OsRng).map(Credential).map_err(err)
}

#[pyfunction]
fn join_user_finish(gpk: &GroupPublicKey, gsk: &UserDaaKey, cred: &Credential) -> PyResult<Credential> {
    daa::join_user_finish(&gpk.0, &gsk.0, &cred.0).map(Credential).map_err(|_| err("credential does not verify"))
}

#[pyfunction]
fn sign(gsk: &UserDaaKey, cred: &Credential, bsn: &[u8], message: &[u8]) -> Signature {
    Signature(daa::sign(&gsk.0, &cred.0, bsn, message, &mut OsRng))
}

#[pyfunction]
fn verify(gpk: &GroupPublicKey, bsn: &[u8], message: &[u8], sig: &Signature) -> bool {
    daa::verify(&gpk.0, bsn, message, &sig.0)
}

/// Returns "linked", "unlinked" or "invalid".
#[pyfunction]
fn link(
    gpk: &GroupPublicKey,
    sig1: &Signature,
    bsn1: &[u8],
    m1: &[u8],
    sig2: &Signature,
    bsn2: &[u8],
    m2: &[u8],
) -> &'static str {
    match daa::link(&sig1.0, &sig2.0, &gpk.0, bsn1, m1, bsn2, m2) {
        LinkResult::Linked => "linked",
        LinkResult::Unlinked => "unlinked",
        LinkResult::Invalid => "invalid",
    }
}

#[pyfunction]
fn fpe_encrypt(key: [u8; 16], n: u64, value: u64) -> PyResult<u64> {
    anonlimit::fpe::fpe_encrypt(&FpeKey(key), n, value).map_err(err)
}

#[pyfunction]
fn normalize_query(s: &str) -> String {
    rules::normalize_query(s)
}

/// Returns `(digest, period_index, nonce)`.
#[pyfunction]
fn parse_basename(s: &str) -> PyResult<(String, u64, u64)> {
    let b = Basename::parse(s).map_err(err)?;
    Ok((b.digest, b.period_index, b.nonce))
}

#[pyfunction]
fn canonical_basename(digest: String, period_index: u64, nonce: u64) -> String {
    Basename { digest, period_index, nonce }.canonical()
}

#[pyclass(module = "anonlimit_py")]
#[derive(Clone)]
pub struct RuleSet(rules::RuleSet);

#[pymethods]
impl RuleSet {
    #[getter]
    fn version(&self) -> String {
        self.0.version.clone()
    }

    fn rule_ids(&self) -> Vec<String> {
        self.0.rules.iter().map(|r| r.id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn check_key_lifetime(&self, lifetime_secs: u64) -> PyResult<()> {
        self.0.check_key_lifetime(lifetime_secs).map_err(err)
    }
}

#[pyfunction]
fn compile_ruleset(config: &str) -> PyResult<RuleSet> {
    rules::compile_ruleset(config).map(RuleSet).map_err(err)
}

#[pyclass(module = "anonlimit_py")]
#[derive(Default)]
pub struct TagState(ClientTagState);

#[pymethods]
impl TagState {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    fn used(&self, digest: String, period_index: u64) -> u64 {
        self.0.used(&rules::PreBasename { digest, period_index })
    }

    fn clear(&mut self) {
        self.0.clear()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Builds one canonical basename per rule for a JSON message at time `t`.
#[pyfunction]
fn build_basenames(rs: &RuleSet, message: &str, t: u64, state: &mut TagState) -> PyResult<Vec<String>> {
    let m = json_arg(message)?;
    let out = rules::build_basenames(&rs.0, &m, t, &mut state.0, &mut OsRng).map_err(err)?;
    Ok(out.iter().map(Basename::canonical).collect())
}

/// Runs a scenario given as JSON and returns the report as JSON.
/// A ruleset given by path is resolved against `base_dir`.
#[pyfunction]
#[pyo3(signature = (config, base_dir=None, deterministic=false))]
fn run_scenario(py: Python<'_>, config: &str, base_dir: Option<PathBuf>, deterministic: bool) -> PyResult<String> {
    let cfg: ScenarioConfig = serde_json::from_str(config).map_err(err)?;
    let base = base_dir.unwrap_or_else(|| PathBuf::from("."));
    let rs = cfg.ruleset.load(&base).map_err(err)?;
    let report = py.allow_threads(|| harness::run_scenario(&cfg, &rs)).map_err(err)?;
    if deterministic {
        to_json(&report.deterministic())
    } else {
        to_json(&report)
    }
}

/// Micro-benchmarks the listed operations ("all" or a comma list) and returns JSON.
#[pyfunction]
#[pyo3(name = "bench", signature = (ops="all", iterations=20))]
fn bench_ops(py: Python<'_>, ops: &str, iterations: usize) -> PyResult<String> {
    let ops = BenchOp::parse_list(ops).map_err(err)?;
    to_json(&py.allow_threads(|| harness::bench(&ops, iterations)))
}

/// An in-process issuer, verifier and set of clients sharing a simulated clock.
#[pyclass(module = "anonlimit_py")]
pub struct Deployment {
    clock: SimClock,
    issuer: Arc<Issuer>,
    verifier: Arc<Verifier>,
    sink: Arc<MemorySink>,
    rulesets: Vec<rules::RuleSet>,
    clients: Vec<Client>,
}

impl Deployment {
    fn ruleset(&self, version: &str) -> PyResult<&rules::RuleSet> {
        self.rulesets.iter().find(|r| r.version == version).ok_or_else(|| err(format!("unknown ruleset {version}")))
    }

    fn client_mut(&mut self, index: usize) -> PyResult<&mut Client> {
        self.clients.get_mut(index).ok_or_else(|| err(format!("no client {index}")))
    }
}

#[pymethods]
impl Deployment {
    #[new]
    #[pyo3(signature = (rulesets, start_time=harness::DEFAULT_START_TIME))]
    fn new(rulesets: Vec<PyRef<'_, RuleSet>>, start_time: u64) -> PyResult<Self> {
        let rulesets: Vec<rules::RuleSet> = rulesets.iter().map(|r| r.0.clone()).collect();
        let clock = SimClock::new(start_time);
        let mut admin = [0u8; 32];
        rand::RngCore::fill_bytes(&mut OsRng, &mut admin);
        let issuer = Arc::new(Issuer::new(IssuerConfig::default(), HashSet::new(), admin, start_time).map_err(err)?);
        let sink = Arc::new(MemorySink::default());
        let verifier = Arc::new(
            Verifier::new(
                VerifierConfig::new(issuer.admin_public_key()),
                rulesets.clone(),
                Arc::new(clock.clone()),
                sink.clone(),
            )
            .map_err(err)?,
        );
        anonlimit::transport::RotationSink::notify_epoch(verifier.as_ref(), &issuer.current_notice_body())
            .map_err(err)?;
        issuer.set_notifier(verifier.clone());
        Ok(Self { clock, issuer, verifier, sink, rulesets, clients: Vec::new() })
    }

    #[getter]
    fn now(&self) -> u64 {
        self.clock.now()
    }

    fn set_time(&self, t: u64) {
        self.clock.set(t)
    }

    /// Registers a fresh identity and returns the client index.
    fn add_client(&mut self) -> PyResult<usize> {
        let id = daa::UserIdentity::generate(&mut OsRng);
        self.issuer.register(id.public_key());
        let client = Client::new(
            ClientConfig::default(),
            id,
            self.issuer.clone(),
            self.verifier.clone(),
            Arc::new(RecordedDelay::default()),
        )
        .map_err(err)?;
        self.clients.push(client);
        Ok(self.clients.len() - 1)
    }

    /// Sends a JSON message from a client and returns the verifier's ack code.
    fn send(&mut self, client: usize, ruleset: &str, message: &str) -> PyResult<String> {
        let m = json_arg(message)?;
        let rs = self.ruleset(ruleset)?.clone();
        let now = self.clock.now();
        let out = self.client_mut(client)?.send_message(&m, &rs, now).map_err(err)?;
        Ok(out.ack.as_str().to_owned())
    }

    fn client_status(&self, client: usize) -> PyResult<String> {
        let c = self.clients.get(client).ok_or_else(|| err(format!("no client {client}")))?;
        to_json(&c.status()).map(|s| s.trim_matches('"').to_owned())
    }

    /// Rotates issuer keys if the current epoch has expired. Returns the new epoch id.
    fn rotate(&self) -> PyResult<Option<u64>> {
        match self.issuer.rotate_issuer_keys(self.clock.now()).map_err(err)? {
            RotationOutcome::NotDue => Ok(None),
            RotationOutcome::Rotated { current_epoch, .. } => Ok(Some(current_epoch)),
        }
    }

    /// `(epoch_id, expiry)` of the verifier's current epoch.
    fn current_epoch(&self) -> Option<(u64, u64)> {
        self.verifier.current_epoch().map(|e| (e.epoch_id, e.expiry))
    }

    fn tag_count(&self) -> usize {
        self.verifier.tag_count()
    }

    /// Collected messages as JSON strings.
    fn collected(&self) -> PyResult<Vec<String>> {
        self.sink.records().iter().map(|r| to_json(&r.message)).collect()
    }

    fn stats(&self) -> PyResult<String> {
        to_json(&self.verifier.stats())
    }
}

#[pymodule]
pub fn anonlimit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("AnonlimitError", m.py().get_type_bound::<AnonlimitError>())?;
    m.add("COLLECT_REQUEST_LEN", wire::COLLECT_REQUEST_LEN)?;
    m.add("COLLECT_ACK_LEN", wire::COLLECT_ACK_LEN)?;
    m.add("GROUP_KEYS_RESPONSE_LEN", wire::GROUP_KEYS_RESPONSE_LEN)?;
    m.add("JOIN_REQUEST_BODY_LEN", wire::JOIN_REQUEST_BODY_LEN)?;
    m.add("JOIN_RESPONSE_BODY_LEN", wire::JOIN_RESPONSE_BODY_LEN)?;
    m.add("SIGNATURE_LEN", daa::SIGNATURE_LEN)?;
    m.add("INFINITE_PERIOD", rules::INFINITE_PERIOD)?;
    m.add_class::<GroupPublicKey>()?;
    m.add_class::<IssuerSecretKey>()?;
    m.add_class::<UserIdentity>()?;
    m.add_class::<UserDaaKey>()?;
    m.add_class::<JoinRequest>()?;
    m.add_class::<Credential>()?;
    m.add_class::<Signature>()?;
    m.add_class::<RuleSet>()?;
    m.add_class::<TagState>()?;
    m.add_class::<Deployment>()?;
    m.add_function(wrap_pyfunction!(setup, m)?)?;
    m.add_function(wrap_pyfunction!(join_user_init, m)?)?;
    m.add_function(wrap_pyfunction!(join_issuer, m)?)?;
    m.add_function(wrap_pyfunction!(join_user_finish, m)?)?;
    m.add_function(wrap_pyfunction!(sign, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(link, m)?)?;
    m.add_function(wrap_pyfunction!(fpe_encrypt, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_query, m)?)?;
    m.add_function(wrap_pyfunction!(parse_basename, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_basename, m)?)?;
    m.add_function(wrap_pyfunction!(compile_ruleset, m)?)?;
    m.add_function(wrap_pyfunction!(build_basenames, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(bench_ops, m)?)?;
    Ok(())
}
