#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::Arc;

use anonlimit::client::{Client, ClientConfig, StoredCredential};
use anonlimit::clock::{RecordedDelay, SimClock};
use anonlimit::daa::{self, UserIdentity};
use anonlimit::issuer::{Issuer, IssuerConfig};
use anonlimit::rules::{compile_ruleset, RuleSet};
use anonlimit::transport::RotationSink;
use anonlimit::verifier::{MemorySink, Verifier, VerifierConfig};
use anonlimit::wire::SubmitRequest;
use rand::rngs::OsRng;

pub const T0: u64 = 1_700_000_100;

pub const HEATMAP: &str = include_str!("../../fixtures/rulesets/heatmap.json");
pub const SURVEY: &str = include_str!("../../fixtures/rulesets/survey.json");
pub const QUERY_LOG: &str = include_str!("../../fixtures/rulesets/query-log.json");

pub struct World {
    pub clock: SimClock,
    pub issuer: Arc<Issuer>,
    pub verifier: Arc<Verifier>,
    pub sink: Arc<MemorySink>,
    pub rulesets: Vec<RuleSet>,
}

impl World {
    pub fn new(rulesets: &[&str]) -> Self {
        let clock = SimClock::new(T0);
        let issuer = Arc::new(Issuer::new(IssuerConfig::default(), HashSet::new(), [9; 32], T0).unwrap());
        let rulesets: Vec<RuleSet> = rulesets.iter().map(|r| compile_ruleset(r).unwrap()).collect();
        let sink = Arc::new(MemorySink::default());
        let verifier = Arc::new(
            Verifier::new(
                VerifierConfig::new(issuer.admin_public_key()),
                rulesets.clone(),
                Arc::new(clock.clone()),
                sink.clone(),
            )
            .unwrap(),
        );
        verifier.notify_epoch(&issuer.current_notice_body()).unwrap();
        issuer.set_notifier(verifier.clone());
        Self { clock, issuer, verifier, sink, rulesets }
    }

    pub fn client(&self) -> Client {
        let id = UserIdentity::generate(&mut OsRng);
        self.issuer.register(id.public_key());
        Client::new(
            ClientConfig::default(),
            id,
            self.issuer.clone(),
            self.verifier.clone(),
            Arc::new(RecordedDelay::default()),
        )
        .unwrap()
    }

    /// A joined client's active credential.
    pub fn credential(&self) -> StoredCredential {
        let mut c = self.client();
        c.refresh_group_keys(self.clock_now()).unwrap();
        c.active_credential().unwrap()
    }

    pub fn clock_now(&self) -> u64 {
        use anonlimit::clock::Clock;
        self.clock.now()
    }
}

/// Signs `m` under the given basenames with no client-side checks.
pub fn forge(rs: &RuleSet, stored: &StoredCredential, m: &serde_json::Value, basenames: Vec<String>) -> SubmitRequest {
    let msg = serde_json::to_vec(m).unwrap();
    let signatures =
        basenames.iter().map(|b| daa::sign(&stored.gsk, &stored.cred, b.as_bytes(), &msg, &mut OsRng)).collect();
    SubmitRequest { ruleset_version: rs.version.clone(), message: msg, basenames, signatures }
}
