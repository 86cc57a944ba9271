use std::collections::HashSet;
use std::sync::Arc;

use anonlimit::client::{Client, ClientConfig, ClientError};
use anonlimit::clock::{RecordedDelay, SimClock};
use anonlimit::daa::{self, UserIdentity};
use anonlimit::http::{serve_issuer, serve_verifier, HttpIssuer, HttpVerifier};
use anonlimit::issuer::{Issuer, IssuerConfig};
use anonlimit::rules::compile_ruleset;
use anonlimit::transport::{IssuerTransport, RotationSink, TransportError, VerifierTransport};
use anonlimit::verifier::{MemorySink, Verifier, VerifierConfig};
use anonlimit::wire::{
    decode_ack, decode_join_response, encode_join_request, AckCode, JoinResponse, COLLECT_ACK_LEN,
    GROUP_KEYS_RESPONSE_LEN, JOIN_RESPONSE_BODY_LEN,
};
use rand::rngs::OsRng;
use serde_json::json;

const T0: u64 = 1_700_000_100;
const HEATMAP: &str = include_str!("../fixtures/rulesets/heatmap.json");

fn status(url: &str, body: &[u8]) -> u16 {
    match ureq::post(url).send_bytes(body) {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(code, _)) => code,
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn end_to_end_over_loopback() {
    let clock = SimClock::new(T0);
    let issuer = Arc::new(Issuer::new(IssuerConfig::default(), HashSet::new(), [4; 32], T0).unwrap());
    let rs = compile_ruleset(HEATMAP).unwrap();
    let verifier = Arc::new(
        Verifier::new(
            VerifierConfig::new(issuer.admin_public_key()),
            vec![rs.clone()],
            Arc::new(clock.clone()),
            Arc::new(MemorySink::default()),
        )
        .unwrap(),
    );
    let is = serve_issuer(issuer.clone(), Arc::new(clock.clone()), "127.0.0.1:0", 2).unwrap();
    let vs = serve_verifier(verifier.clone(), "127.0.0.1:0", 2).unwrap();
    let admin = HttpVerifier::new(&vs.url());
    admin.notify_epoch(&issuer.current_notice_body()).unwrap();
    issuer.set_notifier(Arc::new(HttpVerifier::new(&vs.url())));

    let http_issuer = HttpIssuer::new(&is.url());
    assert_eq!(http_issuer.group_keys().unwrap().len(), GROUP_KEYS_RESPONSE_LEN);
    assert_eq!(http_issuer.group_keys().unwrap(), http_issuer.group_keys().unwrap());

    // Unregistered join: 403 with a full-size body.
    let stranger = UserIdentity::generate(&mut OsRng);
    let epoch = issuer.current_epoch();
    let (_, req) = daa::join_user_init(&epoch.gpk, &stranger, &mut OsRng);
    let body = encode_join_request(epoch.epoch_id, &req, &mut OsRng).unwrap();
    assert_eq!(status(&format!("{}/v1/join", is.url()), &body), 403);
    let resp = http_issuer.join(&body).unwrap();
    assert_eq!(resp.len(), JOIN_RESPONSE_BODY_LEN);
    assert_eq!(decode_join_response(&resp).unwrap(), JoinResponse::Unregistered);
    assert_eq!(status(&format!("{}/v1/join", is.url()), b"junk"), 400);
    assert_eq!(status(&format!("{}/v1/nothing", is.url()), b""), 404);

    let id = UserIdentity::generate(&mut OsRng);
    issuer.register(id.public_key());
    let mut client = Client::new(
        ClientConfig::default(),
        id,
        Arc::new(HttpIssuer::new(&is.url())),
        Arc::new(HttpVerifier::new(&vs.url())),
        Arc::new(RecordedDelay::default()),
    )
    .unwrap();
    let out = client.send_message(&json!({"lat": 1}), &rs, T0).unwrap();
    assert_eq!(out.ack, AckCode::Accepted);
    let raw = HttpVerifier::new(&vs.url()).collect(&out.submission.body).unwrap();
    assert_eq!(raw.len(), COLLECT_ACK_LEN);
    assert_eq!(decode_ack(&raw).unwrap(), AckCode::RateLimited);
    assert_eq!(status(&format!("{}/v1/admin/epoch", vs.url()), b"junk"), 400);

    // Rotation through the admin endpoint once the epoch has expired.
    let rotate = format!("{}/v1/admin/rotate", is.url());
    assert_eq!(ureq::post(&rotate).call().unwrap().into_string().unwrap(), "not-due");
    clock.set(epoch.expiry);
    assert_eq!(ureq::post(&rotate).call().unwrap().into_string().unwrap(), "rotated 2");
    assert_eq!(verifier.current_epoch().unwrap().epoch_id, 2);
    assert_eq!(verifier.tag_count(), 0);
    is.shutdown();
    vs.shutdown();
}

#[test]
fn rotation_is_held_while_verifier_is_down() {
    let issuer = Arc::new(Issuer::new(IssuerConfig::default(), HashSet::new(), [5; 32], T0).unwrap());
    // Nothing listens on the discard port.
    issuer.set_notifier(Arc::new(HttpVerifier::new("http://127.0.0.1:9")));
    let expiry = issuer.current_epoch().expiry;
    assert!(issuer.rotate_issuer_keys(expiry).is_err());
    assert_eq!(issuer.current_epoch().epoch_id, 1);
}

#[test]
fn unreachable_issuer_is_retried_then_reported() {
    let delay = Arc::new(RecordedDelay::default());
    let config = ClientConfig { refresh_attempts: 3, ..Default::default() };
    let mut client = Client::new(
        config,
        UserIdentity::generate(&mut OsRng),
        Arc::new(HttpIssuer::new("http://127.0.0.1:9")),
        Arc::new(HttpVerifier::new("http://127.0.0.1:9")),
        delay.clone(),
    )
    .unwrap();
    let err = client.refresh_group_keys(T0).unwrap_err();
    assert!(matches!(err, ClientError::Transport(TransportError::Unreachable(_))));
    let waits = delay.waits.lock().unwrap().clone();
    assert_eq!(waits.len(), 2);
    assert_eq!(waits[1], waits[0] * 2);
}
