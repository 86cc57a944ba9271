use std::path::{Path, PathBuf};

use anonlimit::harness::{run_scenario, AttackKind, ScenarioConfig, ScenarioReport, TransportMode};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/scenarios").join(format!("{name}.json"))
}

fn run(name: &str) -> ScenarioReport {
    let (cfg, rs) = ScenarioConfig::from_file(&scenario(name)).unwrap();
    let report = run_scenario(&cfg, &rs).unwrap();
    assert_eq!(report.accepted + report.rejected, report.submitted);
    let by_actor: u64 = report.per_actor.values().map(|c| c.submitted).sum();
    assert_eq!(by_actor, report.submitted);
    report
}

#[test]
fn honest_heatmap_all_accepted() {
    let r = run("honest-heatmap");
    assert_eq!((r.accepted, r.rejected), (10, 0));
    assert!(r.local_aborts.is_empty());
}

#[test]
fn skewed_clocks_inside_window_are_accepted() {
    let r = run("skewed-heatmap");
    assert_eq!((r.accepted, r.rejected), (24, 0));
}

#[test]
fn survey_flood_gets_one_answer_in() {
    let r = run("survey-flood");
    assert_eq!((r.submitted, r.accepted), (50, 1));
    assert_eq!(r.by_reason["rate-limited"], 49);
    assert_eq!(r.linkage_events, 49);
}

#[test]
fn query_log_quotas() {
    let r = run("query-log");
    // Each honest user has 8 distinct queries against a daily quota of 5.
    assert_eq!(r.per_actor["honest"].accepted, 10);
    assert_eq!(r.local_aborts["quota-exceeded"], 6);
    assert_eq!(r.per_actor["attacker-0:quota-flood"].accepted, 1);
    assert_eq!(r.per_actor["attacker-1:nonce-scan"].accepted, 1);
    assert_eq!(r.by_reason["bad-basename"], 9);
}

#[test]
fn rotation_scenario() {
    let r = run("rotation");
    let rot = r.rotation.unwrap();
    assert_eq!((rot.from_epoch, rot.to_epoch), (1, 2));
    assert_eq!(rot.old_epoch_accepted, 0);
    assert_eq!(rot.tag_store_size_after, 0);
    assert_eq!(rot.resubmissions_accepted, 5);
    assert_eq!(r.per_actor["attacker-0:stale-epoch"].accepted, 0);
    assert_eq!(r.by_reason["bad-signature"], rot.old_epoch_replays);
}

#[test]
fn key_swap_punishes_everyone() {
    let ks = run("key-swap").key_swap.unwrap();
    assert_eq!(ks.punished, ks.clients);
    assert_eq!(ks.post_detection_sends, 0);
    assert_eq!(ks.post_detection_attempts, 15);
}

#[test]
fn reports_are_deterministic_per_seed() {
    let (cfg, rs) = ScenarioConfig::from_file(&scenario("query-log")).unwrap();
    let a = run_scenario(&cfg, &rs).unwrap().deterministic();
    let b = run_scenario(&cfg, &rs).unwrap().deterministic();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn http_transport_matches_in_process() {
    let (mut cfg, rs) = ScenarioConfig::from_file(&scenario("rotation")).unwrap();
    let local = run_scenario(&cfg, &rs).unwrap().deterministic();
    cfg.transport = TransportMode::Http;
    let remote = run_scenario(&cfg, &rs).unwrap().deterministic();
    assert_eq!(local, remote);
}

#[test]
fn config_parsing() {
    let cfg: ScenarioConfig = serde_json::from_str(
        r#"{"ruleset": {"version":"v","rules":[{"id":"r","digest_prefix":"p","period_seconds":60,"limit":2}]},
            "attackers": [{"kind": "nonce-scan"}], "seed": 9}"#,
    )
    .unwrap();
    assert_eq!(cfg.attackers[0].kind, AttackKind::NonceScan);
    assert_eq!(cfg.attackers[0].sends, 10);
    assert_eq!(cfg.transport, TransportMode::InProcess);
    let rs = cfg.ruleset.load(Path::new(".")).unwrap();
    let r = run_scenario(&cfg, &rs).unwrap();
    assert_eq!(r.accepted, 2);
    assert!(serde_json::from_str::<ScenarioConfig>(r#"{"ruleset": "x.json"}"#).is_err());
}
