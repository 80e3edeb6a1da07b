//! Whole-run behaviour of the bundled scenarios and the config checks.

use autochain::scenario::{bundled, run_scenario, run_world, ConfigError, ScenarioConfig, ScenarioReport};
use autochain::simnet::Trace;

fn config(name: &str) -> ScenarioConfig {
    bundled(name).unwrap().unwrap()
}

fn invalid_field(toml: &str) -> String {
    match ScenarioConfig::from_toml(toml) {
        Err(ConfigError::Invalid { field, .. }) => field,
        other => panic!("expected a field error, got {other:?}"),
    }
}

const MINIMAL: &str = r#"
name = "tiny"
seed = 1
duration = 20.0
[topology]
obms = 3
vehicles = 1
"#;

#[test]
fn report_survives_a_trace_round_trip() {
    for name in ["wrsu_happy_path", "insurance_tampered", "handover_crossover"] {
        let run = run_scenario(&config(name)).unwrap();
        let text = run.trace.to_jsonl();
        let parsed = Trace::parse(&text).unwrap();
        assert_eq!(parsed.to_jsonl(), text);
        let again = ScenarioReport::from_trace(&parsed).unwrap();
        assert_eq!(again.render_json(), run.report.render_json(), "{name}");
    }
}

#[test]
fn drop_metrics_reconcile_with_the_trace() {
    let run = run_scenario(&config("ddos")).unwrap();
    let count = |kind: &str| run.trace.records().iter().filter(|r| r.kind == kind).count() as f64;
    assert_eq!(run.report.metric("drops"), Some(count("drop")));
    assert_eq!(run.report.metric("attack_tx"), Some(count("attack_tx")));
    let by_reason: f64 = ["drops.no_match", "drops.invalid", "drops.duplicate", "drops.expired"]
        .iter()
        .map(|m| run.report.metric(m).unwrap_or(0.0))
        .sum();
    assert_eq!(by_reason, count("drop"));
    assert_eq!(run.report.metric("drop_reconcile_errors"), Some(0.0));
}

#[test]
fn authorized_attackers_get_through() {
    let run = run_scenario(&config("full_demo")).unwrap();
    assert!(run.report.passed(), "{}", run.report.render_plain());
    // one of three attackers holds an uploaded key pair: its 20 arrive, the rest do not
    assert_eq!(run.report.metric("attack_tx"), Some(60.0));
    assert_eq!(run.report.metric("attack_delivered"), Some(20.0));
}

#[test]
fn old_manager_forgets_the_vehicle_after_handover() {
    let (world, outcome) = run_world(&config("handover_crossover")).unwrap();
    assert!(outcome.quiescent);
    let v0 = world.vehicle(0);
    assert_eq!(v0.obm_id.0, 1);
    assert_eq!(world.obms[0].key_list().entries_for(v0.node_id), 0);
    assert!(world.obms[1].key_list().entries_for(v0.node_id) > 0);
}

#[test]
fn sparse_and_flapping_links_keep_the_vehicle_put() {
    for name in ["handover_sparse", "handover_flapping"] {
        let run = run_scenario(&config(name)).unwrap();
        assert_eq!(run.report.metric("handovers"), Some(0.0), "{name}");
    }
}

#[test]
fn a_byzantine_generator_is_caught_and_isolated() {
    let (world, _) = run_world(&config("byzantine_generator")).unwrap();
    let honest: Vec<_> = (0..world.obms.len()).filter(|&i| world.is_honest(i)).collect();
    assert_eq!(honest.len(), world.obms.len() - 1);
    let head = world.obms[honest[0]].chain().head_hash();
    for &i in &honest {
        assert_eq!(world.obms[i].chain().head_hash(), head);
    }
    let rejected =
        world.trace.records().iter().filter(|r| r.kind == "block_validated" && r.str("verdict") != Some("ok"));
    assert!(rejected.count() >= 3);
}

#[test]
fn the_seed_changes_the_run() {
    let mut cfg = config("insurance_honest");
    let a = run_scenario(&cfg).unwrap().trace.to_jsonl();
    cfg.seed += 1;
    let b = run_scenario(&cfg).unwrap().trace.to_jsonl();
    assert_ne!(a, b);
}

#[test]
fn a_failed_expectation_fails_the_report() {
    let cfg = ScenarioConfig::from_toml(&format!("{MINIMAL}\n[expect]\ninstalls = 5\n")).unwrap();
    let run = run_scenario(&cfg).unwrap();
    assert!(!run.report.passed());
    let failed: Vec<_> = run.report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    assert_eq!(failed, vec!["installs"]);
}

#[test]
fn config_errors_name_the_field() {
    assert_eq!(invalid_field(&format!("{MINIMAL}[ledger]\nblock_size = 0\n")), "ledger.block_size");
    assert_eq!(invalid_field(&format!("{MINIMAL}[expect]\nno_such_metric = 1\n")), "expect.no_such_metric");
    assert_eq!(invalid_field(&format!("{MINIMAL}[network]\nobm_delay = 0.6\n")), "network.obm_delay");
    let late =
        format!("{MINIMAL}[[script]]\naction = \"publish_update\"\nat = 99.0\necu = \"brake\"\nversion = \"1\"\n");
    assert_eq!(invalid_field(&late), "script[0].at");
    let ghost = format!("{MINIMAL}[[script]]\naction = \"open_account\"\nat = 1.0\nvehicle = \"v7\"\n");
    assert_eq!(invalid_field(&ghost), "script[0].vehicle");
}

#[test]
fn syntax_errors_point_at_the_line() {
    let err = ScenarioConfig::from_toml("name = \"x\"\nseed = \n").unwrap_err();
    assert!(matches!(err, ConfigError::Syntax(_)));
    assert!(err.to_string().contains("line 2"), "{err}");
    let err = ScenarioConfig::from_toml(&format!("{MINIMAL}bogus = 3\n")).unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
}
