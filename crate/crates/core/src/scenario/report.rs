//! Metrics and pass/fail checks computed from a trace alone.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use serde_json::Value;

use crate::crypto::Digest;
use crate::simnet::{Trace, TraceRecord};
use crate::vehicle::{storage_digest, StorageRecord};

/// Every metric name a scenario may put an expectation on. Names ending in
/// `.*` accept any suffix.
pub const METRICS: &[&str] = &[
    "published",
    "countersigned",
    "countersigned_forged",
    "approval_rejected",
    "installs",
    "update_rejections",
    "rejected.*",
    "install_safety_violations",
    "handovers",
    "stale_key_entries",
    "addressed_sent",
    "addressed_delivered",
    "addressed_duplicates",
    "legit_delivery_ratio",
    "attack_tx",
    "attack_delivered",
    "attack_dropped",
    "target_deliveries",
    "drops",
    "drops.*",
    "blocks",
    "blocks_rejected",
    "transactions_on_chain",
    "legit_tx",
    "anchors",
    "anchors_on_chain",
    "anchor_mismatches",
    "claims_accepted",
    "claims_rejected",
    "claims_rejected.*",
    "claim_oracle_disagreements",
    "post_close_denied",
    "dtm_adjustments",
    "dtm_reentry_periods",
    "dtm_unresolved",
    "verification_trend_ratio",
    "chains_agree",
    "chains_verify",
    "quiescent",
    "drop_reconcile_errors",
];

/// Checks applied to every run regardless of its expectations.
const ALWAYS: &[(&str, f64)] = &[
    ("chains_agree", 1.0),
    ("chains_verify", 1.0),
    ("quiescent", 1.0),
    ("install_safety_violations", 0.0),
    ("anchor_mismatches", 0.0),
    ("claim_oracle_disagreements", 0.0),
    ("drop_reconcile_errors", 0.0),
];

/// Minimum blocks from one generator before its verification trend counts.
const TREND_MIN_BLOCKS: usize = 30;

const EXACT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
}

#[derive(Debug, thiserror::Error)]
#[error("trace has no scenario header")]
pub struct MissingHeader;

fn t_id(r: &TraceRecord, key: &str) -> Option<Digest> {
    r.str(key).and_then(|s| Digest::from_hex(s).ok())
}

fn t_ids(r: &TraceRecord, key: &str) -> Vec<Digest> {
    match r.get(key) {
        Some(Value::Array(items)) => {
            items.iter().filter_map(|v| v.as_str()).filter_map(|s| Digest::from_hex(s).ok()).collect()
        }
        _ => Vec::new(),
    }
}

fn records(r: &TraceRecord, key: &str) -> Vec<StorageRecord> {
    r.get(key).cloned().and_then(|v| serde_json::from_value(v).ok()).unwrap_or_default()
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

#[derive(Default)]
struct Tally {
    m: BTreeMap<String, f64>,
}

impl Tally {
    fn set(&mut self, k: &str, v: f64) {
        self.m.insert(k.to_string(), v);
    }
    fn bump(&mut self, k: &str) {
        *self.m.entry(k.to_string()).or_insert(0.0) += 1.0;
    }
}

impl ScenarioReport {
    pub fn from_trace(trace: &Trace) -> Result<ScenarioReport, MissingHeader> {
        let recs = trace.records();
        let header = recs.iter().find(|r| r.kind == "scenario").ok_or(MissingHeader)?;
        let honest: BTreeSet<String> = match header.get("honest") {
            Some(Value::Array(a)) => a.iter().filter_map(|v| v.as_str().map(String::from)).collect(),
            _ => BTreeSet::new(),
        };
        let band =
            (header.f64("utilization_low").unwrap_or(0.0), header.f64("utilization_high").unwrap_or(f64::INFINITY));
        let mut t = Tally::default();
        for k in [
            "published",
            "countersigned",
            "countersigned_forged",
            "approval_rejected",
            "installs",
            "update_rejections",
            "handovers",
            "addressed_sent",
            "attack_tx",
            "drops",
            "blocks_rejected",
            "legit_tx",
            "anchors",
            "claims_accepted",
            "claims_rejected",
            "post_close_denied",
            "dtm_adjustments",
            "claim_oracle_disagreements",
            "target_deliveries",
        ] {
            t.set(k, 0.0);
        }

        let mut published = BTreeSet::new();
        let mut attack_ids = BTreeSet::new();
        let mut ddos_targets = BTreeSet::new();
        let mut addressed = BTreeSet::new();
        let mut on_chain = BTreeSet::new();
        let mut anchor_ids = BTreeSet::new();
        let mut anchor_digests: BTreeMap<Digest, Digest> = BTreeMap::new();
        let mut claims: BTreeMap<u64, (Digest, Digest)> = BTreeMap::new();
        let mut closed_accounts = BTreeSet::new();
        let mut addressed_seen: BTreeMap<Digest, u64> = BTreeMap::new();
        let mut attack_delivered = BTreeSet::new();
        let mut attack_dropped = BTreeSet::new();
        let mut storage: BTreeMap<String, (Vec<StorageRecord>, Vec<StorageRecord>)> = BTreeMap::new();
        let mut dtm_trail: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut verifications: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut drops_seen: BTreeMap<String, [u64; 3]> = BTreeMap::new();
        let mut safety = 0.0;
        let mut mismatches = 0.0;

        for r in recs {
            match r.kind.as_str() {
                "published" => {
                    t.bump("published");
                    published.extend(t_id(r, "digest"));
                }
                "attack_tx" => {
                    t.bump("attack_tx");
                    attack_ids.extend(t_id(r, "t_id"));
                    if let Some(v) = r.str("target") {
                        ddos_targets.insert(v.to_string());
                    }
                }
                "countersigned" => {
                    t.bump("countersigned");
                    if t_id(r, "pending").is_some_and(|p| attack_ids.contains(&p)) {
                        t.bump("countersigned_forged");
                    }
                }
                "approval_rejected" => t.bump("approval_rejected"),
                "installed" => {
                    t.bump("installs");
                    let bad_digest = !t_id(r, "digest").is_some_and(|d| published.contains(&d));
                    let bad_origin = t_id(r, "t_id").is_some_and(|d| attack_ids.contains(&d));
                    if bad_digest || bad_origin {
                        safety += 1.0;
                    }
                }
                "update_rejected" => {
                    t.bump("update_rejections");
                    t.bump(&format!("rejected.{}", r.str("reason").unwrap_or("unknown")));
                }
                "handover" => t.bump("handovers"),
                "addressed_tx" => {
                    t.bump("addressed_sent");
                    addressed.extend(t_id(r, "t_id"));
                }
                "submit" => t.bump("legit_tx"),
                "deliver" => {
                    let Some(id) = t_id(r, "t_id") else { continue };
                    if addressed.contains(&id) {
                        *addressed_seen.entry(id).or_default() += 1;
                    }
                    if attack_ids.contains(&id) {
                        attack_delivered.insert(id);
                    }
                    if ddos_targets.contains(&r.actor) {
                        t.bump("target_deliveries");
                    }
                }
                "drop" => {
                    t.bump("drops");
                    let reason = r.str("reason").unwrap_or("unknown");
                    t.bump(&format!("drops.{reason}"));
                    let slot = if reason.starts_with("invalid") {
                        0
                    } else if reason == "duplicate" {
                        1
                    } else {
                        2
                    };
                    drops_seen.entry(r.actor.clone()).or_default()[slot] += 1;
                    if let Some(id) = t_id(r, "t_id").filter(|id| attack_ids.contains(id)) {
                        attack_dropped.insert(id);
                    }
                }
                "block_formed" if honest.contains(&r.actor) => {
                    on_chain.extend(t_ids(r, "txs"));
                }
                "block_validated" if honest.contains(&r.actor) => {
                    if r.str("verdict") != Some("ok") {
                        t.bump("blocks_rejected");
                    }
                    let txs = r.f64("txs").unwrap_or(0.0);
                    if txs > 0.0 && r.bool("appended") == Some(true) {
                        let key = (r.actor.clone(), r.str("generator").unwrap_or("").to_string());
                        verifications.entry(key).or_default().push(r.f64("verification_count").unwrap_or(0.0) / txs);
                    }
                }
                "dtm" if honest.contains(&r.actor) => {
                    let before = r.f64("period_before").unwrap_or(0.0);
                    let after = r.f64("period_after").unwrap_or(0.0);
                    if (before - after).abs() > EXACT_TOLERANCE {
                        t.bump("dtm_adjustments");
                    }
                    dtm_trail.entry(r.actor.clone()).or_default().push(r.f64("utilization").unwrap_or(0.0));
                }
                "record" => {
                    let rec: Option<StorageRecord> =
                        r.get("record").cloned().and_then(|v| serde_json::from_value(v).ok());
                    storage.entry(r.actor.clone()).or_default().0.extend(rec);
                }
                "anchor" | "backup" => {
                    t.bump("anchors");
                    let (live, backup) = storage.entry(r.actor.clone()).or_default();
                    let replayed = if r.kind == "backup" {
                        backup.append(live);
                        storage_digest(backup)
                    } else {
                        storage_digest(live)
                    };
                    let claimed = t_id(r, "digest");
                    if claimed != Some(replayed) {
                        mismatches += 1.0;
                    }
                    if let (Some(id), Some(d)) = (t_id(r, "t_id"), claimed) {
                        anchor_ids.insert(id);
                        anchor_digests.insert(id, d);
                    }
                }
                "claim_filed" => {
                    if let (Some(idx), Some(anchor)) = (r.u64("claim"), t_id(r, "anchor")) {
                        claims.insert(idx, (anchor, storage_digest(&records(r, "records"))));
                    }
                }
                "claim_verdict" => {
                    let accepted = r.bool("accepted") == Some(true);
                    if accepted {
                        t.bump("claims_accepted");
                    } else {
                        t.bump("claims_rejected");
                        t.bump(&format!("claims_rejected.{}", r.str("reason").unwrap_or("unknown")));
                    }
                    // oracle: the anchor must be stored and must commit to exactly the claimed records
                    let expected = r.u64("claim").and_then(|i| claims.get(&i)).is_some_and(|(anchor, records)| {
                        on_chain.contains(anchor) && anchor_digests.get(anchor) == Some(records)
                    });
                    if expected != accepted {
                        t.bump("claim_oracle_disagreements");
                    }
                }
                "account_closed" if r.bool("closed") == Some(true) => {
                    closed_accounts.extend(r.str("account").map(String::from));
                }
                "cloud_denied" if r.str("account").is_some_and(|a| closed_accounts.contains(a)) => {
                    t.bump("post_close_denied");
                }
                _ => {}
            }
        }

        t.set("install_safety_violations", safety);
        t.set("anchor_mismatches", mismatches);
        t.set("addressed_delivered", addressed_seen.len() as f64);
        t.set("addressed_duplicates", addressed_seen.values().map(|n| n.saturating_sub(1)).sum::<u64>() as f64);
        let sent = t.m["addressed_sent"];
        t.set("legit_delivery_ratio", if sent > 0.0 { addressed_seen.len() as f64 / sent } else { 1.0 });
        t.set("attack_delivered", attack_delivered.len() as f64);
        t.set("attack_dropped", attack_dropped.len() as f64);
        t.set("anchors_on_chain", anchor_ids.intersection(&on_chain).count() as f64);

        let (reentry, unresolved) = dtm_reentry(&dtm_trail, band);
        t.set("dtm_reentry_periods", reentry as f64);
        t.set("dtm_unresolved", unresolved as f64);

        if let Some(ratio) = trend_ratio(&verifications) {
            t.set("verification_trend_ratio", ratio);
        }

        final_state(recs, &honest, &drops_seen, &mut t);

        let name = header.str("name").unwrap_or("").to_string();
        let seed = header.u64("seed").unwrap_or(0);
        let mut checks = Vec::new();
        for (metric, want) in ALWAYS {
            checks.push(compare(&t.m, metric, "==", *want));
        }
        for (key, op) in [("expect", "=="), ("expect_min", ">="), ("expect_max", "<=")] {
            if let Some(Value::Object(map)) = header.get(key) {
                for (metric, want) in map {
                    checks.push(compare(&t.m, metric, op, want.as_f64().unwrap_or(f64::NAN)));
                }
            }
        }
        Ok(ScenarioReport { name, seed, metrics: t.m, checks })
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn render_plain(&self) -> String {
        let mut out = format!("scenario {} (seed {})\n", self.name, self.seed);
        for (k, v) in &self.metrics {
            out.push_str(&format!("  {k:<28} {}\n", fmt_num(*v)));
        }
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            out.push_str(&format!("{mark} {}: {}\n", c.name, c.detail));
        }
        out.push_str(if self.passed() { "result: pass\n" } else { "result: FAIL\n" });
        out
    }

    pub fn render_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.4}")
    }
}

fn compare(m: &BTreeMap<String, f64>, metric: &str, op: &str, want: f64) -> Check {
    // absent counters of the wildcard families are simply zero
    let got = m.get(metric).copied().or_else(|| metric.contains('.').then_some(0.0));
    let (passed, detail) = match got {
        None => (false, format!("metric missing, wanted {op} {}", fmt_num(want))),
        Some(v) => {
            let ok = match op {
                "==" => (v - want).abs() <= EXACT_TOLERANCE * want.abs().max(1.0),
                ">=" => v >= want - EXACT_TOLERANCE,
                _ => v <= want + EXACT_TOLERANCE,
            };
            (ok, format!("{} {op} {}", fmt_num(v), fmt_num(want)))
        }
    };
    Check { name: metric.to_string(), passed, detail }
}

/// Longest run of turns spent outside the band before coming back, over all
/// managers, plus the number of excursions that never came back.
fn dtm_reentry(trails: &BTreeMap<String, Vec<f64>>, (low, high): (f64, f64)) -> (usize, usize) {
    let in_band = |u: f64| u >= low - 1e-9 && u <= high + 1e-9;
    let mut worst = 0;
    let mut unresolved = 0;
    for trail in trails.values() {
        let mut left_at = None;
        for (i, u) in trail.iter().enumerate() {
            match (in_band(*u), left_at) {
                (false, None) => left_at = Some(i),
                (true, Some(start)) => {
                    worst = worst.max(i - start);
                    left_at = None;
                }
                _ => {}
            }
        }
        if left_at.is_some() {
            unresolved += 1;
        }
    }
    (worst, unresolved)
}

/// Largest late/early ratio of sampled fractions over validator-generator
/// pairs with enough history. Below 1 means verification work shrank.
fn trend_ratio(series: &BTreeMap<(String, String), Vec<f64>>) -> Option<f64> {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    series
        .values()
        .filter(|s| s.len() >= TREND_MIN_BLOCKS)
        .map(|s| {
            let third = s.len() / 3;
            mean(&s[s.len() - third..]) / mean(&s[..third])
        })
        .reduce(f64::max)
}

fn final_state(
    recs: &[TraceRecord],
    honest: &BTreeSet<String>,
    drops_seen: &BTreeMap<String, [u64; 3]>,
    t: &mut Tally,
) {
    let finals: Vec<&TraceRecord> = recs.iter().filter(|r| r.kind == "final_obm").collect();
    let honest_finals: Vec<&&TraceRecord> = finals.iter().filter(|r| honest.contains(&r.actor)).collect();
    let fingerprints: BTreeSet<&str> = honest_finals.iter().filter_map(|r| r.str("fingerprint")).collect();
    t.set("chains_agree", flag(fingerprints.len() == 1));
    t.set(
        "chains_verify",
        flag(!honest_finals.is_empty() && honest_finals.iter().all(|r| r.bool("verify") == Some(true))),
    );
    let height = honest_finals.iter().filter_map(|r| r.u64("height")).max().unwrap_or(0);
    t.set("blocks", height as f64);
    let txs = honest_finals.iter().filter_map(|r| r.u64("tx_count")).max().unwrap_or(0);
    t.set("transactions_on_chain", txs as f64);

    let mut reconcile = 0.0;
    for r in &finals {
        let get = |k: &str| r.u64(k).unwrap_or(0);
        let dropped = [get("drops_invalid"), get("drops_duplicate"), get("drops_no_match")];
        if get("received") != get("routed") + dropped.iter().sum::<u64>() + get("parked") {
            reconcile += 1.0;
        }
        if drops_seen.get(&r.actor).copied().unwrap_or_default() != dropped {
            reconcile += 1.0;
        }
    }
    t.set("drop_reconcile_errors", reconcile);

    let home: BTreeMap<&str, &str> = recs
        .iter()
        .filter(|r| r.kind == "final_vehicle")
        .filter_map(|r| Some((r.actor.as_str(), r.str("obm")?)))
        .collect();
    let mut stale = 0.0;
    for r in &finals {
        if let Some(Value::Object(entries)) = r.get("key_entries") {
            for (member, n) in entries {
                if home.get(member.as_str()).is_some_and(|h| *h != r.actor) {
                    stale += n.as_f64().unwrap_or(0.0);
                }
            }
        }
    }
    t.set("stale_key_entries", stale);
    let quiescent = recs.iter().rev().find(|r| r.kind == "end").and_then(|r| r.bool("quiescent")).unwrap_or(false);
    t.set("quiescent", flag(quiescent));
}
