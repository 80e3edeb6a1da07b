//! The update flow for two vehicles, first driven step by step through the
//! module APIs, then checked against a full simulated run of the same setup.

use autochain::actors::{CertificateAuthority, CloudCredentials, CloudStore, Grant, Oem, SwProvider};
use autochain::crypto::{digest, generate_keypair, Digest};
use autochain::ledger::{LedgerParams, PayloadTag};
use autochain::obm::{MemberRole, ObmState, Origin};
use autochain::scenario::{run_scenario, ScenarioConfig};
use autochain::simnet::NodeId;
use autochain::vehicle::{VehicleParams, VehicleState};

fn creds(id: &str, seed: u64) -> CloudCredentials {
    CloudCredentials { account_id: id.into(), keypair: generate_keypair(seed) }
}

#[test]
fn two_vehicles_by_hand() {
    let ca = CertificateAuthority::new(1);
    let mut cloud = CloudStore::new(2);
    let p_acct = creds("provider", 10);
    let o_acct = creds("oem", 11);
    cloud.create_account("provider", p_acct.keypair.public, vec![Grant::write("*")]).unwrap();
    cloud.create_account("oem", o_acct.keypair.public, vec![Grant::read("*")]).unwrap();
    let mut provider = SwProvider::new("provider", ca.certify("provider", 20), p_acct);
    let mut oem = Oem::new("oem", ca.certify("oem", 21), o_acct);
    assert!(oem.trust_provider(provider.keys.certificate().unwrap(), &ca.public_key()));

    // one manager, members: oem=1, provider=2, vehicles=3,4
    let (oem_node, provider_node) = (NodeId(1), NodeId(2));
    let mut obm = ObmState::new(NodeId(0), generate_keypair(30), LedgerParams::default(), 1, 0);
    obm.join(oem_node, MemberRole::Service);
    obm.join(provider_node, MemberRole::Service);
    obm.upload_key_pair(oem_node, provider.public_key(), oem.public_key()).unwrap();
    obm.upload_key_pair(provider_node, oem.public_key(), provider.public_key()).unwrap();

    let oem_cert = oem.keys.certificate().unwrap().clone();
    let mut vehicles: Vec<VehicleState> = (0..2)
        .map(|i| {
            let node = NodeId(3 + i);
            let mut v = VehicleState::new(
                node,
                &format!("v{i}"),
                40 + i as u64,
                &oem_cert,
                &ca.public_key(),
                NodeId(0),
                VehicleParams::default(),
            )
            .unwrap();
            let acct = creds(&format!("wrsu-v{i}"), 50 + i as u64);
            cloud.create_account(&acct.account_id, acct.keypair.public, vec![Grant::read("*")]).unwrap();
            v.cloud_account = Some(acct);
            obm.join(node, MemberRole::Vehicle);
            v
        })
        .collect();

    // step 1: provider uploads binary and manifest, sends the pending tx
    let binary = b"brake controller v2".to_vec();
    let pending = provider.publish_update(&binary, "brake", "2.0", &mut cloud, oem.public_key()).unwrap();
    assert!(pending.is_pending());
    assert_eq!(pending.payload_digest, digest(&binary));
    assert_eq!(pending.payload_tag, PayloadTag::SwUpdate);

    // step 2: the manager forwards it to the OEM only
    let out = obm.receive_transaction(pending.clone(), Origin::Member(provider_node), 0.0);
    assert_eq!(out.deliver_to, vec![oem_node]);
    assert!(out.notify.is_empty() && !out.pooled);

    // step 3: the OEM checks the binary and countersigns
    let full = oem.oem_approve(&pending, &mut cloud).unwrap();
    assert!(full.is_fully_signed());
    assert_ne!(full.t_id, pending.t_id);

    // step 4: the manager pools it, tells the provider and notifies vehicles
    let out = obm.receive_transaction(full.clone(), Origin::Member(oem_node), 1.0);
    assert_eq!(out.deliver_to, vec![provider_node]);
    assert_eq!(out.notify, vec![NodeId(3), NodeId(4)]);
    assert!(out.pooled);

    // step 5: each vehicle downloads, compares hashes and installs
    for v in &mut vehicles {
        let installed = v.handle_update_notification(&full, &mut cloud).unwrap();
        assert_eq!(installed.digest, digest(&binary));
        assert_eq!(installed.version, "2.0");
        assert_eq!(v.installed_sw["brake"], installed);
    }

    // step 6: the next block stores the approved transaction
    let tick = obm.flush();
    let block = tick.block.unwrap();
    assert_eq!(block.transactions, vec![full.clone()]);
    assert!(obm.chain().contains_tx(&full.t_id));
    assert!(obm.chain().verify());
    assert!(obm.accounting_balanced());
}

#[test]
fn simulated_run_matches_the_walkthrough() {
    let cfg = ScenarioConfig::from_toml(
        r#"
name = "wrsu_two"
seed = 3
duration = 40.0
[topology]
obms = 1
vehicles = 2
oem_obm = 0
provider_obm = 0
insurer_obm = 0
[[script]]
action = "publish_update"
at = 1.0
ecu = "brake"
version = "2.0"
"#,
    )
    .unwrap();
    let run = run_scenario(&cfg).unwrap();
    assert!(run.report.passed(), "{}", run.report.render_plain());
    let kinds: Vec<(&str, &str)> = run
        .trace
        .records()
        .iter()
        .filter(|r| matches!(r.kind.as_str(), "published" | "countersigned" | "update_received" | "installed"))
        .map(|r| (r.actor.as_str(), r.kind.as_str()))
        .collect();
    assert_eq!(kinds[0], ("provider", "published"));
    assert_eq!(kinds[1], ("oem", "countersigned"));
    let mut rest = kinds[2..].to_vec();
    rest.sort();
    assert_eq!(
        rest,
        vec![("v0", "installed"), ("v0", "update_received"), ("v1", "installed"), ("v1", "update_received")]
    );

    let published = run.trace.records().iter().find(|r| r.kind == "published").unwrap();
    let want = published.str("digest").unwrap();
    for r in run.trace.records().iter().filter(|r| r.kind == "installed") {
        assert_eq!(r.str("digest"), Some(want));
        assert_eq!(r.str("version"), Some("2.0"));
    }
    let approved = run.trace.records().iter().find(|r| r.kind == "countersigned").unwrap();
    let t_id = Digest::from_hex(approved.str("t_id").unwrap()).unwrap();
    let stored = run.trace.records().iter().filter(|r| r.kind == "block_formed").any(|r| {
        r.get("txs").and_then(|v| v.as_array()).is_some_and(|a| a.iter().any(|x| x.as_str() == Some(&t_id.to_hex())))
    });
    assert!(stored);
}
