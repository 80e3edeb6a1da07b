//! Vehicle node: local storage with on-chain anchors, soft handover between
//! block managers, and update verification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actors::{CloudCredentials, CloudError, CloudStore, UpdateManifest};
use crate::codec::Encoder;
use crate::crypto::{digest, generate_keypair, verify_certificate, Certificate, Digest, KeyPair, KeyRing, PublicKey};
use crate::ledger::{build_transaction, Chain, PayloadTag, Transaction, TxKind};
use crate::simnet::{derive_seed, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordCategory {
    Location,
    Braking,
    Speed,
    Maintenance,
    Other,
}

impl RecordCategory {
    pub const ALL: [RecordCategory; 5] = [
        RecordCategory::Location,
        RecordCategory::Braking,
        RecordCategory::Speed,
        RecordCategory::Maintenance,
        RecordCategory::Other,
    ];

    fn code(self) -> u8 {
        self as u8
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        hex::decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageRecord {
    pub timestamp: f64,
    pub category: RecordCategory,
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
}

/// Digest of the canonical encoding of a record sequence.
pub fn storage_digest(records: &[StorageRecord]) -> Digest {
    let mut enc = Encoder::new();
    enc.u32(records.len() as u32);
    for r in records {
        enc.f64(r.timestamp).u8(r.category.code()).bytes(&r.payload);
    }
    digest(&enc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehicleParams {
    pub anchor_interval: f64,
    /// Candidates slower than this are never chosen.
    pub handover_threshold: f64,
    /// Fraction by which a new manager must beat the current delay.
    pub hysteresis: f64,
    pub probe_count: usize,
    /// Fresh key for every outbound transaction (anchors for the insurer excepted).
    pub rotate_per_interaction: bool,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            anchor_interval: 20.0,
            handover_threshold: 100.0,
            hysteresis: 0.2,
            probe_count: 3,
            rotate_per_interaction: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstalledSw {
    pub version: String,
    pub digest: Digest,
}

/// An anchor this vehicle produced, with the store it committed to.
#[derive(Debug, Clone)]
pub struct AnchorRecord {
    pub t_id: Digest,
    pub tag: PayloadTag,
    pub payload_digest: Digest,
    pub signer: PublicKey,
    pub records: Vec<StorageRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRejection {
    #[error("not a software update")]
    NotAnUpdate,
    #[error("transaction not fully signed or signatures invalid")]
    InvalidTransaction,
    #[error("second signer is not this vehicle's OEM")]
    NotFromMyOem,
    #[error("downloaded binary does not match the signed digest")]
    HashMismatch,
    #[error("cloud authentication failed")]
    CloudAuthFailed,
    #[error("update binary not found in cloud")]
    DownloadMissing,
}

impl UpdateRejection {
    pub fn label(self) -> &'static str {
        match self {
            UpdateRejection::NotAnUpdate => "not_an_update",
            UpdateRejection::InvalidTransaction => "invalid_transaction",
            UpdateRejection::NotFromMyOem => "not_from_my_oem",
            UpdateRejection::HashMismatch => "hash_mismatch",
            UpdateRejection::CloudAuthFailed => "cloud_auth_failed",
            UpdateRejection::DownloadMissing => "download_missing",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VehicleError {
    #[error("OEM certificate does not verify under the CA key")]
    UntrustedOem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandoverDecision {
    pub current: NodeId,
    pub delays: Vec<(NodeId, f64)>,
    pub target: Option<NodeId>,
}

pub struct VehicleState {
    pub node_id: NodeId,
    pub name: String,
    /// Stable key under which counterparties address this vehicle.
    pub access: KeyPair,
    keys: KeyRing,
    key_seed: u64,
    rotations: u64,
    last_tx: BTreeMap<PublicKey, Digest>,
    pub obm_id: NodeId,
    pub in_vehicle_storage: Vec<StorageRecord>,
    pub backup_store: Vec<StorageRecord>,
    pub installed_sw: BTreeMap<String, InstalledSw>,
    pub oem_pk: PublicKey,
    /// Pre-provisioned account for update downloads.
    pub cloud_account: Option<CloudCredentials>,
    pub insurance_account: Option<CloudCredentials>,
    pub params: VehicleParams,
    pub last_anchor_tx: Option<Digest>,
    /// Public keys allowed to reach this vehicle through the key list.
    pub requesters: Vec<PublicKey>,
    pub anchors: Vec<AnchorRecord>,
    /// Addressed transactions received, by t_id.
    pub inbox: BTreeMap<Digest, u32>,
}

impl VehicleState {
    pub fn new(
        node_id: NodeId,
        name: &str,
        seed: u64,
        oem_cert: &Certificate,
        ca_pk: &PublicKey,
        obm_id: NodeId,
        params: VehicleParams,
    ) -> Result<Self, VehicleError> {
        if !verify_certificate(oem_cert, ca_pk) {
            return Err(VehicleError::UntrustedOem);
        }
        let access = generate_keypair(derive_seed(seed, "access"));
        Ok(VehicleState {
            node_id,
            name: name.to_string(),
            keys: KeyRing::new(access.clone()),
            access,
            key_seed: derive_seed(seed, "rotation"),
            rotations: 0,
            last_tx: BTreeMap::new(),
            obm_id,
            in_vehicle_storage: Vec::new(),
            backup_store: Vec::new(),
            installed_sw: BTreeMap::new(),
            oem_pk: oem_cert.subject_pk,
            cloud_account: None,
            insurance_account: None,
            params,
            last_anchor_tx: None,
            requesters: vec![oem_cert.subject_pk],
            anchors: Vec::new(),
            inbox: BTreeMap::new(),
        })
    }

    pub fn current_keypair(&self) -> &KeyPair {
        self.keys.current()
    }

    pub fn key_history(&self) -> &[KeyPair] {
        self.keys.history()
    }

    /// Whether `pk` can be attributed to this vehicle or its accounts.
    pub fn attributable(&self, pk: &PublicKey) -> bool {
        self.keys.owns(pk)
            || self.access.public == *pk
            || self.insurance_account.as_ref().is_some_and(|a| a.keypair.public == *pk)
    }

    /// (requester, member) pairs to upload to the associated manager.
    pub fn access_entries(&self) -> Vec<(PublicKey, PublicKey)> {
        self.requesters.iter().map(|r| (*r, self.access.public)).collect()
    }

    pub fn record(&mut self, timestamp: f64, category: RecordCategory, payload: Vec<u8>) -> &StorageRecord {
        debug_assert!(self.in_vehicle_storage.last().is_none_or(|r| r.timestamp <= timestamp));
        self.in_vehicle_storage.push(StorageRecord { timestamp, category, payload });
        self.in_vehicle_storage.last().expect("just pushed")
    }

    fn signing_key(&mut self, for_insurer: bool) -> KeyPair {
        if for_insurer {
            if let Some(acct) = &self.insurance_account {
                return acct.keypair.clone();
            }
        }
        if self.params.rotate_per_interaction {
            self.rotations += 1;
            let seed = self.key_seed.wrapping_add(self.rotations);
            return self.keys.rotate(seed).clone();
        }
        self.keys.current().clone()
    }

    /// Builds the next transaction under the chosen key, chaining to that
    /// key's previous transaction.
    pub fn next_transaction(
        &mut self,
        kind: TxKind,
        tag: PayloadTag,
        payload_digest: Digest,
        recipient: Option<PublicKey>,
        for_insurer: bool,
    ) -> Transaction {
        let key = self.signing_key(for_insurer);
        let prev = self.last_tx.get(&key.public).copied().unwrap_or(Digest::ZERO);
        let tx = build_transaction(kind, prev, payload_digest, tag, &key, recipient).expect("recipient matches kind");
        self.last_tx.insert(key.public, tx.t_id);
        tx
    }

    fn anchor(&mut self, tag: PayloadTag, records: Vec<StorageRecord>) -> Transaction {
        let payload_digest = storage_digest(&records);
        let for_insurer = self.insurance_account.is_some();
        let tx = self.next_transaction(TxKind::SingleSig, tag, payload_digest, None, for_insurer);
        self.last_anchor_tx = Some(tx.t_id);
        self.anchors.push(AnchorRecord { t_id: tx.t_id, tag, payload_digest, signer: tx.pk_1, records });
        tx
    }

    /// Anchors the digest of the in-vehicle store.
    pub fn anchor_storage(&mut self) -> Transaction {
        let records = self.in_vehicle_storage.clone();
        self.anchor(PayloadTag::StorageAnchor, records)
    }

    /// Moves the in-vehicle store to backup and anchors the backup digest.
    pub fn transfer_to_backup(&mut self) -> Option<Transaction> {
        if self.in_vehicle_storage.is_empty() {
            return None;
        }
        let moved = std::mem::take(&mut self.in_vehicle_storage);
        self.backup_store.extend(moved);
        let records = self.backup_store.clone();
        Some(self.anchor(PayloadTag::BackupAnchor, records))
    }

    /// Measures every candidate (and the current manager) and picks the
    /// fastest one under the threshold, if it beats the current delay by the
    /// hysteresis margin.
    pub fn evaluate_handover(&self, candidates: &[NodeId], mut probe: impl FnMut(NodeId) -> f64) -> HandoverDecision {
        let mut ids: Vec<NodeId> = candidates.to_vec();
        if !ids.contains(&self.obm_id) {
            ids.push(self.obm_id);
        }
        ids.sort();
        ids.dedup();
        let delays: Vec<(NodeId, f64)> = ids.into_iter().map(|id| (id, probe(id))).collect();
        let current_delay = delays.iter().find(|(id, _)| *id == self.obm_id).map(|(_, d)| *d).unwrap_or(f64::INFINITY);
        let best =
            delays.iter().filter(|(_, d)| *d <= self.params.handover_threshold).min_by(|a, b| a.1.total_cmp(&b.1));
        let target = match best {
            Some(&(id, d)) if id != self.obm_id && d <= (1.0 - self.params.hysteresis) * current_delay => Some(id),
            _ => None,
        };
        HandoverDecision { current: self.obm_id, delays, target }
    }

    /// Switches association; returns the old manager.
    pub fn apply_handover(&mut self, new_obm: NodeId) -> NodeId {
        std::mem::replace(&mut self.obm_id, new_obm)
    }

    pub fn receive_addressed(&mut self, tx: &Transaction) -> u32 {
        let n = self.inbox.entry(tx.t_id).or_insert(0);
        *n += 1;
        *n
    }

    /// Checks an update announcement and installs the binary if everything
    /// verifies.
    pub fn handle_update_notification(
        &mut self,
        tx: &Transaction,
        cloud: &mut CloudStore,
    ) -> Result<InstalledSw, UpdateRejection> {
        if tx.payload_tag != PayloadTag::SwUpdate {
            return Err(UpdateRejection::NotAnUpdate);
        }
        if !tx.is_fully_signed() || tx.check_structure().and_then(|_| tx.check_signatures()).is_err() {
            return Err(UpdateRejection::InvalidTransaction);
        }
        if tx.pk_2 != Some(self.oem_pk) {
            return Err(UpdateRejection::NotFromMyOem);
        }
        let account = self.cloud_account.as_ref().ok_or(UpdateRejection::CloudAuthFailed)?;
        let session = account.login(cloud).map_err(|_| UpdateRejection::CloudAuthFailed)?;
        let fetch = |object: &str| {
            cloud.get(session, object).map_err(|e| match e {
                CloudError::NotFound => UpdateRejection::DownloadMissing,
                _ => UpdateRejection::CloudAuthFailed,
            })
        };
        let manifest = UpdateManifest::parse(&fetch(&UpdateManifest::object_for(&tx.payload_digest))?)
            .ok_or(UpdateRejection::DownloadMissing)?;
        let binary = fetch(&manifest.object_id)?;
        let got = digest(&binary);
        if got != tx.payload_digest {
            return Err(UpdateRejection::HashMismatch);
        }
        let installed = InstalledSw { version: manifest.version, digest: got };
        self.installed_sw.insert(manifest.ecu, installed.clone());
        Ok(installed)
    }

    /// True iff the chain holds an anchor of exactly these records signed by
    /// a key attributable to this vehicle.
    pub fn prove_storage_integrity(&self, records: &[StorageRecord], chain: &Chain) -> bool {
        let d = storage_digest(records);
        chain.transactions().any(|tx| {
            matches!(tx.payload_tag, PayloadTag::StorageAnchor | PayloadTag::BackupAnchor)
                && tx.payload_digest == d
                && self.attributable(&tx.pk_1)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actors::{CertificateAuthority, Grant, Oem, SwProvider};
    use crate::ledger::{countersign, Block};

    struct Fixture {
        ca: CertificateAuthority,
        oem: Oem,
        cloud: CloudStore,
    }

    fn fixture() -> Fixture {
        let ca = CertificateAuthority::new(1);
        let oem_acct = CloudCredentials { account_id: "oem".into(), keypair: generate_keypair(40) };
        let mut cloud = CloudStore::new(5);
        cloud.create_account("oem", oem_acct.keypair.public, vec![Grant::read("*")]).unwrap();
        let oem = Oem::new("oem", ca.certify("oem", 41), oem_acct);
        Fixture { ca, oem, cloud }
    }

    fn vehicle(f: &mut Fixture, params: VehicleParams) -> VehicleState {
        let cert = f.oem.keys.certificate().unwrap().clone();
        let mut v = VehicleState::new(NodeId(7), "car-7", 70, &cert, &f.ca.public_key(), NodeId(0), params).unwrap();
        let acct = CloudCredentials { account_id: "wrsu-car-7".into(), keypair: generate_keypair(71) };
        f.cloud
            .create_account(&acct.account_id, acct.keypair.public, vec![Grant::read("sw/*"), Grant::read("manifest/*")])
            .unwrap();
        v.cloud_account = Some(acct);
        v
    }

    fn chain_of(txs: Vec<Transaction>) -> Chain {
        let mut chain = Chain::new();
        chain.append_block(Block::seal(Digest::ZERO, 0, txs, &generate_keypair(3))).unwrap();
        chain
    }

    #[test]
    fn rejects_uncertified_oem() {
        let f = fixture();
        let rogue = CertificateAuthority::new(99);
        let cert = rogue.issue("oem", generate_keypair(5).public);
        let r = VehicleState::new(NodeId(1), "x", 1, &cert, &f.ca.public_key(), NodeId(0), VehicleParams::default());
        assert_eq!(r.err(), Some(VehicleError::UntrustedOem));
    }

    #[test]
    fn anchored_storage_proves_and_edits_do_not() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        v.record(1.0, RecordCategory::Location, b"48.1,11.5".to_vec());
        v.record(2.0, RecordCategory::Speed, vec![88]);
        let tx = v.anchor_storage();
        assert_eq!(tx.payload_digest, storage_digest(&v.in_vehicle_storage));
        assert_eq!(v.last_anchor_tx, Some(tx.t_id));
        let chain = chain_of(vec![tx]);
        assert!(v.prove_storage_integrity(&v.in_vehicle_storage, &chain));
        let mut edited = v.in_vehicle_storage.clone();
        edited[1].payload = vec![40];
        assert!(!v.prove_storage_integrity(&edited, &chain));
        assert!(!v.prove_storage_integrity(&edited[..1], &chain));
    }

    #[test]
    fn empty_store_anchor_is_valid() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        let tx = v.anchor_storage();
        assert_eq!(tx.payload_digest, storage_digest(&[]));
        assert_eq!(tx.check_signatures(), Ok(()));
    }

    #[test]
    fn anchors_chain_under_a_stable_key() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams { rotate_per_interaction: false, ..VehicleParams::default() });
        let a = v.anchor_storage();
        v.record(1.0, RecordCategory::Braking, vec![1]);
        let b = v.anchor_storage();
        assert_eq!(b.p_t_id, a.t_id);
        assert_eq!(a.pk_1, b.pk_1);
    }

    #[test]
    fn rotation_uses_fresh_keys() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        let a = v.anchor_storage();
        let b = v.anchor_storage();
        assert_ne!(a.pk_1, b.pk_1);
        assert!(b.p_t_id.is_zero());
        assert!(v.attributable(&a.pk_1) && v.attributable(&b.pk_1));
        assert_eq!(v.key_history().len(), 2);
    }

    #[test]
    fn backup_transfer_conserves_records() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        assert!(v.transfer_to_backup().is_none());
        for i in 0..100 {
            v.record(i as f64, RecordCategory::Other, vec![i as u8]);
        }
        let original = v.in_vehicle_storage.clone();
        let tx = v.transfer_to_backup().unwrap();
        assert_eq!(tx.payload_tag, PayloadTag::BackupAnchor);
        assert!(v.in_vehicle_storage.is_empty());
        assert_eq!(v.backup_store, original);
        assert_eq!(tx.payload_digest, storage_digest(&v.backup_store));
    }

    fn probe_table(table: &[(u32, f64)]) -> impl FnMut(NodeId) -> f64 + '_ {
        move |id| table.iter().find(|(n, _)| *n == id.0).map(|(_, d)| *d).unwrap()
    }

    #[test]
    fn handover_picks_fastest_under_threshold() {
        let mut f = fixture();
        let v = vehicle(&mut f, VehicleParams::default());
        let table = [(0, 30.0), (1, 12.0), (2, 45.0)];
        let d = v.evaluate_handover(&[NodeId(0), NodeId(1), NodeId(2)], probe_table(&table));
        assert_eq!(d.target, Some(NodeId(1)));
    }

    #[test]
    fn handover_stays_when_all_far_or_gain_small() {
        let mut f = fixture();
        let v = vehicle(&mut f, VehicleParams::default());
        let far = [(0, 300.0), (1, 150.0)];
        assert_eq!(v.evaluate_handover(&[NodeId(1)], probe_table(&far)).target, None);
        let close = [(0, 30.0), (1, 25.0)];
        assert_eq!(v.evaluate_handover(&[NodeId(1)], probe_table(&close)).target, None);
        let edge = [(0, 30.0), (1, 24.0)];
        assert_eq!(v.evaluate_handover(&[NodeId(1)], probe_table(&edge)).target, Some(NodeId(1)));
    }

    fn published(f: &mut Fixture, binary: &[u8]) -> (SwProvider, Transaction) {
        let acct = CloudCredentials { account_id: "provider".into(), keypair: generate_keypair(50) };
        f.cloud
            .create_account("provider", acct.keypair.public, vec![Grant::write("sw/*"), Grant::write("manifest/*")])
            .unwrap();
        let mut sp = SwProvider::new("sp", f.ca.certify("provider", 51), acct);
        f.oem.trust_provider(sp.keys.certificate().unwrap(), &f.ca.public_key());
        let pending = sp.publish_update(binary, "brake", "2.0", &mut f.cloud, f.oem.public_key()).unwrap();
        let full = f.oem.oem_approve(&pending, &mut f.cloud).unwrap();
        (sp, full)
    }

    #[test]
    fn authentic_update_installs() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        let (_, full) = published(&mut f, b"brake fw 2.0");
        let installed = v.handle_update_notification(&full, &mut f.cloud).unwrap();
        assert_eq!(installed.digest, digest(b"brake fw 2.0"));
        assert_eq!(v.installed_sw["brake"].version, "2.0");
    }

    #[test]
    fn tampered_binary_is_not_installed() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        let (_, full) = published(&mut f, b"brake fw 2.0");
        f.cloud.tamper("sw/brake/2.0", b"infected".to_vec());
        assert_eq!(v.handle_update_notification(&full, &mut f.cloud), Err(UpdateRejection::HashMismatch));
        assert!(v.installed_sw.is_empty());
    }

    #[test]
    fn foreign_second_signer_is_rejected() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        let a = generate_keypair(600);
        let b = generate_keypair(601);
        let p =
            build_transaction(TxKind::Multisig, Digest::ZERO, digest(b"x"), PayloadTag::SwUpdate, &a, Some(b.public))
                .unwrap();
        let full = countersign(&p, &b).unwrap();
        assert_eq!(v.handle_update_notification(&full, &mut f.cloud), Err(UpdateRejection::NotFromMyOem));
        assert_eq!(v.handle_update_notification(&p, &mut f.cloud), Err(UpdateRejection::InvalidTransaction));
    }

    #[test]
    fn cloud_failures_map_to_rejections() {
        let mut f = fixture();
        let mut v = vehicle(&mut f, VehicleParams::default());
        let (_, full) = published(&mut f, b"fw");
        let mut cloud2 = CloudStore::new(9);
        let acct = v.cloud_account.clone().unwrap();
        cloud2.create_account(&acct.account_id, acct.keypair.public, vec![Grant::read("*")]).unwrap();
        assert_eq!(v.handle_update_notification(&full, &mut cloud2), Err(UpdateRejection::DownloadMissing));
        f.cloud.close_account(&acct.account_id);
        assert_eq!(v.handle_update_notification(&full, &mut f.cloud), Err(UpdateRejection::CloudAuthFailed));
    }

    #[test]
    fn record_serde_round_trip() {
        let r = StorageRecord { timestamp: 1.5, category: RecordCategory::Braking, payload: vec![0xde, 0xad] };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"dead\""));
        assert_eq!(serde_json::from_str::<StorageRecord>(&s).unwrap(), r);
    }
}
