//! Service-side actors: cloud object store, software provider, OEM, insurer
//! and the certificate authority.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{
    digest, generate_keypair, issue_certificate, verify, verify_certificate, Certificate, Digest, KeyPair, KeyRing,
    PublicKey, Signature,
};
use crate::ledger::{build_transaction, countersign, Chain, PayloadTag, Transaction, TxKind};
use crate::simnet::derive_seed;

pub type AccountId = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum CloudError {
    #[error("unknown account")]
    UnknownAccount,
    #[error("challenge response did not verify")]
    BadProof,
    #[error("access denied")]
    AccessDenied,
    #[error("object not found")]
    NotFound,
    #[error("account already exists")]
    AccountExists,
}

/// Access to object ids equal to `pattern`, or starting with it when the
/// pattern ends in `*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grant {
    pub pattern: String,
    pub write: bool,
}

impl Grant {
    pub fn read(pattern: impl Into<String>) -> Self {
        Grant { pattern: pattern.into(), write: false }
    }

    pub fn write(pattern: impl Into<String>) -> Self {
        Grant { pattern: pattern.into(), write: true }
    }

    fn covers(&self, object: &str) -> bool {
        match self.pattern.strip_suffix('*') {
            Some(prefix) => object.starts_with(prefix),
            None => object == self.pattern,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Session(u64);

pub type Nonce = [u8; 32];

/// Key-authenticated object store.
#[derive(Debug)]
pub struct CloudStore {
    objects: BTreeMap<String, Vec<u8>>,
    owners: BTreeMap<String, AccountId>,
    accounts: BTreeMap<AccountId, PublicKey>,
    acl: BTreeMap<AccountId, Vec<Grant>>,
    challenges: BTreeMap<AccountId, Nonce>,
    sessions: BTreeMap<Session, AccountId>,
    next_session: u64,
    rng: ChaCha8Rng,
    /// Keep a closed account's objects instead of deleting them.
    pub retain_on_close: bool,
}

impl CloudStore {
    pub fn new(seed: u64) -> Self {
        CloudStore {
            objects: BTreeMap::new(),
            owners: BTreeMap::new(),
            accounts: BTreeMap::new(),
            acl: BTreeMap::new(),
            challenges: BTreeMap::new(),
            sessions: BTreeMap::new(),
            next_session: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
            retain_on_close: true,
        }
    }

    pub fn create_account(&mut self, id: &str, pk: PublicKey, grants: Vec<Grant>) -> Result<(), CloudError> {
        if self.accounts.contains_key(id) {
            return Err(CloudError::AccountExists);
        }
        self.accounts.insert(id.to_string(), pk);
        self.acl.insert(id.to_string(), grants);
        Ok(())
    }

    pub fn grant(&mut self, id: &str, grant: Grant) -> Result<(), CloudError> {
        self.acl.get_mut(id).ok_or(CloudError::UnknownAccount)?.push(grant);
        Ok(())
    }

    pub fn has_account(&self, id: &str) -> bool {
        self.accounts.contains_key(id)
    }

    pub fn account_count(&self) -> usize {
        self.accounts.len()
    }

    /// Removes the account and every session it holds. Returns false for an
    /// unknown account.
    pub fn close_account(&mut self, id: &str) -> bool {
        if self.accounts.remove(id).is_none() {
            return false;
        }
        self.acl.remove(id);
        self.challenges.remove(id);
        self.sessions.retain(|_, owner| owner != id);
        if !self.retain_on_close {
            let gone: Vec<String> = self.owners.iter().filter(|(_, o)| *o == id).map(|(k, _)| k.clone()).collect();
            for object in gone {
                self.objects.remove(&object);
                self.owners.remove(&object);
            }
        }
        true
    }

    pub fn issue_challenge(&mut self, id: &str) -> Result<Nonce, CloudError> {
        if !self.accounts.contains_key(id) {
            return Err(CloudError::UnknownAccount);
        }
        let mut nonce = [0u8; 32];
        self.rng.fill_bytes(&mut nonce);
        self.challenges.insert(id.to_string(), nonce);
        Ok(nonce)
    }

    /// Grants a session iff `proof` signs the outstanding challenge under the
    /// account key. The challenge is consumed either way.
    pub fn authenticate(&mut self, id: &str, proof: &Signature) -> Result<Session, CloudError> {
        let pk = *self.accounts.get(id).ok_or(CloudError::UnknownAccount)?;
        let nonce = self.challenges.remove(id).ok_or(CloudError::BadProof)?;
        if !verify(&nonce, proof, &pk) {
            return Err(CloudError::BadProof);
        }
        let session = Session(self.next_session);
        self.next_session += 1;
        self.sessions.insert(session, id.to_string());
        Ok(session)
    }

    fn allowed(&self, session: Session, object: &str, write: bool) -> Result<&AccountId, CloudError> {
        let account = self.sessions.get(&session).ok_or(CloudError::AccessDenied)?;
        let grants = self.acl.get(account).ok_or(CloudError::AccessDenied)?;
        if grants.iter().any(|g| g.covers(object) && (g.write || !write)) {
            Ok(account)
        } else {
            Err(CloudError::AccessDenied)
        }
    }

    pub fn get(&self, session: Session, object: &str) -> Result<Vec<u8>, CloudError> {
        self.allowed(session, object, false)?;
        self.objects.get(object).cloned().ok_or(CloudError::NotFound)
    }

    pub fn put(&mut self, session: Session, object: &str, bytes: Vec<u8>) -> Result<(), CloudError> {
        let account = self.allowed(session, object, true)?.clone();
        self.objects.insert(object.to_string(), bytes);
        self.owners.insert(object.to_string(), account);
        Ok(())
    }

    /// Overwrites an object without any access check (a compromised store).
    pub fn tamper(&mut self, object: &str, bytes: Vec<u8>) -> bool {
        self.objects.insert(object.to_string(), bytes).is_some()
    }

    pub fn contains(&self, object: &str) -> bool {
        self.objects.contains_key(object)
    }

    pub fn object_ids(&self) -> impl Iterator<Item = &String> {
        self.objects.keys()
    }
}

/// An account id plus the key that proves ownership of it.
#[derive(Debug, Clone)]
pub struct CloudCredentials {
    pub account_id: AccountId,
    pub keypair: KeyPair,
}

impl CloudCredentials {
    /// Challenge-response login.
    pub fn login(&self, cloud: &mut CloudStore) -> Result<Session, CloudError> {
        let nonce = cloud.issue_challenge(&self.account_id)?;
        cloud.authenticate(&self.account_id, &self.keypair.sign(&nonce))
    }
}

/// Points vehicles from an update's payload digest to the binary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateManifest {
    pub ecu: String,
    pub version: String,
    pub object_id: String,
}

impl UpdateManifest {
    pub fn object_for(payload_digest: &Digest) -> String {
        format!("manifest/{}", payload_digest.to_hex())
    }

    pub fn binary_object(ecu: &str, version: &str) -> String {
        format!("sw/{ecu}/{version}")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        format!("{}\n{}\n{}", self.ecu, self.version, self.object_id).into_bytes()
    }

    pub fn parse(bytes: &[u8]) -> Option<Self> {
        let text = std::str::from_utf8(bytes).ok()?;
        let mut lines = text.split('\n');
        let m = UpdateManifest {
            ecu: lines.next()?.to_string(),
            version: lines.next()?.to_string(),
            object_id: lines.next()?.to_string(),
        };
        lines.next().is_none().then_some(m)
    }
}

pub struct CertificateAuthority {
    keypair: KeyPair,
}

impl CertificateAuthority {
    pub fn new(seed: u64) -> Self {
        CertificateAuthority { keypair: generate_keypair(seed) }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public
    }

    pub fn certify(&self, identity: &str, seed: u64) -> KeyRing {
        let kp = generate_keypair(seed);
        let cert = issue_certificate(&self.keypair, identity, kp.public);
        KeyRing::certified(kp, cert)
    }

    pub fn issue(&self, identity: &str, pk: PublicKey) -> Certificate {
        issue_certificate(&self.keypair, identity, pk)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PublishError {
    #[error("cloud write failed: {0}")]
    Cloud(#[from] CloudError),
}

pub struct SwProvider {
    pub name: String,
    pub keys: KeyRing,
    pub account: CloudCredentials,
    last_tx: Option<Digest>,
}

impl SwProvider {
    pub fn new(name: &str, keys: KeyRing, account: CloudCredentials) -> Self {
        SwProvider { name: name.to_string(), keys, account, last_tx: None }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.certified_key().expect("provider key is certified").public
    }

    /// Stores the binary and its manifest, then returns the pending update
    /// transaction addressed to the OEM.
    pub fn publish_update(
        &mut self,
        binary: &[u8],
        ecu: &str,
        version: &str,
        cloud: &mut CloudStore,
        oem_pk: PublicKey,
    ) -> Result<Transaction, PublishError> {
        let session = self.account.login(cloud)?;
        let object_id = UpdateManifest::binary_object(ecu, version);
        let payload_digest = digest(binary);
        cloud.put(session, &object_id, binary.to_vec())?;
        let manifest = UpdateManifest { ecu: ecu.to_string(), version: version.to_string(), object_id };
        cloud.put(session, &UpdateManifest::object_for(&payload_digest), manifest.to_bytes())?;
        let key = self.keys.certified_key().expect("provider key is certified");
        let tx = build_transaction(
            TxKind::Multisig,
            self.last_tx.unwrap_or(Digest::ZERO),
            payload_digest,
            PayloadTag::SwUpdate,
            key,
            Some(oem_pk),
        )
        .expect("multisig with recipient");
        Ok(tx)
    }

    /// The countersigned copy came back: later updates chain to it.
    pub fn observe_countersigned(&mut self, tx: &Transaction) {
        if tx.pk_1 == self.public_key() && tx.is_fully_signed() {
            self.last_tx = Some(tx.t_id);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApprovalError {
    #[error("transaction is not a pending request addressed to this OEM")]
    NotAddressedToMe,
    #[error("provider signature or certification invalid")]
    BadProviderSignature,
    #[error("cloud binary does not match the signed digest")]
    DigestMismatch,
}

impl ClaimRejection {
    pub fn label(self) -> &'static str {
        match self {
            ClaimRejection::AnchorNotFound => "anchor_not_found",
            ClaimRejection::KeyNotRegistered => "key_not_registered",
            ClaimRejection::DigestMismatch => "digest_mismatch",
        }
    }
}

pub struct Oem {
    pub name: String,
    pub keys: KeyRing,
    pub account: CloudCredentials,
    providers: BTreeSet<PublicKey>,
    /// (pending t_id, countersigned t_id)
    pub approved: Vec<(Digest, Digest)>,
}

impl Oem {
    pub fn new(name: &str, keys: KeyRing, account: CloudCredentials) -> Self {
        Oem { name: name.to_string(), keys, account, providers: BTreeSet::new(), approved: Vec::new() }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.certified_key().expect("OEM key is certified").public
    }

    /// Accepts a provider only if its certificate verifies.
    pub fn trust_provider(&mut self, cert: &Certificate, ca_pk: &PublicKey) -> bool {
        if verify_certificate(cert, ca_pk) {
            self.providers.insert(cert.subject_pk);
            true
        } else {
            false
        }
    }

    /// Re-downloads and re-hashes the binary, checks the provider signature,
    /// and countersigns.
    pub fn oem_approve(&mut self, pending: &Transaction, cloud: &mut CloudStore) -> Result<Transaction, ApprovalError> {
        let me = self.public_key();
        if pending.kind != TxKind::Multisig || pending.pk_2 != Some(me) || pending.sig_2.is_some() {
            return Err(ApprovalError::NotAddressedToMe);
        }
        if !self.providers.contains(&pending.pk_1)
            || pending.check_structure().and_then(|_| pending.check_signatures()).is_err()
        {
            return Err(ApprovalError::BadProviderSignature);
        }
        let binary = self.fetch_binary(&pending.payload_digest, cloud).ok_or(ApprovalError::DigestMismatch)?;
        if digest(&binary) != pending.payload_digest {
            return Err(ApprovalError::DigestMismatch);
        }
        let full = countersign(pending, self.keys.certified_key().expect("certified")).expect("checked above");
        self.approved.push((pending.t_id, full.t_id));
        Ok(full)
    }

    fn fetch_binary(&self, payload_digest: &Digest, cloud: &mut CloudStore) -> Option<Vec<u8>> {
        let session = self.account.login(cloud).ok()?;
        let manifest = UpdateManifest::parse(&cloud.get(session, &UpdateManifest::object_for(payload_digest)).ok()?)?;
        cloud.get(session, &manifest.object_id).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ClaimRejection {
    #[error("anchor transaction not in chain")]
    AnchorNotFound,
    #[error("anchor key not registered to the claimant account")]
    KeyNotRegistered,
    #[error("claimed records do not match the anchored digest")]
    DigestMismatch,
}

/// Records submitted with an accident claim.
#[derive(Debug, Clone)]
pub struct Claim {
    pub account_id: AccountId,
    pub anchor_t_id: Digest,
    pub records_digest: Digest,
}

pub struct Insurer {
    pub name: String,
    pub keys: KeyRing,
    seed: u64,
    next_account: u64,
    owners: BTreeMap<AccountId, String>,
    key_db: BTreeMap<PublicKey, AccountId>,
    closed: BTreeSet<AccountId>,
}

impl Insurer {
    pub fn new(name: &str, keys: KeyRing, seed: u64) -> Self {
        Insurer {
            name: name.to_string(),
            keys,
            seed,
            next_account: 0,
            owners: BTreeMap::new(),
            key_db: BTreeMap::new(),
            closed: BTreeSet::new(),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.certified_key().expect("insurer key is certified").public
    }

    pub fn open_account(&mut self, owner: &str, cloud: &mut CloudStore) -> CloudCredentials {
        let account_id = format!("ins-{}", self.next_account);
        self.next_account += 1;
        let keypair = generate_keypair(derive_seed(self.seed, &account_id));
        cloud
            .create_account(&account_id, keypair.public, vec![Grant::write(format!("ins/{account_id}/*"))])
            .expect("insurer account ids are unique");
        self.owners.insert(account_id.clone(), owner.to_string());
        self.key_db.insert(keypair.public, account_id.clone());
        CloudCredentials { account_id, keypair }
    }

    /// Unknown or already closed accounts only log a warning.
    pub fn close_account(&mut self, account_id: &str, cloud: &mut CloudStore) -> bool {
        if !self.owners.contains_key(account_id) || !self.closed.insert(account_id.to_string()) {
            warn!("close of unknown or closed account {account_id}");
            return false;
        }
        cloud.close_account(account_id);
        true
    }

    pub fn owner_of(&self, pk: &PublicKey) -> Option<&str> {
        self.key_db.get(pk).and_then(|a| self.owners.get(a)).map(String::as_str)
    }

    pub fn account_of(&self, pk: &PublicKey) -> Option<&AccountId> {
        self.key_db.get(pk)
    }

    pub fn verify_claim(&self, claim: &Claim, chain: &Chain) -> Result<(), ClaimRejection> {
        let anchor = chain.get_tx(&claim.anchor_t_id).ok_or(ClaimRejection::AnchorNotFound)?;
        if self.key_db.get(&anchor.pk_1) != Some(&claim.account_id) {
            return Err(ClaimRejection::KeyNotRegistered);
        }
        if anchor.payload_digest != claim.records_digest {
            return Err(ClaimRejection::DigestMismatch);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{Block, TxRejection};

    fn creds(id: &str, seed: u64) -> CloudCredentials {
        CloudCredentials { account_id: id.into(), keypair: generate_keypair(seed) }
    }

    fn cloud_with(c: &CloudCredentials, grants: Vec<Grant>) -> CloudStore {
        let mut cloud = CloudStore::new(1);
        cloud.create_account(&c.account_id, c.keypair.public, grants).unwrap();
        cloud
    }

    #[test]
    fn correct_key_gets_a_session_wrong_key_does_not() {
        let c = creds("v1", 1);
        let mut cloud = cloud_with(&c, vec![]);
        assert!(c.login(&mut cloud).is_ok());
        let wrong = creds("v1", 2);
        assert_eq!(wrong.login(&mut cloud), Err(CloudError::BadProof));
        assert_eq!(creds("nobody", 1).login(&mut cloud), Err(CloudError::UnknownAccount));
    }

    #[test]
    fn replayed_proof_is_rejected() {
        let c = creds("v1", 1);
        let mut cloud = cloud_with(&c, vec![]);
        let nonce = cloud.issue_challenge("v1").unwrap();
        let proof = c.keypair.sign(&nonce);
        cloud.authenticate("v1", &proof).unwrap();
        assert_eq!(cloud.authenticate("v1", &proof), Err(CloudError::BadProof));
    }

    #[test]
    fn put_get_round_trip_and_acl() {
        let c = creds("v1", 1);
        let mut cloud = cloud_with(&c, vec![Grant::write("data/*"), Grant::read("pub")]);
        let s = c.login(&mut cloud).unwrap();
        cloud.put(s, "data/a", vec![1, 2, 3]).unwrap();
        assert_eq!(cloud.get(s, "data/a").unwrap(), vec![1, 2, 3]);
        assert_eq!(cloud.get(s, "data/b"), Err(CloudError::NotFound));
        assert_eq!(cloud.get(s, "other"), Err(CloudError::AccessDenied));
        assert_eq!(cloud.put(s, "pub", vec![]), Err(CloudError::AccessDenied));
        assert_eq!(cloud.get(Session(999), "data/a"), Err(CloudError::AccessDenied));
    }

    #[test]
    fn closed_account_loses_sessions_and_login() {
        let c = creds("v1", 1);
        let other = creds("v2", 2);
        let mut cloud = cloud_with(&c, vec![Grant::write("*")]);
        cloud.create_account("v2", other.keypair.public, vec![Grant::write("*")]).unwrap();
        let s = c.login(&mut cloud).unwrap();
        assert!(cloud.close_account("v1"));
        assert_eq!(cloud.get(s, "x"), Err(CloudError::AccessDenied));
        assert_eq!(c.login(&mut cloud), Err(CloudError::UnknownAccount));
        assert!(!cloud.close_account("v1"));
        assert!(other.login(&mut cloud).is_ok());
    }

    struct Wrsu {
        cloud: CloudStore,
        provider: SwProvider,
        oem: Oem,
    }

    fn wrsu() -> Wrsu {
        let ca = CertificateAuthority::new(1);
        let sp_creds = creds("provider", 10);
        let oem_creds = creds("oem", 11);
        let mut cloud = CloudStore::new(3);
        cloud
            .create_account("provider", sp_creds.keypair.public, vec![Grant::write("sw/*"), Grant::write("manifest/*")])
            .unwrap();
        cloud.create_account("oem", oem_creds.keypair.public, vec![Grant::read("*")]).unwrap();
        let provider = SwProvider::new("sp", ca.certify("provider", 20), sp_creds);
        let mut oem = Oem::new("oem", ca.certify("oem", 21), oem_creds);
        let cert = provider.keys.certificate().unwrap().clone();
        assert!(oem.trust_provider(&cert, &ca.public_key()));
        Wrsu { cloud, provider, oem }
    }

    #[test]
    fn publish_stores_binary_and_builds_pending_tx() {
        let mut w = wrsu();
        let tx = w.provider.publish_update(b"firmware 2.0", "brake", "2.0", &mut w.cloud, w.oem.public_key()).unwrap();
        assert!(tx.is_pending());
        assert_eq!(tx.payload_digest, digest(b"firmware 2.0"));
        assert_eq!(tx.pk_2, Some(w.oem.public_key()));
        assert!(w.cloud.contains("sw/brake/2.0"));
    }

    #[test]
    fn publish_without_write_access_fails() {
        let mut w = wrsu();
        w.provider.account = creds("stranger", 99);
        let r = w.provider.publish_update(b"x", "brake", "2.0", &mut w.cloud, w.oem.public_key());
        assert_eq!(r, Err(PublishError::Cloud(CloudError::UnknownAccount)));
    }

    #[test]
    fn oem_approves_authentic_update() {
        let mut w = wrsu();
        let pending = w.provider.publish_update(b"fw", "brake", "2.0", &mut w.cloud, w.oem.public_key()).unwrap();
        let full = w.oem.oem_approve(&pending, &mut w.cloud).unwrap();
        assert!(full.is_fully_signed());
        assert_eq!(full.check_signatures(), Ok(()));
        w.provider.observe_countersigned(&full);
        let next = w.provider.publish_update(b"fw3", "brake", "3.0", &mut w.cloud, w.oem.public_key()).unwrap();
        assert_eq!(next.p_t_id, full.t_id);
    }

    #[test]
    fn oem_detects_swapped_binary() {
        let mut w = wrsu();
        let pending = w.provider.publish_update(b"fw", "brake", "2.0", &mut w.cloud, w.oem.public_key()).unwrap();
        w.cloud.tamper("sw/brake/2.0", b"malware".to_vec());
        assert_eq!(w.oem.oem_approve(&pending, &mut w.cloud), Err(ApprovalError::DigestMismatch));
        assert!(w.oem.approved.is_empty());
    }

    #[test]
    fn oem_rejects_forged_and_misaddressed_requests() {
        let mut w = wrsu();
        let mut pending = w.provider.publish_update(b"fw", "brake", "2.0", &mut w.cloud, w.oem.public_key()).unwrap();
        let mut forged = pending.clone();
        forged.sig_1.0[5] ^= 0x10;
        forged.t_id = forged.compute_t_id();
        assert_eq!(forged.check_signatures(), Err(TxRejection::BadSignature));
        assert_eq!(w.oem.oem_approve(&forged, &mut w.cloud), Err(ApprovalError::BadProviderSignature));

        let attacker = generate_keypair(666);
        let rogue = build_transaction(
            TxKind::Multisig,
            Digest::ZERO,
            digest(b"fw"),
            PayloadTag::SwUpdate,
            &attacker,
            Some(w.oem.public_key()),
        )
        .unwrap();
        assert_eq!(w.oem.oem_approve(&rogue, &mut w.cloud), Err(ApprovalError::BadProviderSignature));

        pending.pk_2 = Some(attacker.public);
        assert_eq!(w.oem.oem_approve(&pending, &mut w.cloud), Err(ApprovalError::NotAddressedToMe));
    }

    fn insurer() -> (Insurer, CloudStore) {
        let ca = CertificateAuthority::new(1);
        (Insurer::new("ins", ca.certify("insurer", 30), 77), CloudStore::new(4))
    }

    #[test]
    fn accounts_are_distinct_and_resolve_to_owners() {
        let (mut ins, mut cloud) = insurer();
        let a = ins.open_account("alice", &mut cloud);
        let b = ins.open_account("bob", &mut cloud);
        assert_ne!(a.keypair.public, b.keypair.public);
        assert_eq!(ins.owner_of(&a.keypair.public), Some("alice"));
        let s = a.login(&mut cloud).unwrap();
        let object = format!("ins/{}/braking/0", a.account_id);
        cloud.put(s, &object, vec![7]).unwrap();
        assert!(ins.close_account(&a.account_id, &mut cloud));
        assert!(!ins.close_account(&a.account_id, &mut cloud));
        assert!(!ins.close_account("ins-99", &mut cloud));
        assert_eq!(a.login(&mut cloud), Err(CloudError::UnknownAccount));
        assert!(b.login(&mut cloud).is_ok());
        assert!(cloud.contains(&object));
    }

    #[test]
    fn claim_checks_anchor_key_and_digest() {
        let (mut ins, mut cloud) = insurer();
        let acct = ins.open_account("alice", &mut cloud);
        let records = digest(b"records");
        let anchor =
            build_transaction(TxKind::SingleSig, Digest::ZERO, records, PayloadTag::StorageAnchor, &acct.keypair, None)
                .unwrap();
        let stranger = generate_keypair(5);
        let foreign =
            build_transaction(TxKind::SingleSig, Digest::ZERO, records, PayloadTag::StorageAnchor, &stranger, None)
                .unwrap();
        let mut chain = Chain::new();
        let obm = generate_keypair(6);
        chain.append_block(Block::seal(Digest::ZERO, 0, vec![anchor.clone(), foreign.clone()], &obm)).unwrap();

        let claim =
            |t_id, records_digest| Claim { account_id: acct.account_id.clone(), anchor_t_id: t_id, records_digest };
        assert_eq!(ins.verify_claim(&claim(anchor.t_id, records), &chain), Ok(()));
        assert_eq!(
            ins.verify_claim(&claim(anchor.t_id, digest(b"edited")), &chain),
            Err(ClaimRejection::DigestMismatch)
        );
        assert_eq!(ins.verify_claim(&claim(foreign.t_id, records), &chain), Err(ClaimRejection::KeyNotRegistered));
        assert_eq!(ins.verify_claim(&claim(digest(b"nope"), records), &chain), Err(ClaimRejection::AnchorNotFound));
    }

    #[test]
    fn manifest_round_trip() {
        let m = UpdateManifest { ecu: "brake".into(), version: "2.0".into(), object_id: "sw/brake/2.0".into() };
        assert_eq!(UpdateManifest::parse(&m.to_bytes()), Some(m));
        assert_eq!(UpdateManifest::parse(b"a\nb"), None);
    }
}
