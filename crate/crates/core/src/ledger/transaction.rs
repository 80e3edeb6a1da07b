use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::crypto::{self, digest, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::chain::Chain;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TxKind {
    SingleSig,
    Multisig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadTag {
    StorageAnchor,
    BackupAnchor,
    SwUpdate,
    InsuranceData,
    Generic,
}

impl TxKind {
    fn to_u8(self) -> u8 {
        match self {
            TxKind::SingleSig => 0,
            TxKind::Multisig => 1,
        }
    }

    fn from_u8(tag: u8) -> Result<Self, DecodeError> {
        match tag {
            0 => Ok(TxKind::SingleSig),
            1 => Ok(TxKind::Multisig),
            tag => Err(DecodeError::BadTag { what: "tx kind", tag }),
        }
    }
}

impl PayloadTag {
    fn to_u8(self) -> u8 {
        match self {
            PayloadTag::StorageAnchor => 0,
            PayloadTag::BackupAnchor => 1,
            PayloadTag::SwUpdate => 2,
            PayloadTag::InsuranceData => 3,
            PayloadTag::Generic => 4,
        }
    }

    fn from_u8(tag: u8) -> Result<Self, DecodeError> {
        Ok(match tag {
            0 => PayloadTag::StorageAnchor,
            1 => PayloadTag::BackupAnchor,
            2 => PayloadTag::SwUpdate,
            3 => PayloadTag::InsuranceData,
            4 => PayloadTag::Generic,
            tag => return Err(DecodeError::BadTag { what: "payload tag", tag }),
        })
    }
}

/// A ledger entry, single-signature or two-party.
///
/// `t_id` is the digest of the canonical encoding of every other field, so it
/// changes when the recipient countersigns. Both signatures cover the same
/// body: `p_t_id || payload_digest || pk_1 [|| pk_2]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub t_id: Digest,
    pub p_t_id: Digest,
    pub kind: TxKind,
    pub pk_1: PublicKey,
    pub sig_1: Signature,
    pub pk_2: Option<PublicKey>,
    pub sig_2: Option<Signature>,
    pub payload_digest: Digest,
    pub payload_tag: PayloadTag,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BuildError {
    #[error("a single-signature transaction takes no recipient")]
    UnexpectedRecipient,
    #[error("a multisig transaction needs a recipient key")]
    MissingRecipient,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CountersignError {
    #[error("only multisig transactions can be countersigned")]
    NotMultisig,
    #[error("countersigning key does not match pk_2")]
    WrongRecipient,
    #[error("transaction already carries sig_2")]
    AlreadySigned,
}

/// Why a transaction failed validation. Checks run in the order structure,
/// signatures, predecessor; the first failure is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum TxRejection {
    #[error("malformed transaction")]
    Malformed,
    #[error("signature does not verify")]
    BadSignature,
    #[error("previous transaction not found in chain")]
    MissingPredecessor,
}

impl Transaction {
    pub fn signing_body(
        p_t_id: &Digest,
        payload_digest: &Digest,
        pk_1: &PublicKey,
        pk_2: Option<&PublicKey>,
    ) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(p_t_id.as_bytes()).bytes(payload_digest.as_bytes()).bytes(pk_1.as_bytes());
        if let Some(pk_2) = pk_2 {
            enc.bytes(pk_2.as_bytes());
        }
        enc.finish()
    }

    fn body(&self) -> Vec<u8> {
        Self::signing_body(&self.p_t_id, &self.payload_digest, &self.pk_1, self.pk_2.as_ref())
    }

    fn encode_fields(&self, enc: &mut Encoder) {
        enc.bytes(self.p_t_id.as_bytes())
            .u8(self.kind.to_u8())
            .bytes(self.pk_1.as_bytes())
            .bytes(self.sig_1.as_bytes())
            .opt(self.pk_2.as_ref().map(|k| &k.0[..]))
            .opt(self.sig_2.as_ref().map(|s| &s.0[..]))
            .bytes(self.payload_digest.as_bytes())
            .u8(self.payload_tag.to_u8());
    }

    pub fn compute_t_id(&self) -> Digest {
        let mut enc = Encoder::new();
        self.encode_fields(&mut enc);
        digest(enc.as_slice())
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self.t_id.as_bytes());
        self.encode_fields(enc);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(Transaction {
            t_id: Digest(dec.fixed("t_id")?),
            p_t_id: Digest(dec.fixed("p_t_id")?),
            kind: TxKind::from_u8(dec.u8()?)?,
            pk_1: PublicKey(dec.fixed("pk_1")?),
            sig_1: Signature(dec.fixed("sig_1")?),
            pk_2: dec.opt_fixed("pk_2")?.map(PublicKey),
            sig_2: dec.opt_fixed("sig_2")?.map(Signature),
            payload_digest: Digest(dec.fixed("payload digest")?),
            payload_tag: PayloadTag::from_u8(dec.u8()?)?,
        })
    }

    /// Multisig still waiting for the recipient's signature.
    pub fn is_pending(&self) -> bool {
        self.kind == TxKind::Multisig && self.sig_2.is_none()
    }

    pub fn is_fully_signed(&self) -> bool {
        match self.kind {
            TxKind::SingleSig => true,
            TxKind::Multisig => self.sig_2.is_some(),
        }
    }

    /// Field-shape checks plus `t_id` recomputation.
    pub fn check_structure(&self) -> Result<(), TxRejection> {
        let shape_ok = match self.kind {
            TxKind::SingleSig => self.pk_2.is_none() && self.sig_2.is_none(),
            TxKind::Multisig => self.pk_2.is_some(),
        };
        if !shape_ok || self.compute_t_id() != self.t_id {
            return Err(TxRejection::Malformed);
        }
        Ok(())
    }

    /// Verifies every present signature.
    pub fn check_signatures(&self) -> Result<(), TxRejection> {
        let body = self.body();
        if !crypto::verify(&body, &self.sig_1, &self.pk_1) {
            return Err(TxRejection::BadSignature);
        }
        if let (Some(pk_2), Some(sig_2)) = (&self.pk_2, &self.sig_2) {
            if !crypto::verify(&body, sig_2, pk_2) {
                return Err(TxRejection::BadSignature);
            }
        }
        Ok(())
    }

    pub fn involves(&self, pk: &PublicKey) -> bool {
        self.pk_1 == *pk || self.pk_2.as_ref() == Some(pk)
    }
}

pub fn build_transaction(
    kind: TxKind,
    p_t_id: Digest,
    payload_digest: Digest,
    payload_tag: PayloadTag,
    generator: &KeyPair,
    recipient_pk: Option<PublicKey>,
) -> Result<Transaction, BuildError> {
    match (kind, &recipient_pk) {
        (TxKind::SingleSig, Some(_)) => return Err(BuildError::UnexpectedRecipient),
        (TxKind::Multisig, None) => return Err(BuildError::MissingRecipient),
        _ => {}
    }
    let body = Transaction::signing_body(&p_t_id, &payload_digest, &generator.public, recipient_pk.as_ref());
    let mut tx = Transaction {
        t_id: Digest::ZERO,
        p_t_id,
        kind,
        pk_1: generator.public,
        sig_1: generator.sign(&body),
        pk_2: recipient_pk,
        sig_2: None,
        payload_digest,
        payload_tag,
    };
    tx.t_id = tx.compute_t_id();
    Ok(tx)
}

pub fn countersign(tx: &Transaction, recipient: &KeyPair) -> Result<Transaction, CountersignError> {
    if tx.kind != TxKind::Multisig {
        return Err(CountersignError::NotMultisig);
    }
    if tx.pk_2 != Some(recipient.public) {
        return Err(CountersignError::WrongRecipient);
    }
    if tx.sig_2.is_some() {
        return Err(CountersignError::AlreadySigned);
    }
    let mut signed = tx.clone();
    signed.sig_2 = Some(recipient.sign(&tx.body()));
    signed.t_id = signed.compute_t_id();
    Ok(signed)
}

/// Structure, then signatures, then predecessor existence. A zero `p_t_id`
/// marks the first transaction of a key and is always accepted.
pub fn validate_transaction(tx: &Transaction, chain: &Chain) -> Result<(), TxRejection> {
    tx.check_structure()?;
    tx.check_signatures()?;
    if !tx.p_t_id.is_zero() && !chain.contains_tx(&tx.p_t_id) {
        return Err(TxRejection::MissingPredecessor);
    }
    Ok(())
}
