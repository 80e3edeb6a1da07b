use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::crypto::{self, digest, Digest, KeyPair, PublicKey, Signature};
use crate::ledger::chain::Chain;
use crate::ledger::dtm::DtmState;
use crate::ledger::pool::TxPool;
use crate::ledger::transaction::{validate_transaction, Transaction};
use crate::ledger::trust::TrustTable;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: Digest,
    pub prev_block_hash: Digest,
    pub generator_pk: PublicKey,
    pub height: u64,
    pub transactions: Vec<Transaction>,
    pub generator_signature: Signature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum BlockRejection {
    #[error("block does not extend the local head")]
    BrokenLinkage,
    #[error("generator signature does not verify")]
    BadGeneratorSig,
    #[error("transaction {0} failed validation")]
    BadTransaction(usize),
}

/// Outcome of [`validate_block`]. `verification_count` is the number of
/// transactions whose signatures and predecessor were actually checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCheck {
    pub verdict: Result<(), BlockRejection>,
    pub verification_count: usize,
}

impl Block {
    fn header_body(prev: &Digest, generator: &PublicKey, height: u64, txs: &[Transaction]) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.bytes(prev.as_bytes()).bytes(generator.as_bytes()).u64(height).u32(txs.len() as u32);
        for tx in txs {
            tx.encode(&mut enc);
        }
        enc.finish()
    }

    /// Builds and signs a block over `transactions`.
    pub fn seal(prev_block_hash: Digest, height: u64, transactions: Vec<Transaction>, generator: &KeyPair) -> Block {
        let body = Self::header_body(&prev_block_hash, &generator.public, height, &transactions);
        Block {
            block_id: digest(&body),
            prev_block_hash,
            generator_pk: generator.public,
            height,
            transactions,
            generator_signature: generator.sign(&body),
        }
    }

    fn body(&self) -> Vec<u8> {
        Self::header_body(&self.prev_block_hash, &self.generator_pk, self.height, &self.transactions)
    }

    pub fn compute_block_id(&self) -> Digest {
        digest(&self.body())
    }

    /// Recomputes the id and checks the generator's signature over the same bytes.
    pub fn seal_valid(&self) -> bool {
        let body = self.body();
        digest(&body) == self.block_id && crypto::verify(&body, &self.generator_signature, &self.generator_pk)
    }

    pub fn encode(&self, enc: &mut Encoder) {
        enc.bytes(self.block_id.as_bytes())
            .bytes(self.prev_block_hash.as_bytes())
            .bytes(self.generator_pk.as_bytes())
            .u64(self.height)
            .u32(self.transactions.len() as u32);
        for tx in &self.transactions {
            tx.encode(enc);
        }
        enc.bytes(self.generator_signature.as_bytes());
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Block, DecodeError> {
        let block_id = Digest(dec.fixed("block id")?);
        let prev_block_hash = Digest(dec.fixed("prev block hash")?);
        let generator_pk = PublicKey(dec.fixed("generator pk")?);
        let height = dec.u64()?;
        let count = dec.u32()? as usize;
        // each transaction needs well over 64 bytes; bail on absurd counts
        if count > dec.remaining() / 64 + 1 {
            return Err(DecodeError::Truncated { wanted: count * 64, left: dec.remaining() });
        }
        let mut transactions = Vec::with_capacity(count);
        for _ in 0..count {
            transactions.push(Transaction::decode(dec)?);
        }
        Ok(Block {
            block_id,
            prev_block_hash,
            generator_pk,
            height,
            transactions,
            generator_signature: Signature(dec.fixed("generator signature")?),
        })
    }

    pub fn contains(&self, t_id: &Digest) -> bool {
        self.transactions.iter().any(|tx| tx.t_id == *t_id)
    }
}

/// Takes the `block_size` oldest pooled transactions into a new block.
///
/// Returns `None` while the pool holds fewer than `block_size` transactions,
/// unless `flush` is set, in which case whatever remains is taken (an empty
/// pool still yields `None`).
pub fn form_block(pool: &mut TxPool, dtm: &DtmState, generator: &KeyPair, chain: &Chain, flush: bool) -> Option<Block> {
    let size = dtm.block_size;
    let take = if pool.len() >= size {
        size
    } else if flush && !pool.is_empty() {
        pool.len()
    } else {
        return None;
    };
    let txs = pool.take_oldest(take);
    Some(Block::seal(chain.head_hash(), chain.len() as u64, txs, generator))
}

/// Number of transactions checked for a verification fraction `f` over `n`.
pub fn sample_size(fraction: f64, n: usize) -> usize {
    // tolerance absorbs rounding such as 1 - 0.9 = 0.0999..
    let raw = (fraction * n as f64 - 1e-9).ceil();
    (raw.max(0.0) as usize).min(n)
}

/// Validates a received block against the local chain.
///
/// Linkage, id and generator signature are always checked, as are the cheap
/// per-transaction facts (fully signed, not already stored, no repeats).
/// Signatures and predecessors are verified for a fraction
/// `max(f_min, 1 - trust)` of the transactions, drawn from `seed`.
pub fn validate_block(block: &Block, chain: &Chain, trust: &TrustTable, seed: u64) -> BlockCheck {
    let reject = |r| BlockCheck { verdict: Err(r), verification_count: 0 };
    if block.prev_block_hash != chain.head_hash() || block.height != chain.len() as u64 {
        return reject(BlockRejection::BrokenLinkage);
    }
    if !block.seal_valid() {
        return reject(BlockRejection::BadGeneratorSig);
    }
    let mut ids = std::collections::BTreeSet::new();
    for (i, tx) in block.transactions.iter().enumerate() {
        if !tx.is_fully_signed() || chain.contains_tx(&tx.t_id) || !ids.insert(tx.t_id) {
            return reject(BlockRejection::BadTransaction(i));
        }
    }

    let n = block.transactions.len();
    let k = sample_size(trust.verification_fraction(&block.generator_pk), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();

    let mut checked = 0;
    for i in picked {
        checked += 1;
        if validate_transaction(&block.transactions[i], chain).is_err() {
            return BlockCheck { verdict: Err(BlockRejection::BadTransaction(i)), verification_count: checked };
        }
    }
    BlockCheck { verdict: Ok(()), verification_count: checked }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_keypair;
    use crate::ledger::transaction::{build_transaction, PayloadTag, TxKind};
    use crate::ledger::LedgerParams;

    fn txs(n: usize, seed: u64) -> Vec<Transaction> {
        (0..n)
            .map(|i| {
                let k = generate_keypair(seed + i as u64);
                build_transaction(
                    TxKind::SingleSig,
                    Digest::ZERO,
                    digest(&i.to_le_bytes()),
                    PayloadTag::Generic,
                    &k,
                    None,
                )
                .unwrap()
            })
            .collect()
    }

    fn dtm(block_size: usize) -> DtmState {
        DtmState::new(&LedgerParams { block_size, ..LedgerParams::default() }, 4)
    }

    #[test]
    fn form_block_sizes() {
        let gen = generate_keypair(77);
        let chain = Chain::new();
        let mut pool = TxPool::default();
        for tx in txs(12, 0) {
            pool.push(tx);
        }
        let block = form_block(&mut pool, &dtm(10), &gen, &chain, false).unwrap();
        assert_eq!(block.transactions.len(), 10);
        assert_eq!(pool.len(), 2);

        let mut small = TxPool::default();
        for tx in txs(3, 100) {
            small.push(tx);
        }
        assert!(form_block(&mut small, &dtm(10), &gen, &chain, false).is_none());
        assert_eq!(small.len(), 3);
        let flushed = form_block(&mut small, &dtm(10), &gen, &chain, true).unwrap();
        assert_eq!(flushed.transactions.len(), 3);
        assert!(small.is_empty());
    }

    #[test]
    fn form_block_is_oldest_first() {
        let gen = generate_keypair(77);
        let all = txs(12, 0);
        let mut pool = TxPool::default();
        for tx in all.clone() {
            pool.push(tx);
        }
        let block = form_block(&mut pool, &dtm(10), &gen, &Chain::new(), false).unwrap();
        assert_eq!(block.transactions, all[..10]);
    }

    #[test]
    fn sample_size_edges() {
        assert_eq!(sample_size(1.0, 10), 10);
        assert_eq!(sample_size(f64::max(0.1, 1.0 - 0.9), 10), 1);
        assert_eq!(sample_size(0.0, 10), 0);
        assert_eq!(sample_size(0.5, 0), 0);
    }

    #[test]
    fn zero_trust_checks_everything() {
        let gen = generate_keypair(5);
        let chain = Chain::new();
        let block = Block::seal(Digest::ZERO, 0, txs(10, 10), &gen);
        let trust = TrustTable::new(0.1, 5.0);
        let check = validate_block(&block, &chain, &trust, 1);
        assert_eq!(check.verdict, Ok(()));
        assert_eq!(check.verification_count, 10);
    }

    #[test]
    fn high_trust_checks_one_of_ten() {
        let gen = generate_keypair(5);
        let block = Block::seal(Digest::ZERO, 0, txs(10, 10), &gen);
        let mut trust = TrustTable::new(0.1, 5.0);
        trust.set_score_for_test(gen.public, 0.9);
        let check = validate_block(&block, &Chain::new(), &trust, 1);
        assert_eq!(check.verification_count, 1);
    }

    #[test]
    fn forged_transaction_caught_at_zero_trust() {
        let gen = generate_keypair(5);
        let mut list = txs(10, 10);
        let forger = generate_keypair(999);
        let victim = &mut list[4];
        victim.sig_1 = forger.sign(b"whatever");
        victim.t_id = victim.compute_t_id();
        let block = Block::seal(Digest::ZERO, 0, list, &gen);
        let check = validate_block(&block, &Chain::new(), &TrustTable::new(0.1, 5.0), 3);
        assert_eq!(check.verdict, Err(BlockRejection::BadTransaction(4)));
    }

    #[test]
    fn linkage_and_signature_checks() {
        let gen = generate_keypair(5);
        let wrong_parent = Block::seal(digest(b"elsewhere"), 0, txs(2, 0), &gen);
        let trust = TrustTable::new(0.1, 5.0);
        assert_eq!(validate_block(&wrong_parent, &Chain::new(), &trust, 0).verdict, Err(BlockRejection::BrokenLinkage));

        let mut resigned = Block::seal(Digest::ZERO, 0, txs(2, 0), &gen);
        resigned.generator_signature = generate_keypair(6).sign(b"x");
        assert_eq!(validate_block(&resigned, &Chain::new(), &trust, 0).verdict, Err(BlockRejection::BadGeneratorSig));
    }
}
