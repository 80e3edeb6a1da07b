use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::crypto::{digest, Digest};
use crate::ledger::block::Block;
use crate::ledger::transaction::Transaction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct TxLocation {
    pub height: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("block parent {got} does not match head {expected}")]
    StaleParent { expected: Digest, got: Digest },
    #[error("block height {got}, expected {expected}")]
    HeightMismatch { expected: u64, got: u64 },
}

/// Append-only list of blocks plus an index of every stored transaction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Chain {
    blocks: Vec<Block>,
    tx_index: BTreeMap<Digest, TxLocation>,
}

impl Chain {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Id of the last block, zero for an empty chain.
    pub fn head_hash(&self) -> Digest {
        self.blocks.last().map_or(Digest::ZERO, |b| b.block_id)
    }

    pub fn contains_tx(&self, t_id: &Digest) -> bool {
        self.tx_index.contains_key(t_id)
    }

    pub fn locate(&self, t_id: &Digest) -> Option<TxLocation> {
        self.tx_index.get(t_id).copied()
    }

    pub fn get_tx(&self, t_id: &Digest) -> Option<&Transaction> {
        self.locate(t_id).map(|loc| &self.blocks[loc.height].transactions[loc.index])
    }

    pub fn transactions(&self) -> impl Iterator<Item = &Transaction> {
        self.blocks.iter().flat_map(|b| b.transactions.iter())
    }

    pub fn tx_count(&self) -> usize {
        self.tx_index.len()
    }

    /// Appends `block` if it extends the current head. Validation of the
    /// contents is the caller's job (see `validate_block`).
    pub fn append_block(&mut self, block: Block) -> Result<(), ChainError> {
        if block.prev_block_hash != self.head_hash() {
            return Err(ChainError::StaleParent { expected: self.head_hash(), got: block.prev_block_hash });
        }
        if block.height != self.blocks.len() as u64 {
            return Err(ChainError::HeightMismatch { expected: self.blocks.len() as u64, got: block.height });
        }
        let height = self.blocks.len();
        for (index, tx) in block.transactions.iter().enumerate() {
            self.tx_index.insert(tx.t_id, TxLocation { height, index });
        }
        self.blocks.push(block);
        Ok(())
    }

    /// Full integrity check: linkage, heights, block ids and signatures,
    /// transaction ids, and index consistency.
    pub fn verify(&self) -> bool {
        let mut prev = Digest::ZERO;
        let mut seen = BTreeSet::new();
        for (height, block) in self.blocks.iter().enumerate() {
            if block.prev_block_hash != prev || block.height != height as u64 || !block.seal_valid() {
                return false;
            }
            for (index, tx) in block.transactions.iter().enumerate() {
                if tx.check_structure().is_err() || !tx.is_fully_signed() || !seen.insert(tx.t_id) {
                    return false;
                }
                if self.tx_index.get(&tx.t_id) != Some(&TxLocation { height, index }) {
                    return false;
                }
            }
            prev = block.block_id;
        }
        seen.len() == self.tx_index.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u64(self.blocks.len() as u64);
        for block in &self.blocks {
            block.encode(&mut enc);
        }
        enc.finish()
    }

    /// Decodes a chain without validating it; run [`Chain::verify`] afterwards.
    pub fn from_bytes(raw: &[u8]) -> Result<Chain, DecodeError> {
        let mut dec = Decoder::new(raw);
        let count = dec.u64()?;
        let mut chain = Chain::new();
        for _ in 0..count {
            let block = Block::decode(&mut dec)?;
            let height = chain.blocks.len();
            for (index, tx) in block.transactions.iter().enumerate() {
                chain.tx_index.entry(tx.t_id).or_insert(TxLocation { height, index });
            }
            chain.blocks.push(block);
        }
        dec.finish()?;
        Ok(chain)
    }

    /// Digest over the canonical encoding; equal iff the chains are byte-identical.
    pub fn fingerprint(&self) -> Digest {
        digest(&self.to_bytes())
    }

    /// One JSON object per block, transactions nested, digests in hex.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for block in &self.blocks {
            out.push_str(&serde_json::to_string(block).expect("block serializes"));
            out.push('\n');
        }
        out
    }
}

pub fn append_block(chain: &mut Chain, block: Block) -> Result<(), ChainError> {
    chain.append_block(block)
}

pub fn verify_chain(chain: &Chain) -> bool {
    chain.verify()
}
