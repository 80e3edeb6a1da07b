//! Transactions, blocks, the chain and the rules that govern them.

mod block;
mod chain;
mod dtm;
mod pool;
mod transaction;
mod trust;

pub use block::{form_block, sample_size, validate_block, Block, BlockCheck, BlockRejection};
pub use chain::{append_block, verify_chain, Chain, ChainError, TxLocation};
pub use dtm::{dtm_adjust, DtmState, DtmStep, BAND_EPSILON};
pub use pool::TxPool;
pub use transaction::{
    build_transaction, countersign, validate_transaction, BuildError, CountersignError, PayloadTag, Transaction,
    TxKind, TxRejection,
};
pub use trust::{update_trust, TrustRecord, TrustTable};

use serde::{Deserialize, Serialize};

/// Tunables shared by every block manager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LedgerParams {
    pub block_size: usize,
    /// Initial time for every block manager to take one turn.
    pub block_period: f64,
    pub f_min: f64,
    pub trust_k: f64,
    pub utilization_low: f64,
    pub utilization_high: f64,
    pub period_min: f64,
    pub period_max: f64,
    /// Number of past periods averaged into the observed rate.
    pub dtm_window: usize,
    /// How long a transaction may wait for its predecessor before it is dropped.
    pub pending_timeout: f64,
}

impl Default for LedgerParams {
    fn default() -> Self {
        LedgerParams {
            block_size: 10,
            block_period: 10.0,
            f_min: 0.1,
            trust_k: 5.0,
            utilization_low: 0.5,
            utilization_high: 1.0,
            period_min: 1.0,
            period_max: 100.0,
            dtm_window: 2,
            pending_timeout: 200.0,
        }
    }
}

impl LedgerParams {
    /// Returns the offending field name and a message.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated so NaN fails too
    pub fn check(&self) -> Result<(), (&'static str, String)> {
        if self.block_size == 0 {
            return Err(("block_size", "must be at least 1".into()));
        }
        if !(self.block_period > 0.0) {
            return Err(("block_period", "must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.f_min) {
            return Err(("f_min", "must lie in [0, 1]".into()));
        }
        if !(self.trust_k > 0.0) {
            return Err(("trust_k", "must be positive".into()));
        }
        if !(self.utilization_low > 0.0 && self.utilization_low < self.utilization_high) {
            return Err(("utilization_low", "need 0 < utilization_low < utilization_high".into()));
        }
        if !(self.period_min > 0.0 && self.period_min <= self.block_period && self.block_period <= self.period_max) {
            return Err(("period_min", "need 0 < period_min <= block_period <= period_max".into()));
        }
        if self.dtm_window == 0 {
            return Err(("dtm_window", "must be at least 1".into()));
        }
        if !(self.pending_timeout > 0.0) {
            return Err(("pending_timeout", "must be positive".into()));
        }
        Ok(())
    }
}

/// Round-robin block turn: the only manager allowed to append in `period_index`.
pub fn schedule_block_turn<T: Copy>(period_index: u64, obm_ids: &[T]) -> T {
    assert!(!obm_ids.is_empty(), "at least one block manager required");
    obm_ids[(period_index % obm_ids.len() as u64) as usize]
}
