use std::collections::{BTreeSet, VecDeque};

use crate::crypto::Digest;
use crate::ledger::transaction::Transaction;

/// Validated, fully signed transactions waiting for a block, oldest first.
#[derive(Debug, Clone, Default)]
pub struct TxPool {
    queue: VecDeque<Transaction>,
    ids: BTreeSet<Digest>,
}

impl TxPool {
    /// Returns false (and keeps the pool unchanged) for a repeated `t_id`.
    pub fn push(&mut self, tx: Transaction) -> bool {
        if !self.ids.insert(tx.t_id) {
            return false;
        }
        self.queue.push_back(tx);
        true
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn contains(&self, t_id: &Digest) -> bool {
        self.ids.contains(t_id)
    }

    pub fn take_oldest(&mut self, n: usize) -> Vec<Transaction> {
        let n = n.min(self.queue.len());
        let taken: Vec<_> = self.queue.drain(..n).collect();
        for tx in &taken {
            self.ids.remove(&tx.t_id);
        }
        taken
    }

    /// Drops every transaction whose id is in `t_ids`.
    pub fn evict<'a>(&mut self, t_ids: impl IntoIterator<Item = &'a Digest>) -> usize {
        let gone: BTreeSet<Digest> = t_ids.into_iter().filter(|id| self.ids.remove(id)).copied().collect();
        if !gone.is_empty() {
            self.queue.retain(|tx| !gone.contains(&tx.t_id));
        }
        gone.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transaction> {
        self.queue.iter()
    }
}
