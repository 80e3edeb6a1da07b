use std::collections::BTreeMap;

use serde::Serialize;

use crate::crypto::PublicKey;
use crate::ledger::block::BlockRejection;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TrustRecord {
    pub valid_blocks_seen: u64,
    pub invalid_blocks_seen: u64,
    /// Valid blocks since the last invalid one; the score is computed from this.
    pub valid_streak: u64,
    pub trust_score: f64,
}

/// Per-generator trust as seen by one block manager.
///
/// After `v` consecutive valid blocks the score is `min(1 - f_min, v / (v + k))`;
/// any invalid block drops it to zero and restarts the streak.
#[derive(Debug, Clone, PartialEq)]
pub struct TrustTable {
    records: BTreeMap<PublicKey, TrustRecord>,
    f_min: f64,
    k: f64,
}

impl TrustTable {
    pub fn new(f_min: f64, k: f64) -> Self {
        TrustTable { records: BTreeMap::new(), f_min, k }
    }

    pub fn f_min(&self) -> f64 {
        self.f_min
    }

    pub fn record(&self, generator: &PublicKey) -> TrustRecord {
        self.records.get(generator).copied().unwrap_or_default()
    }

    pub fn trust_score(&self, generator: &PublicKey) -> f64 {
        self.record(generator).trust_score
    }

    /// Fraction of a block's transactions to verify: `max(f_min, 1 - trust)`.
    pub fn verification_fraction(&self, generator: &PublicKey) -> f64 {
        self.f_min.max(1.0 - self.trust_score(generator))
    }

    pub fn record_valid(&mut self, generator: PublicKey) {
        let (f_min, k) = (self.f_min, self.k);
        let r = self.records.entry(generator).or_default();
        r.valid_blocks_seen += 1;
        r.valid_streak += 1;
        let v = r.valid_streak as f64;
        r.trust_score = (v / (v + k)).min(1.0 - f_min);
    }

    pub fn record_invalid(&mut self, generator: PublicKey) {
        let r = self.records.entry(generator).or_default();
        r.invalid_blocks_seen += 1;
        r.valid_streak = 0;
        r.trust_score = 0.0;
    }

    #[cfg(test)]
    pub(crate) fn set_score_for_test(&mut self, generator: PublicKey, score: f64) {
        self.records.entry(generator).or_default().trust_score = score;
    }
}

pub fn update_trust(trust: &mut TrustTable, generator: PublicKey, verdict: &Result<(), BlockRejection>) {
    match verdict {
        Ok(()) => trust.record_valid(generator),
        Err(_) => trust.record_invalid(generator),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::generate_keypair;

    #[test]
    fn five_valid_blocks_with_k5_gives_half() {
        let g = generate_keypair(1).public;
        let mut t = TrustTable::new(0.1, 5.0);
        for _ in 0..5 {
            update_trust(&mut t, g, &Ok(()));
        }
        assert!((t.trust_score(&g) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_block_resets() {
        let g = generate_keypair(1).public;
        let mut t = TrustTable::new(0.1, 5.0);
        for _ in 0..20 {
            t.record_valid(g);
        }
        update_trust(&mut t, g, &Err(BlockRejection::BadGeneratorSig));
        assert_eq!(t.trust_score(&g), 0.0);
        assert_eq!(t.record(&g).invalid_blocks_seen, 1);
        assert_eq!(t.record(&g).valid_blocks_seen, 20);
        t.record_valid(g);
        assert!((t.trust_score(&g) - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn clamped_below_one_minus_f_min() {
        let g = generate_keypair(1).public;
        let mut t = TrustTable::new(0.1, 5.0);
        for _ in 0..10_000 {
            t.record_valid(g);
            assert!(t.trust_score(&g) <= 0.9 + 1e-15);
        }
        assert!((t.trust_score(&g) - 0.9).abs() < 1e-12);
        assert!((t.verification_fraction(&g) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn unknown_generator_is_untrusted() {
        let t = TrustTable::new(0.1, 5.0);
        assert_eq!(t.verification_fraction(&generate_keypair(3).public), 1.0);
    }
}
