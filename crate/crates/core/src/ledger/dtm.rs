//! Throughput management: keeps the block period matched to the offered load.

use std::collections::VecDeque;

use serde::Serialize;

use crate::ledger::LedgerParams;

/// Slack on the band edges so that a period set to hit the upper edge exactly
/// is not re-adjusted over floating-point noise.
pub const BAND_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DtmState {
    /// Time for every block manager to get one turn.
    pub block_period: f64,
    pub block_size: usize,
    pub utilization_low: f64,
    pub utilization_high: f64,
    pub period_min: f64,
    pub period_max: f64,
    pub obm_count: usize,
    /// Transactions per simulated time unit, averaged over the window.
    pub observed_tx_rate: f64,
    window_len: usize,
    window: VecDeque<(u64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DtmStep {
    pub utilization: f64,
    pub period_before: f64,
    pub period_after: f64,
}

impl DtmState {
    pub fn new(params: &LedgerParams, obm_count: usize) -> Self {
        DtmState {
            block_period: params.block_period,
            block_size: params.block_size,
            utilization_low: params.utilization_low,
            utilization_high: params.utilization_high,
            period_min: params.period_min,
            period_max: params.period_max,
            obm_count: obm_count.max(1),
            observed_tx_rate: 0.0,
            window_len: params.dtm_window.max(1),
            window: VecDeque::new(),
        }
    }

    /// Records `count` arrivals over `elapsed` time units and refreshes the
    /// windowed rate.
    pub fn observe(&mut self, count: u64, elapsed: f64) {
        if elapsed <= 0.0 {
            return;
        }
        self.window.push_back((count, elapsed));
        while self.window.len() > self.window_len {
            self.window.pop_front();
        }
        let (n, t) = self.window.iter().fold((0u64, 0.0), |(n, t), &(c, e)| (n + c, t + e));
        self.observed_tx_rate = n as f64 / t;
    }

    /// Offered load relative to the capacity of one full period.
    pub fn utilization(&self, rate: f64) -> f64 {
        rate * self.block_period / (self.block_size as f64 * self.obm_count as f64)
    }

    pub fn in_band(&self, utilization: f64) -> bool {
        utilization >= self.utilization_low - BAND_EPSILON && utilization <= self.utilization_high + BAND_EPSILON
    }

    /// Rescales the period toward the band edge that `rate` overshoots.
    pub fn adjust(&mut self, rate: f64) -> DtmStep {
        let before = self.block_period;
        let u = self.utilization(rate);
        if rate > 0.0 && !self.in_band(u) {
            let target = if u > self.utilization_high { self.utilization_high } else { self.utilization_low };
            self.block_period = (before * target / u).clamp(self.period_min, self.period_max);
        }
        DtmStep { utilization: u, period_before: before, period_after: self.block_period }
    }
}

pub fn dtm_adjust(dtm: &DtmState, observed_tx_rate: f64) -> DtmState {
    let mut next = dtm.clone();
    next.adjust(observed_tx_rate);
    next
}
