//! Overlay block manager: key-list routing, pooling, and block production.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{Digest, KeyPair, PublicKey};
use crate::ledger::{
    form_block, schedule_block_turn, update_trust, validate_block, Block, BlockCheck, Chain, DtmState, DtmStep,
    LedgerParams, PayloadTag, Transaction, TrustTable, TxPool, TxRejection,
};
use crate::simnet::NodeId;

/// One access grant: transactions between `requester_pk` and `member_pk`
/// may be forwarded to `member`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct KeyListEntry {
    pub requester_pk: PublicKey,
    pub member_pk: PublicKey,
    pub member: NodeId,
}

#[derive(Debug, Clone, Default)]
pub struct KeyList {
    entries: BTreeSet<KeyListEntry>,
}

impl KeyList {
    pub fn insert(&mut self, entry: KeyListEntry) -> bool {
        self.entries.insert(entry)
    }

    pub fn remove_member(&mut self, member: NodeId) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| e.member != member);
        before - self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries_for(&self, member: NodeId) -> usize {
        self.entries.iter().filter(|e| e.member == member).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &KeyListEntry> {
        self.entries.iter()
    }

    /// Members holding an entry equal to `(pk_1, pk_2)` or `(pk_2, pk_1)`.
    /// Single-signature transactions name no counterparty and never match.
    pub fn matches(&self, tx: &Transaction) -> Vec<NodeId> {
        let Some(pk_2) = tx.pk_2 else {
            return Vec::new();
        };
        let pk_1 = tx.pk_1;
        let hits: BTreeSet<NodeId> = self
            .entries
            .iter()
            .filter(|e| {
                (e.requester_pk == pk_1 && e.member_pk == pk_2) || (e.requester_pk == pk_2 && e.member_pk == pk_1)
            })
            .map(|e| e.member)
            .collect();
        hits.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemberRole {
    Vehicle,
    Service,
}

/// Where a transaction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Member(NodeId),
    PeerBroadcast(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Invalid(TxRejection),
    Duplicate,
    NoMatch,
}

impl DropReason {
    pub fn label(&self) -> &'static str {
        match self {
            DropReason::Invalid(TxRejection::Malformed) => "invalid_malformed",
            DropReason::Invalid(TxRejection::BadSignature) => "invalid_bad_signature",
            DropReason::Invalid(TxRejection::MissingPredecessor) => "invalid_missing_predecessor",
            DropReason::Duplicate => "duplicate",
            DropReason::NoMatch => "no_match",
        }
    }
}

/// What the block manager decided to do with one transaction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingOutcome {
    pub t_id: Digest,
    /// Members whose key-list entry matched.
    pub deliver_to: Vec<NodeId>,
    /// Vehicles told about a countersigned software update.
    pub notify: Vec<NodeId>,
    pub broadcast: bool,
    pub pooled: bool,
    /// Waiting for its predecessor to reach the chain.
    pub parked: bool,
    pub dropped: Option<DropReason>,
}

impl RoutingOutcome {
    fn new(t_id: Digest) -> Self {
        RoutingOutcome {
            t_id,
            deliver_to: Vec::new(),
            notify: Vec::new(),
            broadcast: false,
            pooled: false,
            parked: false,
            dropped: None,
        }
    }

    fn drop(t_id: Digest, reason: DropReason) -> Self {
        RoutingOutcome { dropped: Some(reason), ..Self::new(t_id) }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DropCounters {
    pub invalid: u64,
    pub duplicate: u64,
    pub no_match: u64,
}

impl DropCounters {
    pub fn total(&self) -> u64 {
        self.invalid + self.duplicate + self.no_match
    }

    fn count(&mut self, reason: DropReason) {
        match reason {
            DropReason::Invalid(_) => self.invalid += 1,
            DropReason::Duplicate => self.duplicate += 1,
            DropReason::NoMatch => self.no_match += 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ObmMetrics {
    pub received: u64,
    /// Arrivals that reached a routing decision other than a drop.
    pub routed: u64,
    pub deliveries: u64,
    pub notices: u64,
    pub blocks_appended: u64,
    pub blocks_rejected: u64,
    pub verification_history: Vec<usize>,
    pub drops: DropCounters,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObmError {
    #[error("{0} is not a member of this cluster")]
    NotMember(NodeId),
}

#[derive(Debug, Clone)]
struct Parked {
    tx: Transaction,
    origin: Origin,
    since: f64,
}

/// Block production on a turn, or nothing.
#[derive(Debug, Default)]
pub struct TickOutcome {
    pub block: Option<Block>,
    pub dtm: Option<DtmStep>,
    pub promoted: Vec<(Transaction, RoutingOutcome)>,
}

#[derive(Debug)]
pub struct BlockReceipt {
    pub check: BlockCheck,
    pub appended: bool,
    pub promoted: Vec<(Transaction, RoutingOutcome)>,
}

pub struct ObmState {
    pub node_id: NodeId,
    keypair: KeyPair,
    key_list: KeyList,
    pool: TxPool,
    parked: Vec<Parked>,
    routed: BTreeSet<Digest>,
    chain: Chain,
    trust: TrustTable,
    dtm: DtmState,
    pub peers: Vec<NodeId>,
    members: BTreeMap<NodeId, MemberRole>,
    params: LedgerParams,
    pub metrics: ObmMetrics,
    /// Produces blocks carrying a forged transaction. Test hook for trust reset.
    pub byzantine: bool,
    sample_seed: u64,
    arrivals_since_turn: u64,
    last_turn_at: Option<f64>,
}

impl ObmState {
    pub fn new(node_id: NodeId, keypair: KeyPair, params: LedgerParams, obm_count: usize, sample_seed: u64) -> Self {
        ObmState {
            node_id,
            keypair,
            key_list: KeyList::default(),
            pool: TxPool::default(),
            parked: Vec::new(),
            routed: BTreeSet::new(),
            chain: Chain::new(),
            trust: TrustTable::new(params.f_min, params.trust_k),
            dtm: DtmState::new(&params, obm_count),
            peers: Vec::new(),
            members: BTreeMap::new(),
            params,
            metrics: ObmMetrics::default(),
            byzantine: false,
            sample_seed,
            arrivals_since_turn: 0,
            last_turn_at: None,
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn key_list(&self) -> &KeyList {
        &self.key_list
    }

    pub fn pool(&self) -> &TxPool {
        &self.pool
    }

    pub fn parked_len(&self) -> usize {
        self.parked.len()
    }

    pub fn trust(&self) -> &TrustTable {
        &self.trust
    }

    pub fn dtm(&self) -> &DtmState {
        &self.dtm
    }

    pub fn members(&self) -> &BTreeMap<NodeId, MemberRole> {
        &self.members
    }

    pub fn is_member(&self, node: NodeId) -> bool {
        self.members.contains_key(&node)
    }

    pub fn join(&mut self, member: NodeId, role: MemberRole) {
        self.members.insert(member, role);
    }

    /// Member disconnects: its key-list entries go with it.
    pub fn leave(&mut self, member: NodeId) -> usize {
        self.members.remove(&member);
        self.remove_member_keys(member)
    }

    /// Idempotent; returns whether the entry was new.
    pub fn upload_key_pair(
        &mut self,
        member: NodeId,
        requester_pk: PublicKey,
        member_pk: PublicKey,
    ) -> Result<bool, ObmError> {
        if !self.is_member(member) {
            return Err(ObmError::NotMember(member));
        }
        Ok(self.key_list.insert(KeyListEntry { requester_pk, member_pk, member }))
    }

    pub fn remove_member_keys(&mut self, member: NodeId) -> usize {
        self.key_list.remove_member(member)
    }

    /// Routes one incoming transaction.
    ///
    /// Invalid and repeated transactions are dropped. A transaction whose
    /// predecessor is not yet stored waits (parked) until it is, or until
    /// `pending_timeout` passes. Otherwise: key-list matches are delivered,
    /// countersigned software updates are announced to vehicle members,
    /// member-originated transactions are broadcast to peers, and fully signed
    /// ones enter the pool. A pending multisig that arrives by broadcast and
    /// matches nothing here is dropped.
    pub fn receive_transaction(&mut self, tx: Transaction, origin: Origin, now: f64) -> RoutingOutcome {
        self.metrics.received += 1;
        let outcome = self.admit(tx, origin, now);
        if let Some(reason) = outcome.dropped {
            self.metrics.drops.count(reason);
        }
        outcome
    }

    fn admit(&mut self, tx: Transaction, origin: Origin, now: f64) -> RoutingOutcome {
        let t_id = tx.t_id;
        if let Origin::Member(m) = origin {
            if !self.is_member(m) {
                return RoutingOutcome::drop(t_id, DropReason::Invalid(TxRejection::Malformed));
            }
        }
        if self.routed.contains(&t_id) {
            return RoutingOutcome::drop(t_id, DropReason::Duplicate);
        }
        if let Err(r) = tx.check_structure().and_then(|_| tx.check_signatures()) {
            return RoutingOutcome::drop(t_id, DropReason::Invalid(r));
        }
        self.routed.insert(t_id);
        if !tx.p_t_id.is_zero() && !self.chain.contains_tx(&tx.p_t_id) {
            self.parked.push(Parked { tx, origin, since: now });
            let mut out = RoutingOutcome::new(t_id);
            out.parked = true;
            return out;
        }
        self.route_valid(&tx, origin)
    }

    fn route_valid(&mut self, tx: &Transaction, origin: Origin) -> RoutingOutcome {
        let mut out = RoutingOutcome::new(tx.t_id);
        let origin_member = match origin {
            Origin::Member(m) => Some(m),
            Origin::PeerBroadcast(_) => None,
        };
        out.deliver_to = self.key_list.matches(tx).into_iter().filter(|m| Some(*m) != origin_member).collect();
        if tx.payload_tag == PayloadTag::SwUpdate && tx.is_fully_signed() {
            out.notify = self
                .members
                .iter()
                .filter(|(id, role)| **role == MemberRole::Vehicle && Some(**id) != origin_member)
                .map(|(id, _)| *id)
                .collect();
        }
        out.broadcast = origin_member.is_some();
        let stored = self.chain.contains_tx(&tx.t_id);
        if tx.is_fully_signed() && !stored {
            out.pooled = self.pool.push(tx.clone());
            if out.pooled {
                self.arrivals_since_turn += 1;
            }
        }
        if out.deliver_to.is_empty() && out.notify.is_empty() && !out.broadcast && !out.pooled {
            out.dropped = Some(if stored { DropReason::Duplicate } else { DropReason::NoMatch });
        } else {
            self.metrics.routed += 1;
            self.metrics.deliveries += out.deliver_to.len() as u64;
            self.metrics.notices += out.notify.len() as u64;
        }
        out
    }

    /// Routes every parked transaction whose predecessor is now stored (or
    /// which was itself stored by someone else's block). Repeats until stable
    /// so chains of waiting transactions resolve in one call.
    fn promote_parked(&mut self) -> Vec<(Transaction, RoutingOutcome)> {
        let mut out = Vec::new();
        loop {
            let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut self.parked)
                .into_iter()
                .partition(|p| self.chain.contains_tx(&p.tx.t_id) || self.chain.contains_tx(&p.tx.p_t_id));
            self.parked = waiting;
            if ready.is_empty() {
                break;
            }
            for p in ready {
                let outcome = self.route_valid(&p.tx, p.origin);
                if let Some(reason) = outcome.dropped {
                    self.metrics.drops.count(reason);
                }
                out.push((p.tx, outcome));
            }
        }
        out
    }

    /// Drops transactions that waited longer than `pending_timeout`.
    pub fn expire_parked(&mut self, now: f64) -> Vec<Digest> {
        let timeout = self.params.pending_timeout;
        let (expired, keep): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.parked).into_iter().partition(|p| now - p.since >= timeout);
        self.parked = keep;
        for _ in &expired {
            self.metrics.drops.count(DropReason::Invalid(TxRejection::MissingPredecessor));
        }
        expired.into_iter().map(|p| p.tx.t_id).collect()
    }

    /// Drops every parked transaction (end of run).
    pub fn expire_all_parked(&mut self) -> Vec<Digest> {
        self.expire_parked(f64::INFINITY)
    }

    fn after_append(&mut self, block: &Block) -> Vec<(Transaction, RoutingOutcome)> {
        self.pool.evict(block.transactions.iter().map(|tx| &tx.t_id));
        for tx in &block.transactions {
            // parked here but stored elsewhere: promote_parked routes it
            // without pooling; never seen here: later copies count as duplicate
            if !self.parked.iter().any(|p| p.tx.t_id == tx.t_id) {
                self.routed.insert(tx.t_id);
            }
        }
        self.promote_parked()
    }

    /// Block turn for `period_index`. Only the scheduled manager acts: it
    /// folds the arrivals since its previous turn into the throughput window,
    /// adjusts the period, and appends a block when the pool is full enough.
    pub fn on_period_tick(&mut self, period_index: u64, order: &[NodeId], now: f64) -> TickOutcome {
        if schedule_block_turn(period_index, order) != self.node_id {
            return TickOutcome::default();
        }
        if let Some(last) = self.last_turn_at {
            self.dtm.observe(self.arrivals_since_turn, now - last);
        }
        self.arrivals_since_turn = 0;
        self.last_turn_at = Some(now);
        let step = self.dtm.adjust(self.dtm.observed_tx_rate);
        let (block, promoted) = self.produce_block(false);
        TickOutcome { block, dtm: Some(step), promoted }
    }

    /// End-of-run block holding whatever the pool has left.
    pub fn flush(&mut self) -> TickOutcome {
        let (block, promoted) = self.produce_block(true);
        TickOutcome { block, dtm: None, promoted }
    }

    fn produce_block(&mut self, flush: bool) -> (Option<Block>, Vec<(Transaction, RoutingOutcome)>) {
        let Some(mut block) = form_block(&mut self.pool, &self.dtm, &self.keypair, &self.chain, flush) else {
            return (None, Vec::new());
        };
        if self.byzantine {
            let forged = &mut block.transactions[0];
            forged.sig_1.0[0] ^= 0x01;
            forged.t_id = forged.compute_t_id();
            block = Block::seal(block.prev_block_hash, block.height, block.transactions, &self.keypair);
        }
        self.chain.append_block(block.clone()).expect("own block extends own head");
        self.metrics.blocks_appended += 1;
        let promoted = self.after_append(&block);
        (Some(block), promoted)
    }

    /// Validates a peer's block with the local trust table; appends on success.
    pub fn on_block_received(&mut self, block: &Block) -> BlockReceipt {
        let seed = self.sample_seed ^ u64::from_le_bytes(block.block_id.0[..8].try_into().expect("8 bytes"));
        let check = validate_block(block, &self.chain, &self.trust, seed);
        self.metrics.verification_history.push(check.verification_count);
        update_trust(&mut self.trust, block.generator_pk, &check.verdict);
        if check.verdict.is_err() {
            self.metrics.blocks_rejected += 1;
            return BlockReceipt { check, appended: false, promoted: Vec::new() };
        }
        self.chain.append_block(block.clone()).expect("validated against head");
        self.metrics.blocks_appended += 1;
        let promoted = self.after_append(block);
        BlockReceipt { check, appended: true, promoted }
    }

    /// Every arrival is routed, dropped, or still waiting.
    pub fn accounting_balanced(&self) -> bool {
        self.metrics.received == self.metrics.routed + self.metrics.drops.total() + self.parked.len() as u64
    }
}
