//! Ledger properties shared by the property suite and the acceptance run.

#![allow(dead_code)]

use std::collections::BTreeMap;

use autochain::crypto::{digest, generate_keypair, Digest, KeyPair};
use autochain::ledger::{
    build_transaction, countersign, schedule_block_turn, validate_block, validate_transaction, Block, Chain,
    LedgerParams, PayloadTag, Transaction, TrustTable, TxKind, TxRejection,
};
use autochain::obm::{MemberRole, ObmState, Origin};
use autochain::simnet::NodeId;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

/// Cases per property.
pub const CASES: u32 = 1000;

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() })
}

#[derive(Debug, Clone, Copy)]
enum Mutation {
    None,
    FlipSig1(usize),
    FlipSig2(usize),
    SwapPayload,
    UnknownPredecessor,
    CorruptTid(usize),
    DropRecipient,
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        Just(Mutation::None),
        (0..64usize).prop_map(Mutation::FlipSig1),
        (0..64usize).prop_map(Mutation::FlipSig2),
        Just(Mutation::SwapPayload),
        Just(Mutation::UnknownPredecessor),
        (0..32usize).prop_map(Mutation::CorruptTid),
        Just(Mutation::DropRecipient),
    ]
}

/// A stored predecessor so that the unmutated transaction is valid with a
/// non-zero `p_t_id`.
fn chain_with(tx: &Transaction, generator: &KeyPair) -> Chain {
    let mut chain = Chain::new();
    chain.append_block(Block::seal(Digest::ZERO, 0, vec![tx.clone()], generator)).unwrap();
    chain
}

/// Each mutation maps to exactly one expected verdict, and the check
/// order (structure, signatures, predecessor) decides ties.
pub fn validation_verdicts_follow_the_mutation(cases: u32) -> Result<(), String> {
    let strategy =
        (any::<u64>(), any::<bool>(), proptest::collection::vec(any::<u8>(), 0..64), any::<bool>(), mutation());
    runner(cases)
        .run(&strategy, |(seed, multisig, body, chained, m)| {
            let gen = generate_keypair(seed);
            let peer = generate_keypair(seed ^ 0x5a5a);
            let first =
                build_transaction(TxKind::SingleSig, Digest::ZERO, digest(b"root"), PayloadTag::Generic, &gen, None)
                    .unwrap();
            let chain = chain_with(&first, &generate_keypair(seed.wrapping_add(1)));
            let prev = if chained { first.t_id } else { Digest::ZERO };
            let (kind, recipient) =
                if multisig { (TxKind::Multisig, Some(peer.public)) } else { (TxKind::SingleSig, None) };
            let mut tx = build_transaction(kind, prev, digest(&body), PayloadTag::Generic, &gen, recipient).unwrap();
            if multisig {
                tx = countersign(&tx, &peer).unwrap();
            }

            let expected = match m {
                Mutation::None => Ok(()),
                Mutation::FlipSig1(i) => {
                    tx.sig_1.0[i] ^= 0x80;
                    tx.t_id = tx.compute_t_id();
                    Err(TxRejection::BadSignature)
                }
                Mutation::FlipSig2(i) => match tx.sig_2.as_mut() {
                    Some(sig) => {
                        sig.0[i] ^= 0x80;
                        tx.t_id = tx.compute_t_id();
                        Err(TxRejection::BadSignature)
                    }
                    None => Ok(()),
                },
                Mutation::SwapPayload => {
                    tx.payload_digest = digest(&[body.as_slice(), b"!"].concat());
                    tx.t_id = tx.compute_t_id();
                    Err(TxRejection::BadSignature)
                }
                Mutation::UnknownPredecessor => {
                    tx = build_transaction(
                        kind,
                        digest(&seed.to_le_bytes()),
                        digest(&body),
                        PayloadTag::Generic,
                        &gen,
                        recipient,
                    )
                    .unwrap();
                    if multisig {
                        tx = countersign(&tx, &peer).unwrap();
                    }
                    Err(TxRejection::MissingPredecessor)
                }
                Mutation::CorruptTid(i) => {
                    tx.t_id.0[i] ^= 0x01;
                    Err(TxRejection::Malformed)
                }
                Mutation::DropRecipient => {
                    if multisig {
                        tx.pk_2 = None;
                        tx.t_id = tx.compute_t_id();
                        Err(TxRejection::Malformed)
                    } else {
                        Ok(())
                    }
                }
            };
            prop_assert_eq!(validate_transaction(&tx, &chain), expected);
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Transactions built by several keys in a random interleaving, stored in
/// randomly sized blocks: every key's history is a linked list that ends
/// at the zero id, and every link points backwards in the chain.
pub fn per_key_histories_are_backward_linked_lists(cases: u32) -> Result<(), String> {
    let strategy =
        (any::<u64>(), proptest::collection::vec(0..4usize, 1..40), proptest::collection::vec(1..6usize, 1..40));
    runner(cases)
        .run(&strategy, |(seed, schedule, cuts)| {
            let keys: Vec<KeyPair> = (0..4).map(|i| generate_keypair(seed.wrapping_add(i))).collect();
            let generator = generate_keypair(seed ^ 0xb10c);
            let mut last: BTreeMap<usize, Digest> = BTreeMap::new();
            let mut history: BTreeMap<usize, Vec<Digest>> = BTreeMap::new();
            let mut txs = Vec::new();
            for (n, &who) in schedule.iter().enumerate() {
                let prev = last.get(&who).copied().unwrap_or(Digest::ZERO);
                let tx = build_transaction(
                    TxKind::SingleSig,
                    prev,
                    digest(&(n as u64).to_le_bytes()),
                    PayloadTag::Generic,
                    &keys[who],
                    None,
                )
                .unwrap();
                last.insert(who, tx.t_id);
                history.entry(who).or_default().push(tx.t_id);
                txs.push(tx);
            }

            let mut chain = Chain::new();
            let trust = TrustTable::new(1.0, 5.0);
            let mut rest = txs.as_slice();
            for cut in cuts.iter().cycle() {
                if rest.is_empty() {
                    break;
                }
                let (now, later) = rest.split_at((*cut).min(rest.len()));
                // a block may only reference predecessors already stored
                for tx in now {
                    let stored_before = tx.p_t_id.is_zero() || chain.contains_tx(&tx.p_t_id);
                    let verdict = validate_transaction(tx, &chain);
                    prop_assert_eq!(verdict.is_ok(), stored_before);
                }
                let independent = now.iter().all(|tx| tx.p_t_id.is_zero() || chain.contains_tx(&tx.p_t_id));
                let block = Block::seal(chain.head_hash(), chain.len() as u64, now.to_vec(), &generator);
                let check = validate_block(&block, &chain, &trust, seed);
                prop_assert_eq!(check.verdict.is_ok(), independent);
                chain.append_block(block).unwrap();
                rest = later;
            }
            prop_assert!(chain.verify());

            for (who, ids) in &history {
                let mut walked = Vec::new();
                let mut cursor = last[who];
                while !cursor.is_zero() {
                    let loc = chain.locate(&cursor).expect("every link is stored");
                    let tx = chain.get_tx(&cursor).unwrap();
                    prop_assert_eq!(tx.pk_1, keys[*who].public);
                    if !tx.p_t_id.is_zero() {
                        let before = chain.locate(&tx.p_t_id).unwrap();
                        prop_assert!((before.height, before.index) < (loc.height, loc.index));
                    }
                    walked.push(cursor);
                    cursor = tx.p_t_id;
                }
                walked.reverse();
                prop_assert_eq!(&walked, ids);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// For any period, exactly one manager in the rotation is entitled to
/// append, and n consecutive periods give each manager one turn.
pub fn one_block_turn_per_period(cases: u32) -> Result<(), String> {
    let strategy = (1..12usize, any::<u32>());
    runner(cases)
        .run(&strategy, |(n, start)| {
            let ids: Vec<NodeId> = (0..n as u32).map(|i| NodeId(i * 7 + 3)).collect();
            let mut turns = BTreeMap::new();
            for p in start as u64..start as u64 + n as u64 {
                let holder = schedule_block_turn(p, &ids);
                prop_assert_eq!(ids.iter().filter(|id| **id == holder).count(), 1);
                *turns.entry(holder).or_insert(0) += 1;
            }
            prop_assert_eq!(turns.len(), n);
            prop_assert!(turns.values().all(|c| *c == 1));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Managers sharing the same full pool: on any tick only the scheduled
/// one produces a block.
pub fn only_the_turn_holder_appends(cases: u32) -> Result<(), String> {
    let strategy = (1..6usize, 0..1000u64, any::<u64>());
    runner(cases)
        .run(&strategy, |(n, period, seed)| {
            let params = LedgerParams { block_size: 2, ..LedgerParams::default() };
            let order: Vec<NodeId> = (0..n as u32).map(NodeId).collect();
            let member = NodeId(100);
            let txs: Vec<Transaction> = (0..2u64)
                .map(|i| {
                    let k = generate_keypair(seed.wrapping_add(i));
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
                .collect();
            let mut producers = Vec::new();
            for (i, id) in order.iter().enumerate() {
                let mut obm = ObmState::new(*id, generate_keypair(seed ^ i as u64), params.clone(), n, i as u64);
                obm.join(member, MemberRole::Vehicle);
                for tx in &txs {
                    obm.receive_transaction(tx.clone(), Origin::Member(member), 0.0);
                }
                prop_assert_eq!(obm.pool().len(), 2);
                if obm.on_period_tick(period, &order, 1.0).block.is_some() {
                    producers.push(*id);
                }
            }
            prop_assert_eq!(producers, vec![schedule_block_turn(period, &order)]);
            Ok(())
        })
        .map_err(|e| e.to_string())
}
