//! Wires every actor onto the event loop and records what happens.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::actors::{
    CertificateAuthority, Claim, CloudCredentials, CloudError, CloudStore, Grant, Insurer, Oem, SwProvider,
};
use crate::crypto::{digest, generate_keypair, Digest, KeyPair, PublicKey};
use crate::ledger::{build_transaction, countersign, Block, BlockRejection, PayloadTag, Transaction, TxKind};
use crate::obm::{MemberRole, ObmState, Origin, RoutingOutcome};
use crate::simnet::{derive_seed, EventHandler, LinkModel, NodeId, RunOutcome, SimEvent, SimTime, Simnet, Trace};
use crate::vehicle::{storage_digest, RecordCategory, StorageRecord, VehicleState};

use super::config::{parse_vehicle_name, vehicle_name, Directive, ImpersonationMode, ScenarioConfig};

#[derive(Debug, Clone)]
pub enum Msg {
    Tx(Transaction),
    Deliver(Transaction),
    Notify(Transaction),
    Block(Block),
    Join(MemberRole),
    KeyUpload { requester: PublicKey, member: PublicKey },
    Disconnect,
    Timer(Timer),
}

#[derive(Debug, Clone)]
pub enum Timer {
    Slot(u64),
    Record(usize),
    Anchor(usize),
    Backup(usize),
    Upload(usize),
    Probe(usize),
    Download { vehicle: usize, tx: Box<Transaction> },
    Directive(usize),
    Load(u64),
    Attack(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Obm(usize),
    Vehicle(usize),
    Oem,
    Provider,
    Insurer,
    Attacker(usize),
}

struct Attacker {
    node: NodeId,
    obm: usize,
    /// Fixed key for authorized attackers; fresh keys are derived otherwise.
    key: KeyPair,
    seed: u64,
    target: usize,
    remaining: usize,
    interval: f64,
    authorized: bool,
    sent: u64,
}

struct VehicleSlot {
    state: VehicleState,
    seen_updates: BTreeSet<Digest>,
    uploaded: usize,
}

pub struct World {
    cfg: ScenarioConfig,
    pub trace: Trace,
    pub obms: Vec<ObmState>,
    order: Vec<NodeId>,
    honest: Vec<bool>,
    generator_of: BTreeMap<PublicKey, usize>,
    vehicles: Vec<VehicleSlot>,
    pub oem: Oem,
    pub provider: SwProvider,
    pub insurer: Insurer,
    pub cloud: CloudStore,
    oem_node: NodeId,
    provider_node: NodeId,
    insurer_node: NodeId,
    attackers: Vec<Attacker>,
    /// Directive index -> first attacker index it owns.
    attacker_base: BTreeMap<usize, usize>,
    roles: Vec<Role>,
    load_rate: f64,
    load_generation: u64,
    load_counter: u64,
    addressed_counter: u64,
    tamper_after_approval: Vec<String>,
    claims: Vec<(usize, Claim)>,
    /// Claims whose anchor the insurer's manager has not stored yet.
    open_claims: Vec<usize>,
    slot: u64,
    binary_rng: ChaCha8Rng,
}

fn rejection_label(r: &BlockRejection) -> &'static str {
    match r {
        BlockRejection::BrokenLinkage => "broken_linkage",
        BlockRejection::BadGeneratorSig => "bad_generator_sig",
        BlockRejection::BadTransaction(_) => "bad_transaction",
    }
}

fn cloud_label(e: CloudError) -> &'static str {
    match e {
        CloudError::UnknownAccount => "unknown_account",
        CloudError::BadProof => "bad_proof",
        CloudError::AccessDenied => "access_denied",
        CloudError::NotFound => "not_found",
        CloudError::AccountExists => "account_exists",
    }
}

impl World {
    /// Builds actors and the link model. The config must already be valid.
    pub fn build(cfg: &ScenarioConfig) -> (World, Simnet<Msg>) {
        let seed = cfg.seed;
        let topo = &cfg.topology;
        let net_cfg = &cfg.network;
        let obm_count = topo.obms;
        let n_vehicles = topo.vehicles;

        let mut roles: Vec<Role> = (0..obm_count).map(Role::Obm).collect();
        roles.extend((0..n_vehicles).map(Role::Vehicle));
        let oem_node = NodeId(roles.len() as u32);
        roles.push(Role::Oem);
        let provider_node = NodeId(roles.len() as u32);
        roles.push(Role::Provider);
        let insurer_node = NodeId(roles.len() as u32);
        roles.push(Role::Insurer);
        let first_attacker = roles.len();
        roles.extend((0..cfg.attacker_count()).map(Role::Attacker));
        let node_count = roles.len();

        let ca = CertificateAuthority::new(derive_seed(seed, "ca"));
        let mut cloud = CloudStore::new(derive_seed(seed, "cloud"));
        cloud.retain_on_close = cfg.cloud.retain_on_close;

        let account = |label: &str| CloudCredentials {
            account_id: label.to_string(),
            keypair: generate_keypair(derive_seed(seed, &format!("account/{label}"))),
        };
        let provider_acct = account("provider");
        cloud
            .create_account(
                "provider",
                provider_acct.keypair.public,
                vec![Grant::write("sw/*"), Grant::write("manifest/*")],
            )
            .expect("fresh store");
        let oem_acct = account("oem");
        cloud
            .create_account("oem", oem_acct.keypair.public, vec![Grant::read("sw/*"), Grant::read("manifest/*")])
            .expect("fresh store");
        let provider =
            SwProvider::new("provider", ca.certify("provider", derive_seed(seed, "key/provider")), provider_acct);
        let mut oem = Oem::new("oem", ca.certify("oem", derive_seed(seed, "key/oem")), oem_acct);
        oem.trust_provider(provider.keys.certificate().expect("certified"), &ca.public_key());
        let insurer = Insurer::new(
            "insurer",
            ca.certify("insurer", derive_seed(seed, "key/insurer")),
            derive_seed(seed, "insurer"),
        );
        let oem_cert = oem.keys.certificate().expect("certified").clone();

        let params = cfg.ledger.clone();
        let mut obms = Vec::with_capacity(obm_count);
        let mut generator_of = BTreeMap::new();
        let order: Vec<NodeId> = (0..obm_count as u32).map(NodeId).collect();
        for i in 0..obm_count {
            let kp = generate_keypair(derive_seed(seed, &format!("key/obm{i}")));
            generator_of.insert(kp.public, i);
            let mut obm = ObmState::new(
                NodeId(i as u32),
                kp,
                params.clone(),
                obm_count,
                derive_seed(seed, &format!("sample/obm{i}")),
            );
            obm.peers = order.iter().copied().filter(|p| p.0 as usize != i).collect();
            obm.byzantine = topo.byzantine.contains(&i);
            obms.push(obm);
        }
        let honest: Vec<bool> = obms.iter().map(|o| !o.byzantine).collect();

        let mut vehicles = Vec::with_capacity(n_vehicles);
        for i in 0..n_vehicles {
            let node = NodeId((obm_count + i) as u32);
            let name = vehicle_name(i);
            let mut state = VehicleState::new(
                node,
                &name,
                derive_seed(seed, &format!("vehicle/{name}")),
                &oem_cert,
                &ca.public_key(),
                NodeId(topo.obm_of_vehicle(i) as u32),
                cfg.vehicles.params(),
            )
            .expect("OEM certificate issued by the scenario CA");
            let acct = account(&format!("wrsu-{name}"));
            cloud
                .create_account(
                    &acct.account_id,
                    acct.keypair.public,
                    vec![Grant::read("sw/*"), Grant::read("manifest/*")],
                )
                .expect("unique vehicle names");
            state.cloud_account = Some(acct);
            vehicles.push(VehicleSlot { state, seen_updates: BTreeSet::new(), uploaded: 0 });
        }

        let mut attackers = Vec::new();
        let mut attacker_base = BTreeMap::new();
        for (d_idx, d) in cfg.script.iter().enumerate() {
            let (count, target, interval, tx_count, authorized) = match d {
                Directive::StartDdos { attackers: a, tx_per_attacker, target, interval, authorized, .. } => (
                    *a,
                    parse_vehicle_name(target, n_vehicles).expect("validated"),
                    *interval,
                    *tx_per_attacker,
                    *authorized,
                ),
                Directive::ImpersonateUpdate { .. } => (1, 0, 1.0, 0, 0),
                _ => continue,
            };
            attacker_base.insert(d_idx, attackers.len());
            for k in 0..count {
                let idx = attackers.len();
                let node = NodeId((first_attacker + idx) as u32);
                let a_seed = derive_seed(seed, &format!("attacker/{idx}"));
                let a = Attacker {
                    node,
                    obm: idx % obm_count,
                    key: generate_keypair(a_seed),
                    seed: a_seed,
                    target,
                    remaining: tx_count,
                    interval,
                    authorized: k < authorized,
                    sent: 0,
                };
                if a.authorized {
                    vehicles[target].state.requesters.push(a.key.public);
                }
                attackers.push(a);
            }
        }

        let mut links = LinkModel::new(net_cfg.jitter);
        for a in 0..obm_count {
            for b in (a + 1)..obm_count {
                links.set_symmetric(0.0, order[a], order[b], net_cfg.obm_delay).expect("positive delay");
            }
        }
        let member_obm = |role: Role| -> Option<usize> {
            match role {
                Role::Obm(_) => None,
                Role::Vehicle(i) => Some(topo.obm_of_vehicle(i)),
                Role::Oem => Some(topo.oem_obm),
                Role::Provider => Some(topo.provider_obm),
                Role::Insurer => Some(topo.insurer_obm),
                Role::Attacker(i) => Some(attackers[i].obm),
            }
        };
        for (idx, role) in roles.iter().enumerate() {
            if let Some(home) = member_obm(*role) {
                for (j, obm) in order.iter().enumerate() {
                    let d = if j == home { net_cfg.member_delay } else { net_cfg.far_delay };
                    links.set_symmetric(0.0, NodeId(idx as u32), *obm, d).expect("positive delay");
                }
            }
        }

        let net = Simnet::new(derive_seed(seed, "net"), node_count, links);
        let world = World {
            cfg: cfg.clone(),
            trace: Trace::new(),
            obms,
            order,
            honest,
            generator_of,
            vehicles,
            oem,
            provider,
            insurer,
            cloud,
            oem_node,
            provider_node,
            insurer_node,
            attackers,
            attacker_base,
            roles,
            load_rate: 0.0,
            load_generation: 0,
            load_counter: 0,
            addressed_counter: 0,
            tamper_after_approval: Vec::new(),
            claims: Vec::new(),
            open_claims: Vec::new(),
            slot: 0,
            binary_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "binaries")),
        };
        (world, net)
    }

    pub fn vehicle(&self, i: usize) -> &VehicleState {
        &self.vehicles[i].state
    }

    pub fn is_honest(&self, obm: usize) -> bool {
        self.honest[obm]
    }

    fn name(&self, node: NodeId) -> String {
        match self.roles[node.0 as usize] {
            Role::Obm(i) => format!("obm{i}"),
            Role::Vehicle(i) => vehicle_name(i),
            Role::Oem => "oem".into(),
            Role::Provider => "provider".into(),
            Role::Insurer => "insurer".into(),
            Role::Attacker(i) => format!("attacker{i}"),
        }
    }

    fn emit(&mut self, now: SimTime, actor: &str, kind: &str, fields: Value) {
        self.trace.emit(now, actor, kind, fields);
    }

    fn obm_node(&self, i: usize) -> NodeId {
        self.order[i]
    }

    fn send(&self, net: &mut Simnet<Msg>, from: NodeId, to: NodeId, msg: Msg) {
        net.send(from, to, msg).expect("links exist between every member and every manager");
    }

    /// Joins, key uploads, the first block slot, vehicle timers and the script.
    pub fn start(&mut self, net: &mut Simnet<Msg>) {
        let cfg = self.cfg.clone();
        let now = net.now();
        let honest: Vec<String> = (0..self.obms.len()).filter(|i| self.honest[*i]).map(|i| format!("obm{i}")).collect();
        self.emit(
            now,
            "world",
            "scenario",
            json!({
                "name": cfg.name,
                "seed": cfg.seed,
                "duration": cfg.duration,
                "obms": cfg.topology.obms,
                "vehicles": cfg.topology.vehicles,
                "honest": honest,
                "block_size": cfg.ledger.block_size,
                "utilization_low": cfg.ledger.utilization_low,
                "utilization_high": cfg.ledger.utilization_high,
                "expect": cfg.expect,
                "expect_min": cfg.expect_min,
                "expect_max": cfg.expect_max,
            }),
        );

        for i in 0..self.vehicles.len() {
            let v = &self.vehicles[i].state;
            let (node, obm, entries) = (v.node_id, v.obm_id, v.access_entries());
            self.join(net, node, obm, MemberRole::Vehicle, &entries);
        }
        let oem_pk = self.oem.public_key();
        let provider_pk = self.provider.public_key();
        let topo = cfg.topology.clone();
        self.join(net, self.oem_node, self.obm_node(topo.oem_obm), MemberRole::Service, &[(provider_pk, oem_pk)]);
        self.join(
            net,
            self.provider_node,
            self.obm_node(topo.provider_obm),
            MemberRole::Service,
            &[(oem_pk, provider_pk)],
        );
        self.join(net, self.insurer_node, self.obm_node(topo.insurer_obm), MemberRole::Service, &[]);
        for i in 0..self.attackers.len() {
            let (node, obm) = (self.attackers[i].node, self.obm_node(self.attackers[i].obm));
            self.join(net, node, obm, MemberRole::Vehicle, &[]);
        }

        let slot_len = cfg.ledger.block_period / self.obms.len() as f64;
        net.schedule(self.order[0], slot_len, Msg::Timer(Timer::Slot(0)));

        let n = self.vehicles.len();
        let b = &cfg.vehicles;
        for i in 0..n {
            let node = self.vehicles[i].state.node_id;
            let stagger = (i + 1) as f64 / (n + 1) as f64;
            if b.record_interval > 0.0 {
                net.schedule(node, b.record_interval * stagger, Msg::Timer(Timer::Record(i)));
            }
            net.schedule(node, b.anchor_interval * (1.0 + stagger), Msg::Timer(Timer::Anchor(i)));
            if b.backup_interval > 0.0 {
                net.schedule(node, b.backup_interval * (1.0 + stagger), Msg::Timer(Timer::Backup(i)));
            }
            if b.handover_interval > 0.0 {
                net.schedule(node, b.handover_interval * (1.0 + stagger), Msg::Timer(Timer::Probe(i)));
            }
        }
        for (i, d) in cfg.script.iter().enumerate() {
            net.schedule_at(self.order[0], SimTime(d.at()), Msg::Timer(Timer::Directive(i)));
        }
    }

    fn join(
        &mut self,
        net: &mut Simnet<Msg>,
        member: NodeId,
        obm: NodeId,
        role: MemberRole,
        entries: &[(PublicKey, PublicKey)],
    ) {
        self.send(net, member, obm, Msg::Join(role));
        for (requester, member_pk) in entries {
            self.send(net, member, obm, Msg::KeyUpload { requester: *requester, member: *member_pk });
        }
    }

    fn submit(&mut self, net: &mut Simnet<Msg>, from: NodeId, obm: NodeId, tx: Transaction, what: &str) {
        let now = net.now();
        let actor = self.name(from);
        self.emit(
            now,
            &actor,
            "submit",
            json!({"t_id": tx.t_id, "tag": tx.payload_tag, "purpose": what, "obm": self.name(obm)}),
        );
        self.send(net, from, obm, Msg::Tx(tx));
    }

    fn apply_routing(
        &mut self,
        net: &mut Simnet<Msg>,
        obm: usize,
        tx: &Transaction,
        out: &RoutingOutcome,
        stage: &str,
    ) {
        let now = net.now();
        let me = self.obm_node(obm);
        let actor = format!("obm{obm}");
        if out.parked {
            self.emit(now, &actor, "park", json!({"t_id": tx.t_id}));
            return;
        }
        if let Some(reason) = out.dropped {
            self.emit(now, &actor, "drop", json!({"t_id": tx.t_id, "reason": reason.label(), "stage": stage}));
            return;
        }
        let deliver: Vec<String> = out.deliver_to.iter().map(|n| self.name(*n)).collect();
        self.emit(
            now,
            &actor,
            "route",
            json!({
                "t_id": tx.t_id,
                "deliver_to": deliver,
                "notify": out.notify.len(),
                "broadcast": out.broadcast,
                "pooled": out.pooled,
                "promoted": stage == "promotion",
            }),
        );
        for m in &out.deliver_to {
            self.send(net, me, *m, Msg::Deliver(tx.clone()));
        }
        for v in &out.notify {
            self.send(net, me, *v, Msg::Notify(tx.clone()));
        }
        if out.broadcast {
            for peer in self.obms[obm].peers.clone() {
                self.send(net, me, peer, Msg::Tx(tx.clone()));
            }
        }
    }

    fn apply_promoted(&mut self, net: &mut Simnet<Msg>, obm: usize, promoted: Vec<(Transaction, RoutingOutcome)>) {
        for (tx, out) in promoted {
            self.apply_routing(net, obm, &tx, &out, "promotion");
        }
    }

    fn broadcast_block(&mut self, net: &mut Simnet<Msg>, obm: usize, block: Block, flush: bool) {
        let now = net.now();
        if obm == self.cfg.topology.insurer_obm {
            self.settle_claims(now, false);
        }
        let txs: Vec<Digest> = block.transactions.iter().map(|t| t.t_id).collect();
        self.emit(
            now,
            &format!("obm{obm}"),
            "block_formed",
            json!({
                "block_id": block.block_id,
                "prev": block.prev_block_hash,
                "height": block.height,
                "txs": txs,
                "flush": flush,
            }),
        );
        let me = self.obm_node(obm);
        for peer in self.obms[obm].peers.clone() {
            self.send(net, me, peer, Msg::Block(block.clone()));
        }
    }

    fn expire_all(&mut self, now: SimTime, final_sweep: bool) {
        for i in 0..self.obms.len() {
            let expired =
                if final_sweep { self.obms[i].expire_all_parked() } else { self.obms[i].expire_parked(now.0) };
            for t_id in expired {
                self.emit(
                    now,
                    &format!("obm{i}"),
                    "drop",
                    json!({"t_id": t_id, "reason": "invalid_missing_predecessor", "stage": "expiry"}),
                );
            }
        }
    }

    fn on_slot(&mut self, net: &mut Simnet<Msg>, slot: u64) {
        let now = net.now();
        self.slot = slot;
        self.expire_all(now, false);
        let holder = (slot % self.obms.len() as u64) as usize;
        let order = self.order.clone();
        let tick = self.obms[holder].on_period_tick(slot, &order, now.0);
        if let Some(step) = tick.dtm {
            let rate = self.obms[holder].dtm().observed_tx_rate;
            self.emit(
                now,
                &format!("obm{holder}"),
                "dtm",
                json!({
                    "slot": slot,
                    "rate": rate,
                    "utilization": step.utilization,
                    "period_before": step.period_before,
                    "period_after": step.period_after,
                }),
            );
        }
        if let Some(block) = tick.block {
            self.broadcast_block(net, holder, block, false);
        }
        self.apply_promoted(net, holder, tick.promoted);

        let block_size = self.cfg.ledger.block_size;
        let backlog = (0..self.obms.len()).any(|i| self.honest[i] && self.obms[i].pool().len() >= block_size);
        if now.0 < self.cfg.duration || backlog {
            // slot length follows the period of the manager that just acted
            let slot_len = self.obms[holder].dtm().block_period / self.obms.len() as f64;
            let next = ((slot + 1) % self.obms.len() as u64) as usize;
            net.schedule(self.order[next], slot_len, Msg::Timer(Timer::Slot(slot + 1)));
        }
    }

    fn periodic(&self, net: &mut Simnet<Msg>, node: NodeId, interval: f64, timer: Timer) {
        if net.now().0 + interval <= self.cfg.duration {
            net.schedule(node, interval, Msg::Timer(timer));
        }
    }

    fn on_record(&mut self, net: &mut Simnet<Msg>, i: usize) {
        let now = net.now();
        let node = self.vehicles[i].state.node_id;
        let rng = net.rng(node);
        let category = RecordCategory::ALL[rng.gen_range(0..RecordCategory::ALL.len())];
        let mut payload = vec![0u8; 8];
        rng.fill_bytes(&mut payload);
        let record = self.vehicles[i].state.record(now.0, category, payload).clone();
        self.emit(now, &vehicle_name(i), "record", json!({"record": record}));
        self.periodic(net, node, self.cfg.vehicles.record_interval, Timer::Record(i));
    }

    fn vehicle_obm(&self, i: usize) -> NodeId {
        self.vehicles[i].state.obm_id
    }

    fn on_anchor(&mut self, net: &mut Simnet<Msg>, i: usize) {
        let now = net.now();
        let v = &mut self.vehicles[i].state;
        let tx = v.anchor_storage();
        let records = v.in_vehicle_storage.len();
        let (node, obm) = (v.node_id, v.obm_id);
        self.emit(
            now,
            &vehicle_name(i),
            "anchor",
            json!({"t_id": tx.t_id, "tag": tx.payload_tag, "digest": tx.payload_digest, "signer": tx.pk_1, "records": records}),
        );
        self.submit(net, node, obm, tx, "anchor");
        self.periodic(net, node, self.cfg.vehicles.anchor_interval, Timer::Anchor(i));
    }

    fn on_backup(&mut self, net: &mut Simnet<Msg>, i: usize) {
        let now = net.now();
        let v = &mut self.vehicles[i].state;
        let moving = v.in_vehicle_storage.len();
        let (node, obm) = (v.node_id, v.obm_id);
        if let Some(tx) = v.transfer_to_backup() {
            let backup_len = v.backup_store.len();
            self.emit(
                now,
                &vehicle_name(i),
                "backup",
                json!({"t_id": tx.t_id, "tag": tx.payload_tag, "digest": tx.payload_digest, "signer": tx.pk_1, "moved": moving, "records": backup_len}),
            );
            self.submit(net, node, obm, tx, "backup");
        }
        self.periodic(net, node, self.cfg.vehicles.backup_interval, Timer::Backup(i));
    }

    fn on_upload(&mut self, net: &mut Simnet<Msg>, i: usize) {
        let now = net.now();
        let name = vehicle_name(i);
        let slot = &mut self.vehicles[i];
        let Some(acct) = slot.state.insurance_account.clone() else {
            return;
        };
        let node = slot.state.node_id;
        let driving: Vec<StorageRecord> = slot
            .state
            .in_vehicle_storage
            .iter()
            .chain(slot.state.backup_store.iter())
            .filter(|r| matches!(r.category, RecordCategory::Braking | RecordCategory::Speed))
            .cloned()
            .collect();
        let object = format!("ins/{}/{}", acct.account_id, slot.uploaded);
        let result = acct.login(&mut self.cloud).and_then(|s| {
            let body = serde_json::to_vec(&driving).expect("records serialize");
            self.cloud.put(s, &object, body)
        });
        match result {
            Ok(()) => {
                slot.uploaded += 1;
                self.emit(
                    now,
                    &name,
                    "upload",
                    json!({"account": acct.account_id, "object": object, "records": driving.len()}),
                );
                self.periodic(net, node, self.cfg.vehicles.upload_interval, Timer::Upload(i));
            }
            Err(e) => {
                if e == CloudError::UnknownAccount {
                    // service withdrawn: stop streaming and stop signing with the account key
                    slot.state.insurance_account = None;
                }
                self.emit(now, &name, "cloud_denied", json!({"account": acct.account_id, "reason": cloud_label(e)}));
            }
        }
    }

    fn on_probe(&mut self, net: &mut Simnet<Msg>, i: usize) {
        let now = net.now();
        let candidates = self.order.clone();
        let m = self.cfg.vehicles.probe_count;
        let decision = {
            let v = &self.vehicles[i].state;
            let node = v.node_id;
            v.evaluate_handover(&candidates, |obm| {
                net.probe_delay(node, obm, m).expect("member links to every manager")
            })
        };
        let delays: BTreeMap<String, f64> = decision.delays.iter().map(|(n, d)| (self.name(*n), *d)).collect();
        self.emit(now, &vehicle_name(i), "probe", json!({"current": self.name(decision.current), "delays": delays}));
        if let Some(target) = decision.target {
            let v = &mut self.vehicles[i].state;
            let old = v.apply_handover(target);
            let (node, entries) = (v.node_id, v.access_entries());
            self.emit(
                now,
                &vehicle_name(i),
                "handover",
                json!({"old": self.name(old), "new": self.name(target), "delays": delays}),
            );
            self.join(net, node, target, MemberRole::Vehicle, &entries);
            self.send(net, node, old, Msg::Disconnect);
        }
        let node = self.vehicles[i].state.node_id;
        self.periodic(net, node, self.cfg.vehicles.handover_interval, Timer::Probe(i));
    }

    fn on_download(&mut self, net: &mut Simnet<Msg>, i: usize, tx: Transaction) {
        let now = net.now();
        let name = vehicle_name(i);
        match self.vehicles[i].state.handle_update_notification(&tx, &mut self.cloud) {
            Ok(installed) => {
                self.emit(now, &name, "update_verified", json!({"t_id": tx.t_id}));
                let ecu = self.vehicles[i]
                    .state
                    .installed_sw
                    .iter()
                    .find(|(_, sw)| **sw == installed)
                    .map(|(ecu, _)| ecu.clone())
                    .unwrap_or_default();
                self.emit(
                    now,
                    &name,
                    "installed",
                    json!({"t_id": tx.t_id, "ecu": ecu, "version": installed.version, "digest": installed.digest}),
                );
            }
            Err(r) => {
                self.emit(now, &name, "update_rejected", json!({"t_id": tx.t_id, "reason": r.label()}));
            }
        }
    }

    fn on_member_message(&mut self, net: &mut Simnet<Msg>, node: NodeId, msg: Msg) {
        let now = net.now();
        let actor = self.name(node);
        match (self.roles[node.0 as usize], msg) {
            (Role::Vehicle(i), Msg::Deliver(tx)) => {
                let count = self.vehicles[i].state.receive_addressed(&tx);
                self.emit(now, &actor, "deliver", json!({"t_id": tx.t_id, "count": count, "pending": tx.is_pending()}));
            }
            (Role::Vehicle(i), Msg::Notify(tx)) => {
                if !self.vehicles[i].seen_updates.insert(tx.t_id) {
                    self.emit(now, &actor, "update_duplicate", json!({"t_id": tx.t_id}));
                    return;
                }
                self.emit(now, &actor, "update_received", json!({"t_id": tx.t_id}));
                net.schedule(
                    node,
                    self.cfg.vehicles.download_delay,
                    Msg::Timer(Timer::Download { vehicle: i, tx: Box::new(tx) }),
                );
            }
            (Role::Oem, Msg::Deliver(tx)) => {
                if !(tx.is_pending() && tx.pk_2 == Some(self.oem.public_key())) {
                    self.emit(now, &actor, "deliver", json!({"t_id": tx.t_id, "count": 1, "pending": tx.is_pending()}));
                    return;
                }
                match self.oem.oem_approve(&tx, &mut self.cloud) {
                    Ok(full) => {
                        self.emit(now, &actor, "countersigned", json!({"pending": tx.t_id, "t_id": full.t_id}));
                        let obm = self.obm_node(self.cfg.topology.oem_obm);
                        self.submit(net, node, obm, full, "countersigned");
                        for object in std::mem::take(&mut self.tamper_after_approval) {
                            self.tamper(now, &object);
                        }
                    }
                    Err(e) => {
                        self.emit(
                            now,
                            &actor,
                            "approval_rejected",
                            json!({"t_id": tx.t_id, "reason": format!("{e:?}")}),
                        );
                    }
                }
            }
            (Role::Provider, Msg::Deliver(tx)) => {
                self.provider.observe_countersigned(&tx);
                self.emit(now, &actor, "deliver", json!({"t_id": tx.t_id, "count": 1, "pending": tx.is_pending()}));
            }
            (_, Msg::Deliver(tx)) => {
                self.emit(now, &actor, "deliver", json!({"t_id": tx.t_id, "count": 1, "pending": tx.is_pending()}));
            }
            // attackers and service actors ignore update notices
            (_, Msg::Notify(_)) => {}
            (role, other) => unreachable!("{role:?} cannot receive {other:?}"),
        }
    }

    fn on_obm_message(&mut self, net: &mut Simnet<Msg>, obm: usize, source: Option<NodeId>, msg: Msg) {
        let now = net.now();
        let actor = format!("obm{obm}");
        let src = source.expect("network messages have a source");
        match msg {
            Msg::Tx(tx) => {
                let origin = match self.roles[src.0 as usize] {
                    Role::Obm(_) => Origin::PeerBroadcast(src),
                    _ => Origin::Member(src),
                };
                let out = self.obms[obm].receive_transaction(tx.clone(), origin, now.0);
                self.apply_routing(net, obm, &tx, &out, "arrival");
            }
            Msg::Block(block) => {
                let receipt = self.obms[obm].on_block_received(&block);
                let generator =
                    self.generator_of.get(&block.generator_pk).map(|g| format!("obm{g}")).unwrap_or_default();
                let verdict = match &receipt.check.verdict {
                    Ok(()) => "ok",
                    Err(r) => rejection_label(r),
                };
                self.emit(
                    now,
                    &actor,
                    "block_validated",
                    json!({
                        "generator": generator,
                        "block_id": block.block_id,
                        "height": block.height,
                        "txs": block.transactions.len(),
                        "verification_count": receipt.check.verification_count,
                        "verdict": verdict,
                        "appended": receipt.appended,
                    }),
                );
                if receipt.appended && obm == self.cfg.topology.insurer_obm {
                    self.settle_claims(now, false);
                }
                self.apply_promoted(net, obm, receipt.promoted);
            }
            Msg::Join(role) => {
                self.obms[obm].join(src, role);
                let member = self.name(src);
                self.emit(now, &actor, "join", json!({"member": member}));
            }
            Msg::KeyUpload { requester, member } => {
                let ok = self.obms[obm].upload_key_pair(src, requester, member).is_ok();
                let m = self.name(src);
                self.emit(
                    now,
                    &actor,
                    "key_upload",
                    json!({"member": m, "requester": requester, "member_pk": member, "ok": ok}),
                );
            }
            Msg::Disconnect => {
                let removed = self.obms[obm].leave(src);
                let m = self.name(src);
                self.emit(now, &actor, "key_removed", json!({"member": m, "removed": removed}));
            }
            other => unreachable!("block manager cannot receive {other:?}"),
        }
    }

    fn tamper(&mut self, now: SimTime, object: &str) {
        let mut bytes = b"tampered:".to_vec();
        let mut noise = [0u8; 32];
        self.binary_rng.fill_bytes(&mut noise);
        bytes.extend_from_slice(&noise);
        let existed = self.cloud.tamper(object, bytes.clone());
        self.emit(
            now,
            "cloud",
            "cloud_tampered",
            json!({"object": object, "existed": existed, "digest": digest(&bytes)}),
        );
    }

    fn on_directive(&mut self, net: &mut Simnet<Msg>, idx: usize) {
        let now = net.now();
        let d = self.cfg.script[idx].clone();
        self.emit(now, "world", "directive", json!({"index": idx, "action": d.name()}));
        let n = self.vehicles.len();
        let vehicle = |name: &str| parse_vehicle_name(name, n).expect("validated");
        match d {
            Directive::PublishUpdate { ecu, version, size, .. } => {
                let mut binary = vec![0u8; size];
                self.binary_rng.fill_bytes(&mut binary);
                let oem_pk = self.oem.public_key();
                match self.provider.publish_update(&binary, &ecu, &version, &mut self.cloud, oem_pk) {
                    Ok(tx) => {
                        self.emit(
                            now,
                            "provider",
                            "published",
                            json!({"ecu": ecu, "version": version, "digest": tx.payload_digest, "t_id": tx.t_id}),
                        );
                        let obm = self.obm_node(self.cfg.topology.provider_obm);
                        self.submit(net, self.provider_node, obm, tx, "update");
                    }
                    Err(e) => self.emit(now, "provider", "publish_failed", json!({"reason": e.to_string()})),
                }
            }
            Directive::TamperCloudObject { object, after_approval, .. } => {
                if after_approval {
                    self.tamper_after_approval.push(object);
                } else {
                    self.tamper(now, &object);
                }
            }
            Directive::ImpersonateUpdate { mode, ecu, version, .. } => {
                let a_idx = self.attacker_base[&idx];
                let tx = self.forge_update(a_idx, mode, &ecu, &version);
                let attacker = &self.attackers[a_idx];
                let (node, obm) = (attacker.node, self.obm_node(attacker.obm));
                let actor = self.name(node);
                self.emit(now, &actor, "attack_tx", json!({"t_id": tx.t_id, "attack": "impersonation", "mode": mode}));
                self.send(net, node, obm, Msg::Tx(tx));
            }
            Directive::StartDdos { attackers, .. } => {
                let base = self.attacker_base[&idx];
                for k in 0..attackers {
                    let a = &self.attackers[base + k];
                    let offset = a.interval * k as f64 / attackers as f64;
                    net.schedule(a.node, offset, Msg::Timer(Timer::Attack(base + k)));
                }
            }
            Directive::OpenAccount { vehicle: v, .. } => {
                let i = vehicle(&v);
                let creds = self.insurer.open_account(&v, &mut self.cloud);
                self.emit(
                    now,
                    "insurer",
                    "account_opened",
                    json!({"vehicle": v, "account": creds.account_id, "pk": creds.keypair.public}),
                );
                self.vehicles[i].state.insurance_account = Some(creds);
                let node = self.vehicles[i].state.node_id;
                net.schedule(node, self.cfg.vehicles.upload_interval, Msg::Timer(Timer::Upload(i)));
            }
            Directive::CloseAccount { vehicle: v, .. } => {
                let i = vehicle(&v);
                let account = self.vehicles[i].state.insurance_account.as_ref().map(|a| a.account_id.clone());
                let closed = match &account {
                    Some(id) => self.insurer.close_account(id, &mut self.cloud),
                    None => false,
                };
                self.emit(
                    now,
                    "insurer",
                    "account_closed",
                    json!({"vehicle": v, "account": account, "closed": closed}),
                );
            }
            Directive::TriggerAccident { vehicle: v, tamper_claim, .. } => {
                self.file_claim(net, vehicle(&v), tamper_claim)
            }
            Directive::MoveVehicle { vehicle: v, delays, .. } => {
                let i = vehicle(&v);
                let node = self.vehicles[i].state.node_id;
                for (j, d) in delays.iter().enumerate() {
                    let obm = self.order[j];
                    net.links_mut().set_symmetric(now.0, node, obm, *d).expect("validated delays");
                }
                self.emit(now, &v, "move", json!({"delays": delays}));
            }
            Directive::SetLoad { rate, .. } => {
                self.load_rate = rate;
                self.load_generation += 1;
                self.emit(now, "world", "load_set", json!({"rate": rate}));
                if rate > 0.0 {
                    net.schedule(self.order[0], 1.0 / rate, Msg::Timer(Timer::Load(self.load_generation)));
                }
            }
            Directive::SendAddressed { vehicle: v, count, .. } => {
                let i = vehicle(&v);
                let target = self.vehicles[i].state.access.public;
                for _ in 0..count {
                    self.addressed_counter += 1;
                    let body = digest(format!("addressed/{}", self.addressed_counter).as_bytes());
                    let key = self.oem.keys.certified_key().expect("certified");
                    let tx =
                        build_transaction(TxKind::Multisig, Digest::ZERO, body, PayloadTag::Generic, key, Some(target))
                            .expect("multisig with recipient");
                    self.emit(now, "oem", "addressed_tx", json!({"vehicle": v, "t_id": tx.t_id}));
                    let obm = self.obm_node(self.cfg.topology.oem_obm);
                    self.submit(net, self.oem_node, obm, tx, "addressed");
                }
            }
        }
    }

    fn forge_update(&mut self, a_idx: usize, mode: ImpersonationMode, ecu: &str, version: &str) -> Transaction {
        let a = &self.attackers[a_idx];
        let fake = digest(format!("rogue/{ecu}/{version}").as_bytes());
        let oem_pk = self.oem.public_key();
        match mode {
            ImpersonationMode::SelfSigned => {
                let accomplice = generate_keypair(derive_seed(a.seed, "accomplice"));
                let p = build_transaction(
                    TxKind::Multisig,
                    Digest::ZERO,
                    fake,
                    PayloadTag::SwUpdate,
                    &a.key,
                    Some(accomplice.public),
                )
                .expect("multisig with recipient");
                countersign(&p, &accomplice).expect("addressed to accomplice")
            }
            ImpersonationMode::ForgedOem => {
                let mut tx =
                    build_transaction(TxKind::Multisig, Digest::ZERO, fake, PayloadTag::SwUpdate, &a.key, Some(oem_pk))
                        .expect("multisig with recipient");
                // the attacker cannot produce the OEM's signature; it signs with its own key
                tx.sig_2 = Some(a.key.sign(&Transaction::signing_body(
                    &tx.p_t_id,
                    &tx.payload_digest,
                    &tx.pk_1,
                    tx.pk_2.as_ref(),
                )));
                tx.t_id = tx.compute_t_id();
                tx
            }
            ImpersonationMode::RogueProvider => {
                build_transaction(TxKind::Multisig, Digest::ZERO, fake, PayloadTag::SwUpdate, &a.key, Some(oem_pk))
                    .expect("multisig with recipient")
            }
        }
    }

    fn on_attack(&mut self, net: &mut Simnet<Msg>, a_idx: usize) {
        let now = net.now();
        let a = &mut self.attackers[a_idx];
        if a.remaining == 0 {
            return;
        }
        a.remaining -= 1;
        a.sent += 1;
        let key = if a.authorized {
            a.key.clone()
        } else {
            generate_keypair(derive_seed(a.seed, &format!("fresh/{}", a.sent)))
        };
        let target_pk = self.vehicles[a.target].state.access.public;
        let body = digest(format!("attack/{a_idx}/{}", a.sent).as_bytes());
        let tx = build_transaction(TxKind::Multisig, Digest::ZERO, body, PayloadTag::Generic, &key, Some(target_pk))
            .expect("multisig with recipient");
        let (node, obm, authorized, interval, remaining, target) =
            (a.node, self.order[a.obm], a.authorized, a.interval, a.remaining, a.target);
        let actor = self.name(node);
        self.emit(
            now,
            &actor,
            "attack_tx",
            json!({"t_id": tx.t_id, "attack": "ddos", "target": vehicle_name(target), "authorized": authorized}),
        );
        self.send(net, node, obm, Msg::Tx(tx));
        if remaining > 0 {
            net.schedule(node, interval, Msg::Timer(Timer::Attack(a_idx)));
        }
    }

    fn on_load(&mut self, net: &mut Simnet<Msg>, generation: u64) {
        if generation != self.load_generation || self.load_rate <= 0.0 || net.now().0 > self.cfg.duration {
            return;
        }
        let n = self.vehicles.len();
        if n > 0 {
            let i = (self.load_counter % n as u64) as usize;
            self.load_counter += 1;
            let body = digest(format!("load/{}", self.load_counter).as_bytes());
            let tx = self.vehicles[i].state.next_transaction(TxKind::SingleSig, PayloadTag::Generic, body, None, false);
            let (node, obm) = (self.vehicles[i].state.node_id, self.vehicle_obm(i));
            self.submit(net, node, obm, tx, "load");
        }
        net.schedule(self.order[0], 1.0 / self.load_rate, Msg::Timer(Timer::Load(generation)));
    }

    fn file_claim(&mut self, net: &mut Simnet<Msg>, i: usize, tamper: bool) {
        let now = net.now();
        let name = vehicle_name(i);
        let v = &self.vehicles[i].state;
        let Some(acct) = v.insurance_account.clone() else {
            self.emit(now, &name, "claim_skipped", json!({"reason": "no_account"}));
            return;
        };
        let Some(anchor) = v.anchors.iter().rev().find(|a| a.signer == acct.keypair.public).cloned() else {
            self.emit(now, &name, "claim_skipped", json!({"reason": "no_anchor"}));
            return;
        };
        let mut records = anchor.records.clone();
        if tamper {
            let pick = records.iter().position(|r| r.category == RecordCategory::Speed).unwrap_or(0);
            match records.get_mut(pick) {
                Some(r) => r.payload[0] ^= 0x01,
                None => {
                    records.push(StorageRecord { timestamp: now.0, category: RecordCategory::Speed, payload: vec![0] })
                }
            }
        }
        let claim = Claim {
            account_id: acct.account_id.clone(),
            anchor_t_id: anchor.t_id,
            records_digest: storage_digest(&records),
        };
        let idx = self.claims.len();
        self.emit(
            now,
            &name,
            "claim_filed",
            json!({"claim": idx, "account": acct.account_id, "anchor": anchor.t_id, "tampered": tamper, "records": records}),
        );
        self.claims.push((i, claim));
        self.open_claims.push(idx);
        self.settle_claims(now, false);
    }

    /// Decides every open claim whose anchor the insurer's manager now
    /// stores; with `force`, decides the rest as well.
    fn settle_claims(&mut self, now: SimTime, force: bool) {
        let chain = self.obms[self.cfg.topology.insurer_obm].chain();
        let (ready, waiting): (Vec<usize>, Vec<usize>) =
            self.open_claims.iter().partition(|c| force || chain.contains_tx(&self.claims[**c].1.anchor_t_id));
        self.open_claims = waiting;
        for idx in ready {
            let (vehicle, claim) = &self.claims[idx];
            let verdict = self.insurer.verify_claim(claim, self.obms[self.cfg.topology.insurer_obm].chain());
            let reason = verdict.err().map(|r| r.label());
            let fields =
                json!({"claim": idx, "vehicle": vehicle_name(*vehicle), "accepted": verdict.is_ok(), "reason": reason});
            self.emit(now, "insurer", "claim_verdict", fields);
        }
    }

    /// Drain step once the queue is empty: the next honest manager with a
    /// non-empty pool cuts a final short block.
    fn flush_one(&mut self, net: &mut Simnet<Msg>) -> bool {
        let n = self.obms.len();
        for k in 1..=n {
            let i = ((self.slot + k as u64) % n as u64) as usize;
            if !self.honest[i] || self.obms[i].pool().is_empty() {
                continue;
            }
            self.slot += k as u64;
            let tick = self.obms[i].flush();
            if let Some(block) = tick.block {
                self.broadcast_block(net, i, block, true);
            }
            self.apply_promoted(net, i, tick.promoted);
            return true;
        }
        false
    }

    /// Final state records; called once after the loop stops.
    pub fn finish(&mut self, outcome: &RunOutcome) {
        let now = outcome.end_time;
        for i in 0..self.obms.len() {
            let o = &self.obms[i];
            let mut entries: BTreeMap<String, usize> = BTreeMap::new();
            for e in o.key_list().iter() {
                *entries.entry(self.name(e.member)).or_default() += 1;
            }
            let m = &o.metrics;
            let fields = json!({
                "honest": self.honest[i],
                "height": o.chain().len(),
                "head": o.chain().head_hash(),
                "fingerprint": o.chain().fingerprint(),
                "verify": o.chain().verify(),
                "tx_count": o.chain().tx_count(),
                "pool": o.pool().len(),
                "parked": o.parked_len(),
                "received": m.received,
                "routed": m.routed,
                "drops_invalid": m.drops.invalid,
                "drops_duplicate": m.drops.duplicate,
                "drops_no_match": m.drops.no_match,
                "blocks_appended": m.blocks_appended,
                "blocks_rejected": m.blocks_rejected,
                "block_period": o.dtm().block_period,
                "key_entries": entries,
            });
            self.emit(now, &format!("obm{i}"), "final_obm", fields);
        }
        for i in 0..self.vehicles.len() {
            let v = &self.vehicles[i].state;
            let fields = json!({
                "obm": self.name(v.obm_id),
                "installed": v.installed_sw,
                "anchors": v.anchors.len(),
                "records": v.in_vehicle_storage.len() + v.backup_store.len(),
            });
            self.emit(now, &vehicle_name(i), "final_vehicle", fields);
        }
        self.emit(
            now,
            "world",
            "end",
            json!({"quiescent": outcome.quiescent, "end_time": now.0, "events": outcome.events_dispatched}),
        );
    }
}

impl EventHandler<Msg> for World {
    fn handle(&mut self, net: &mut Simnet<Msg>, event: SimEvent<Msg>) {
        let target = event.target;
        match event.payload {
            Msg::Timer(timer) => match timer {
                Timer::Slot(s) => self.on_slot(net, s),
                Timer::Record(i) => self.on_record(net, i),
                Timer::Anchor(i) => self.on_anchor(net, i),
                Timer::Backup(i) => self.on_backup(net, i),
                Timer::Upload(i) => self.on_upload(net, i),
                Timer::Probe(i) => self.on_probe(net, i),
                Timer::Download { vehicle, tx } => self.on_download(net, vehicle, *tx),
                Timer::Directive(i) => self.on_directive(net, i),
                Timer::Load(g) => self.on_load(net, g),
                Timer::Attack(a) => self.on_attack(net, a),
            },
            msg => match self.roles[target.0 as usize] {
                Role::Obm(i) => self.on_obm_message(net, i, event.source, msg),
                _ => self.on_member_message(net, target, msg),
            },
        }
    }

    fn on_idle(&mut self, net: &mut Simnet<Msg>) -> bool {
        if self.flush_one(net) {
            return true;
        }
        self.expire_all(net.now(), true);
        self.settle_claims(net.now(), true);
        false
    }
}
