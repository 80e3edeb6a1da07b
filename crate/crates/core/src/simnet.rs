//! Deterministic discrete-event network.
//!
//! A single priority queue ordered by `(deliver_at, seq)` drives everything.
//! Link delays come from a per-pair schedule (vehicle movement is a schedule
//! change) plus seeded uniform jitter. Each ordered link is FIFO.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::crypto::digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

/// Simulated time in abstract units. Totally ordered (NaN never occurs).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimTime(pub f64);

impl Eq for SimTime {}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl SimTime {
    pub fn after(self, delay: f64) -> SimTime {
        SimTime(self.0 + delay)
    }
}

/// Derives an independent 64-bit seed for a named sub-stream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut input = seed.to_le_bytes().to_vec();
    input.extend_from_slice(label.as_bytes());
    let d = digest(&input);
    u64::from_le_bytes(d.0[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("no link from {0} to {1}")]
    NoLink(NodeId, NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("link delay must be positive, got {0}")]
    NonPositiveDelay(f64),
}

#[derive(Debug, Clone)]
pub struct SimEvent<M> {
    pub deliver_at: SimTime,
    pub seq: u64,
    pub source: Option<NodeId>,
    pub target: NodeId,
    pub payload: M,
}

struct Queued<M>(SimEvent<M>);

impl<M> PartialEq for Queued<M> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}
impl<M> Eq for Queued<M> {}
impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<M> Ord for Queued<M> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}
impl<M> Queued<M> {
    fn key(&self) -> (SimTime, u64) {
        (self.0.deliver_at, self.0.seq)
    }
}

/// Per ordered node pair: a time-indexed list of base delays.
#[derive(Debug, Clone, Default)]
pub struct LinkModel {
    schedule: BTreeMap<(NodeId, NodeId), Vec<(f64, f64)>>,
    pub jitter: f64,
}

impl LinkModel {
    pub fn new(jitter: f64) -> Self {
        LinkModel { schedule: BTreeMap::new(), jitter }
    }

    /// Sets the delay on both directions from `at` onward.
    pub fn set_symmetric(&mut self, at: f64, a: NodeId, b: NodeId, delay: f64) -> Result<(), SimError> {
        self.set(at, a, b, delay)?;
        self.set(at, b, a, delay)
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)] // negated so NaN fails too
    pub fn set(&mut self, at: f64, from: NodeId, to: NodeId, delay: f64) -> Result<(), SimError> {
        if !(delay > 0.0) {
            return Err(SimError::NonPositiveDelay(delay));
        }
        let entries = self.schedule.entry((from, to)).or_default();
        entries.push((at, delay));
        // stable sort keeps insertion order for equal times; last write wins
        entries.sort_by(|x, y| x.0.total_cmp(&y.0));
        Ok(())
    }

    pub fn has_link(&self, from: NodeId, to: NodeId) -> bool {
        self.schedule.contains_key(&(from, to))
    }

    /// Base delay in effect at `now`, if the link exists and has started.
    pub fn base_delay(&self, from: NodeId, to: NodeId, now: SimTime) -> Option<f64> {
        let entries = self.schedule.get(&(from, to))?;
        entries.iter().rev().find(|(at, _)| *at <= now.0).or(entries.first()).map(|&(_, d)| d)
    }

    pub fn sample(&self, from: NodeId, to: NodeId, now: SimTime, rng: &mut ChaCha8Rng) -> Option<f64> {
        let base = self.base_delay(from, to, now)?;
        if self.jitter > 0.0 {
            Some(base * (1.0 + self.jitter * rng.gen::<f64>()))
        } else {
            Some(base)
        }
    }

    /// Upper bound on any sampled delay for the pair, over the whole schedule.
    pub fn max_delay(&self, from: NodeId, to: NodeId) -> Option<f64> {
        self.schedule.get(&(from, to)).map(|e| e.iter().map(|&(_, d)| d).fold(0.0, f64::max) * (1.0 + self.jitter))
    }
}

/// Result of [`Simnet::run_until_quiescent`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOutcome {
    pub quiescent: bool,
    pub end_time: SimTime,
    pub events_dispatched: u64,
}

/// Receives events from the loop.
pub trait EventHandler<M> {
    fn handle(&mut self, net: &mut Simnet<M>, event: SimEvent<M>);

    /// Called when the queue drains. Returning true means more events were
    /// queued (e.g. an end-of-run flush) and the loop continues.
    fn on_idle(&mut self, _net: &mut Simnet<M>) -> bool {
        false
    }
}

pub struct Simnet<M> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued<M>>>,
    links: LinkModel,
    rngs: Vec<ChaCha8Rng>,
    fifo: BTreeMap<(NodeId, NodeId), SimTime>,
}

impl<M> Simnet<M> {
    /// `node_count` nodes, each with its own random stream derived from `seed`.
    pub fn new(seed: u64, node_count: usize, links: LinkModel) -> Self {
        let rngs =
            (0..node_count).map(|i| ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("node/{i}")))).collect();
        Simnet { now: SimTime(0.0), seq: 0, queue: BinaryHeap::new(), links, rngs, fifo: BTreeMap::new() }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn links(&self) -> &LinkModel {
        &self.links
    }

    pub fn links_mut(&mut self) -> &mut LinkModel {
        &mut self.links
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn rng(&mut self, node: NodeId) -> &mut ChaCha8Rng {
        &mut self.rngs[node.0 as usize]
    }

    fn push(&mut self, deliver_at: SimTime, source: Option<NodeId>, target: NodeId, payload: M) -> SimEvent<M>
    where
        M: Clone,
    {
        let ev = SimEvent { deliver_at, seq: self.seq, source, target, payload };
        self.seq += 1;
        self.queue.push(Reverse(Queued(ev.clone())));
        ev
    }

    /// Sends `payload` over the `from -> to` link.
    pub fn send(&mut self, from: NodeId, to: NodeId, payload: M) -> Result<SimEvent<M>, SimError>
    where
        M: Clone,
    {
        let idx = from.0 as usize;
        if idx >= self.rngs.len() {
            return Err(SimError::UnknownNode(from));
        }
        let now = self.now;
        let delay = self.links.sample(from, to, now, &mut self.rngs[idx]).ok_or(SimError::NoLink(from, to))?;
        let mut at = now.after(delay);
        if let Some(&last) = self.fifo.get(&(from, to)) {
            at = at.max(last);
        }
        self.fifo.insert((from, to), at);
        Ok(self.push(at, Some(from), to, payload))
    }

    /// Local timer for `target`, `delay` units from now.
    pub fn schedule(&mut self, target: NodeId, delay: f64, payload: M) -> SimEvent<M>
    where
        M: Clone,
    {
        let at = self.now.after(delay.max(0.0));
        self.push(at, None, target, payload)
    }

    /// Timer at an absolute time (clamped to now).
    pub fn schedule_at(&mut self, target: NodeId, at: SimTime, payload: M) -> SimEvent<M>
    where
        M: Clone,
    {
        let at = at.max(self.now);
        self.push(at, None, target, payload)
    }

    /// Mean of `m` sampled round trips between `from` and `to` at the current
    /// link schedule, drawn from `from`'s stream.
    pub fn probe_delay(&mut self, from: NodeId, to: NodeId, m: usize) -> Result<f64, SimError> {
        let m = m.max(1);
        let now = self.now;
        let rng = self.rngs.get_mut(from.0 as usize).ok_or(SimError::UnknownNode(from))?;
        let mut total = 0.0;
        for _ in 0..m {
            let there = self.links.sample(from, to, now, rng).ok_or(SimError::NoLink(from, to))?;
            let back = self.links.sample(to, from, now, rng).ok_or(SimError::NoLink(to, from))?;
            total += there + back;
        }
        Ok(total / m as f64)
    }

    pub fn next_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(q)| q.0.deliver_at)
    }

    pub fn pop(&mut self) -> Option<SimEvent<M>> {
        let Reverse(Queued(ev)) = self.queue.pop()?;
        debug_assert!(ev.deliver_at >= self.now, "event scheduled in the past");
        self.now = ev.deliver_at;
        Some(ev)
    }

    /// Dispatches events in `(deliver_at, seq)` order until the queue is empty
    /// (and the handler has nothing more to add) or the next event lies past
    /// `max_time`.
    pub fn run_until_quiescent<H: EventHandler<M>>(&mut self, handler: &mut H, max_time: f64) -> RunOutcome {
        let mut dispatched = 0;
        loop {
            match self.next_time() {
                Some(t) if t.0 > max_time => {
                    return RunOutcome { quiescent: false, end_time: self.now, events_dispatched: dispatched }
                }
                Some(_) => {
                    let ev = self.pop().expect("peeked");
                    dispatched += 1;
                    handler.handle(self, ev);
                }
                None => {
                    if !handler.on_idle(self) {
                        return RunOutcome { quiescent: true, end_time: self.now, events_dispatched: dispatched };
                    }
                }
            }
        }
    }
}

/// One line of the scenario trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub actor: String,
    pub kind: String,
    #[serde(flatten)]
    pub fields: Map<String, Value>,
}

impl TraceRecord {
    pub fn get(&self, key: &str) -> Option<&Value> {
        self.fields.get(key)
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        self.fields.get(key).and_then(Value::as_str)
    }

    pub fn f64(&self, key: &str) -> Option<f64> {
        self.fields.get(key).and_then(Value::as_f64)
    }

    pub fn u64(&self, key: &str) -> Option<u64> {
        self.fields.get(key).and_then(Value::as_u64)
    }

    pub fn bool(&self, key: &str) -> Option<bool> {
        self.fields.get(key).and_then(Value::as_bool)
    }
}

/// Line-delimited JSON event log.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

#[derive(Debug, Error)]
#[error("trace line {line}: {source}")]
pub struct TraceParseError {
    pub line: usize,
    #[source]
    pub source: serde_json::Error,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record; `fields` must serialize to a JSON object without
    /// `t`, `actor` or `kind` keys, which would shadow the record's own.
    pub fn emit<F: Serialize>(&mut self, t: SimTime, actor: &str, kind: &str, fields: F) {
        let fields = match serde_json::to_value(fields).expect("trace fields serialize") {
            Value::Object(map) => map,
            Value::Null => Map::new(),
            other => panic!("trace fields must be an object, got {other}"),
        };
        debug_assert!(
            !["t", "actor", "kind"].iter().any(|k| fields.contains_key(*k)),
            "{kind} event uses a reserved field name"
        );
        self.records.push(TraceRecord { t: t.0, actor: actor.to_owned(), kind: kind.to_owned(), fields });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Trace, TraceParseError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|source| TraceParseError { line: i + 1, source }))
            .collect::<Result<_, _>>()?;
        Ok(Trace { records })
    }
}
