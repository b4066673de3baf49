//! The broker as a deterministic state machine: frames and link events in,
//! frames out. Time only enters through the `now` argument, so the same
//! inputs always produce the same outputs; the simulator and the TCP server
//! drive the same code.
//!
//! Every broker keeps a *feed* per history space it hosts or relays. A feed
//! is complete up to some seq: every event of interest to this broker (or
//! its subtree) at or below that seq is present. All consumers (arcs, link
//! streams, client subscriptions, interpretation replicas) read from feeds
//! and only below the completion point, which is what keeps downstream order
//! intact under loss and reordering.

mod stream;
mod topology;


use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::io;

use serde_json::json;
use thiserror::Error;

pub use stream::{Chain, Offer, Tick};
pub use topology::{GraphChange, CHANGE_KINDS};

use stream::OutStream;
use topology::{ArcEntry, Topology};

use crate::graph::{ArcOp, FlowGraph, META_SPACE};
use crate::interp::{compress_history, InterpState, Layout};
use crate::log::{self, LogError, Storage};
use crate::matching::{subscriptions_for, MatchTree};
use crate::model::{check_values, AttrType, Event, ExpandFamily, Predicate, Schema, Value};
use crate::wire::{self, Barrier, EventFrame, Frame, Mode, WireError};

pub const GAP_TIMEOUT: Tick = 20;
pub const RETRANSMIT_TIMEOUT: Tick = 40;
pub const BUFFER_BOUND: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Peer {
    Broker(String),
    Client(String),
}

impl Peer {
    pub fn name(&self) -> &str {
        match self {
            Peer::Broker(n) | Peer::Client(n) => n,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Input {
    Frame { from: Peer, frame: Frame },
    Undecodable { from: Peer, error: WireError },
    LinkUp(Peer),
    LinkDown(Peer),
    Tick,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub to: Peer,
    pub frame: Frame,
    /// A resend of an EVENT this link has carried before.
    pub retransmit: bool,
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub id: String,
    pub graph: FlowGraph,
    pub gap_timeout: Tick,
    pub retransmit_timeout: Tick,
    pub buffer_bound: usize,
}

impl BrokerConfig {
    pub fn new(id: impl Into<String>, graph: FlowGraph) -> Self {
        BrokerConfig {
            id: id.into(),
            graph,
            gap_timeout: GAP_TIMEOUT,
            retransmit_timeout: RETRANSMIT_TIMEOUT,
            buffer_bound: BUFFER_BOUND,
        }
    }
}

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("broker `{0}` is not declared in the graph")]
    UnknownBroker(String),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("storage: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
struct RouteOut {
    predicate: Option<String>,
    after: u64,
    acked: bool,
    sent_at: Tick,
}

#[derive(Debug)]
struct Feed {
    schema: Schema,
    hosted: bool,
    durable: bool,
    events: BTreeMap<u64, EventFrame>,
    complete: u64,
    upstream: Option<String>,
    chain: Chain,
    /// While routes announced upstream are unconfirmed, completion is capped
    /// here; once confirmed the chain restarts from this point.
    hold: Option<u64>,
    routes_out: BTreeMap<String, RouteOut>,
    pubs: HashMap<(String, u64), u64>,
    tombstoned: bool,
    /// Confirmed barriers waiting for the next sequenced event.
    pending: Vec<Barrier>,
    /// Ordered client subscriptions on this feed, for fan-out.
    tree: MatchTree,
}

impl Feed {
    fn new(schema: Schema, hosted: bool, durable: bool, upstream: Option<String>, bound: usize) -> Feed {
        Feed {
            tree: MatchTree::new(schema.clone()),
            schema,
            hosted,
            durable,
            events: BTreeMap::new(),
            complete: 0,
            upstream,
            chain: Chain::new(0, bound),
            hold: None,
            pending: Vec::new(),
            routes_out: BTreeMap::new(),
            pubs: HashMap::new(),
            tombstoned: false,
        }
    }

    fn refresh_complete(&mut self) {
        if !self.hosted {
            self.complete = match self.hold {
                Some(h) => self.chain.cursor.min(h),
                None => self.chain.cursor,
            };
        }
    }
}

#[derive(Debug, Default)]
struct LinkRt {
    up: bool,
    streams: BTreeMap<String, OutStream>,
    /// Subscription routes announced by this (downstream) peer, per space.
    routes_in: BTreeMap<String, BTreeMap<String, (Option<String>, Option<Predicate>)>>,
    sent: u64,
    retransmitted: u64,
}

#[derive(Debug)]
struct SubRt {
    space: String,
    feed: String,
    mode: Mode,
    predicate: Option<Predicate>,
    stream: OutStream,
    /// Pending catch-up from this seq (snapshot mode; optimistic resume).
    catchup: Option<u64>,
    catchup_upto: u64,
}

#[derive(Debug, Default)]
struct Session {
    connected: bool,
    subs: BTreeMap<String, SubRt>,
}

#[derive(Debug)]
struct Replica {
    input: String,
    state: InterpState,
    upto: u64,
}

#[derive(Debug)]
struct ArcRt {
    entry: usize,
    feed: String,
    applied: u64,
    /// Last (src, part) already in the durable destination log.
    restored: Option<(u64, u32)>,
    replica: Option<InterpState>,
    dumped: bool,
}

#[derive(Debug, Clone)]
struct MetaReq {
    request_id: String,
    kind: String,
    payload: String,
}

#[derive(Debug)]
struct Inflight {
    req: MetaReq,
    host: String,
    barrier: Barrier,
    sent_at: Tick,
}

#[derive(Debug)]
struct Coordinator {
    graph: FlowGraph,
    seen: BTreeSet<String>,
    queue: VecDeque<MetaReq>,
    inflight: Option<Inflight>,
    version: u64,
}

#[derive(Debug, Default, Clone, Copy)]
struct Counters {
    dead_letters: u64,
    reconfig_errors: u64,
    published: u64,
    duplicates_suppressed: u64,
}

pub struct Broker {
    id: String,
    gap_timeout: Tick,
    rto: Tick,
    bound: usize,
    topo: Topology,
    hops: BTreeMap<String, Option<String>>,
    storage: Box<dyn Storage>,
    feeds: BTreeMap<String, Feed>,
    arcs: BTreeMap<String, ArcRt>,
    replicas: BTreeMap<String, Replica>,
    links: BTreeMap<String, LinkRt>,
    sessions: BTreeMap<String, Session>,
    restored: BTreeMap<String, (u64, u32)>,
    host_applied: BTreeMap<String, (String, u64)>,
    coord: Option<Coordinator>,
    meta_pos: u64,
    now: Tick,
    out: Vec<Output>,
    dirty: BTreeSet<String>,
    counters: Counters,
}

/// Key of an arc runtime: arc ids may be reused after removal.
fn arc_key(e: &ArcEntry) -> String {
    format!("{}@{}", e.arc.id, e.from)
}

fn coerce(schema: &Schema, values: Vec<Value>) -> Vec<Value> {
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| match (v, schema.attrs().get(i).map(|a| a.ty)) {
            (Value::Int(n), Some(AttrType::Float64)) => Value::Float(n as f64),
            (v, _) => v,
        })
        .collect()
}

fn error_code(msg: &str) -> String {
    msg.split(':').next().unwrap_or("invalid").trim().to_string()
}

impl Broker {
    /// Builds a broker, replaying whatever durable logs `storage` holds.
    /// Links start down; the driver reports them with [`Input::LinkUp`].
    pub fn start(cfg: BrokerConfig, storage: Box<dyn Storage>) -> Result<Broker, BrokerError> {
        let graph = cfg.graph;
        if !graph.brokers().contains(&cfg.id) {
            return Err(BrokerError::UnknownBroker(cfg.id));
        }
        let hops = graph.brokers().iter().map(|b| (b.clone(), graph.next_hop(&cfg.id, b))).collect();
        let links = graph.neighbors(&cfg.id).map(|n| (n.to_string(), LinkRt::default())).collect();
        let is_coord = graph.coordinator() == cfg.id;
        let mut b = Broker {
            id: cfg.id,
            gap_timeout: cfg.gap_timeout,
            rto: cfg.retransmit_timeout,
            bound: cfg.buffer_bound,
            topo: Topology::new(graph.clone()),
            hops,
            storage,
            feeds: BTreeMap::new(),
            arcs: BTreeMap::new(),
            replicas: BTreeMap::new(),
            links,
            sessions: BTreeMap::new(),
            restored: BTreeMap::new(),
            host_applied: BTreeMap::new(),
            coord: None,
            meta_pos: 0,
            now: 0,
            out: Vec::new(),
            dirty: BTreeSet::new(),
            counters: Counters::default(),
        };
        if is_coord {
            b.recover_meta(graph)?;
        }
        // Hosted logs; a replayed barrier can declare further hosted spaces.
        loop {
            let todo: Vec<(String, bool)> = b
                .topo
                .graph
                .spaces()
                .iter()
                .filter(|s| s.is_history() && s.broker == b.id && !b.feeds.contains_key(&s.name))
                .map(|s| (s.name.clone(), s.durable))
                .collect();
            if todo.is_empty() {
                break;
            }
            for (name, durable) in todo {
                b.recover_hosted(&name, durable)?;
            }
        }
        b.after_topology_change();
        b.process();
        // Links are down: nothing can be delivered yet.
        b.out.clear();
        Ok(b)
    }

    fn recover_meta(&mut self, graph: FlowGraph) -> Result<(), BrokerError> {
        let mut feed = Feed::new(crate::graph::meta_schema(), true, true, None, self.bound);
        let replayed = log::replay(self.storage.as_mut(), META_SPACE)?;
        let mut coord = Coordinator {
            graph: graph.clone(),
            seen: BTreeSet::new(),
            queue: VecDeque::new(),
            inflight: None,
            version: 0,
        };
        let mut pending: Vec<MetaReq> = Vec::new();
        for e in replayed.events {
            let row = MetaRow::from_values(&e.values);
            if let Some(row) = &row {
                coord.seen.insert(row.request_id.clone());
                match row.status.as_str() {
                    "requested" => pending.push(MetaReq {
                        request_id: row.request_id.clone(),
                        kind: row.kind.clone(),
                        payload: row.payload.clone(),
                    }),
                    "confirmed" if row.kind == "genesis" => {
                        if let Ok(g) = FlowGraph::from_json(&row.payload) {
                            coord.graph = g;
                        }
                    }
                    "confirmed" => {
                        if let Ok(change) = GraphChange::parse(&row.kind, &row.payload) {
                            if let Ok(g) = change.apply_to(&coord.graph) {
                                coord.graph = g;
                                coord.version += 1;
                            }
                            let activation = parse_activation(&row.activation).map_or(0, |(_, a)| a);
                            if self.topo.apply(&row.request_id, &change, activation).is_err() {
                                self.counters.reconfig_errors += 1;
                            }
                        }
                        pending.retain(|p| p.request_id != row.request_id);
                    }
                    _ => pending.retain(|p| p.request_id != row.request_id),
                }
            }
            feed.complete = e.seq;
            feed.events.insert(e.seq, e);
        }
        coord.queue.extend(pending);
        self.meta_pos = feed.complete;
        let fresh = feed.events.is_empty();
        self.feeds.insert(META_SPACE.to_string(), feed);
        self.coord = Some(coord);
        if fresh {
            let doc = serde_json::to_string(&graph.to_doc()).expect("graph serializes");
            self.meta_append("genesis", "genesis", &doc, "confirmed", "");
            self.meta_pos = 1;
        }
        Ok(())
    }

    fn recover_hosted(&mut self, space: &str, durable: bool) -> Result<(), BrokerError> {
        let schema = self.topo.schema(space).expect("hosted space is declared");
        self.feeds.insert(space.to_string(), Feed::new(schema, true, durable, None, self.bound));
        if !durable {
            return Ok(());
        }
        let replayed = log::replay(self.storage.as_mut(), space)?;
        for e in replayed.events {
            let seq = e.seq;
            if let (Some(a), Some(src)) = (&e.arc, e.src) {
                let part = e.part.unwrap_or(0);
                let slot = self.restored.entry(a.clone()).or_insert((src, part));
                *slot = (*slot).max((src, part));
            }
            let feed = self.feeds.get_mut(space).expect("inserted");
            if e.is_marker() {
                let activation = feed.complete + 1;
                feed.pending.extend(e.barriers.iter().cloned());
                for b in &e.barriers {
                    self.host_applied.insert(b.request_id.clone(), (space.to_string(), activation));
                    self.apply_barrier(b, activation);
                }
                continue;
            }
            feed.pending.clear();
            if let Some(p) = e.pub_id {
                feed.pubs.insert((e.origin.clone(), p), seq);
            }
            let barriers = e.barriers.clone();
            feed.complete = seq;
            feed.events.insert(seq, e);
            for b in &barriers {
                self.host_applied.insert(b.request_id.clone(), (space.to_string(), seq));
                self.apply_barrier(b, seq);
            }
        }
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// This broker's current view of the graph.
    pub fn graph(&self) -> &FlowGraph {
        &self.topo.graph
    }

    pub fn graph_version(&self) -> u64 {
        self.coord.as_ref().map_or(self.topo.version, |c| c.version)
    }

    /// Events held for `space`, in seq order.
    pub fn log(&self, space: &str) -> Vec<EventFrame> {
        self.feeds.get(space).map(|f| f.events.values().cloned().collect()).unwrap_or_default()
    }

    pub fn complete(&self, space: &str) -> Option<u64> {
        self.feeds.get(space).map(|f| f.complete)
    }

    pub fn hosts(&self, space: &str) -> bool {
        self.feeds.get(space).is_some_and(|f| f.hosted)
    }

    /// Interpretation state maintained here (hosted or replicated).
    pub fn interp_state(&self, space: &str) -> Option<&InterpState> {
        self.replicas.get(space).map(|r| &r.state)
    }

    /// One step: feed an input observed at time `now`, get the frames to send.
    pub fn handle(&mut self, now: Tick, input: Input) -> Vec<Output> {
        self.now = self.now.max(now);
        match input {
            Input::Frame { from: Peer::Client(c), frame } => self.on_client_frame(&c, frame),
            Input::Frame { from: Peer::Broker(b), frame } => {
                if self.links.contains_key(&b) {
                    self.on_broker_frame(&b, frame);
                }
            }
            Input::Undecodable { from, error } => {
                self.send(from, Frame::error(error.code(), error.to_string()));
            }
            Input::LinkUp(Peer::Broker(b)) => self.on_link_up(&b),
            Input::LinkDown(Peer::Broker(b)) => self.on_link_down(&b),
            Input::LinkUp(Peer::Client(_)) => {}
            Input::LinkDown(Peer::Client(c)) => {
                if let Some(s) = self.sessions.get_mut(&c) {
                    s.connected = false;
                    for sub in s.subs.values_mut() {
                        sub.stream.paused = true;
                    }
                }
            }
            Input::Tick => self.on_tick(),
        }
        self.process();
        std::mem::take(&mut self.out)
    }

    /// Earliest time a [`Input::Tick`] has work to do; `None` when idle.
    pub fn next_deadline(&self) -> Option<Tick> {
        let mut best: Option<Tick> = None;
        let mut consider = |t: Option<Tick>| {
            if let Some(t) = t {
                best = Some(best.map_or(t, |b| b.min(t)));
            }
        };
        for f in self.feeds.values() {
            if f.hosted {
                continue;
            }
            consider(f.chain.gap_deadline(self.gap_timeout));
            for r in f.routes_out.values().filter(|r| !r.acked) {
                consider(Some(r.sent_at + self.rto));
            }
        }
        for l in self.links.values().filter(|l| l.up) {
            for s in l.streams.values() {
                consider(s.deadline(self.rto));
            }
        }
        for s in self.sessions.values().filter(|s| s.connected) {
            for sub in s.subs.values() {
                consider(sub.stream.deadline(self.rto));
            }
        }
        if let Some(i) = self.coord.as_ref().and_then(|c| c.inflight.as_ref()) {
            consider(Some(i.sent_at + self.rto));
        }
        best
    }

    fn send(&mut self, to: Peer, frame: Frame) {
        self.out.push(Output { to, frame, retransmit: false });
    }

    fn send_broker(&mut self, to: &str, frame: Frame) {
        self.send(Peer::Broker(to.to_string()), frame);
    }

    fn hop(&self, target: &str) -> Option<String> {
        self.hops.get(target).cloned().flatten()
    }

    // ----- topology -------------------------------------------------------

    fn apply_barrier(&mut self, b: &Barrier, activation: u64) {
        let result = self.topo.apply_context(b).and_then(|()| {
            let change = GraphChange::parse(&b.kind, &b.payload)?;
            self.topo.apply(&b.request_id, &change, activation)
        });
        match result {
            Ok(true) => self.after_topology_change(),
            Ok(false) => {}
            Err(_) => self.counters.reconfig_errors += 1,
        }
    }

    fn after_topology_change(&mut self) {
        for name in self.topo.removed.clone() {
            if let Some(f) = self.feeds.get_mut(&name) {
                f.tombstoned = true;
            }
        }
        self.ensure_feeds();
        self.sync_arcs();
        self.sync_replicas();
    }

    /// Whether a relayed space has consumers here or beyond this broker.
    fn needs(&self, space: &str) -> bool {
        if space == META_SPACE {
            return true;
        }
        let Some(host) = self.topo.host(space) else { return false };
        let up = self.hop(host);
        let beyond = |b: &str| b == self.id || self.hop(b) != up;
        self.topo.consumers_of(space).any(|e| e.until.is_none() && beyond(&e.dst_broker))
            || self.topo.routes.iter().any(|r| r.route.space == space && r.until.is_none() && beyond(&r.route.broker))
    }

    fn ensure_feeds(&mut self) {
        let spaces: Vec<(String, String, bool)> = self
            .topo
            .graph
            .spaces()
            .iter()
            .filter(|s| s.is_history())
            .map(|s| (s.name.clone(), s.broker.clone(), s.durable))
            .collect();
        for (name, host, durable) in spaces {
            if self.feeds.contains_key(&name) {
                continue;
            }
            if host == self.id {
                let schema = self.topo.schema(&name).expect("declared");
                self.feeds.insert(name, Feed::new(schema, true, durable, None, self.bound));
            } else if self.needs(&name) {
                self.create_relay(&name);
            }
        }
        if !self.feeds.contains_key(META_SPACE) {
            self.create_relay(META_SPACE);
        }
    }

    fn create_relay(&mut self, space: &str) -> bool {
        if self.feeds.contains_key(space) {
            return true;
        }
        let Some(host) = self.topo.host(space).map(str::to_string) else { return false };
        if host == self.id {
            return false;
        }
        let (Some(up), Some(schema)) = (self.hop(&host), self.topo.schema(space)) else { return false };
        let mut feed = Feed::new(schema, false, false, Some(up.clone()), self.bound);
        let epoch = feed.chain.renack(self.now);
        self.feeds.insert(space.to_string(), feed);
        self.send_broker(&up, Frame::Nack { space: space.to_string(), sub: None, after: 0, epoch });
        true
    }

    fn sync_arcs(&mut self) {
        for (i, e) in self.topo.arcs.iter().enumerate() {
            if e.dst_broker != self.id || matches!(e.arc.op, ArcOp::Interpret(_)) {
                continue;
            }
            let key = arc_key(e);
            if self.arcs.contains_key(&key) {
                continue;
            }
            let Some(feed) = self.topo.feed_of(&e.arc.id).map(str::to_string) else { continue };
            let restored = self.restored.get(&key).copied();
            let (applied, replica) = match &e.arc.op {
                ArcOp::Expand(spec) => (0, Some(InterpState::new(spec.clone()))),
                _ => ((e.from - 1).max(restored.map_or(0, |r| r.0)), None),
            };
            self.dirty.insert(feed.clone());
            self.arcs.insert(key, ArcRt { entry: i, feed, applied, restored, replica, dumped: false });
        }
    }

    fn sync_replicas(&mut self) {
        let hosted: Vec<String> = self
            .topo
            .graph
            .spaces()
            .iter()
            .filter(|s| !s.is_history() && s.broker == self.id)
            .map(|s| s.name.clone())
            .collect();
        for name in hosted {
            self.ensure_replica(&name);
        }
    }

    /// Returns whether a new replica was created.
    fn ensure_replica(&mut self, space: &str) -> bool {
        if self.replicas.contains_key(space) {
            return false;
        }
        let (Some(spec), Some(input)) = (self.topo.interp_spec(space).cloned(), self.topo.interp_input(space)) else {
            return false;
        };
        self.dirty.insert(input.clone());
        self.replicas.insert(space.to_string(), Replica { input, state: InterpState::new(spec), upto: 0 });
        true
    }

    // ----- sequencing -----------------------------------------------------

    fn sequence(&mut self, space: &str, mut ev: EventFrame) -> u64 {
        let feed = self.feeds.get_mut(space).expect("sequencing into a hosted feed");
        debug_assert!(feed.hosted);
        feed.complete += 1;
        ev.seq = feed.complete;
        ev.space = space.to_string();
        ev.barriers = std::mem::take(&mut feed.pending);
        if feed.durable {
            // A broker that cannot persist must not acknowledge.
            log::append(self.storage.as_mut(), &ev).expect("durable append failed");
        }
        let seq = ev.seq;
        feed.events.insert(seq, ev);
        self.dirty.insert(space.to_string());
        seq
    }

    fn meta_append(&mut self, request_id: &str, kind: &str, payload: &str, status: &str, activation: &str) {
        let values = vec![
            Value::from(request_id),
            Value::from(kind),
            Value::from(payload),
            Value::from(status),
            Value::from(activation),
        ];
        let ev = EventFrame::new(META_SPACE, 0, values, self.id.clone());
        self.sequence(META_SPACE, ev);
    }

    // ----- pumping --------------------------------------------------------

    fn process(&mut self) {
        while let Some(space) = self.dirty.pop_first() {
            if !self.feeds.contains_key(&space) {
                continue;
            }
            if space == META_SPACE {
                self.follow_meta();
            }
            self.fold_replicas(&space);
            self.run_arcs(&space);
            self.pump_links(&space);
            self.pump_sessions(&space);
        }
    }

    fn interp_active(topo: &Topology, interp: &str, seq: u64) -> bool {
        topo.arcs.iter().any(|e| e.arc.dst == interp && matches!(e.arc.op, ArcOp::Interpret(_)) && e.active_at(seq))
    }

    fn fold_replicas(&mut self, space: &str) {
        let feed = &self.feeds[space];
        for (name, r) in self.replicas.iter_mut().filter(|(_, r)| r.input == space) {
            if r.upto >= feed.complete {
                continue;
            }
            for (&seq, e) in feed.events.range(r.upto + 1..=feed.complete) {
                if Self::interp_active(&self.topo, name, seq) {
                    r.state.apply_values(&e.values, seq, Layout::Input);
                }
            }
            r.upto = feed.complete;
        }
    }

    fn run_arcs(&mut self, space: &str) {
        let keys: Vec<String> = self.arcs.iter().filter(|(_, a)| a.feed == space).map(|(k, _)| k.clone()).collect();
        for key in keys {
            let derived = {
                let rt = self.arcs.get_mut(&key).expect("listed");
                let feed = &self.feeds[space];
                let entry = &self.topo.arcs[rt.entry];
                run_arc(rt, entry, &self.topo, feed, &mut self.counters.dead_letters)
            };
            let (dst, id) = {
                let e = &self.topo.arcs[self.arcs[&key].entry];
                (e.arc.dst.clone(), key.clone())
            };
            for d in derived {
                if !self.feeds.get(&dst).is_some_and(|f| f.hosted && !f.tombstoned) {
                    continue;
                }
                let mut ev = EventFrame::new(dst.clone(), 0, d.values, d.origin);
                ev.arc = Some(id.clone());
                ev.src = Some(d.src);
                ev.part = Some(d.part);
                self.sequence(&dst, ev);
            }
        }
    }

    fn pump_links(&mut self, space: &str) {
        let Some(feed) = self.feeds.get(space) else { return };
        for (peer, link) in self.links.iter_mut() {
            if !link.up {
                continue;
            }
            let Some(st) = link.streams.get_mut(space) else { continue };
            if st.paused || st.scan >= feed.complete {
                continue;
            }
            let routes = link.routes_in.get(space);
            for (&seq, e) in feed.events.range(st.scan + 1..=feed.complete) {
                if link_wants(&self.topo, &self.hops, routes, space, peer, e) {
                    let frame = e.for_link(st.pos, None, st.epoch);
                    let retransmit = st.sent(seq);
                    if retransmit {
                        link.retransmitted += 1;
                    } else {
                        link.sent += 1;
                    }
                    self.out.push(Output { to: Peer::Broker(peer.clone()), frame: Frame::Event(frame), retransmit });
                }
                st.scan = seq;
            }
            st.scan = st.scan.max(feed.complete);
        }
    }

    fn pump_sessions(&mut self, space: &str) {
        let Some(feed) = self.feeds.get(space) else { return };
        let mut memo: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
        for (client, sess) in self.sessions.iter_mut() {
            if !sess.connected {
                continue;
            }
            for (sid, sub) in sess.subs.iter_mut().filter(|(_, s)| s.feed == space) {
                if sub.stream.paused {
                    continue;
                }
                let to = Peer::Client(client.clone());
                if let Some(from) = sub.catchup {
                    let Some(replica) = self.replicas.get(&sub.space) else { continue };
                    if replica.upto <= from {
                        continue;
                    }
                    let frame = match sub.mode {
                        Mode::Snapshot => catchup_frame(&self.topo, feed, replica, sid, &sub.space, from),
                        _ => Some(full_snapshot(replica, sid, &sub.space)),
                    };
                    sub.catchup = None;
                    if let Some(frame) = frame {
                        sub.catchup_upto = replica.upto;
                        sub.stream.pos = replica.upto;
                        sub.stream.scan = replica.upto;
                        sub.stream.since = self.now;
                        sub.stream.high = sub.stream.high.max(replica.upto);
                        self.out.push(Output { to: to.clone(), frame, retransmit: false });
                    }
                }
                if sub.stream.scan >= feed.complete {
                    continue;
                }
                let base = format!("{client}/{sid}");
                for (&seq, e) in feed.events.range(sub.stream.scan + 1..=feed.complete) {
                    let wanted = match sub.mode {
                            Mode::Ordered => match &sub.predicate {
                                None => true,
                                Some(_) => memo
                                    .entry(seq)
                                    .or_insert_with(|| {
                                        feed.tree
                                            .match_values(&e.values)
                                            .sub_ids
                                            .into_iter()
                                            .map(|id| id.rsplit_once('#').map_or(id.clone(), |(b, _)| b.to_string()))
                                            .collect()
                                    })
                                    .contains(&base),
                            },
                            _ => Self::interp_active(&self.topo, &sub.space, seq),
                        };
                    if wanted {
                        let mut frame = e.for_link(sub.stream.pos, Some(sid), sub.stream.epoch);
                        frame.barriers.clear();
                        let retransmit = sub.stream.sent(seq);
                        self.out.push(Output { to: to.clone(), frame: Frame::Event(frame), retransmit });
                    }
                    sub.stream.scan = seq;
                }
                sub.stream.scan = sub.stream.scan.max(feed.complete);
            }
        }
    }

    // ----- reflection -----------------------------------------------------

    fn follow_meta(&mut self) {
        let complete = self.feeds[META_SPACE].complete;
        while self.meta_pos < complete {
            let seq = self.meta_pos + 1;
            self.meta_pos = seq;
            let Some(row) = self.feeds[META_SPACE].events.get(&seq).and_then(|e| MetaRow::from_values(&e.values))
            else {
                continue;
            };
            if row.status != "confirmed" || row.kind == "genesis" {
                continue;
            }
            let Ok(change) = GraphChange::parse(&row.kind, &row.payload) else { continue };
            let activation = match parse_activation(&row.activation) {
                None => 0,
                // The in-band barrier governs spaces whose stream we see.
                Some((space, _)) if self.feeds.contains_key(&space) => {
                    if self.feeds[&space].hosted && !self.topo.applied.contains(&row.request_id) {
                        // Confirmed here before a restart that lost the log:
                        // re-arm on the next event.
                        let b = change.barrier(&row.request_id, &row.kind, &row.payload, &self.topo.graph);
                        let feed = self.feeds.get_mut(&space).expect("present");
                        let activation = feed.complete + 1;
                        feed.pending.push(b.clone());
                        self.host_applied.insert(row.request_id.clone(), (space, activation));
                        self.apply_barrier(&b, activation);
                    }
                    continue;
                }
                Some((_, a)) => a,
            };
            match self.topo.apply(&row.request_id, &change, activation) {
                Ok(true) => self.after_topology_change(),
                Ok(false) => {}
                Err(_) => self.counters.reconfig_errors += 1,
            }
        }
    }

    fn on_meta_request(&mut self, req: MetaReq, to: Option<String>, barrier: Option<Barrier>) {
        match to {
            Some(target) if target == self.id => self.host_meta(req, barrier),
            Some(target) => {
                if let Some(h) = self.hop(&target) {
                    let frame = Frame::MetaRequest {
                        request_id: req.request_id,
                        kind: req.kind,
                        payload: req.payload,
                        to: Some(target),
                        barrier,
                    };
                    self.send_broker(&h, frame);
                }
            }
            None if self.coord.is_some() => self.coord_request(req),
            None => {
                let c = self.topo.graph.coordinator().to_string();
                if let Some(h) = self.hop(&c) {
                    let frame = Frame::MetaRequest {
                        request_id: req.request_id,
                        kind: req.kind,
                        payload: req.payload,
                        to: None,
                        barrier: None,
                    };
                    self.send_broker(&h, frame);
                }
            }
        }
    }

    fn coord_request(&mut self, req: MetaReq) {
        let coord = self.coord.as_mut().expect("coordinator");
        if !coord.seen.insert(req.request_id.clone()) {
            return;
        }
        coord.queue.push_back(req.clone());
        self.meta_append(&req.request_id, &req.kind, &req.payload, "requested", "");
        self.coord_advance();
    }

    fn coord_advance(&mut self) {
        loop {
            let coord = self.coord.as_mut().expect("coordinator");
            if coord.inflight.is_some() {
                return;
            }
            let Some(req) = coord.queue.pop_front() else { return };
            let checked = GraphChange::parse(&req.kind, &req.payload)
                .and_then(|c| c.apply_to(&coord.graph).map(|g| (c, g)));
            match checked {
                Err(msg) => {
                    self.meta_append(&req.request_id, &req.kind, &req.payload, "rejected", &error_code(&msg));
                }
                Ok((change, next)) => match change.barrier_space(&coord.graph) {
                    None => {
                        coord.graph = next;
                        coord.version += 1;
                        self.meta_append(&req.request_id, &req.kind, &req.payload, "confirmed", "");
                    }
                    Some(space) => {
                        let host = coord.graph.space(&space).expect("barrier space exists").broker.clone();
                        let barrier = change.barrier(&req.request_id, &req.kind, &req.payload, &coord.graph);
                        coord.inflight = Some(Inflight { req, host, barrier, sent_at: self.now });
                        self.send_inflight();
                        return;
                    }
                },
            }
        }
    }

    fn send_inflight(&mut self) {
        let Some(i) = self.coord.as_mut().and_then(|c| c.inflight.as_mut()) else { return };
        i.sent_at = self.now;
        let (req, host, barrier) = (i.req.clone(), i.host.clone(), i.barrier.clone());
        self.on_meta_request(req, Some(host), Some(barrier));
    }

    fn host_meta(&mut self, req: MetaReq, barrier: Option<Barrier>) {
        let coordinator = self.topo.graph.coordinator().to_string();
        if let Some((space, activation)) = self.host_applied.get(&req.request_id).cloned() {
            self.on_meta_confirm(req.request_id, space, activation, coordinator);
            return;
        }
        let barrier = barrier.unwrap_or_else(|| Barrier {
            request_id: req.request_id.clone(),
            kind: req.kind.clone(),
            payload: req.payload.clone(),
            spaces: Vec::new(),
            schemas: BTreeMap::new(),
        });
        if self.topo.apply_context(&barrier).is_err() {
            self.counters.reconfig_errors += 1;
            return;
        }
        let Ok(change) = GraphChange::parse(&req.kind, &req.payload) else { return };
        let Some(space) = change.barrier_space(&self.topo.graph) else { return };
        if !self.feeds.get(&space).is_some_and(|f| f.hosted) {
            self.counters.reconfig_errors += 1;
            return;
        }
        // The change rides on the next event, which is the activation point;
        // until then a durable log keeps it as a marker record.
        let feed = self.feeds.get_mut(&space).expect("hosted");
        let activation = feed.complete + 1;
        feed.pending.push(barrier.clone());
        if feed.durable {
            let mut marker = EventFrame::new(space.clone(), feed.complete, Vec::new(), META_SPACE);
            marker.barriers = vec![barrier.clone()];
            log::append(self.storage.as_mut(), &marker).expect("durable append failed");
        }
        self.host_applied.insert(req.request_id.clone(), (space.clone(), activation));
        self.apply_barrier(&barrier, activation);
        self.on_meta_confirm(req.request_id, space, activation, coordinator);
    }

    fn on_meta_confirm(&mut self, request_id: String, space: String, activation: u64, to: String) {
        if to != self.id {
            if let Some(h) = self.hop(&to) {
                self.send_broker(&h, Frame::MetaConfirm { request_id, space, activation, to });
            }
            return;
        }
        let Some(coord) = self.coord.as_mut() else { return };
        if coord.inflight.as_ref().map(|i| &i.req.request_id) != Some(&request_id) {
            return;
        }
        let req = coord.inflight.take().expect("checked").req;
        if let Ok(g) = GraphChange::parse(&req.kind, &req.payload).and_then(|c| c.apply_to(&coord.graph)) {
            coord.graph = g;
            coord.version += 1;
        }
        let activation = format!("{space}@{activation}");
        self.meta_append(&req.request_id, &req.kind, &req.payload, "confirmed", &activation);
        self.coord_advance();
    }

    // ----- frames from clients ---------------------------------------------

    fn on_client_frame(&mut self, client: &str, frame: Frame) {
        let to = Peer::Client(client.to_string());
        match frame {
            Frame::Connect { .. } => {
                let s = self.sessions.entry(client.to_string()).or_default();
                s.connected = true;
                for sub in s.subs.values_mut() {
                    sub.stream.paused = false;
                }
            }
            Frame::Publish { space, values, pub_id } => self.publish(client, &space, values, pub_id),
            Frame::Subscribe { space, sub, predicate, mode, after } => {
                if let Err((code, msg)) = self.subscribe(client, &space, &sub, predicate, mode, after) {
                    self.send(to, Frame::Error { code: code.into(), message: msg, pub_id: None, sub: Some(sub) });
                }
            }
            Frame::Unsubscribe { sub, .. } => self.unsubscribe(client, &sub),
            Frame::Ack { sub: Some(sid), upto: Some(upto), epoch, .. } => {
                let now = self.now;
                if let Some(sub) = self.sessions.get_mut(client).and_then(|s| s.subs.get_mut(&sid)) {
                    sub.stream.on_ack(upto, epoch, now);
                    self.dirty.insert(sub.feed.clone());
                }
            }
            Frame::Nack { sub: Some(sid), after, epoch, .. } => {
                let now = self.now;
                if let Some(sub) = self.sessions.get_mut(client).and_then(|s| s.subs.get_mut(&sid)) {
                    sub.stream.on_nack(after, epoch, now);
                    if sub.mode == Mode::Snapshot && after < sub.catchup_upto {
                        sub.catchup = Some(after);
                    }
                    self.dirty.insert(sub.feed.clone());
                }
            }
            Frame::Snapshot { sub, state: None, events: None, .. } => self.send_snapshot(client, &sub),
            Frame::MetaRequest { request_id, kind, payload, .. } => {
                self.on_meta_request(MetaReq { request_id, kind, payload }, None, None)
            }
            Frame::Stats { .. } => {
                let stats = self.stats();
                self.send(to, Frame::Stats { stats: Some(stats) });
            }
            other => {
                let msg = format!("{} is not accepted from clients", other.type_name());
                self.send(to, Frame::error("unexpected-frame", msg));
            }
        }
    }

    fn publish(&mut self, client: &str, space: &str, values: Vec<Value>, pub_id: u64) {
        let to = Peer::Client(client.to_string());
        let reject = |code: &str, message: String| Frame::Error {
            code: code.into(),
            message,
            pub_id: Some(pub_id),
            sub: None,
        };
        let Some(host) = self.topo.host(space).map(str::to_string) else {
            return self.send(to, reject("unknown-space", format!("no space `{space}`")));
        };
        if self.topo.interp_spec(space).is_some() {
            return self.send(to, reject("not-a-history", format!("`{space}` is an interpretation space")));
        }
        let Some(feed) = self.feeds.get(space).filter(|f| f.hosted) else {
            return self.send(to, reject("not-hosted", format!("space `{space}` is hosted by {host}, not {}", self.id)));
        };
        if feed.tombstoned {
            return self.send(to, reject("space-removed", format!("space `{space}` was removed")));
        }
        let values = coerce(&feed.schema, values);
        if let Err(e) = check_values(&feed.schema, &values) {
            return self.send(to, reject("invalid-event", e.to_string()));
        }
        let key = (client.to_string(), pub_id);
        let seq = match feed.pubs.get(&key) {
            Some(&seq) => {
                self.counters.duplicates_suppressed += 1;
                seq
            }
            None => {
                let mut ev = EventFrame::new(space, 0, values, client);
                ev.pub_id = Some(pub_id);
                let seq = self.sequence(space, ev);
                self.feeds.get_mut(space).expect("hosted").pubs.insert(key, seq);
                self.counters.published += 1;
                seq
            }
        };
        let ack = Frame::Ack { space: space.into(), sub: None, upto: None, pub_id: Some(pub_id), seq: Some(seq), epoch: 0 };
        self.send(to, ack);
    }

    fn subscribe(
        &mut self,
        client: &str,
        space: &str,
        sid: &str,
        predicate: Option<String>,
        mode: Mode,
        after: u64,
    ) -> Result<(), (&'static str, String)> {
        if self.topo.removed.contains(space) {
            return Err(("space-removed", format!("space `{space}` was removed")));
        }
        let schema = self.topo.schema(space).ok_or(("unknown-space", format!("no space `{space}`")))?;
        let is_history = space == META_SPACE || self.topo.graph.space(space).is_some_and(|s| s.is_history());
        match (is_history, mode) {
            (true, Mode::Ordered) | (false, Mode::Optimistic | Mode::Snapshot) => {}
            (true, _) => return Err(("mode-mismatch", format!("`{space}` is a history; use ordered mode"))),
            (false, _) => {
                return Err(("mode-mismatch", format!("`{space}` is an interpretation; use optimistic or snapshot")))
            }
        }
        let parsed = match (&predicate, is_history) {
            (None, _) => None,
            (Some(text), true) => {
                Some(Predicate::parse(text, &schema).map_err(|e| ("invalid-predicate", e.to_string()))?)
            }
            (Some(_), false) => {
                return Err(("invalid-predicate", "interpretation subscriptions take no predicate".into()));
            }
        };
        let feed_space = if is_history {
            space.to_string()
        } else {
            self.topo.interp_input(space).ok_or(("no-input", format!("`{space}` has no input history")))?
        };
        if !self.feeds.contains_key(&feed_space) && !self.create_relay(&feed_space) {
            return Err(("unknown-space", format!("cannot reach `{feed_space}`")));
        }
        let new_replica = !is_history && self.ensure_replica(space);
        self.unsubscribe_local(client, sid);

        let base = format!("{client}/{sid}");
        let feed = self.feeds.get_mut(&feed_space).expect("ensured");
        if let Some(p) = &parsed {
            for s in subscriptions_for(Some(p), &base, client) {
                let _ = feed.tree.add(s);
            }
        }
        if !feed.hosted {
            let route_after = match mode {
                Mode::Ordered => after,
                _ if new_replica => 0,
                _ => feed.complete,
            };
            let rid = format!("{}/{base}", self.id);
            self.announce_route(&feed_space, &rid, if is_history { predicate } else { None }, route_after);
        }
        let mut stream = OutStream::new(self.now);
        let catchup = match mode {
            Mode::Ordered => {
                stream.pos = after;
                stream.scan = after;
                stream.acked = after;
                None
            }
            Mode::Snapshot => {
                stream.pos = after;
                stream.scan = after;
                stream.acked = after;
                Some(after)
            }
            Mode::Optimistic if after > 0 => {
                stream.pos = after;
                stream.scan = after;
                stream.acked = after;
                Some(after)
            }
            Mode::Optimistic => None,
        };
        let sess = self.sessions.entry(client.to_string()).or_default();
        sess.connected = true;
        sess.subs.insert(
            sid.to_string(),
            SubRt {
                space: space.to_string(),
                feed: feed_space.clone(),
                mode,
                predicate: parsed,
                stream,
                catchup,
                catchup_upto: after,
            },
        );
        self.dirty.insert(feed_space);
        Ok(())
    }

    fn unsubscribe_local(&mut self, client: &str, sid: &str) -> Option<String> {
        let sub = self.sessions.get_mut(client)?.subs.remove(sid)?;
        let base = format!("{client}/{sid}");
        let feed = self.feeds.get_mut(&sub.feed)?;
        let ids: Vec<String> =
            feed.tree.subscriptions().filter(|s| s.sub_id.starts_with(&format!("{base}#"))).map(|s| s.sub_id.clone()).collect();
        for id in ids {
            let _ = feed.tree.remove(&id);
        }
        Some(sub.feed)
    }

    fn unsubscribe(&mut self, client: &str, sid: &str) {
        let Some(feed_space) = self.unsubscribe_local(client, sid) else { return };
        let rid = format!("{}/{client}/{sid}", self.id);
        self.withdraw_route(&feed_space, &rid);
    }

    fn send_snapshot(&mut self, client: &str, sid: &str) {
        let now = self.now;
        let Some(sub) = self.sessions.get_mut(client).and_then(|s| s.subs.get_mut(sid)) else { return };
        let Some(replica) = self.replicas.get(&sub.space) else { return };
        let frame = full_snapshot(replica, sid, &sub.space);
        sub.stream.pos = replica.upto;
        sub.stream.scan = replica.upto;
        sub.stream.since = now;
        sub.stream.high = sub.stream.high.max(replica.upto);
        sub.catchup = None;
        let feed = sub.feed.clone();
        self.send(Peer::Client(client.to_string()), frame);
        self.dirty.insert(feed);
    }

    // ----- subscription routes ----------------------------------------------

    fn announce_route(&mut self, space: &str, rid: &str, predicate: Option<String>, after: u64) {
        let now = self.now;
        let feed = self.feeds.get_mut(space).expect("relay feed");
        if feed.routes_out.get(rid).is_some_and(|r| r.predicate == predicate) {
            return;
        }
        let cap = after.min(feed.complete);
        feed.hold = Some(feed.hold.map_or(cap, |h| h.min(cap)));
        feed.complete = feed.complete.min(cap);
        feed.routes_out.insert(rid.to_string(), RouteOut { predicate: predicate.clone(), after, acked: false, sent_at: now });
        let up = feed.upstream.clone().expect("relay has upstream");
        let frame = Frame::Subscribe { space: space.into(), sub: rid.into(), predicate, mode: Mode::Ordered, after };
        self.send_broker(&up, frame);
    }

    fn withdraw_route(&mut self, space: &str, rid: &str) {
        let Some(feed) = self.feeds.get_mut(space).filter(|f| !f.hosted) else { return };
        if feed.routes_out.remove(rid).is_none() {
            return;
        }
        let up = feed.upstream.clone().expect("relay has upstream");
        self.maybe_release_hold(space);
        self.send_broker(&up, Frame::Unsubscribe { sub: rid.into(), space: Some(space.into()) });
    }

    fn maybe_release_hold(&mut self, space: &str) {
        let now = self.now;
        let Some(feed) = self.feeds.get_mut(space) else { return };
        if feed.hold.is_none() || feed.routes_out.values().any(|r| !r.acked) {
            return;
        }
        let h = feed.hold.take().expect("checked");
        let epoch = feed.chain.rewind(h, now);
        feed.refresh_complete();
        let up = feed.upstream.clone().expect("relay has upstream");
        self.send_broker(&up, Frame::Nack { space: space.into(), sub: None, after: h, epoch });
    }

    // ----- frames from brokers ----------------------------------------------

    fn on_broker_frame(&mut self, peer: &str, frame: Frame) {
        match frame {
            Frame::Event(e) => self.on_event(peer, e),
            Frame::Ack { space, sub: Some(rid), upto: None, .. } => {
                if let Some(r) = self.feeds.get_mut(&space).and_then(|f| f.routes_out.get_mut(&rid)) {
                    r.acked = true;
                }
                self.maybe_release_hold(&space);
            }
            Frame::Ack { space, sub: None, upto: Some(upto), epoch, .. } => {
                let now = self.now;
                if let Some(st) = self.links.get_mut(peer).and_then(|l| l.streams.get_mut(&space)) {
                    st.on_ack(upto, epoch, now);
                    self.dirty.insert(space);
                }
            }
            Frame::Nack { space, sub: None, after, epoch } => {
                if !self.feeds.contains_key(&space) && !self.create_relay(&space) {
                    return;
                }
                // Never stream a space back towards its host.
                if self.feeds[&space].upstream.as_deref() == Some(peer) {
                    return;
                }
                let now = self.now;
                let link = self.links.get_mut(peer).expect("known link");
                let st = link.streams.entry(space.clone()).or_insert_with(|| OutStream::new(now));
                st.on_nack(after, epoch, now);
                st.paused = !link.up;
                self.dirty.insert(space);
            }
            Frame::Subscribe { space, sub, predicate, after, .. } => self.on_route_in(peer, &space, &sub, predicate, after),
            Frame::Unsubscribe { sub, space: Some(space) } => {
                if let Some(m) = self.links.get_mut(peer).and_then(|l| l.routes_in.get_mut(&space)) {
                    m.remove(&sub);
                }
                let still_used = self.links.values().any(|l| l.routes_in.get(&space).is_some_and(|m| m.contains_key(&sub)));
                if !still_used {
                    self.withdraw_route(&space, &sub);
                }
            }
            Frame::MetaRequest { request_id, kind, payload, to, barrier } => {
                self.on_meta_request(MetaReq { request_id, kind, payload }, to, barrier)
            }
            Frame::MetaConfirm { request_id, space, activation, to } => {
                self.on_meta_confirm(request_id, space, activation, to)
            }
            _ => {}
        }
    }

    fn on_route_in(&mut self, peer: &str, space: &str, rid: &str, predicate: Option<String>, after: u64) {
        let Some(schema) = self.topo.schema(space) else { return };
        let parsed = match &predicate {
            Some(t) => match Predicate::parse(t, &schema) {
                Ok(p) => Some(p),
                Err(_) => return,
            },
            None => None,
        };
        if !self.feeds.contains_key(space) && !self.create_relay(space) {
            return;
        }
        let now = self.now;
        let link = self.links.get_mut(peer).expect("known link");
        let routes = link.routes_in.entry(space.to_string()).or_default();
        let changed = routes.get(rid).map(|(t, _)| t) != Some(&predicate);
        routes.insert(rid.to_string(), (predicate.clone(), parsed));
        let up = link.up;
        link.streams.entry(space.to_string()).or_insert_with(|| {
            let mut s = OutStream::new(now);
            s.paused = !up;
            s
        });
        if changed && !self.feeds[space].hosted {
            self.announce_route(space, rid, predicate, after);
        }
        self.send_broker(peer, Frame::Ack { space: space.into(), sub: Some(rid.into()), upto: None, pub_id: None, seq: None, epoch: 0 });
    }

    fn on_event(&mut self, peer: &str, e: EventFrame) {
        let space = e.space.clone();
        if !self.feeds.contains_key(&space) {
            let from_upstream = self.topo.host(&space).and_then(|h| self.hop(h)).as_deref() == Some(peer);
            if !from_upstream || !self.create_relay(&space) {
                return;
            }
        }
        let now = self.now;
        let feed = self.feeds.get_mut(&space).expect("present");
        if feed.hosted || feed.upstream.as_deref() != Some(peer) {
            return;
        }
        let accepted = match feed.chain.offer(e, now) {
            Offer::Accepted(v) => v,
            Offer::Duplicate => Vec::new(),
            Offer::Stale | Offer::Buffered | Offer::Overflow => return,
        };
        let (upto, epoch) = (feed.chain.cursor, feed.chain.epoch);
        let mut barriers = Vec::new();
        for ev in accepted {
            for b in &ev.barriers {
                barriers.push((b.clone(), ev.seq));
            }
            feed.events.entry(ev.seq).or_insert(ev);
        }
        feed.refresh_complete();
        for (b, activation) in barriers {
            self.apply_barrier(&b, activation);
        }
        self.dirty.insert(space.clone());
        self.send_broker(peer, Frame::Ack { space, sub: None, upto: Some(upto), pub_id: None, seq: None, epoch });
    }

    fn on_link_up(&mut self, peer: &str) {
        let now = self.now;
        let Some(link) = self.links.get_mut(peer) else { return };
        link.up = true;
        for st in link.streams.values_mut() {
            st.paused = false;
            st.rewind_to_acked(now);
        }
        let spaces: Vec<String> = link.streams.keys().cloned().collect();
        self.dirty.extend(spaces);
        let upstream_of: Vec<String> =
            self.feeds.iter().filter(|(_, f)| f.upstream.as_deref() == Some(peer)).map(|(k, _)| k.clone()).collect();
        for space in upstream_of {
            let feed = self.feeds.get_mut(&space).expect("listed");
            if feed.routes_out.is_empty() {
                let epoch = feed.chain.renack(now);
                let after = feed.chain.cursor;
                self.send_broker(peer, Frame::Nack { space, sub: None, after, epoch });
                continue;
            }
            let cap = feed.chain.cursor.min(feed.complete);
            feed.hold = Some(feed.hold.map_or(cap, |h| h.min(cap)));
            feed.refresh_complete();
            let mut frames = Vec::new();
            for (rid, r) in feed.routes_out.iter_mut() {
                r.acked = false;
                r.sent_at = now;
                frames.push(Frame::Subscribe {
                    space: space.clone(),
                    sub: rid.clone(),
                    predicate: r.predicate.clone(),
                    mode: Mode::Ordered,
                    after: r.after.min(cap),
                });
            }
            for f in frames {
                self.send_broker(peer, f);
            }
        }
        if self.coord.as_ref().is_some_and(|c| c.inflight.is_some()) {
            self.send_inflight();
        }
    }

    fn on_link_down(&mut self, peer: &str) {
        if let Some(link) = self.links.get_mut(peer) {
            link.up = false;
            for st in link.streams.values_mut() {
                st.paused = true;
            }
        }
    }

    fn on_tick(&mut self) {
        let now = self.now;
        let (gap, rto) = (self.gap_timeout, self.rto);
        let mut frames: Vec<(String, Frame)> = Vec::new();
        for (space, feed) in self.feeds.iter_mut().filter(|(_, f)| !f.hosted) {
            let up = feed.upstream.clone().expect("relay");
            if feed.chain.gap_deadline(gap).is_some_and(|t| t <= now) {
                let epoch = feed.chain.renack(now);
                frames.push((up.clone(), Frame::Nack { space: space.clone(), sub: None, after: feed.chain.cursor, epoch }));
            }
            for (rid, r) in feed.routes_out.iter_mut().filter(|(_, r)| !r.acked && r.sent_at + rto <= now) {
                r.sent_at = now;
                frames.push((
                    up.clone(),
                    Frame::Subscribe {
                        space: space.clone(),
                        sub: rid.clone(),
                        predicate: r.predicate.clone(),
                        mode: Mode::Ordered,
                        after: r.after,
                    },
                ));
            }
        }
        for (to, f) in frames {
            self.send_broker(&to, f);
        }
        for link in self.links.values_mut().filter(|l| l.up) {
            for (space, st) in link.streams.iter_mut() {
                if st.deadline(rto).is_some_and(|t| t <= now) {
                    st.rewind_to_acked(now);
                    self.dirty.insert(space.clone());
                }
            }
        }
        let mut snapshots = Vec::new();
        for (client, sess) in self.sessions.iter_mut().filter(|(_, s)| s.connected) {
            for (sid, sub) in sess.subs.iter_mut() {
                if !sub.stream.deadline(rto).is_some_and(|t| t <= now) {
                    continue;
                }
                match sub.mode {
                    Mode::Optimistic => snapshots.push((client.clone(), sid.clone())),
                    Mode::Ordered => sub.stream.rewind_to_acked(now),
                    Mode::Snapshot => {
                        sub.stream.rewind_to_acked(now);
                        if sub.stream.acked < sub.catchup_upto {
                            sub.catchup = Some(sub.stream.acked);
                        }
                    }
                }
                self.dirty.insert(sub.feed.clone());
            }
        }
        for (client, sid) in snapshots {
            self.send_snapshot(&client, &sid);
        }
        if self.coord.as_ref().and_then(|c| c.inflight.as_ref()).is_some_and(|i| i.sent_at + rto <= now) {
            self.send_inflight();
        }
    }

    // ----- introspection ------------------------------------------------------

    pub fn stats(&self) -> serde_json::Value {
        let spaces: serde_json::Map<String, serde_json::Value> = self
            .feeds
            .iter()
            .map(|(k, f)| {
                (
                    k.clone(),
                    json!({
                        "hosted": f.hosted,
                        "durable": f.durable,
                        "complete": f.complete,
                        "events": f.events.len(),
                        "subscriptions": f.tree.len(),
                        "matching": f.tree.metrics(),
                    }),
                )
            })
            .collect();
        let links: serde_json::Map<String, serde_json::Value> = self
            .links
            .iter()
            .map(|(k, l)| (k.clone(), json!({"up": l.up, "sent": l.sent, "retransmitted": l.retransmitted})))
            .collect();
        let interps: serde_json::Map<String, serde_json::Value> =
            self.replicas.iter().map(|(k, r)| (k.clone(), json!({"rows": r.state.len(), "upto": r.upto}))).collect();
        json!({
            "broker": self.id,
            "graph_version": self.graph_version(),
            "spaces": spaces,
            "interpretations": interps,
            "links": links,
            "sessions": self.sessions.values().filter(|s| s.connected).count(),
            "published": self.counters.published,
            "duplicates_suppressed": self.counters.duplicates_suppressed,
            "dead_letters": self.counters.dead_letters,
            "reconfig_errors": self.counters.reconfig_errors,
        })
    }

    /// EVENT frames sent on each broker link: (originals, retransmissions).
    pub fn link_counts(&self) -> BTreeMap<String, (u64, u64)> {
        self.links.iter().map(|(k, l)| (k.clone(), (l.sent, l.retransmitted))).collect()
    }

    pub fn reconfig_errors(&self) -> u64 {
        self.counters.reconfig_errors
    }
}

fn link_wants(
    topo: &Topology,
    hops: &BTreeMap<String, Option<String>>,
    routes: Option<&BTreeMap<String, (Option<String>, Option<Predicate>)>>,
    space: &str,
    peer: &str,
    e: &EventFrame,
) -> bool {
    // Every replica of the stream must see graph changes.
    if space == META_SPACE || !e.barriers.is_empty() {
        return true;
    }
    let towards = |b: &str| hops.get(b).and_then(|h| h.as_deref()) == Some(peer);
    for entry in topo.consumers_of(space) {
        if entry.active_at(e.seq) && towards(&entry.dst_broker) {
            match Topology::arc_interest(entry) {
                None => return true,
                Some(p) if p.eval(&e.values) == Ok(true) => return true,
                Some(_) => {}
            }
        }
    }
    if topo.routes.iter().any(|r| r.route.space == space && r.active_at(e.seq) && towards(&r.route.broker)) {
        return true;
    }
    routes.is_some_and(|m| {
        m.values().any(|(_, p)| match p {
            None => true,
            Some(p) => p.eval(&e.values) == Ok(true),
        })
    })
}

struct Derived {
    values: Vec<Value>,
    origin: String,
    src: u64,
    part: u32,
}

fn run_arc(rt: &mut ArcRt, entry: &ArcEntry, topo: &Topology, feed: &Feed, dead: &mut u64) -> Vec<Derived> {
    let mut out = Vec::new();
    if rt.applied >= feed.complete {
        return out;
    }
    for (&seq, e) in feed.events.range(rt.applied + 1..=feed.complete) {
        rt.applied = seq;
        let mut group: Vec<Vec<Value>> = Vec::new();
        match &entry.arc.op {
            ArcOp::Expand(spec) => {
                let replica = rt.replica.as_mut().expect("expand keeps a replica");
                let active = entry.active_at(seq);
                if active && !rt.dumped {
                    // Activation: bring the destination up to the current state.
                    rt.dumped = true;
                    let keys: Vec<Vec<Value>> = replica.keys().cloned().collect();
                    for k in keys {
                        group.extend(replica.expand_row(&k).unwrap_or_default());
                    }
                }
                if Broker::interp_active(topo, &entry.arc.src, seq) {
                    if let Some(key) = replica.apply_values(&e.values, seq, Layout::Input) {
                        if active {
                            match spec.expand_family() {
                                Some(ExpandFamily::CountSum { attr }) => {
                                    group.push(key.into_iter().chain(std::iter::once(e.values[attr].clone())).collect())
                                }
                                _ => group.extend(replica.expand_row(&key).unwrap_or_default()),
                            }
                        }
                    }
                }
            }
            op => {
                if !entry.active_at(seq) {
                    continue;
                }
                match op {
                    ArcOp::Select(p) => {
                        if p.eval(&e.values) == Ok(true) {
                            group.push(e.values.clone());
                        }
                    }
                    ArcOp::Transform(t) => match t.apply_values(&e.values) {
                        Ok(v) => group.push(v),
                        Err(_) => *dead += 1,
                    },
                    ArcOp::Merge => group.push(e.values.clone()),
                    ArcOp::Interpret(_) | ArcOp::Expand(_) => {}
                }
            }
        }
        for (part, values) in group.into_iter().enumerate() {
            let part = part as u32;
            if let Some((rs, rp)) = rt.restored {
                if seq < rs || (seq == rs && part <= rp) {
                    continue;
                }
            }
            out.push(Derived { values, origin: e.origin.clone(), src: seq, part });
        }
    }
    out
}

fn full_snapshot(replica: &Replica, sid: &str, space: &str) -> Frame {
    Frame::Snapshot {
        sub: sid.into(),
        space: space.into(),
        upto: replica.upto,
        state: Some(replica.state.snapshot()),
        events: None,
        from: None,
    }
}

/// Catch-up for a snapshot-mode subscriber holding the state at `from`:
/// the shorter of the full state and the compressed missed history. `None`
/// when the interpretation is not expandable (the raw history is replayed).
fn catchup_frame(topo: &Topology, feed: &Feed, replica: &Replica, sid: &str, space: &str, from: u64) -> Option<Frame> {
    let spec = replica.state.spec();
    if !spec.is_expandable() {
        return None;
    }
    let missed: Vec<Event> = feed
        .events
        .range(from + 1..=replica.upto)
        .filter(|(&s, _)| Broker::interp_active(topo, space, s))
        .map(|(&s, e)| Event::sequenced(e.values.clone(), e.origin.clone(), s))
        .collect();
    let compressed = compress_history(spec, &missed).ok()?;
    let events = Frame::Snapshot {
        sub: sid.into(),
        space: space.into(),
        upto: replica.upto,
        state: None,
        events: Some(compressed.into_iter().map(|e| e.values).collect()),
        from: Some(from),
    };
    let full = full_snapshot(replica, sid, space);
    if wire::encode_payload(&events).len() <= wire::encode_payload(&full).len() {
        Some(events)
    } else {
        Some(full)
    }
}

/// One row of the reflection space.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRow {
    pub request_id: String,
    pub kind: String,
    pub payload: String,
    pub status: String,
    pub activation: String,
}

impl MetaRow {
    pub fn from_values(values: &[Value]) -> Option<MetaRow> {
        let s = |i: usize| match values.get(i) {
            Some(Value::Str(s)) => Some(s.clone()),
            _ => None,
        };
        Some(MetaRow { request_id: s(0)?, kind: s(1)?, payload: s(2)?, status: s(3)?, activation: s(4)? })
    }
}

/// `"space@seq"` as written in confirmed rows.
pub fn parse_activation(text: &str) -> Option<(String, u64)> {
    let (space, seq) = text.rsplit_once('@')?;
    Some((space.to_string(), seq.parse().ok()?))
}
