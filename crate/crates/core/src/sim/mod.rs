//! Deterministic discrete-event simulation of a broker deployment.
//!
//! Brokers and clients are the production state machines; the simulator
//! owns virtual time, the links between them and the faults. Every choice
//! it makes comes from one seeded generator and actions are ordered by
//! (tick, insertion counter), so a run is a pure function of scenario and
//! seed.

mod check;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub use check::{Check, ASSERTIONS};
pub use scenario::{
    random_values, ClientSpec, Fault, Generate, GraphRef, MetaSubmit, Publish, Scenario, ScenarioError, SubAt, SYMBOLS,
};

use crate::broker::{Broker, BrokerConfig, Input, Output, Peer, Tick};
use crate::client::{Client, SubSpec};
use crate::graph::{ArcOp, FlowGraph};
use crate::log::MemStorage;
use crate::model::InterpSpec;
use crate::wire::{Frame, Mode};

#[derive(Debug, Clone)]
enum Action {
    Deliver { from: Peer, to: Peer, gen: u64, frame: Frame },
    Tick(Peer),
    Publish(usize),
    Subscribe(String, SubAt),
    Online(String),
    Offline(String),
    Crash(String),
    Restart(String),
    PartitionStart((String, String)),
    PartitionEnd((String, String)),
    Meta(usize),
}

struct SimBroker {
    broker: Option<Broker>,
    storage: MemStorage,
    incarnation: u64,
    /// (client, pub_id) acknowledged by this broker, across incarnations.
    acks: BTreeSet<(String, u64)>,
}

struct SimClient {
    client: Client,
    broker: String,
    online: bool,
}

/// Outcome of a run.
#[derive(Debug, Clone)]
pub struct Report {
    pub seed: u64,
    pub quiesced: bool,
    pub end_tick: Tick,
    /// Line-delimited JSON records.
    pub trace: Vec<String>,
    pub checks: Vec<Check>,
    /// EVENT frames put on broker-to-broker links, first sends only.
    pub link_transmissions: u64,
    pub retransmissions: u64,
    pub frugality_violations: u64,
    pub lost_frames: u64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn trace_text(&self) -> String {
        let mut s = self.trace.join("\n");
        s.push('\n');
        s
    }
}

fn link_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

pub struct Sim {
    graph: FlowGraph,
    seed: u64,
    rng: ChaCha8Rng,
    now: Tick,
    counter: u64,
    max_ticks: Tick,
    delay: Tick,
    jitter: Tick,
    queue: BTreeMap<(Tick, u64), Action>,
    brokers: BTreeMap<String, SimBroker>,
    clients: BTreeMap<String, SimClient>,
    publishes: Vec<Publish>,
    meta: Vec<MetaSubmit>,
    faults: Vec<Fault>,
    assertions: Vec<String>,
    link_gen: BTreeMap<(String, String), u64>,
    partitioned: BTreeSet<(String, String)>,
    fault_hits: BTreeSet<(usize, String, u64)>,
    fired_crashes: BTreeSet<usize>,
    scheduled: BTreeMap<Peer, Tick>,
    originals: BTreeMap<(String, String, String, u64, u64), u32>,
    trace: Vec<String>,
    link_transmissions: u64,
    retransmissions: u64,
    frugality_violations: u64,
    lost_frames: u64,
    quiesced: bool,
}

impl Sim {
    pub fn new(scn: &Scenario, graph: FlowGraph, seed: u64) -> Result<Sim, ScenarioError> {
        let publishes = scn.publishes(&graph, seed)?;
        let mut sim = Sim {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            now: 0,
            counter: 0,
            max_ticks: scn.max_ticks,
            delay: scn.delay.max(1),
            jitter: scn.jitter,
            queue: BTreeMap::new(),
            brokers: BTreeMap::new(),
            clients: BTreeMap::new(),
            publishes,
            meta: scn.meta.clone(),
            faults: scn.faults.clone(),
            assertions: scn.assertions.clone(),
            link_gen: BTreeMap::new(),
            partitioned: BTreeSet::new(),
            fault_hits: BTreeSet::new(),
            fired_crashes: BTreeSet::new(),
            scheduled: BTreeMap::new(),
            originals: BTreeMap::new(),
            trace: Vec::new(),
            link_transmissions: 0,
            retransmissions: 0,
            frugality_violations: 0,
            lost_frames: 0,
            quiesced: false,
            graph,
        };
        sim.validate(scn)?;
        for b in sim.graph.brokers().to_vec() {
            let storage = MemStorage::new();
            let broker = Broker::start(BrokerConfig::new(&b, sim.graph.clone()), Box::new(storage.clone()))
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            sim.brokers.insert(b, SimBroker { broker: Some(broker), storage, incarnation: 0, acks: BTreeSet::new() });
        }
        for c in &scn.clients {
            let client = Client::new(&c.id);
            sim.clients.insert(c.id.clone(), SimClient { client, broker: c.broker.clone(), online: false });
            sim.push(c.connect_at, Action::Online(c.id.clone()));
            for s in &c.subs {
                sim.push(s.at, Action::Subscribe(c.id.clone(), s.clone()));
            }
            for &(from, to) in &c.offline {
                sim.push(from, Action::Offline(c.id.clone()));
                sim.push(to, Action::Online(c.id.clone()));
            }
        }
        for i in 0..sim.publishes.len() {
            let t = sim.publishes[i].tick;
            sim.push(t, Action::Publish(i));
        }
        for i in 0..sim.meta.len() {
            let t = sim.meta[i].tick;
            sim.push(t, Action::Meta(i));
        }
        for f in sim.faults.clone() {
            match f {
                Fault::Crash { broker, tick: Some(t), restart_after, .. } => {
                    sim.push(t, Action::Crash(broker.clone()));
                    if let Some(r) = restart_after {
                        sim.push(t + r, Action::Restart(broker));
                    }
                }
                Fault::Restart { broker, tick } => sim.push(tick, Action::Restart(broker)),
                Fault::Partition { link, ticks } => {
                    let k = link_key(&link.0, &link.1);
                    sim.push(ticks.0, Action::PartitionStart(k.clone()));
                    sim.push(ticks.1, Action::PartitionEnd(k));
                }
                _ => {}
            }
        }
        // Broker links come up first, at time zero.
        let links: Vec<(String, String)> = sim.graph.links().to_vec();
        for (a, b) in links {
            sim.restore_link(&a, &b);
        }
        Ok(sim)
    }

    fn validate(&self, scn: &Scenario) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        let brokers: BTreeSet<&str> = self.graph.brokers().iter().map(String::as_str).collect();
        // Spaces the workload itself adds may be subscribed to later.
        let added: BTreeSet<String> = scn
            .meta
            .iter()
            .filter(|m| m.kind == "add_space")
            .filter_map(|m| match &m.payload {
                serde_json::Value::String(t) => serde_json::from_str::<serde_json::Value>(t).ok(),
                v => Some(v.clone()),
            })
            .filter_map(|v| v["space"]["name"].as_str().map(str::to_string))
            .collect();
        let mut clients = BTreeMap::new();
        for c in &scn.clients {
            if !brokers.contains(c.broker.as_str()) {
                return bad(format!("client `{}` attaches to unknown broker `{}`", c.id, c.broker));
            }
            if brokers.contains(c.id.as_str()) || clients.insert(c.id.as_str(), c.broker.as_str()).is_some() {
                return bad(format!("duplicate node name `{}`", c.id));
            }
            for s in &c.subs {
                if self.graph.space(&s.space).is_none() && s.space != crate::graph::META_SPACE && !added.contains(&s.space) {
                    return bad(format!("client `{}` subscribes to unknown space `{}`", c.id, s.space));
                }
            }
        }
        for p in &self.publishes {
            if !clients.contains_key(p.client.as_str()) {
                return bad(format!("publish from unknown client `{}`", p.client));
            }
        }
        for m in &scn.meta {
            if !clients.contains_key(m.client.as_str()) {
                return bad(format!("meta request from unknown client `{}`", m.client));
            }
        }
        let is_link = |a: &str, b: &str| {
            self.graph.links().iter().any(|(x, y)| (x == a && y == b) || (x == b && y == a))
                || clients.get(a) == Some(&b)
                || clients.get(b) == Some(&a)
        };
        for f in &scn.faults {
            match f {
                Fault::Drop { link, .. }
                | Fault::Duplicate { link, .. }
                | Fault::Reorder { link, .. }
                | Fault::Partition { link, .. } => {
                    if !is_link(&link.0, &link.1) {
                        return bad(format!("{} fault names unknown link {}-{}", f.kind(), link.0, link.1));
                    }
                }
                Fault::Crash { broker, tick, after_publish, .. } => {
                    if !brokers.contains(broker.as_str()) {
                        return bad(format!("crash of unknown broker `{broker}`"));
                    }
                    if tick.is_some() == after_publish.is_some() {
                        return bad("crash needs exactly one of `tick` and `after_publish`".into());
                    }
                }
                Fault::Restart { broker, .. } => {
                    if !brokers.contains(broker.as_str()) {
                        return bad(format!("restart of unknown broker `{broker}`"));
                    }
                }
            }
            if let Fault::Partition { ticks, .. } = f {
                if ticks.1 <= ticks.0 {
                    return bad("partition window is empty".into());
                }
            }
        }
        for a in &scn.assertions {
            if !ASSERTIONS.contains(&a.as_str()) {
                return bad(format!("unknown assertion `{a}`"));
            }
        }
        Ok(())
    }

    fn push(&mut self, t: Tick, a: Action) {
        self.counter += 1;
        self.queue.insert((t, self.counter), a);
    }

    fn record(&mut self, v: serde_json::Value) {
        let mut obj = serde_json::Map::new();
        obj.insert("t".into(), json!(self.now));
        if let serde_json::Value::Object(m) = v {
            obj.extend(m);
        }
        self.trace.push(serde_json::Value::Object(obj).to_string());
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn graph(&self) -> &FlowGraph {
        &self.graph
    }

    pub fn broker(&self, id: &str) -> Option<&Broker> {
        self.brokers.get(id).and_then(|b| b.broker.as_ref())
    }

    pub fn storage(&self, id: &str) -> Option<&MemStorage> {
        self.brokers.get(id).map(|b| &b.storage)
    }

    pub fn client(&self, id: &str) -> Option<&Client> {
        self.clients.get(id).map(|c| &c.client)
    }

    pub fn clients(&self) -> impl Iterator<Item = &Client> {
        self.clients.values().map(|c| &c.client)
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    // ----- links -------------------------------------------------------------

    fn alive(&self, b: &str) -> bool {
        self.brokers.get(b).is_some_and(|x| x.broker.is_some())
    }

    fn usable(&self, a: &str, b: &str) -> bool {
        if self.partitioned.contains(&link_key(a, b)) {
            return false;
        }
        let ok = |n: &str| match self.clients.get(n) {
            Some(c) => c.online,
            None => self.alive(n),
        };
        ok(a) && ok(b)
    }

    fn gen(&self, a: &str, b: &str) -> u64 {
        self.link_gen.get(&link_key(a, b)).copied().unwrap_or(0)
    }

    /// Tears a link down: frames in flight on it are lost and the surviving
    /// ends are told.
    fn break_link(&mut self, a: &str, b: &str) {
        *self.link_gen.entry(link_key(a, b)).or_default() += 1;
        for (me, other) in [(a, b), (b, a)] {
            if let Some(c) = self.clients.get_mut(me) {
                c.client.disconnected();
            } else if self.alive(me) {
                let peer = self.peer(other);
                self.broker_input(me, Input::LinkDown(peer));
            }
        }
    }

    fn restore_link(&mut self, a: &str, b: &str) {
        if !self.usable(a, b) {
            return;
        }
        *self.link_gen.entry(link_key(a, b)).or_default() += 1;
        let (first, second) = if a <= b { (a, b) } else { (b, a) };
        for (me, other) in [(first, second), (second, first)] {
            if self.clients.contains_key(me) {
                continue;
            }
            let peer = self.peer(other);
            self.broker_input(me, Input::LinkUp(peer));
        }
        for c in [a, b] {
            if self.clients.contains_key(c) {
                let now = self.now;
                let frames = self.clients.get_mut(c).expect("client").client.connect(now);
                self.client_send(c, frames);
            }
        }
    }

    fn peer(&self, name: &str) -> Peer {
        if self.clients.contains_key(name) {
            Peer::Client(name.to_string())
        } else {
            Peer::Broker(name.to_string())
        }
    }

    fn links_of(&self, b: &str) -> Vec<String> {
        let mut v: Vec<String> = self.graph.neighbors(b).map(str::to_string).collect();
        v.extend(self.clients.iter().filter(|(_, c)| c.broker == b).map(|(k, _)| k.clone()));
        v
    }

    fn transmit(&mut self, from: &str, to: &str, frame: Frame) {
        if !self.usable(from, to) {
            self.lost_frames += 1;
            return;
        }
        let mut copies = 1;
        let mut extra = 0;
        let key = link_key(from, to);
        if let Frame::Event(e) = &frame {
            for (i, f) in self.faults.iter().enumerate() {
                match f {
                    Fault::Drop { link, space, seqs }
                        if link_key(&link.0, &link.1) == key
                            && space.as_ref().map_or(true, |s| *s == e.space)
                            && (seqs.0..=seqs.1).contains(&e.seq) =>
                    {
                        if self.fault_hits.insert((i, e.space.clone(), e.seq)) {
                            copies = 0;
                        }
                    }
                    Fault::Duplicate { link, space, seq }
                        if link_key(&link.0, &link.1) == key
                            && space.as_ref().map_or(true, |s| *s == e.space)
                            && e.seq == *seq =>
                    {
                        if self.fault_hits.insert((i, e.space.clone(), e.seq)) {
                            copies = 2;
                        }
                    }
                    _ => {}
                }
            }
            if copies != 1 {
                let (space, seq) = (e.space.clone(), e.seq);
                let what = if copies == 0 { "drop" } else { "duplicate" };
                self.record(json!({"ev": what, "from": from, "to": to, "space": space, "seq": seq}));
            }
        }
        for f in &self.faults {
            if let Fault::Reorder { link, window, ticks } = f {
                let active = ticks.map_or(true, |(a, b)| (a..b).contains(&self.now));
                if active && link_key(&link.0, &link.1) == key && *window > 0 {
                    extra = extra.max(self.rng.gen_range(0..=*window));
                }
            }
        }
        let gen = self.gen(from, to);
        for _ in 0..copies {
            let jitter = if self.jitter > 0 { self.rng.gen_range(0..=self.jitter) } else { 0 };
            let at = self.now + self.delay + jitter + extra;
            let action = Action::Deliver { from: self.peer(from), to: self.peer(to), gen, frame: frame.clone() };
            self.push(at, action);
        }
        if copies == 0 {
            self.lost_frames += 1;
        }
    }

    // ----- nodes -------------------------------------------------------------

    fn broker_input(&mut self, b: &str, input: Input) {
        let now = self.now;
        let Some(sb) = self.brokers.get_mut(b) else { return };
        let Some(broker) = sb.broker.as_mut() else { return };
        let appends = sb.storage.appends();
        let outs = broker.handle(now, input);
        let mut fresh = 0;
        for o in &outs {
            if let (Peer::Client(c), Frame::Ack { pub_id: Some(p), seq: Some(_), .. }) = (&o.to, &o.frame) {
                if sb.acks.insert((c.clone(), *p)) {
                    fresh += 1;
                }
            }
        }
        let total = sb.acks.len() as u64;
        let wrote = sb.storage.appends() > appends;
        let trigger = (fresh > 0)
            .then(|| {
                self.faults.iter().enumerate().find_map(|(i, f)| match f {
                    Fault::Crash { broker, after_publish: Some(n), torn, restart_after, .. }
                        if broker == b && *n <= total && !self.fired_crashes.contains(&i) =>
                    {
                        Some((i, *torn, *restart_after))
                    }
                    _ => None,
                })
            })
            .flatten();
        match trigger {
            Some((i, torn, restart_after)) => {
                self.fired_crashes.insert(i);
                if torn && wrote {
                    let sb = self.brokers.get_mut(b).expect("present");
                    // The process died mid-write: its replies never left.
                    let file = sb.storage.tear_last(7);
                    self.record(json!({"ev": "torn", "broker": b, "file": file}));
                } else {
                    self.dispatch(b, outs);
                }
                self.crash(b);
                if let Some(r) = restart_after {
                    self.push(self.now + r, Action::Restart(b.to_string()));
                }
            }
            None => {
                self.dispatch(b, outs);
                self.schedule_tick(Peer::Broker(b.to_string()));
            }
        }
    }

    fn dispatch(&mut self, b: &str, outs: Vec<Output>) {
        let inc = self.brokers[b].incarnation;
        for o in outs {
            match &o.to {
                Peer::Broker(to) => {
                    if let Frame::Event(e) = &o.frame {
                        if o.retransmit {
                            self.retransmissions += 1;
                        } else {
                            self.link_transmissions += 1;
                            let n = self
                                .originals
                                .entry((b.to_string(), to.clone(), e.space.clone(), e.seq, inc))
                                .or_default();
                            *n += 1;
                            if *n > 1 {
                                self.frugality_violations += 1;
                            }
                        }
                        let (space, seq) = (e.space.clone(), e.seq);
                        self.record(json!({"ev": "send", "from": b, "to": to, "space": space, "seq": seq, "re": o.retransmit}));
                    }
                    let to = to.clone();
                    self.transmit(b, &to, o.frame);
                }
                Peer::Client(c) => {
                    if self.clients.get(c).is_some_and(|x| x.broker == b) {
                        let c = c.clone();
                        self.transmit(b, &c, o.frame);
                    }
                }
            }
        }
    }

    fn client_send(&mut self, c: &str, frames: Vec<Frame>) {
        let b = self.clients[c].broker.clone();
        for f in frames {
            self.transmit(c, &b, f);
        }
        self.schedule_tick(Peer::Client(c.to_string()));
    }

    fn client_input(&mut self, c: &str, frame: Frame) {
        let now = self.now;
        let sc = self.clients.get_mut(c).expect("client");
        let before: BTreeMap<String, (usize, u64)> =
            sc.client.subs.iter().map(|(k, s)| (k.clone(), (s.delivered.len(), s.snapshots))).collect();
        let recv = match &frame {
            Frame::Event(e) => e.sub.clone().map(|s| (s, e.seq)),
            _ => None,
        };
        let ack = match &frame {
            Frame::Ack { pub_id: Some(p), seq: Some(s), .. } => Some((*p, *s)),
            _ => None,
        };
        let frames = sc.client.handle(now, frame);
        let mut records = Vec::new();
        if let Some((p, s)) = ack {
            records.push(json!({"ev": "acked", "client": c, "pub_id": p, "seq": s}));
        }
        for (sid, s) in &sc.client.subs {
            let (n, snaps) = before.get(sid).copied().unwrap_or((0, 0));
            for e in &s.delivered[n.min(s.delivered.len())..] {
                records.push(json!({"ev": "deliver", "client": c, "sub": sid, "seq": e.seq, "values": e.values}));
            }
            if s.snapshots > snaps {
                records.push(json!({"ev": "snapshot", "client": c, "sub": sid, "upto": s.cursor()}));
            }
            if s.spec.mode == Mode::Optimistic {
                if let Some((rs, seq)) = &recv {
                    if rs == sid {
                        records.push(json!({"ev": "recv", "client": c, "sub": sid, "seq": seq}));
                    }
                }
            }
        }
        for r in records {
            self.record(r);
        }
        self.client_send(c, frames);
    }

    fn schedule_tick(&mut self, node: Peer) {
        let deadline = match &node {
            Peer::Broker(b) => self.broker(b).and_then(Broker::next_deadline),
            Peer::Client(c) => self.clients.get(c).and_then(|c| c.client.next_deadline()),
        };
        let Some(d) = deadline else { return };
        let t = d.max(self.now + 1);
        if self.scheduled.get(&node).is_some_and(|&s| s <= t) {
            return;
        }
        self.scheduled.insert(node.clone(), t);
        self.push(t, Action::Tick(node));
    }

    fn crash(&mut self, b: &str) {
        let Some(sb) = self.brokers.get_mut(b) else { return };
        if sb.broker.take().is_none() {
            return;
        }
        self.record(json!({"ev": "crash", "broker": b}));
        self.scheduled.remove(&Peer::Broker(b.to_string()));
        for other in self.links_of(b) {
            self.break_link(b, &other);
        }
    }

    fn restart(&mut self, b: &str) {
        if self.alive(b) {
            return;
        }
        let sb = self.brokers.get_mut(b).expect("known broker");
        let cfg = BrokerConfig::new(b, self.graph.clone());
        match Broker::start(cfg, Box::new(sb.storage.clone())) {
            Ok(broker) => {
                sb.broker = Some(broker);
                sb.incarnation += 1;
                self.record(json!({"ev": "restart", "broker": b}));
                for other in self.links_of(b) {
                    self.restore_link(b, &other);
                }
                self.schedule_tick(Peer::Broker(b.to_string()));
            }
            Err(e) => self.record(json!({"ev": "restart-failed", "broker": b, "error": e.to_string()})),
        }
    }

    fn interp_for(&self, space: &str) -> Option<InterpSpec> {
        self.graph.arcs().iter().find(|a| a.dst == space).and_then(|a| match &a.op {
            ArcOp::Interpret(spec) => Some(spec.clone()),
            _ => None,
        })
    }

    fn step(&mut self, action: Action) {
        match action {
            Action::Deliver { from, to, gen, frame } => {
                if gen != self.gen(from.name(), to.name()) || !self.usable(from.name(), to.name()) {
                    self.lost_frames += 1;
                    return;
                }
                match to {
                    Peer::Broker(b) => self.broker_input(&b, Input::Frame { from, frame }),
                    Peer::Client(c) => self.client_input(&c, frame),
                }
            }
            Action::Tick(node) => {
                if self.scheduled.get(&node) != Some(&self.now) {
                    return;
                }
                self.scheduled.remove(&node);
                match node {
                    Peer::Broker(b) => self.broker_input(&b, Input::Tick),
                    Peer::Client(c) => {
                        let now = self.now;
                        let frames = self.clients.get_mut(&c).expect("client").client.tick(now);
                        self.client_send(&c, frames);
                    }
                }
            }
            Action::Publish(i) => {
                let p = self.publishes[i].clone();
                let now = self.now;
                let sc = self.clients.get_mut(&p.client).expect("validated");
                let (pub_id, frame) = sc.client.publish(now, &p.space, p.values.clone());
                let connected = sc.client.is_connected();
                self.record(json!({"ev": "publish", "client": p.client, "pub_id": pub_id, "space": p.space, "values": p.values}));
                if connected {
                    self.client_send(&p.client, vec![frame]);
                }
            }
            Action::Subscribe(c, s) => {
                let interp = self.interp_for(&s.space);
                let spec = SubSpec { sub: s.sub.clone(), space: s.space.clone(), predicate: s.predicate.clone(), mode: s.mode };
                let sc = self.clients.get_mut(&c).expect("validated");
                let frame = sc.client.subscribe(spec, interp);
                if sc.client.is_connected() {
                    self.client_send(&c, vec![frame]);
                }
            }
            Action::Online(c) => {
                let sc = self.clients.get_mut(&c).expect("validated");
                if sc.online {
                    return;
                }
                sc.online = true;
                let b = sc.broker.clone();
                self.record(json!({"ev": "online", "client": c}));
                self.restore_link(&c, &b);
            }
            Action::Offline(c) => {
                let sc = self.clients.get_mut(&c).expect("validated");
                if !sc.online {
                    return;
                }
                let b = sc.broker.clone();
                self.break_link(&c, &b);
                self.clients.get_mut(&c).expect("validated").online = false;
                self.record(json!({"ev": "offline", "client": c}));
            }
            Action::Crash(b) => self.crash(&b),
            Action::Restart(b) => self.restart(&b),
            Action::PartitionStart(k) => {
                if self.partitioned.contains(&k) {
                    return;
                }
                self.record(json!({"ev": "partition", "link": [k.0, k.1]}));
                self.break_link(&k.0, &k.1);
                self.partitioned.insert(k);
            }
            Action::PartitionEnd(k) => {
                if self.partitioned.remove(&k) {
                    self.record(json!({"ev": "heal", "link": [k.0, k.1]}));
                    self.restore_link(&k.0, &k.1);
                }
            }
            Action::Meta(i) => {
                let m = self.meta[i].clone();
                let payload = match &m.payload {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                let request_id = format!("{}-m{}", m.client, i + 1);
                self.record(json!({"ev": "meta", "client": m.client, "request_id": request_id, "kind": m.kind}));
                let frame = Frame::MetaRequest { request_id, kind: m.kind, payload, to: None, barrier: None };
                if self.clients[&m.client].client.is_connected() {
                    self.client_send(&m.client, vec![frame]);
                }
            }
        }
    }

    /// Runs until nothing is pending or virtual time passes `limit`.
    pub fn run_until(&mut self, limit: Tick) -> bool {
        while let Some(entry) = self.queue.first_entry() {
            let (t, _) = *entry.key();
            if t > limit {
                return false;
            }
            let action = entry.remove();
            self.now = t;
            self.step(action);
        }
        true
    }

    /// Runs to quiescence or the scenario's tick limit.
    pub fn run(&mut self) -> bool {
        self.quiesced = self.run_until(self.max_ticks);
        self.quiesced
    }

    pub fn quiesced(&self) -> bool {
        self.quiesced
    }

    /// Runs, evaluates the scenario's assertions and seals the trace.
    pub fn finish(mut self) -> Report {
        let quiesced = self.run();
        if !quiesced {
            let backlog = self.queue.len();
            self.record(json!({"ev": "tick-limit", "backlog": backlog}));
        }
        let mut finals = Vec::new();
        for (id, c) in &self.clients {
            for (sid, s) in &c.client.subs {
                let state = s.state.as_ref().map(|st| st.table());
                finals.push(json!({"ev": "final", "client": id, "sub": sid, "delivered": s.delivered.len(), "cursor": s.cursor(), "state": state}));
            }
        }
        for (id, b) in &self.brokers {
            let spaces: BTreeMap<String, u64> = b
                .broker
                .as_ref()
                .map(|br| {
                    self.graph
                        .spaces()
                        .iter()
                        .filter_map(|s| br.complete(&s.name).map(|c| (s.name.clone(), c)))
                        .collect()
                })
                .unwrap_or_default();
            finals.push(json!({"ev": "final", "broker": id, "complete": spaces}));
        }
        for f in finals {
            self.record(f);
        }
        let checks: Vec<Check> = self.assertions.clone().iter().map(|a| check::run(&self, a)).collect();
        for c in &checks {
            self.record(json!({"ev": "assert", "name": c.name, "passed": c.passed, "detail": c.detail}));
        }
        Report {
            seed: self.seed,
            quiesced,
            end_tick: self.now,
            trace: std::mem::take(&mut self.trace),
            checks,
            link_transmissions: self.link_transmissions,
            retransmissions: self.retransmissions,
            frugality_violations: self.frugality_violations,
            lost_frames: self.lost_frames,
        }
    }

    /// Checks by name against the current state.
    pub fn check(&self, name: &str) -> Check {
        check::run(self, name)
    }

    pub fn frugality_violations(&self) -> u64 {
        self.frugality_violations
    }

    pub fn link_transmissions(&self) -> u64 {
        self.link_transmissions
    }
}

/// Convenience: build, run and check a scenario.
pub fn run_scenario(scn: &Scenario, graph: FlowGraph, seed: u64) -> Result<Report, ScenarioError> {
    Ok(Sim::new(scn, graph, seed)?.finish())
}
