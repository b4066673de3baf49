//! Client session state machine: publisher retry, ordered reassembly,
//! optimistic folding and snapshot catch-up. Like the broker it does no
//! I/O; callers feed it frames and send back what it returns.

use std::collections::BTreeMap;

use crate::broker::{Chain, Tick, GAP_TIMEOUT, RETRANSMIT_TIMEOUT};
use crate::interp::{InterpState, Layout};
use crate::model::{InterpSpec, Value};
use crate::wire::{EventFrame, Frame, Mode, Role};

#[derive(Debug, Clone, PartialEq)]
pub struct SubSpec {
    pub sub: String,
    pub space: String,
    pub predicate: Option<String>,
    pub mode: Mode,
}

#[derive(Debug)]
pub struct ClientSub {
    pub spec: SubSpec,
    chain: Chain,
    /// Ordered and snapshot-mode event frames, in delivery order.
    pub delivered: Vec<EventFrame>,
    /// Interpretation state (optimistic and snapshot modes).
    pub state: Option<InterpState>,
    /// Events at or below this seq are covered by an installed snapshot.
    floor: u64,
    pub snapshots: u64,
    /// Compressed catch-up events received.
    pub catchup_events: u64,
    pub errors: Vec<String>,
}

impl ClientSub {
    /// Everything up to here has been received (or covered by a snapshot).
    pub fn cursor(&self) -> u64 {
        self.chain.cursor
    }
}

#[derive(Debug, Clone)]
struct PendingPub {
    space: String,
    values: Vec<Value>,
    sent_at: Tick,
}

#[derive(Debug)]
pub struct Client {
    id: String,
    gap_timeout: Tick,
    rto: Tick,
    bound: usize,
    connected: bool,
    next_pub: u64,
    pending: BTreeMap<u64, PendingPub>,
    /// pub_id → (space, seq) for acknowledged publishes.
    pub acked: BTreeMap<u64, (String, u64)>,
    /// pub_id → error code for rejected publishes.
    pub rejected: BTreeMap<u64, String>,
    pub subs: BTreeMap<String, ClientSub>,
    /// Errors not tied to a publish or subscription.
    pub errors: Vec<(String, String)>,
    pub stats: Option<serde_json::Value>,
}

impl Client {
    pub fn new(id: impl Into<String>) -> Self {
        Client {
            id: id.into(),
            gap_timeout: GAP_TIMEOUT,
            rto: RETRANSMIT_TIMEOUT,
            bound: crate::broker::BUFFER_BOUND,
            connected: false,
            next_pub: 1,
            pending: BTreeMap::new(),
            acked: BTreeMap::new(),
            rejected: BTreeMap::new(),
            subs: BTreeMap::new(),
            errors: Vec::new(),
            stats: None,
        }
    }

    pub fn with_timeouts(mut self, gap: Tick, rto: Tick) -> Self {
        self.gap_timeout = gap;
        self.rto = rto;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    /// Publishes not yet acknowledged or rejected.
    pub fn unacked(&self) -> usize {
        self.pending.len()
    }

    /// (Re)establishes the session: subscriptions resume from their cursors
    /// and unacknowledged publishes are resent under the same ids.
    pub fn connect(&mut self, now: Tick) -> Vec<Frame> {
        self.connected = true;
        let mut out = vec![Frame::Connect { id: self.id.clone(), role: Role::Client }];
        for s in self.subs.values_mut() {
            let after = s.chain.cursor;
            s.chain = Chain::new(after, self.bound);
            out.push(subscribe_frame(&s.spec, after));
        }
        for (&pub_id, p) in self.pending.iter_mut() {
            p.sent_at = now;
            out.push(Frame::Publish { space: p.space.clone(), values: p.values.clone(), pub_id });
        }
        out
    }

    pub fn disconnected(&mut self) {
        self.connected = false;
    }

    /// `interp` is needed to maintain state for optimistic and snapshot
    /// subscriptions; without it those modes only record snapshots.
    pub fn subscribe(&mut self, spec: SubSpec, interp: Option<InterpSpec>) -> Frame {
        let frame = subscribe_frame(&spec, 0);
        let state = match spec.mode {
            Mode::Ordered => None,
            _ => interp.map(InterpState::new),
        };
        let sub = ClientSub {
            spec: spec.clone(),
            chain: Chain::new(0, self.bound),
            delivered: Vec::new(),
            state,
            floor: 0,
            snapshots: 0,
            catchup_events: 0,
            errors: Vec::new(),
        };
        self.subs.insert(spec.sub, sub);
        frame
    }

    pub fn unsubscribe(&mut self, sub: &str) -> Option<Frame> {
        let s = self.subs.remove(sub)?;
        Some(Frame::Unsubscribe { sub: sub.into(), space: Some(s.spec.space) })
    }

    pub fn publish(&mut self, now: Tick, space: &str, values: Vec<Value>) -> (u64, Frame) {
        let pub_id = self.next_pub;
        self.next_pub += 1;
        self.pending.insert(pub_id, PendingPub { space: space.into(), values: values.clone(), sent_at: now });
        (pub_id, Frame::Publish { space: space.into(), values, pub_id })
    }

    /// Asks for a full snapshot of an interpretation subscription.
    pub fn request_snapshot(&self, sub: &str) -> Option<Frame> {
        let s = self.subs.get(sub)?;
        Some(Frame::Snapshot {
            sub: sub.into(),
            space: s.spec.space.clone(),
            upto: s.chain.cursor,
            state: None,
            events: None,
            from: None,
        })
    }

    pub fn handle(&mut self, now: Tick, frame: Frame) -> Vec<Frame> {
        match frame {
            Frame::Ack { pub_id: Some(p), seq: Some(seq), space, .. } => {
                if self.pending.remove(&p).is_some() {
                    self.acked.insert(p, (space, seq));
                }
                Vec::new()
            }
            Frame::Error { code, pub_id: Some(p), .. } => {
                if self.pending.remove(&p).is_some() {
                    self.rejected.insert(p, code);
                }
                Vec::new()
            }
            Frame::Error { code, message, sub: Some(sid), .. } => {
                if let Some(s) = self.subs.get_mut(&sid) {
                    s.errors.push(code);
                } else {
                    self.errors.push((code, message));
                }
                Vec::new()
            }
            Frame::Error { code, message, .. } => {
                self.errors.push((code, message));
                Vec::new()
            }
            Frame::Event(e) => self.on_event(now, e),
            Frame::Snapshot { sub, upto, state, events, from, .. } => self.on_snapshot(now, &sub, upto, state, events, from),
            Frame::Stats { stats } => {
                self.stats = stats;
                Vec::new()
            }
            _ => Vec::new(),
        }
    }

    fn on_event(&mut self, now: Tick, e: EventFrame) -> Vec<Frame> {
        let Some(sid) = e.sub.clone() else { return Vec::new() };
        let Some(s) = self.subs.get_mut(&sid) else { return Vec::new() };
        let (seq, values) = (e.seq, e.values.clone());
        if s.spec.mode == Mode::Optimistic && seq > s.floor {
            // Applied on arrival; the seq guard makes order irrelevant.
            if let Some(st) = s.state.as_mut() {
                st.apply_values(&values, seq, Layout::Input);
            }
        }
        let accepted = match s.chain.offer(e, now) {
            crate::broker::Offer::Accepted(v) => v,
            crate::broker::Offer::Duplicate => Vec::new(),
            crate::broker::Offer::Stale | crate::broker::Offer::Buffered => return Vec::new(),
            crate::broker::Offer::Overflow => {
                let epoch = s.chain.renack(now);
                return vec![Frame::Nack { space: s.spec.space.clone(), sub: Some(sid), after: s.chain.cursor, epoch }];
            }
        };
        for ev in accepted {
            match s.spec.mode {
                Mode::Ordered => s.delivered.push(ev),
                Mode::Snapshot => {
                    if let Some(st) = s.state.as_mut() {
                        st.apply_values(&ev.values, ev.seq, Layout::Input);
                    }
                    s.delivered.push(ev);
                }
                Mode::Optimistic => {}
            }
        }
        vec![ack(s, sid)]
    }

    fn on_snapshot(
        &mut self,
        now: Tick,
        sid: &str,
        upto: u64,
        state: Option<crate::interp::StateSnapshot>,
        events: Option<Vec<Vec<Value>>>,
        from: Option<u64>,
    ) -> Vec<Frame> {
        let Some(s) = self.subs.get_mut(sid) else { return Vec::new() };
        match (state, events) {
            (Some(snap), _) => {
                if s.spec.mode == Mode::Snapshot && upto < s.chain.cursor {
                    return Vec::new();
                }
                if let Some(st) = s.state.as_mut() {
                    match InterpState::from_snapshot(st.spec().clone(), &snap) {
                        Ok(fresh) => *st = fresh,
                        Err(e) => {
                            s.errors.push(e.to_string());
                            return Vec::new();
                        }
                    }
                }
                s.floor = upto;
                s.snapshots += 1;
                s.chain.reset_to(upto);
            }
            (None, Some(events)) => {
                let from = from.unwrap_or(0);
                if from != s.chain.cursor {
                    // Built for a state we do not hold: ask again from ours.
                    let epoch = s.chain.renack(now);
                    return vec![Frame::Nack {
                        space: s.spec.space.clone(),
                        sub: Some(sid.into()),
                        after: s.chain.cursor,
                        epoch,
                    }];
                }
                if let Some(st) = s.state.as_mut() {
                    for (i, v) in events.iter().enumerate() {
                        st.apply_values(v, from + 1 + i as u64, Layout::Expansion);
                    }
                }
                s.catchup_events += events.len() as u64;
                s.snapshots += 1;
                s.floor = upto;
                s.chain.reset_to(upto);
            }
            (None, None) => return Vec::new(),
        }
        vec![ack(s, sid.into())]
    }

    pub fn tick(&mut self, now: Tick) -> Vec<Frame> {
        let mut out = Vec::new();
        if !self.connected {
            return out;
        }
        for (&pub_id, p) in self.pending.iter_mut() {
            if p.sent_at + self.rto <= now {
                p.sent_at = now;
                out.push(Frame::Publish { space: p.space.clone(), values: p.values.clone(), pub_id });
            }
        }
        for (sid, s) in self.subs.iter_mut() {
            if !s.chain.gap_deadline(self.gap_timeout).is_some_and(|t| t <= now) {
                continue;
            }
            if s.spec.mode == Mode::Optimistic {
                s.chain.snooze(now);
                out.push(Frame::Snapshot {
                    sub: sid.clone(),
                    space: s.spec.space.clone(),
                    upto: s.chain.cursor,
                    state: None,
                    events: None,
                    from: None,
                });
            } else {
                let epoch = s.chain.renack(now);
                out.push(Frame::Nack { space: s.spec.space.clone(), sub: Some(sid.clone()), after: s.chain.cursor, epoch });
            }
        }
        out
    }

    pub fn next_deadline(&self) -> Option<Tick> {
        if !self.connected {
            return None;
        }
        let pubs = self.pending.values().map(|p| p.sent_at + self.rto);
        let gaps = self.subs.values().filter_map(|s| s.chain.gap_deadline(self.gap_timeout));
        pubs.chain(gaps).min()
    }
}

fn subscribe_frame(spec: &SubSpec, after: u64) -> Frame {
    Frame::Subscribe {
        space: spec.space.clone(),
        sub: spec.sub.clone(),
        predicate: spec.predicate.clone(),
        mode: spec.mode,
        after,
    }
}

fn ack(s: &ClientSub, sid: String) -> Frame {
    Frame::Ack {
        space: s.spec.space.clone(),
        sub: Some(sid),
        upto: Some(s.chain.cursor),
        pub_id: None,
        seq: None,
        epoch: s.chain.epoch,
    }
}
