//! Per-receiver reliable streams: the sender walks a feed and chains what it
//! sends; the receiver accepts in chain order, buffers ahead-of-chain frames
//! and asks for a resend when a gap persists.

use std::collections::BTreeMap;

use crate::wire::EventFrame;

pub type Tick = u64;

/// Sender half. `pos` is the last seq sent (the next frame's `prev`), `scan`
/// how far the feed has been examined for this receiver.
#[derive(Debug, Clone)]
pub(crate) struct OutStream {
    pub pos: u64,
    pub scan: u64,
    pub acked: u64,
    pub epoch: u64,
    /// Last time the receiver made progress or the stream was rewound.
    pub since: Tick,
    /// Highest seq ever sent; anything at or below is a retransmission.
    pub high: u64,
    pub paused: bool,
}

impl OutStream {
    pub fn new(now: Tick) -> Self {
        OutStream { pos: 0, scan: 0, acked: 0, epoch: 0, since: now, high: 0, paused: false }
    }

    pub fn on_nack(&mut self, after: u64, epoch: u64, now: Tick) {
        self.epoch = epoch;
        self.pos = after;
        self.scan = after;
        self.acked = after;
        self.since = now;
    }

    /// Returns true when the ack was current.
    pub fn on_ack(&mut self, upto: u64, epoch: u64, now: Tick) -> bool {
        if epoch != self.epoch {
            return false;
        }
        if upto > self.acked {
            self.acked = upto;
            self.since = now;
        }
        if upto > self.pos {
            // The receiver already holds more than we sent this incarnation.
            self.pos = upto;
            self.scan = upto;
        }
        true
    }

    /// Go-back-N after an unacknowledged stretch.
    pub fn rewind_to_acked(&mut self, now: Tick) {
        self.pos = self.acked;
        self.scan = self.acked;
        self.since = now;
    }

    pub fn deadline(&self, rto: Tick) -> Option<Tick> {
        (!self.paused && self.pos > self.acked).then_some(self.since + rto)
    }

    /// Records a send; true when it is a retransmission.
    pub fn sent(&mut self, seq: u64) -> bool {
        self.pos = seq;
        let retrans = seq <= self.high;
        self.high = self.high.max(seq);
        retrans
    }
}

/// Receiver half.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    pub cursor: u64,
    pub epoch: u64,
    pending: BTreeMap<u64, EventFrame>,
    gap_since: Option<Tick>,
    bound: usize,
}

#[derive(Debug, PartialEq)]
pub enum Offer {
    /// Already held: re-acknowledge.
    Duplicate,
    /// From another incarnation: dropped. If nothing current follows, the
    /// gap timer re-NACKs (NACKs can be reordered too).
    Stale,
    /// Newly in-order frames (the offered one plus any unblocked buffer).
    Accepted(Vec<EventFrame>),
    Buffered,
    /// Buffer full; the frame was dropped and will be recovered by NACK.
    Overflow,
}

impl Chain {
    pub fn new(cursor: u64, bound: usize) -> Self {
        Chain { cursor, epoch: 0, pending: BTreeMap::new(), gap_since: None, bound }
    }

    pub fn offer(&mut self, e: EventFrame, now: Tick) -> Offer {
        if e.epoch != self.epoch {
            self.gap_since.get_or_insert(now);
            return Offer::Stale;
        }
        if e.seq <= self.cursor {
            return Offer::Duplicate;
        }
        if e.prev > self.cursor {
            if self.pending.contains_key(&e.seq) {
                return Offer::Buffered;
            }
            if self.pending.len() >= self.bound {
                return Offer::Overflow;
            }
            self.pending.insert(e.seq, e);
            self.gap_since.get_or_insert(now);
            return Offer::Buffered;
        }
        self.cursor = e.seq;
        let mut out = vec![e];
        while let Some((&seq, next)) = self.pending.iter().next() {
            if seq <= self.cursor {
                self.pending.remove(&seq);
            } else if next.prev <= self.cursor {
                let next = self.pending.remove(&seq).expect("present");
                self.cursor = seq;
                out.push(next);
            } else {
                break;
            }
        }
        self.gap_since = if self.pending.is_empty() { None } else { Some(now) };
        Offer::Accepted(out)
    }

    pub fn has_gap(&self) -> bool {
        !self.pending.is_empty()
    }

    pub fn gap_deadline(&self, timeout: Tick) -> Option<Tick> {
        self.gap_since.map(|t| t + timeout)
    }

    /// Starts a new incarnation resuming after `after`; returns the epoch to
    /// put in the NACK.
    pub fn rewind(&mut self, after: u64, now: Tick) -> u64 {
        self.cursor = after;
        self.pending.clear();
        self.gap_since = None;
        self.epoch += 1;
        let _ = now;
        self.epoch
    }

    /// Resend request for the current gap, keeping the cursor.
    pub fn renack(&mut self, now: Tick) -> u64 {
        let c = self.cursor;
        self.rewind(c, now)
    }

    /// Restart the chain at `upto` within the current epoch (a snapshot
    /// valid at `upto` was installed; the sender resumes from there).
    pub fn reset_to(&mut self, upto: u64) {
        self.cursor = upto;
        self.pending.clear();
        self.gap_since = None;
    }

    /// Restart the gap timer after asking for a repair by other means.
    pub fn snooze(&mut self, now: Tick) {
        if self.gap_since.is_some() {
            self.gap_since = Some(now);
        }
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }
}
