//! Interpretation of event histories into keyed aggregate state, and the
//! inverse direction: expanding a state back into an equivalent history.
//!
//! `latest` is guarded by per-key sequence numbers and every row remembers
//! which sequence numbers it has absorbed, so folding is insensitive to
//! delivery order and to duplicates. Float sums use an exact accumulator for
//! the same reason.

mod exact_sum;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use exact_sum::ExactSum;

use crate::model::{AggKind, AttrType, Event, ExpandFamily, InterpSpec, ModelError, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterpError {
    #[error("event has no sequence number")]
    MissingSeq,
    #[error("interpretation specs differ")]
    SpecMismatch,
    #[error("aggregate set is not expandable: {0}")]
    NotExpandable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Positional layout of incoming values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// The spec's input schema.
    Input,
    /// The spec's expansion schema (keys then aggregated attributes).
    Expansion,
}

#[derive(Debug, Clone, PartialEq)]
enum Cell {
    Value(Value),
    IntSum(i64),
    FloatSum(ExactSum),
    Count(i64),
}

impl Cell {
    fn value(&self) -> Value {
        match self {
            Cell::Value(v) => v.clone(),
            Cell::IntSum(s) => Value::Int(*s),
            Cell::FloatSum(s) => Value::Float(s.value()),
            Cell::Count(c) => Value::Int(*c),
        }
    }
}

#[derive(Debug, Clone)]
struct Row {
    cells: Vec<Cell>,
    last_seq: u64,
    seen: BTreeSet<u64>,
}

/// Keyed table of aggregate rows produced by folding events.
#[derive(Debug, Clone)]
pub struct InterpState {
    spec: InterpSpec,
    rows: BTreeMap<Vec<Value>, Row>,
    input_pos: Positions,
    expansion_pos: Positions,
}

#[derive(Debug, Clone)]
struct Positions {
    keys: Vec<usize>,
    attrs: Vec<Option<usize>>,
}

impl InterpState {
    pub fn new(spec: InterpSpec) -> Self {
        let input_pos = Positions {
            keys: spec.keys().to_vec(),
            attrs: spec.aggregates().iter().map(|a| a.attr).collect(),
        };
        let exp = spec.expansion_schema();
        let input = spec.input();
        let expansion_pos = Positions {
            keys: (0..spec.keys().len()).collect(),
            attrs: spec
                .aggregates()
                .iter()
                .map(|a| a.attr.map(|i| exp.index_of(&input.attr(i).name).expect("aggregated attr in expansion")))
                .collect(),
        };
        InterpState { spec, rows: BTreeMap::new(), input_pos, expansion_pos }
    }

    pub fn spec(&self) -> &InterpSpec {
        &self.spec
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &Vec<Value>> {
        self.rows.keys()
    }

    /// Aggregate columns of the row for `key`.
    pub fn row(&self, key: &[Value]) -> Option<Vec<Value>> {
        self.rows.get(key).map(|r| r.cells.iter().map(Cell::value).collect())
    }

    pub fn last_seq(&self, key: &[Value]) -> Option<u64> {
        self.rows.get(key).map(|r| r.last_seq)
    }

    /// Rows rendered as state-schema tuples, in key order.
    pub fn table(&self) -> Vec<Vec<Value>> {
        self.rows
            .iter()
            .map(|(k, r)| k.iter().cloned().chain(r.cells.iter().map(Cell::value)).collect())
            .collect()
    }

    /// Folds one sequenced event given in the input schema. Returns whether
    /// any aggregate column changed.
    pub fn apply_event(&mut self, e: &Event) -> Result<bool, InterpError> {
        crate::model::check_values(self.spec.input(), &e.values)?;
        let seq = e.seq().ok_or(InterpError::MissingSeq)?;
        Ok(self.apply_values(&e.values, seq, Layout::Input).is_some())
    }

    /// Folds one event laid out per `layout`. Returns the key when the row's
    /// aggregate columns changed. A sequence number already absorbed by the
    /// row is a no-op.
    pub fn apply_values(&mut self, values: &[Value], seq: u64, layout: Layout) -> Option<Vec<Value>> {
        let pos = match layout {
            Layout::Input => &self.input_pos,
            Layout::Expansion => &self.expansion_pos,
        };
        let key: Vec<Value> = pos.keys.iter().map(|k| values[*k].clone()).collect();
        let attr_vals: Vec<Option<Value>> = pos.attrs.iter().map(|a| a.map(|i| values[i].clone())).collect();
        let spec = &self.spec;
        let row = self.rows.entry(key.clone()).or_insert_with(|| Row {
            cells: spec
                .aggregates()
                .iter()
                .zip(&attr_vals)
                .map(|(a, v)| match (a.kind, v) {
                    (AggKind::Count, _) => Cell::Count(0),
                    (AggKind::Sum, Some(Value::Float(_))) => Cell::FloatSum(ExactSum::new()),
                    (AggKind::Sum, _) => Cell::IntSum(0),
                    (_, Some(v)) => Cell::Value(v.clone()),
                    (_, None) => unreachable!("non-count aggregate has an attribute"),
                })
                .collect(),
            last_seq: 0,
            seen: BTreeSet::new(),
        });
        if !row.seen.insert(seq) {
            return None;
        }
        let newer = row.seen.len() == 1 || seq > row.last_seq;
        let before = row.cells.clone();
        for ((agg, cell), v) in spec.aggregates().iter().zip(row.cells.iter_mut()).zip(attr_vals) {
            match (agg.kind, cell) {
                (AggKind::Latest, Cell::Value(cur)) => {
                    if newer {
                        *cur = v.expect("latest has attr");
                    }
                }
                (AggKind::Max, Cell::Value(cur)) => {
                    let v = v.expect("max has attr");
                    if v > *cur {
                        *cur = v;
                    }
                }
                (AggKind::Min, Cell::Value(cur)) => {
                    let v = v.expect("min has attr");
                    if v < *cur {
                        *cur = v;
                    }
                }
                (AggKind::Sum, Cell::IntSum(s)) => {
                    if let Some(Value::Int(i)) = v {
                        *s = s.wrapping_add(i);
                    }
                }
                (AggKind::Sum, Cell::FloatSum(s)) => {
                    if let Some(Value::Float(x)) = v {
                        s.add(x);
                    }
                }
                (AggKind::Count, Cell::Count(c)) => *c += 1,
                _ => unreachable!("cell kind follows aggregate kind"),
            }
        }
        row.last_seq = row.last_seq.max(seq);
        // A brand-new row always counts as a change.
        if row.seen.len() == 1 || row.cells != before {
            Some(key)
        } else {
            None
        }
    }

    /// Canonical expansion of one row as expansion-schema tuples.
    pub fn expand_row(&self, key: &[Value]) -> Result<Vec<Vec<Value>>, InterpError> {
        let family = self.family()?;
        let Some(row) = self.rows.get(key) else {
            return Ok(Vec::new());
        };
        let cols: Vec<Value> = row.cells.iter().map(Cell::value).collect();
        let mk = |v: Value| -> Vec<Value> { key.iter().cloned().chain(std::iter::once(v)).collect() };
        let aggs = self.spec.aggregates();
        let find = |k: AggKind| aggs.iter().position(|a| a.kind == k).map(|i| cols[i].clone());
        Ok(match family {
            ExpandFamily::LatestExtrema { .. } => {
                let mut seq: Vec<Value> = Vec::with_capacity(3);
                for v in [find(AggKind::Min), find(AggKind::Max), find(AggKind::Latest)].into_iter().flatten() {
                    if seq.last() != Some(&v) {
                        seq.push(v);
                    }
                }
                seq.into_iter().map(mk).collect()
            }
            ExpandFamily::CountSum { attr } => {
                let count = match find(AggKind::Count) {
                    Some(Value::Int(c)) => c,
                    _ => unreachable!("count column is int"),
                };
                let sum = find(AggKind::Sum).expect("sum column");
                let zero = match self.spec.input().attr(attr).ty {
                    AttrType::Int64 => Value::Int(0),
                    _ => Value::Float(0.0),
                };
                let mut out: Vec<Vec<Value>> = (1..count).map(|_| mk(zero.clone())).collect();
                out.push(mk(sum));
                out
            }
        })
    }

    fn family(&self) -> Result<ExpandFamily, InterpError> {
        self.spec.expand_family().ok_or_else(|| InterpError::NotExpandable(self.spec.to_string()))
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            rows: self
                .rows
                .iter()
                .map(|(k, r)| SnapshotRow {
                    key: k.clone(),
                    values: r.cells.iter().map(Cell::value).collect(),
                    last_seq: r.last_seq,
                    partials: r
                        .cells
                        .iter()
                        .enumerate()
                        .filter_map(|(i, c)| match c {
                            Cell::FloatSum(s) => Some((i, s.partials().to_vec())),
                            _ => None,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Rebuilds a state from a snapshot. Per-row absorbed-seq sets are not
    /// part of the snapshot; callers track a watermark instead.
    pub fn from_snapshot(spec: InterpSpec, snap: &StateSnapshot) -> Result<InterpState, InterpError> {
        let mut st = InterpState::new(spec);
        let naggs = st.spec.aggregates().len();
        for row in &snap.rows {
            if row.key.len() != st.spec.keys().len() || row.values.len() != naggs {
                return Err(InterpError::SpecMismatch);
            }
            let cells = st
                .spec
                .aggregates()
                .iter()
                .zip(&row.values)
                .enumerate()
                .map(|(i, (a, v))| match (a.kind, v) {
                    (AggKind::Count, Value::Int(c)) => Ok(Cell::Count(*c)),
                    (AggKind::Sum, Value::Int(s)) => Ok(Cell::IntSum(*s)),
                    (AggKind::Sum, Value::Float(x)) => Ok(Cell::FloatSum(match row.partials.get(&i) {
                        Some(p) => ExactSum::from_partials(p.clone()),
                        None => ExactSum::from_partials(vec![*x]),
                    })),
                    (AggKind::Count | AggKind::Sum, _) => Err(InterpError::SpecMismatch),
                    (_, v) => Ok(Cell::Value(v.clone())),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let seen = if row.last_seq > 0 { BTreeSet::from([row.last_seq]) } else { BTreeSet::new() };
            st.rows.insert(row.key.clone(), Row { cells, last_seq: row.last_seq, seen });
        }
        Ok(st)
    }
}

/// Deterministic, key-sorted serialization of an [`InterpState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub rows: Vec<SnapshotRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub key: Vec<Value>,
    pub values: Vec<Value>,
    pub last_seq: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub partials: BTreeMap<usize, Vec<f64>>,
}

pub fn init_state(spec: &InterpSpec) -> InterpState {
    InterpState::new(spec.clone())
}

/// Functional form of [`InterpState::apply_event`].
pub fn apply_event(st: &InterpState, e: &Event) -> Result<InterpState, InterpError> {
    let mut next = st.clone();
    next.apply_event(e)?;
    Ok(next)
}

pub fn interpret_history<'a>(
    spec: &InterpSpec,
    history: impl IntoIterator<Item = &'a Event>,
) -> Result<InterpState, InterpError> {
    let mut st = InterpState::new(spec.clone());
    for e in history {
        st.apply_event(e)?;
    }
    Ok(st)
}

/// Same key set and identical aggregate columns (floats compared bit-exactly).
/// States built over an expansion schema compare equal to states over the
/// original input when the state schemas coincide.
pub fn states_equal(a: &InterpState, b: &InterpState) -> Result<bool, InterpError> {
    let same_spec = a.spec.state_schema().same_shape(b.spec.state_schema())
        && a.spec.aggregates().iter().map(|x| (&x.out, x.kind)).eq(b.spec.aggregates().iter().map(|x| (&x.out, x.kind)));
    if !same_spec {
        return Err(InterpError::SpecMismatch);
    }
    if a.rows.len() != b.rows.len() {
        return Ok(false);
    }
    for ((ka, ra), (kb, rb)) in a.rows.iter().zip(&b.rows) {
        if ka != kb {
            return Ok(false);
        }
        if !ra.cells.iter().map(Cell::value).eq(rb.cells.iter().map(Cell::value)) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Canonical expansion of the whole state: per key in key order, family
/// `latest/max/min` emits `[min], [max], [latest]` with consecutive
/// duplicates collapsed; family `count/sum` emits `count - 1` zeros then the
/// sum. Events are in the expansion schema and unsequenced.
pub fn expand_state(st: &InterpState) -> Result<Vec<Event>, InterpError> {
    st.family()?;
    let mut out = Vec::new();
    for key in st.rows.keys() {
        for values in st.expand_row(key)? {
            out.push(Event::new(values, "expand"));
        }
    }
    Ok(out)
}

/// Shortest canonical history equivalent to `history` under `spec`.
pub fn compress_history<'a>(
    spec: &InterpSpec,
    history: impl IntoIterator<Item = &'a Event>,
) -> Result<Vec<Event>, InterpError> {
    if !spec.is_expandable() {
        return Err(InterpError::NotExpandable(spec.to_string()));
    }
    expand_state(&interpret_history(spec, history)?)
}

/// The spec re-bound to its own expansion schema, so expansion output can be
/// interpreted again.
pub fn expansion_spec(spec: &InterpSpec) -> InterpSpec {
    let exp = spec.expansion_schema().clone();
    let input = spec.input();
    let keys = (0..spec.keys().len()).collect();
    let aggs = spec
        .aggregates()
        .iter()
        .map(|a| crate::model::Aggregate {
            out: a.out.clone(),
            kind: a.kind,
            attr: a.attr.map(|i| exp.index_of(&input.attr(i).name).expect("aggregated attr in expansion")),
        })
        .collect();
    InterpSpec::new(exp, keys, aggs).expect("expansion spec of a valid spec is valid")
}

/// Assigns sequence numbers `start, start+1, ...` in order.
pub fn sequence_from(events: &[Event], start: u64) -> Vec<Event> {
    events
        .iter()
        .enumerate()
        .map(|(i, e)| Event::sequenced(e.values.clone(), e.origin.clone(), start + i as u64))
        .collect()
}

#[cfg(test)]
mod tests;
