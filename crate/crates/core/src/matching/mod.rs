//! Content-based subscription matching over a shared-prefix test tree.
//!
//! Each tree level tests one attribute, in schema order. A node has one
//! edge per constant that some subscription requires the attribute to equal,
//! plus a `*` edge for subscriptions that leave it unconstrained; matching
//! follows both the event's value edge and the `*` edge. A subscription's
//! path stops at the last attribute it constrains by equality, and every
//! other atom (inequalities, arithmetic, `!=`) is re-checked at that result
//! node.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{eval_conjunction, Atom, AttrType, CmpOp, Event, Predicate, Schema, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MatchError {
    #[error("duplicate subscription id `{0}`")]
    DuplicateId(String),
    #[error("unknown subscription id `{0}`")]
    UnknownId(String),
}

/// One conjunction registered on behalf of a client.
#[derive(Debug, Clone, PartialEq)]
pub struct Subscription {
    pub sub_id: String,
    pub conjunction: Vec<Atom>,
    pub client: String,
}

impl Subscription {
    pub fn new(sub_id: impl Into<String>, conjunction: Vec<Atom>, client: impl Into<String>) -> Self {
        Subscription {
            sub_id: sub_id.into(),
            conjunction: crate::model::canonical_conjunction(conjunction),
            client: client.into(),
        }
    }

    /// Brute-force evaluation. A runtime evaluation error counts as no match.
    pub fn matches(&self, values: &[Value]) -> bool {
        eval_conjunction(&self.conjunction, values).unwrap_or(false)
    }
}

/// One subscription per disjunct, ids `{base}#{i}`. `None` matches all.
pub fn subscriptions_for(pred: Option<&Predicate>, base: &str, client: &str) -> Vec<Subscription> {
    match pred {
        None => vec![Subscription::new(format!("{base}#0"), Vec::new(), client)],
        Some(p) => p
            .disjuncts()
            .iter()
            .enumerate()
            .map(|(i, c)| Subscription::new(format!("{base}#{i}"), c.clone(), client))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchMetrics {
    pub matches: u64,
    pub visits: u64,
    pub subs_active: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchOutcome {
    /// Sorted, deduplicated.
    pub sub_ids: Vec<String>,
    pub visits: u64,
}

#[derive(Debug, Clone, Default)]
struct Node {
    parent: Option<usize>,
    edges: HashMap<Value, usize>,
    star: Option<usize>,
    /// (sub_id, residual atoms)
    results: Vec<(String, Vec<Atom>)>,
}

impl Node {
    fn is_empty(&self) -> bool {
        self.edges.is_empty() && self.star.is_none() && self.results.is_empty()
    }
}

#[derive(Debug, Clone)]
struct Entry {
    node: usize,
    sub: Subscription,
}

#[derive(Debug)]
pub struct MatchTree {
    schema: Schema,
    nodes: Vec<Node>,
    free: Vec<usize>,
    subs: BTreeMap<String, Entry>,
    matches: AtomicU64,
    visits: AtomicU64,
}

impl Clone for MatchTree {
    fn clone(&self) -> Self {
        MatchTree {
            schema: self.schema.clone(),
            nodes: self.nodes.clone(),
            free: self.free.clone(),
            subs: self.subs.clone(),
            matches: AtomicU64::new(self.matches.load(Ordering::Relaxed)),
            visits: AtomicU64::new(self.visits.load(Ordering::Relaxed)),
        }
    }
}

const ROOT: usize = 0;

/// -0.0 and 0.0 compare equal, so they share an edge.
fn edge_key(v: &Value) -> std::borrow::Cow<'_, Value> {
    match v {
        Value::Float(x) if *x == 0.0 && x.is_sign_negative() => std::borrow::Cow::Owned(Value::Float(0.0)),
        _ => std::borrow::Cow::Borrowed(v),
    }
}

/// The edge constant an atom can be indexed under, if any.
fn edge_constant(atom: &Atom, schema: &Schema) -> Option<(usize, Value)> {
    if atom.op != CmpOp::Eq {
        return None;
    }
    let idx = atom.lhs.is_bare_attr()?;
    let v = match (schema.attr(idx).ty, &atom.rhs) {
        (AttrType::Float64, Value::Float(x)) if x.is_nan() => return None,
        (AttrType::Float64, Value::Float(x)) => Value::Float(*x),
        // Comparison promotes the literal exactly as `as f64` does.
        (AttrType::Float64, Value::Int(i)) => Value::Float(*i as f64),
        (AttrType::Int64, Value::Int(i)) => Value::Int(*i),
        (AttrType::String, Value::Str(s)) => Value::Str(s.clone()),
        (AttrType::Bool, Value::Bool(b)) => Value::Bool(*b),
        _ => return None,
    };
    Some((idx, edge_key(&v).into_owned()))
}

impl MatchTree {
    pub fn new(schema: Schema) -> Self {
        MatchTree {
            schema,
            nodes: vec![Node::default()],
            free: Vec::new(),
            subs: BTreeMap::new(),
            matches: AtomicU64::new(0),
            visits: AtomicU64::new(0),
        }
    }

    pub fn build(subs: impl IntoIterator<Item = Subscription>, schema: Schema) -> Result<Self, MatchError> {
        let mut t = MatchTree::new(schema);
        for s in subs {
            t.add(s)?;
        }
        Ok(t)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.subs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subs.is_empty()
    }

    pub fn contains(&self, sub_id: &str) -> bool {
        self.subs.contains_key(sub_id)
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.subs.values().map(|e| &e.sub)
    }

    /// Live (non-free) nodes, root included.
    pub fn node_count(&self) -> usize {
        self.nodes.len() - self.free.len()
    }

    fn alloc(&mut self, parent: usize) -> usize {
        let node = Node { parent: Some(parent), ..Node::default() };
        match self.free.pop() {
            Some(i) => {
                self.nodes[i] = node;
                i
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        }
    }

    pub fn add(&mut self, sub: Subscription) -> Result<(), MatchError> {
        if self.subs.contains_key(&sub.sub_id) {
            return Err(MatchError::DuplicateId(sub.sub_id));
        }
        // First indexable equality per attribute becomes an edge.
        let mut tests: Vec<Option<Value>> = vec![None; self.schema.arity()];
        let mut residual = Vec::new();
        for atom in &sub.conjunction {
            match edge_constant(atom, &self.schema) {
                Some((idx, v)) if tests[idx].is_none() => tests[idx] = Some(v),
                _ => residual.push(atom.clone()),
            }
        }
        let depth = tests.iter().rposition(Option::is_some).map_or(0, |i| i + 1);
        let mut node = ROOT;
        for test in tests.into_iter().take(depth) {
            node = match test {
                Some(v) => match self.nodes[node].edges.get(&v) {
                    Some(c) => *c,
                    None => {
                        let c = self.alloc(node);
                        self.nodes[node].edges.insert(v, c);
                        c
                    }
                },
                None => match self.nodes[node].star {
                    Some(c) => c,
                    None => {
                        let c = self.alloc(node);
                        self.nodes[node].star = Some(c);
                        c
                    }
                },
            };
        }
        let results = &mut self.nodes[node].results;
        let pos = results.partition_point(|(id, _)| *id < sub.sub_id);
        results.insert(pos, (sub.sub_id.clone(), residual));
        self.subs.insert(sub.sub_id.clone(), Entry { node, sub });
        Ok(())
    }

    pub fn remove(&mut self, sub_id: &str) -> Result<Subscription, MatchError> {
        let entry = self.subs.remove(sub_id).ok_or_else(|| MatchError::UnknownId(sub_id.to_string()))?;
        let mut node = entry.node;
        self.nodes[node].results.retain(|(id, _)| id != sub_id);
        // Prune now-empty nodes toward the root.
        while node != ROOT && self.nodes[node].is_empty() {
            let parent = self.nodes[node].parent.expect("non-root has a parent");
            let p = &mut self.nodes[parent];
            if p.star == Some(node) {
                p.star = None;
            } else {
                p.edges.retain(|_, c| *c != node);
            }
            self.free.push(node);
            node = parent;
        }
        Ok(entry.sub)
    }

    pub fn match_values(&self, values: &[Value]) -> MatchOutcome {
        let mut out = Vec::new();
        let mut visits = 0u64;
        let mut stack = vec![(ROOT, 0usize)];
        while let Some((n, level)) = stack.pop() {
            visits += 1;
            let node = &self.nodes[n];
            for (id, residual) in &node.results {
                if eval_conjunction(residual, values).unwrap_or(false) {
                    out.push(id.clone());
                }
            }
            if level < values.len() {
                if let Some(c) = node.star {
                    stack.push((c, level + 1));
                }
                if let Some(c) = node.edges.get(edge_key(&values[level]).as_ref()) {
                    stack.push((*c, level + 1));
                }
            }
        }
        out.sort_unstable();
        self.matches.fetch_add(1, Ordering::Relaxed);
        self.visits.fetch_add(visits, Ordering::Relaxed);
        MatchOutcome { sub_ids: out, visits }
    }

    pub fn match_event(&self, e: &Event) -> Vec<String> {
        self.match_values(&e.values).sub_ids
    }

    pub fn metrics(&self) -> MatchMetrics {
        MatchMetrics {
            matches: self.matches.load(Ordering::Relaxed),
            visits: self.visits.load(Ordering::Relaxed),
            subs_active: self.subs.len() as u64,
        }
    }
}

#[cfg(test)]
mod tests;
