//! The broker's view of the flow graph, with the sequence ranges in which
//! each arc and standing route is active. Reconfiguration only ever appends
//! ranges, so any past event can be routed exactly as it was the first time.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use crate::graph::{Arc, ArcDoc, ArcOp, FlowGraph, GraphDoc, GraphError, RouteDoc, SpaceDoc, META_SPACE};
use crate::model::{InterpSpec, Predicate, Schema};
use crate::wire::Barrier;

#[derive(Debug, Clone)]
pub(crate) struct ArcEntry {
    pub arc: Arc,
    pub dst_broker: String,
    /// First source seq the arc applies to.
    pub from: u64,
    /// First source seq the arc no longer applies to.
    pub until: Option<u64>,
}

impl ArcEntry {
    pub fn active_at(&self, seq: u64) -> bool {
        seq >= self.from && self.until.map_or(true, |u| seq < u)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct RouteEntry {
    pub route: RouteDoc,
    pub from: u64,
    pub until: Option<u64>,
}

impl RouteEntry {
    pub fn active_at(&self, seq: u64) -> bool {
        seq >= self.from && self.until.map_or(true, |u| seq < u)
    }
}

/// A validated graph change.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphChange {
    AddSpace { space: SpaceDoc, schemas: BTreeMap<String, String> },
    AddArc(ArcDoc),
    RemoveArc { id: String },
    RemoveSpace { name: String },
    AddRoute(RouteDoc),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AddSpacePayload {
    space: SpaceDoc,
    #[serde(default)]
    schemas: BTreeMap<String, String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct IdPayload {
    id: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NamePayload {
    name: String,
}

pub const CHANGE_KINDS: [&str; 5] = ["add_space", "add_arc", "remove_arc", "remove_space", "add_subscription_route"];

impl GraphChange {
    pub fn parse(kind: &str, payload: &str) -> Result<GraphChange, String> {
        let err = |e: serde_json::Error| format!("malformed-payload: {e}");
        Ok(match kind {
            "add_space" => {
                let p: AddSpacePayload = serde_json::from_str(payload).map_err(err)?;
                GraphChange::AddSpace { space: p.space, schemas: p.schemas }
            }
            "add_arc" => GraphChange::AddArc(serde_json::from_str(payload).map_err(err)?),
            "remove_arc" => GraphChange::RemoveArc { id: serde_json::from_str::<IdPayload>(payload).map_err(err)?.id },
            "remove_space" => {
                GraphChange::RemoveSpace { name: serde_json::from_str::<NamePayload>(payload).map_err(err)?.name }
            }
            "add_subscription_route" => GraphChange::AddRoute(serde_json::from_str(payload).map_err(err)?),
            other => return Err(format!("unknown-kind: {other}")),
        })
    }

    /// Applies the change to a document and revalidates the result.
    pub fn apply_to(&self, g: &FlowGraph) -> Result<FlowGraph, String> {
        let mut doc: GraphDoc = g.to_doc();
        match self {
            GraphChange::AddSpace { space, schemas } => {
                for (k, v) in schemas {
                    match doc.schemas.get(k) {
                        Some(existing) if existing != v => {
                            let (a, b) = (Schema::parse(existing), Schema::parse(v));
                            if a.is_err() || b.is_err() || a != b {
                                return Err(format!("schema-conflict: `{k}` already declared"));
                            }
                        }
                        _ => {
                            doc.schemas.insert(k.clone(), v.clone());
                        }
                    }
                }
                doc.spaces.push(space.clone());
            }
            GraphChange::AddArc(a) => doc.arcs.push(a.clone()),
            GraphChange::RemoveArc { id } => {
                let before = doc.arcs.len();
                doc.arcs.retain(|a| &a.id != id);
                if doc.arcs.len() == before {
                    return Err(format!("dangling-reference: no arc `{id}`"));
                }
            }
            GraphChange::RemoveSpace { name } => {
                if g.space(name).is_none() {
                    return Err(format!("dangling-reference: no space `{name}`"));
                }
                if doc.arcs.iter().any(|a| &a.from == name || &a.to == name) {
                    return Err(format!("space-in-use: `{name}` still has arcs"));
                }
                doc.spaces.retain(|s| &s.name != name);
                doc.routes.retain(|r| &r.space != name);
            }
            GraphChange::AddRoute(r) => {
                if doc.routes.contains(r) {
                    return Err("duplicate: route already present".into());
                }
                doc.routes.push(r.clone());
            }
        }
        FlowGraph::from_doc(&doc).map_err(|e: GraphError| format!("{}: {e}", e.code()))
    }

    /// History space whose stream carries the activation barrier, if any.
    pub fn barrier_space(&self, g: &FlowGraph) -> Option<String> {
        match self {
            GraphChange::AddSpace { .. } => None,
            GraphChange::AddArc(a) => {
                let probe = Arc { id: a.id.clone(), src: a.from.clone(), dst: a.to.clone(), op: ArcOp::Merge };
                feed_space_of(g, &probe)
            }
            GraphChange::RemoveArc { id } => g.arc(id).and_then(|a| feed_space_of(g, a)),
            GraphChange::RemoveSpace { name } => g.space(name).filter(|s| s.is_history()).map(|s| s.name.clone()),
            GraphChange::AddRoute(r) => Some(r.space.clone()),
        }
    }

    /// Builds the in-band barrier for a change validated against `g`.
    pub fn barrier(&self, request_id: &str, kind: &str, payload: &str, g: &FlowGraph) -> Barrier {
        let mut names: Vec<String> = match self {
            GraphChange::AddSpace { space, .. } => vec![space.name.clone()],
            GraphChange::AddArc(a) => vec![a.from.clone(), a.to.clone()],
            GraphChange::RemoveArc { id } => g.arc(id).map(|a| vec![a.src.clone(), a.dst.clone()]).unwrap_or_default(),
            GraphChange::RemoveSpace { name } => vec![name.clone()],
            GraphChange::AddRoute(r) => vec![r.space.clone()],
        };
        names.dedup();
        let doc = g.to_doc();
        let spaces: Vec<SpaceDoc> = doc.spaces.iter().filter(|s| names.contains(&s.name)).cloned().collect();
        let schemas = spaces.iter().filter_map(|s| doc.schemas.get(&s.schema).map(|t| (s.schema.clone(), t.clone()))).collect();
        Barrier { request_id: request_id.into(), kind: kind.into(), payload: payload.into(), spaces, schemas }
    }
}

/// The history stream an arc consumes. Expand arcs read the interpretation's
/// input history and keep a private replica of the interpretation.
pub(crate) fn feed_space_of(g: &FlowGraph, arc: &Arc) -> Option<String> {
    let src = g.space(&arc.src)?;
    if src.is_history() {
        return Some(src.name.clone());
    }
    g.in_arcs(&src.name).next().map(|a| a.src.clone())
}

#[derive(Debug, Clone)]
pub(crate) struct Topology {
    pub graph: FlowGraph,
    pub version: u64,
    pub arcs: Vec<ArcEntry>,
    pub routes: Vec<RouteEntry>,
    /// Feed space per arc id, fixed when the arc is added.
    pub arc_feed: BTreeMap<String, Option<String>>,
    pub applied: BTreeSet<String>,
    /// Every space ever declared, including removed ones.
    pub hosts: BTreeMap<String, String>,
    pub removed: BTreeSet<String>,
}

impl Topology {
    pub fn new(graph: FlowGraph) -> Topology {
        let mut t = Topology {
            version: 0,
            arcs: Vec::new(),
            routes: Vec::new(),
            arc_feed: BTreeMap::new(),
            applied: BTreeSet::new(),
            hosts: BTreeMap::new(),
            removed: BTreeSet::new(),
            graph: graph.clone(),
        };
        for s in graph.spaces() {
            t.hosts.insert(s.name.clone(), s.broker.clone());
        }
        t.hosts.insert(META_SPACE.to_string(), graph.coordinator().to_string());
        for a in graph.arcs() {
            t.push_arc(a.clone(), 1);
        }
        for r in graph.routes() {
            t.routes.push(RouteEntry { route: r.clone(), from: 1, until: None });
        }
        t
    }

    fn push_arc(&mut self, arc: Arc, from: u64) {
        let dst_broker = self.graph.space(&arc.dst).expect("validated").broker.clone();
        self.arc_feed.insert(arc.id.clone(), feed_space_of(&self.graph, &arc));
        self.arcs.push(ArcEntry { arc, dst_broker, from, until: None });
    }

    pub fn host(&self, space: &str) -> Option<&str> {
        self.hosts.get(space).map(String::as_str)
    }

    pub fn schema(&self, space: &str) -> Option<Schema> {
        if space == META_SPACE {
            return Some(crate::graph::meta_schema());
        }
        self.graph.space(space).map(|s| s.schema.clone())
    }

    pub fn interp_spec(&self, space: &str) -> Option<&InterpSpec> {
        self.graph.space(space).and_then(|s| s.interp.as_ref())
    }

    /// Input history of an interpretation space.
    pub fn interp_input(&self, space: &str) -> Option<String> {
        self.graph.in_arcs(space).next().map(|a| a.src.clone())
    }

    pub fn feed_of(&self, arc_id: &str) -> Option<&str> {
        self.arc_feed.get(arc_id).and_then(|f| f.as_deref())
    }

    /// Applies a confirmed change once. `activation` is the first seq of the
    /// barrier space the change governs (ignored for add_space).
    pub fn apply(&mut self, request_id: &str, change: &GraphChange, activation: u64) -> Result<bool, String> {
        if !self.applied.insert(request_id.to_string()) {
            return Ok(false);
        }
        if let GraphChange::AddSpace { space, .. } = change {
            // May already have arrived as barrier context.
            if self.graph.space(&space.name).is_some() {
                return Ok(false);
            }
        }
        let next = change.apply_to(&self.graph)?;
        let prev = std::mem::replace(&mut self.graph, next);
        match change {
            GraphChange::AddSpace { space, .. } => {
                self.hosts.insert(space.name.clone(), space.broker.clone());
                self.removed.remove(&space.name);
            }
            GraphChange::AddArc(a) => {
                let arc = self.graph.arc(&a.id).expect("just added").clone();
                self.push_arc(arc, activation);
            }
            GraphChange::RemoveArc { id } => {
                for e in self.arcs.iter_mut().filter(|e| &e.arc.id == id && e.until.is_none()) {
                    e.until = Some(activation);
                }
            }
            GraphChange::RemoveSpace { name } => {
                self.removed.insert(name.clone());
                for r in self.routes.iter_mut().filter(|r| &r.route.space == name && r.until.is_none()) {
                    r.until = Some(activation);
                }
            }
            GraphChange::AddRoute(r) => self.routes.push(RouteEntry { route: r.clone(), from: activation, until: None }),
        }
        drop(prev);
        self.version += 1;
        Ok(true)
    }

    /// Declares any referenced space this view does not know yet.
    pub fn apply_context(&mut self, barrier: &Barrier) -> Result<(), String> {
        for doc in &barrier.spaces {
            if self.graph.space(&doc.name).is_some() || self.removed.contains(&doc.name) {
                continue;
            }
            let schemas = barrier.schemas.iter().filter(|(k, _)| **k == doc.schema).map(|(k, v)| (k.clone(), v.clone())).collect();
            let change = GraphChange::AddSpace { space: doc.clone(), schemas };
            self.graph = change.apply_to(&self.graph)?;
            self.hosts.insert(doc.name.clone(), doc.broker.clone());
        }
        Ok(())
    }

    /// Arcs (any activation range) that consume `space`'s stream.
    pub fn consumers_of<'a>(&'a self, space: &'a str) -> impl Iterator<Item = &'a ArcEntry> + 'a {
        self.arcs.iter().filter(move |e| self.feed_of(&e.arc.id) == Some(space))
    }

    /// Predicate under which an arc needs events of its feed (None = all).
    pub fn arc_interest(entry: &ArcEntry) -> Option<&Predicate> {
        match &entry.arc.op {
            ArcOp::Select(p) => Some(p),
            _ => None,
        }
    }
}
