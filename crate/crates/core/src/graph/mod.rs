//! The information flow graph: spaces, arcs and broker placement.

mod doc;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

pub use doc::{ArcDoc, ArcType, GraphDoc, RouteDoc, SpaceDoc, SpaceKind};

use crate::model::{InterpSpec, ModelError, Predicate, Schema, Transform};

/// Name of the reflection space every deployment carries implicitly.
pub const META_SPACE: &str = "$meta";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    Document(String),
    #[error("schema `{name}`: {err}")]
    Schema { name: String, err: ModelError },
    #[error("schema key `{key}` declares schema `{declared}`")]
    SchemaNameMismatch { key: String, declared: String },
    #[error("duplicate {what} `{name}`")]
    Duplicate { what: &'static str, name: String },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("broker links do not form a tree: {0}")]
    NotATree(String),
    #[error("space `{space}`: {reason}")]
    InvalidSpace { space: String, reason: String },
    #[error("arc `{arc}`: kind mismatch: {reason}")]
    KindMismatch { arc: String, reason: String },
    #[error("arc `{arc}`: schema mismatch: {reason}")]
    SchemaMismatch { arc: String, reason: String },
    #[error("arc `{arc}`: {err}")]
    InvalidOp { arc: String, err: String },
    #[error("interpretation space `{0}` has more than one input arc")]
    MultipleInterpInputs(String),
    #[error("cycle detected: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
}

impl GraphError {
    /// Stable short code, used in rejection reasons.
    pub fn code(&self) -> &'static str {
        match self {
            GraphError::Document(_) => "malformed-document",
            GraphError::Schema { .. } | GraphError::SchemaNameMismatch { .. } => "invalid-schema",
            GraphError::Duplicate { .. } => "duplicate",
            GraphError::DanglingReference(_) => "dangling-reference",
            GraphError::NotATree(_) => "not-a-tree",
            GraphError::InvalidSpace { .. } => "invalid-space",
            GraphError::KindMismatch { .. } => "kind-mismatch",
            GraphError::SchemaMismatch { .. } => "schema-mismatch",
            GraphError::InvalidOp { .. } => "invalid-op",
            GraphError::MultipleInterpInputs(_) => "multiple-interp-inputs",
            GraphError::Cycle(_) => "cycle",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Space {
    pub name: String,
    pub kind: SpaceKind,
    /// Event schema for histories, state schema for interpretations.
    pub schema: Schema,
    pub broker: String,
    pub durable: bool,
    pub interp: Option<InterpSpec>,
}

impl Space {
    pub fn is_history(&self) -> bool {
        self.kind == SpaceKind::History
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArcOp {
    Select(Predicate),
    Transform(Transform),
    /// Identity copy into a merge point.
    Merge,
    Interpret(InterpSpec),
    Expand(InterpSpec),
}

impl ArcOp {
    pub fn kind(&self) -> ArcType {
        match self {
            ArcOp::Select(_) => ArcType::Select,
            ArcOp::Transform(_) => ArcType::Transform,
            ArcOp::Merge => ArcType::Merge,
            ArcOp::Interpret(_) => ArcType::Interpret,
            ArcOp::Expand(_) => ArcType::Expand,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub id: String,
    pub src: String,
    pub dst: String,
    pub op: ArcOp,
}

/// A validated, immutable flow graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    schemas: BTreeMap<String, Schema>,
    spaces: Vec<Space>,
    index: BTreeMap<String, usize>,
    arcs: Vec<Arc>,
    brokers: Vec<String>,
    links: Vec<(String, String)>,
    routes: Vec<RouteDoc>,
}

/// One reachable space and the arcs through which it is reached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClosureStep {
    pub space: String,
    pub arcs: Vec<String>,
}

impl FlowGraph {
    pub fn from_json(text: &str) -> Result<FlowGraph, GraphError> {
        let doc: GraphDoc = serde_json::from_str(text).map_err(|e| GraphError::Document(e.to_string()))?;
        FlowGraph::from_doc(&doc)
    }

    pub fn from_doc(doc: &GraphDoc) -> Result<FlowGraph, GraphError> {
        let mut schemas = BTreeMap::new();
        for (key, text) in &doc.schemas {
            let s = Schema::parse(text).map_err(|err| GraphError::Schema { name: key.clone(), err })?;
            if s.name() != key {
                return Err(GraphError::SchemaNameMismatch { key: key.clone(), declared: s.name().to_string() });
            }
            schemas.insert(key.clone(), s);
        }
        check_tree(&doc.brokers, &doc.links)?;

        let mut spaces = Vec::with_capacity(doc.spaces.len());
        let mut index = BTreeMap::new();
        for sd in &doc.spaces {
            if sd.name.is_empty() || sd.name.starts_with('$') {
                return Err(GraphError::InvalidSpace { space: sd.name.clone(), reason: "reserved or empty name".into() });
            }
            if index.insert(sd.name.clone(), spaces.len()).is_some() {
                return Err(GraphError::Duplicate { what: "space", name: sd.name.clone() });
            }
            if !doc.brokers.contains(&sd.broker) {
                return Err(GraphError::DanglingReference(format!("space `{}` names broker `{}`", sd.name, sd.broker)));
            }
            let base = schemas.get(&sd.schema).ok_or_else(|| {
                GraphError::DanglingReference(format!("space `{}` names schema `{}`", sd.name, sd.schema))
            })?;
            let invalid = |reason: String| GraphError::InvalidSpace { space: sd.name.clone(), reason };
            let (schema, interp) = match sd.kind {
                SpaceKind::History => {
                    if sd.interp.is_some() {
                        return Err(invalid("history spaces take no `interp`".into()));
                    }
                    (base.clone(), None)
                }
                SpaceKind::Interpretation => {
                    if sd.durable {
                        return Err(invalid("only history spaces can be durable".into()));
                    }
                    let text = sd.interp.as_ref().ok_or_else(|| invalid("missing `interp`".into()))?;
                    let spec = InterpSpec::parse(text, base).map_err(|e| invalid(e.to_string()))?;
                    (spec.state_schema().clone(), Some(spec))
                }
            };
            spaces.push(Space {
                name: sd.name.clone(),
                kind: sd.kind,
                schema,
                broker: sd.broker.clone(),
                durable: sd.durable,
                interp,
            });
        }

        let mut g = FlowGraph {
            schemas,
            spaces,
            index,
            arcs: Vec::with_capacity(doc.arcs.len()),
            brokers: doc.brokers.clone(),
            links: doc.links.clone(),
            routes: Vec::new(),
        };
        let mut ids = BTreeSet::new();
        for ad in &doc.arcs {
            if !ids.insert(ad.id.clone()) {
                return Err(GraphError::Duplicate { what: "arc", name: ad.id.clone() });
            }
            let arc = g.build_arc(ad)?;
            g.arcs.push(arc);
        }
        for s in &g.spaces {
            if s.kind == SpaceKind::Interpretation && g.in_arcs(&s.name).count() > 1 {
                return Err(GraphError::MultipleInterpInputs(s.name.clone()));
            }
        }
        if let Some(cycle) = g.find_cycle() {
            return Err(GraphError::Cycle(cycle));
        }
        for r in &doc.routes {
            if g.space(&r.space).is_none() || !g.brokers.contains(&r.broker) {
                return Err(GraphError::DanglingReference(format!("route {} -> {}", r.space, r.broker)));
            }
        }
        g.routes = doc.routes.clone();
        g.routes.sort();
        g.routes.dedup();
        Ok(g)
    }

    fn build_arc(&self, ad: &ArcDoc) -> Result<Arc, GraphError> {
        let src = self.space(&ad.from).ok_or_else(|| {
            GraphError::DanglingReference(format!("arc `{}` source `{}`", ad.id, ad.from))
        })?;
        let dst = self
            .space(&ad.to)
            .ok_or_else(|| GraphError::DanglingReference(format!("arc `{}` destination `{}`", ad.id, ad.to)))?;
        let bad_op = |err: String| GraphError::InvalidOp { arc: ad.id.clone(), err };
        let unexpected = |field: &str| bad_op(format!("`{field}` is not valid for a {:?} arc", ad.kind).to_lowercase());
        let need = |v: &Option<String>, field: &str| {
            v.clone().ok_or_else(|| GraphError::InvalidOp { arc: ad.id.clone(), err: format!("missing `{field}`") })
        };
        let op = match ad.kind {
            ArcType::Select => {
                if ad.transform.is_some() || ad.interp.is_some() {
                    return Err(unexpected("transform/interp"));
                }
                self.expect_kinds(ad, src, dst, SpaceKind::History, SpaceKind::History)?;
                let text = need(&ad.predicate, "predicate")?;
                ArcOp::Select(Predicate::parse(&text, &src.schema).map_err(|e| bad_op(e.to_string()))?)
            }
            ArcType::Transform => {
                if ad.predicate.is_some() || ad.interp.is_some() {
                    return Err(unexpected("predicate/interp"));
                }
                self.expect_kinds(ad, src, dst, SpaceKind::History, SpaceKind::History)?;
                let text = need(&ad.transform, "transform")?;
                ArcOp::Transform(Transform::parse(&text, &src.schema, &dst.schema).map_err(|e| bad_op(e.to_string()))?)
            }
            ArcType::Merge => {
                if ad.predicate.is_some() || ad.transform.is_some() || ad.interp.is_some() {
                    return Err(unexpected("predicate/transform/interp"));
                }
                ArcOp::Merge
            }
            ArcType::Interpret | ArcType::Expand => {
                if ad.predicate.is_some() || ad.transform.is_some() {
                    return Err(unexpected("predicate/transform"));
                }
                let interp_space = if ad.kind == ArcType::Interpret { dst } else { src };
                let spec = match &interp_space.interp {
                    Some(spec) => spec.clone(),
                    None => {
                        let (s, d) = if ad.kind == ArcType::Interpret {
                            (SpaceKind::History, SpaceKind::Interpretation)
                        } else {
                            (SpaceKind::Interpretation, SpaceKind::History)
                        };
                        return Err(self.expect_kinds(ad, src, dst, s, d).unwrap_err());
                    }
                };
                if let Some(text) = &ad.interp {
                    let given = InterpSpec::parse(text, spec.input()).map_err(|e| bad_op(e.to_string()))?;
                    if given != spec {
                        return Err(bad_op(format!("`interp` differs from the spec of space `{}`", interp_space.name)));
                    }
                }
                if ad.kind == ArcType::Interpret {
                    ArcOp::Interpret(spec)
                } else {
                    ArcOp::Expand(spec)
                }
            }
        };
        let arc = Arc { id: ad.id.clone(), src: ad.from.clone(), dst: ad.to.clone(), op };
        self.validate_arc(&arc)?;
        Ok(arc)
    }

    fn expect_kinds(
        &self,
        ad: &ArcDoc,
        src: &Space,
        dst: &Space,
        s: SpaceKind,
        d: SpaceKind,
    ) -> Result<(), GraphError> {
        if src.kind != s || dst.kind != d {
            return Err(GraphError::KindMismatch {
                arc: ad.id.clone(),
                reason: format!(
                    "{:?} arc needs {:?} -> {:?}, found {:?} -> {:?}",
                    ad.kind, s, d, src.kind, dst.kind
                )
                .to_lowercase(),
            });
        }
        Ok(())
    }

    /// Checks the kind and schema rules for one arc against this graph.
    pub fn validate_arc(&self, arc: &Arc) -> Result<(), GraphError> {
        let src = self
            .space(&arc.src)
            .ok_or_else(|| GraphError::DanglingReference(format!("arc `{}` source `{}`", arc.id, arc.src)))?;
        let dst = self
            .space(&arc.dst)
            .ok_or_else(|| GraphError::DanglingReference(format!("arc `{}` destination `{}`", arc.id, arc.dst)))?;
        let kind = |reason: &str| GraphError::KindMismatch { arc: arc.id.clone(), reason: reason.to_string() };
        let schema = |reason: String| GraphError::SchemaMismatch { arc: arc.id.clone(), reason };
        match &arc.op {
            ArcOp::Select(_) | ArcOp::Merge | ArcOp::Transform(_) => {
                if !src.is_history() || !dst.is_history() {
                    return Err(kind("select, transform and merge connect two histories"));
                }
            }
            ArcOp::Interpret(_) => {
                if !src.is_history() || dst.is_history() {
                    return Err(kind("interpret leads from a history to an interpretation"));
                }
            }
            ArcOp::Expand(_) => {
                if src.is_history() || !dst.is_history() {
                    return Err(kind("expand leads from an interpretation to a history"));
                }
            }
        }
        match &arc.op {
            ArcOp::Select(_) | ArcOp::Merge => {
                if !src.schema.same_shape(&dst.schema) {
                    return Err(schema(format!("{} vs {}", src.schema, dst.schema)));
                }
            }
            ArcOp::Transform(t) => {
                if !t.input().same_shape(&src.schema) || !t.output().same_shape(&dst.schema) {
                    return Err(schema(format!("transform does not map {} to {}", src.schema, dst.schema)));
                }
            }
            ArcOp::Interpret(spec) => {
                if !spec.input().same_shape(&src.schema) {
                    return Err(schema(format!("{} does not feed interpretation over {}", src.schema, spec.input())));
                }
                if !spec.state_schema().same_shape(&dst.schema) {
                    return Err(schema(format!("state schema {} vs {}", spec.state_schema(), dst.schema)));
                }
            }
            ArcOp::Expand(spec) => {
                if !spec.is_expandable() {
                    return Err(GraphError::InvalidOp {
                        arc: arc.id.clone(),
                        err: format!("interpretation `{spec}` is not expandable"),
                    });
                }
                if !spec.state_schema().same_shape(&src.schema) {
                    return Err(schema(format!("state schema {} vs {}", spec.state_schema(), src.schema)));
                }
                if !spec.expansion_schema().same_shape(&dst.schema) {
                    return Err(schema(format!("expansion schema {} vs {}", spec.expansion_schema(), dst.schema)));
                }
            }
        }
        Ok(())
    }

    fn find_cycle(&self) -> Option<Vec<String>> {
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut color = vec![0u8; self.spaces.len()];
        let mut stack: Vec<usize> = Vec::new();
        fn visit(g: &FlowGraph, v: usize, color: &mut [u8], stack: &mut Vec<usize>) -> Option<Vec<String>> {
            color[v] = 1;
            stack.push(v);
            for a in g.out_arcs(&g.spaces[v].name) {
                let w = g.index[&a.dst];
                if color[w] == 1 {
                    let start = stack.iter().position(|x| *x == w).expect("on stack");
                    let mut cyc: Vec<String> = stack[start..].iter().map(|i| g.spaces[*i].name.clone()).collect();
                    cyc.push(g.spaces[w].name.clone());
                    return Some(cyc);
                }
                if color[w] == 0 {
                    if let Some(c) = visit(g, w, color, stack) {
                        return Some(c);
                    }
                }
            }
            stack.pop();
            color[v] = 2;
            None
        }
        for v in 0..self.spaces.len() {
            if color[v] == 0 {
                if let Some(c) = visit(self, v, &mut color, &mut stack) {
                    return Some(c);
                }
            }
        }
        None
    }

    pub fn to_doc(&self) -> GraphDoc {
        GraphDoc {
            schemas: self.schemas.iter().map(|(k, s)| (k.clone(), s.to_string())).collect(),
            spaces: self
                .spaces
                .iter()
                .map(|s| SpaceDoc {
                    name: s.name.clone(),
                    kind: s.kind,
                    schema: match &s.interp {
                        Some(spec) => spec.input().name().to_string(),
                        None => s.schema.name().to_string(),
                    },
                    interp: s.interp.as_ref().map(|i| i.to_string()),
                    broker: s.broker.clone(),
                    durable: s.durable,
                })
                .collect(),
            arcs: self.arcs.iter().map(arc_doc).collect(),
            brokers: self.brokers.clone(),
            links: self.links.clone(),
            routes: self.routes.clone(),
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_doc()).expect("graph documents serialize")
    }

    pub fn schemas(&self) -> &BTreeMap<String, Schema> {
        &self.schemas
    }

    pub fn spaces(&self) -> &[Space] {
        &self.spaces
    }

    pub fn space(&self, name: &str) -> Option<&Space> {
        self.index.get(name).map(|i| &self.spaces[*i])
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn arc(&self, id: &str) -> Option<&Arc> {
        self.arcs.iter().find(|a| a.id == id)
    }

    pub fn in_arcs<'a>(&'a self, space: &'a str) -> impl Iterator<Item = &'a Arc> + 'a {
        self.arcs.iter().filter(move |a| a.dst == space)
    }

    pub fn out_arcs<'a>(&'a self, space: &'a str) -> impl Iterator<Item = &'a Arc> + 'a {
        self.arcs.iter().filter(move |a| a.src == space)
    }

    pub fn brokers(&self) -> &[String] {
        &self.brokers
    }

    pub fn links(&self) -> &[(String, String)] {
        &self.links
    }

    pub fn routes(&self) -> &[RouteDoc] {
        &self.routes
    }

    /// Spaces with no in-arcs.
    pub fn sources(&self) -> Vec<&Space> {
        self.spaces.iter().filter(|s| self.in_arcs(&s.name).next().is_none()).collect()
    }

    /// Spaces with no out-arcs.
    pub fn sinks(&self) -> Vec<&Space> {
        self.spaces.iter().filter(|s| self.out_arcs(&s.name).next().is_none()).collect()
    }

    /// Everything reachable from `space`, each reachable space once, in a
    /// topological order that breaks ties by declaration order.
    pub fn downstream_closure(&self, space: &str) -> Vec<ClosureStep> {
        let mut reach = BTreeSet::new();
        let mut queue = VecDeque::from([space.to_string()]);
        while let Some(s) = queue.pop_front() {
            for a in self.out_arcs(&s) {
                if reach.insert(a.dst.clone()) {
                    queue.push_back(a.dst.clone());
                }
            }
        }
        let in_scope = |s: &str| s == space || reach.contains(s);
        let mut indeg: BTreeMap<&str, usize> = reach
            .iter()
            .map(|s| (s.as_str(), self.in_arcs(s).filter(|a| in_scope(&a.src) && a.src != space).count()))
            .collect();
        let mut out = Vec::with_capacity(reach.len());
        let mut done: BTreeSet<&str> = BTreeSet::new();
        while out.len() < reach.len() {
            let next = self
                .spaces
                .iter()
                .map(|s| s.name.as_str())
                .find(|s| indeg.get(s) == Some(&0) && !done.contains(s))
                .expect("reachable subgraph is acyclic");
            done.insert(next);
            out.push(ClosureStep {
                space: next.to_string(),
                arcs: self.in_arcs(next).filter(|a| in_scope(&a.src)).map(|a| a.id.clone()).collect(),
            });
            for a in self.out_arcs(next) {
                if let Some(d) = indeg.get_mut(a.dst.as_str()) {
                    *d -= 1;
                }
            }
        }
        out
    }

    pub fn neighbors<'a>(&'a self, broker: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.links.iter().filter_map(move |(a, b)| {
            if a == broker {
                Some(b.as_str())
            } else if b == broker {
                Some(a.as_str())
            } else {
                None
            }
        })
    }

    /// Unique tree path between two brokers, both ends included.
    pub fn broker_path(&self, from: &str, to: &str) -> Vec<String> {
        let mut prev: BTreeMap<&str, &str> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(b) = queue.pop_front() {
            if b == to {
                break;
            }
            for n in self.neighbors(b) {
                if seen.insert(n) {
                    prev.insert(n, b);
                    queue.push_back(n);
                }
            }
        }
        let mut path = vec![to.to_string()];
        let mut cur = to;
        while cur != from {
            cur = prev[cur];
            path.push(cur.to_string());
        }
        path.reverse();
        path
    }

    /// Neighbor of `from` on the path toward `to`; `None` when equal.
    pub fn next_hop(&self, from: &str, to: &str) -> Option<String> {
        if from == to {
            return None;
        }
        self.broker_path(from, to).into_iter().nth(1)
    }

    /// The coordinator for reflection: the lowest broker id.
    pub fn coordinator(&self) -> &str {
        self.brokers.iter().min().expect("at least one broker")
    }
}

fn arc_doc(a: &Arc) -> ArcDoc {
    let mut d = ArcDoc {
        id: a.id.clone(),
        kind: a.op.kind(),
        from: a.src.clone(),
        to: a.dst.clone(),
        predicate: None,
        transform: None,
        interp: None,
    };
    match &a.op {
        ArcOp::Select(p) => d.predicate = Some(p.to_string()),
        ArcOp::Transform(t) => d.transform = Some(t.to_string()),
        ArcOp::Merge | ArcOp::Interpret(_) | ArcOp::Expand(_) => {}
    }
    d
}

fn check_tree(brokers: &[String], links: &[(String, String)]) -> Result<(), GraphError> {
    if brokers.is_empty() {
        return Err(GraphError::NotATree("no brokers".into()));
    }
    let mut set = BTreeSet::new();
    for b in brokers {
        if !set.insert(b.as_str()) {
            return Err(GraphError::Duplicate { what: "broker", name: b.clone() });
        }
    }
    let mut uf: BTreeMap<&str, &str> = brokers.iter().map(|b| (b.as_str(), b.as_str())).collect();
    fn find<'a>(uf: &mut BTreeMap<&'a str, &'a str>, x: &'a str) -> &'a str {
        let p = uf[x];
        if p == x {
            return x;
        }
        let r = find(uf, p);
        uf.insert(x, r);
        r
    }
    for (a, b) in links {
        for x in [a, b] {
            if !set.contains(x.as_str()) {
                return Err(GraphError::DanglingReference(format!("link names broker `{x}`")));
            }
        }
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        if ra == rb {
            return Err(GraphError::NotATree(format!("link {a}-{b} closes a cycle")));
        }
        uf.insert(ra, rb);
    }
    if links.len() + 1 != brokers.len() {
        return Err(GraphError::NotATree("brokers are not connected".into()));
    }
    Ok(())
}

impl fmt::Display for FlowGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} spaces, {} arcs, {} brokers", self.spaces.len(), self.arcs.len(), self.brokers.len())
    }
}

/// Schema of the reflection space.
pub fn meta_schema() -> Schema {
    Schema::parse("meta(request_id:string, kind:string, payload:string, status:string, activation:string)")
        .expect("meta schema is well formed")
}

#[cfg(test)]
mod tests;
