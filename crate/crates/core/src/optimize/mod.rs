//! Graph rewrites that move selection upstream so fewer events cross links,
//! and a simulator-backed equivalence check for them.

use std::collections::BTreeSet;
use std::fmt;

use crate::graph::{ArcDoc, ArcOp, ArcType, FlowGraph, GraphDoc, SpaceDoc, SpaceKind};
use crate::model::{Atom, Predicate};

mod equiv;
pub mod gen;
#[cfg(test)]
mod tests;

pub use equiv::{check_graph_equivalence, EquivConfig, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    FuseSelects,
    PushSelectThroughTransform,
    PushSelectThroughMerge,
}

impl Rule {
    /// Fixpoint application order.
    pub const ALL: [Rule; 3] = [Rule::PushSelectThroughMerge, Rule::PushSelectThroughTransform, Rule::FuseSelects];

    pub fn name(self) -> &'static str {
        match self {
            Rule::FuseSelects => "fuse_selects",
            Rule::PushSelectThroughTransform => "push_select_through_transform",
            Rule::PushSelectThroughMerge => "push_select_through_merge",
        }
    }

    pub fn from_name(name: &str) -> Option<Rule> {
        Rule::ALL.into_iter().find(|r| r.name() == name)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RewriteError {
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("rewritten graph is invalid: {0}")]
    Invalid(String),
}

fn refuse<T>(msg: impl Into<String>) -> Result<T, RewriteError> {
    Err(RewriteError::NotApplicable(msg.into()))
}

/// One applied rewrite, for reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rewrite {
    pub rule: Rule,
    pub arcs: Vec<String>,
    pub detail: String,
    /// The substituted predicate divides; a runtime division by zero now
    /// happens in the select rather than in the transform.
    pub introduces_division: bool,
}

impl fmt::Display for Rewrite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.rule, self.arcs.join(", "), self.detail)?;
        if self.introduces_division {
            f.write_str(" (introduces division)")?;
        }
        Ok(())
    }
}

/// Spaces that rewrites must leave alone: anything a client subscribes to,
/// plus what the graph itself pins (sinks, standing routes).
#[derive(Debug, Clone, Default)]
pub struct Keep(BTreeSet<String>);

impl Keep {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(spaces: I) -> Keep {
        Keep(spaces.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, space: &str) -> bool {
        self.0.contains(space)
    }
}

/// Why `space` cannot be removed or bypassed, if it cannot.
fn not_intermediate(g: &FlowGraph, space: &str, keep: &Keep) -> Option<String> {
    let s = g.space(space)?;
    if !s.is_history() {
        return Some(format!("`{space}` is an interpretation"));
    }
    if s.durable {
        return Some(format!("`{space}` is durable"));
    }
    if keep.contains(space) {
        return Some(format!("`{space}` has subscribers"));
    }
    if g.routes().iter().any(|r| r.space == space) {
        return Some(format!("`{space}` has a standing route"));
    }
    if g.out_arcs(space).count() != 1 {
        return Some(format!("`{space}` feeds {} arcs", g.out_arcs(space).count()));
    }
    None
}

fn host<'a>(g: &'a FlowGraph, space: &str) -> Option<&'a str> {
    g.space(space).map(|s| s.broker.as_str())
}

fn select_of<'a>(g: &'a FlowGraph, id: &str) -> Result<(&'a crate::graph::Arc, &'a Predicate), RewriteError> {
    match g.arc(id) {
        Some(a) => match &a.op {
            ArcOp::Select(p) => Ok((a, p)),
            _ => refuse(format!("`{id}` is not a select")),
        },
        None => refuse(format!("no arc `{id}`")),
    }
}

fn rebuild(doc: &GraphDoc) -> Result<FlowGraph, RewriteError> {
    FlowGraph::from_doc(doc).map_err(|e| RewriteError::Invalid(e.to_string()))
}

fn fresh_name(doc: &GraphDoc, base: &str) -> String {
    let taken = |n: &str| doc.spaces.iter().any(|s| s.name == n);
    let mut name = format!("{base}_pre");
    let mut i = 2;
    while taken(&name) {
        name = format!("{base}_pre{i}");
        i += 1;
    }
    name
}

fn select_doc(id: &str, from: &str, to: &str, p: &Predicate) -> ArcDoc {
    ArcDoc {
        id: id.into(),
        kind: ArcType::Select,
        from: from.into(),
        to: to.into(),
        predicate: Some(p.to_string()),
        transform: None,
        interp: None,
    }
}

/// `A -select(P1)-> B -select(P2)-> C` becomes `A -select(P1 ∧ P2)-> C`.
pub fn fuse_selects(g: &FlowGraph, arc1: &str, arc2: &str, keep: &Keep) -> Result<FlowGraph, RewriteError> {
    let (a1, p1) = select_of(g, arc1)?;
    let (a2, p2) = select_of(g, arc2)?;
    if a1.dst != a2.src {
        return refuse(format!("`{arc1}` does not feed `{arc2}`"));
    }
    let b = &a1.dst;
    if let Some(why) = not_intermediate(g, b, keep) {
        return refuse(why);
    }
    if g.in_arcs(b).count() != 1 {
        return refuse(format!("`{b}` has several inputs"));
    }
    // C interleaves its inputs by arrival; skipping B must not change when
    // A's events get there.
    if g.in_arcs(&a2.dst).count() > 1 && host(g, b) != host(g, &a2.dst) {
        return refuse(format!("`{}` merges and `{b}` is on another broker", a2.dst));
    }
    let fused = p1.and(p2);
    let mut doc = g.to_doc();
    doc.arcs.retain(|a| a.id != arc2);
    doc.spaces.retain(|s| &s.name != b);
    let slot = doc.arcs.iter_mut().find(|a| a.id == arc1).expect("present");
    *slot = select_doc(arc1, &a1.src, &a2.dst, &fused);
    rebuild(&doc)
}

/// `A -transform(T)-> B -select(P)-> C` becomes
/// `A -select(P[out := T(out)])-> B' -transform(T)-> C`.
pub fn push_select_through_transform(
    g: &FlowGraph,
    t_arc: &str,
    s_arc: &str,
    keep: &Keep,
) -> Result<(FlowGraph, bool), RewriteError> {
    let t = match g.arc(t_arc) {
        Some(a) => a,
        None => return refuse(format!("no arc `{t_arc}`")),
    };
    let ArcOp::Transform(tr) = &t.op else { return refuse(format!("`{t_arc}` is not a transform")) };
    let (s, p) = select_of(g, s_arc)?;
    if t.dst != s.src {
        return refuse(format!("`{t_arc}` does not feed `{s_arc}`"));
    }
    let b = &t.dst;
    if let Some(why) = not_intermediate(g, b, keep) {
        return refuse(why);
    }
    if g.in_arcs(b).count() != 1 {
        return refuse(format!("`{b}` has several inputs"));
    }
    let input = tr.input();
    let mut disjuncts = Vec::new();
    for conj in p.disjuncts() {
        let mut atoms = Vec::new();
        for a in conj {
            let lhs = a.lhs.substitute(&|i| tr.binding(i).clone());
            let atom = Atom::new(lhs, a.op, a.rhs.clone(), input)
                .map_err(|e| RewriteError::NotApplicable(format!("`{a}` cannot be expressed on the input: {e}")))?;
            atoms.push(atom);
        }
        disjuncts.push(atoms);
    }
    let pushed = Predicate::from_disjuncts(disjuncts).expect("shape preserved");
    let division = pushed.has_division() && !p.has_division();

    let mut doc = g.to_doc();
    let a_schema = doc.spaces.iter().find(|d| d.name == t.src).expect("source declared").schema.clone();
    let b_doc = doc.spaces.iter().find(|d| &d.name == b).expect("declared").clone();
    let b2 = fresh_name(&doc, b);
    doc.spaces.retain(|d| &d.name != b);
    doc.spaces.push(SpaceDoc {
        name: b2.clone(),
        kind: SpaceKind::History,
        schema: a_schema,
        interp: None,
        broker: b_doc.broker,
        durable: false,
    });
    for a in doc.arcs.iter_mut() {
        if a.id == t_arc {
            *a = select_doc(s_arc, &t.src, &b2, &pushed);
        } else if a.id == s_arc {
            *a = ArcDoc {
                id: t_arc.into(),
                kind: ArcType::Transform,
                from: b2.clone(),
                to: s.dst.clone(),
                predicate: None,
                transform: Some(tr.to_string()),
                interp: None,
            };
        }
    }
    Ok((rebuild(&doc)?, division))
}

/// `M -select(P)-> C` where `M` only merges `X1..Xk` becomes
/// `Xi -select(P)-> C` for each input; `C` becomes the merge point.
pub fn push_select_through_merge(g: &FlowGraph, s_arc: &str, keep: &Keep) -> Result<FlowGraph, RewriteError> {
    let (s, p) = select_of(g, s_arc)?;
    let m = &s.src;
    if let Some(why) = not_intermediate(g, m, keep) {
        return refuse(why);
    }
    let ins: Vec<&crate::graph::Arc> = g.in_arcs(m).collect();
    if ins.is_empty() {
        return refuse(format!("`{m}` is a source"));
    }
    if let Some(other) = ins.iter().find(|a| !matches!(a.op, ArcOp::Merge)) {
        return refuse(format!("`{m}` is fed by non-merge arc `{}`", other.id));
    }
    // The merge point moves to C; interleaving by arrival order is only
    // preserved if it stays on the same broker.
    if host(g, m) != host(g, &s.dst) {
        return refuse(format!("`{m}` and `{}` are on different brokers", s.dst));
    }
    let mut doc = g.to_doc();
    doc.spaces.retain(|d| &d.name != m);
    doc.arcs.retain(|a| a.id != s_arc);
    let single = ins.len() == 1;
    for a in doc.arcs.iter_mut().filter(|a| &a.to == m) {
        let id = if single { s_arc.to_string() } else { format!("{s_arc}@{}", a.from) };
        *a = select_doc(&id, &a.from, &s.dst, p);
    }
    rebuild(&doc)
}

fn try_rule(g: &FlowGraph, rule: Rule, keep: &Keep) -> Option<(FlowGraph, Rewrite)> {
    let arcs = g.arcs();
    match rule {
        Rule::PushSelectThroughMerge => {
            for s in arcs.iter().filter(|a| matches!(a.op, ArcOp::Select(_))) {
                if let Ok(next) = push_select_through_merge(g, &s.id, keep) {
                    let detail = format!("select on `{}` moved onto the inputs of `{}`", s.dst, s.src);
                    return Some((next, Rewrite { rule, arcs: vec![s.id.clone()], detail, introduces_division: false }));
                }
            }
        }
        Rule::PushSelectThroughTransform => {
            for t in arcs.iter().filter(|a| matches!(a.op, ArcOp::Transform(_))) {
                for s in g.out_arcs(&t.dst).filter(|a| matches!(a.op, ArcOp::Select(_))) {
                    if let Ok((next, division)) = push_select_through_transform(g, &t.id, &s.id, keep) {
                        let pushed = next.arc(&s.id).map(|a| match &a.op {
                            ArcOp::Select(p) => p.to_string(),
                            _ => String::new(),
                        });
                        let detail = format!("select now before transform: {}", pushed.unwrap_or_default());
                        let arcs = vec![t.id.clone(), s.id.clone()];
                        return Some((next, Rewrite { rule, arcs, detail, introduces_division: division }));
                    }
                }
            }
        }
        Rule::FuseSelects => {
            for a1 in arcs.iter().filter(|a| matches!(a.op, ArcOp::Select(_))) {
                for a2 in g.out_arcs(&a1.dst).filter(|a| matches!(a.op, ArcOp::Select(_))) {
                    if let Ok(next) = fuse_selects(g, &a1.id, &a2.id, keep) {
                        let detail = format!("`{}` removed", a1.dst);
                        let arcs = vec![a1.id.clone(), a2.id.clone()];
                        return Some((next, Rewrite { rule, arcs, detail, introduces_division: false }));
                    }
                }
            }
        }
    }
    None
}

/// Applies `rules` (in [`Rule::ALL`] order, restarting after every
/// success) until none applies.
pub fn rewrite_fixpoint(g: &FlowGraph, rules: &[Rule], keep: &Keep) -> (FlowGraph, Vec<Rewrite>) {
    let mut g = g.clone();
    let mut log = Vec::new();
    // Every rule removes a space or moves a select strictly upstream, so
    // this bound is never reached on a DAG; it guards against a bad rule.
    let bound = 4 * (g.arcs().len() + g.spaces().len()) * (g.arcs().len() + 1);
    'outer: while log.len() < bound {
        for rule in Rule::ALL.into_iter().filter(|r| rules.contains(r)) {
            if let Some((next, rw)) = try_rule(&g, rule, keep) {
                g = next;
                log.push(rw);
                continue 'outer;
            }
        }
        break;
    }
    (g, log)
}

/// The default protection set for a graph without known subscribers:
/// its sinks and interpretation spaces.
pub fn default_keep(g: &FlowGraph) -> Keep {
    Keep::new(
        g.spaces()
            .iter()
            .filter(|s| !s.is_history() || g.out_arcs(&s.name).next().is_none())
            .map(|s| s.name.clone()),
    )
}
