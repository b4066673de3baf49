//! End-of-run properties. Oracles are recomputed from the authoritative
//! logs, never read back from broker-maintained state.

use crate::graph::{ArcOp, FlowGraph, META_SPACE};
use crate::interp::{states_equal, InterpState, Layout};
use crate::model::{Predicate, Schema, Value};
use crate::wire::{EventFrame, Mode};

use super::Sim;

pub const ASSERTIONS: [&str; 7] = [
    "ordered_consistency",
    "durability",
    "optimistic_convergence",
    "snapshot_convergence",
    "frugality",
    "quiescence",
    "no_reconfig_errors",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, failures: Vec<String>, checked: usize) -> Check {
        let passed = failures.is_empty();
        let detail = if passed {
            format!("{checked} checked")
        } else {
            let mut d = failures.iter().take(3).cloned().collect::<Vec<_>>().join("; ");
            if failures.len() > 3 {
                d.push_str(&format!("; … {} failures", failures.len()));
            }
            d
        };
        Check { name: name.into(), passed, detail }
    }
}

pub(super) fn run(sim: &Sim, name: &str) -> Check {
    match name {
        "ordered_consistency" => ordered_consistency(sim),
        "durability" => durability(sim),
        "optimistic_convergence" => convergence(sim, name, Mode::Optimistic),
        "snapshot_convergence" => convergence(sim, name, Mode::Snapshot),
        "frugality" => {
            let v = sim.frugality_violations;
            let f = if v == 0 { vec![] } else { vec![format!("{v} repeated first sends")] };
            Check::new(name, f, sim.link_transmissions as usize)
        }
        "quiescence" => {
            let mut f = Vec::new();
            if !sim.quiesced {
                f.push(format!("tick limit reached with {} actions pending", sim.queue.len()));
            }
            for c in sim.clients() {
                if c.unacked() > 0 {
                    f.push(format!("{} has {} unacknowledged publishes", c.id(), c.unacked()));
                }
            }
            Check::new(name, f, sim.clients.len())
        }
        "no_reconfig_errors" => {
            let f = sim
                .brokers
                .keys()
                .filter_map(|b| sim.broker(b).filter(|x| x.reconfig_errors() > 0).map(|x| format!("{b}: {}", x.reconfig_errors())))
                .collect();
            Check::new(name, f, sim.brokers.len())
        }
        other => Check { name: other.into(), passed: false, detail: "unknown assertion".into() },
    }
}

/// The current graph as the coordinator knows it.
fn live_graph(sim: &Sim) -> FlowGraph {
    let coord = sim.graph.coordinator().to_string();
    sim.broker(&coord).map_or_else(|| sim.graph.clone(), |b| b.graph().clone())
}

fn schema_of(g: &FlowGraph, space: &str) -> Option<Schema> {
    if space == META_SPACE {
        return Some(crate::graph::meta_schema());
    }
    g.space(space).map(|s| s.schema.clone())
}

/// Sequenced events of `space` at its host.
pub fn authoritative(sim: &Sim, g: &FlowGraph, space: &str) -> Result<Vec<EventFrame>, String> {
    let host = if space == META_SPACE {
        g.coordinator().to_string()
    } else {
        g.space(space).ok_or_else(|| format!("unknown space `{space}`"))?.broker.clone()
    };
    let b = sim.broker(&host).ok_or_else(|| format!("host {host} of `{space}` is down"))?;
    Ok(b.log(space))
}

fn ordered_consistency(sim: &Sim) -> Check {
    let g = live_graph(sim);
    let mut failures = Vec::new();
    let mut checked = 0;
    for c in sim.clients() {
        for (sid, s) in &c.subs {
            if s.spec.mode != Mode::Ordered {
                continue;
            }
            checked += 1;
            let who = format!("{}/{sid}", c.id());
            let log = match authoritative(sim, &g, &s.spec.space) {
                Ok(l) => l,
                Err(e) => {
                    failures.push(format!("{who}: {e}"));
                    continue;
                }
            };
            let pred = match (&s.spec.predicate, schema_of(&g, &s.spec.space)) {
                (Some(t), Some(schema)) => match Predicate::parse(t, &schema) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        failures.push(format!("{who}: {e}"));
                        continue;
                    }
                },
                _ => None,
            };
            let expected: Vec<(u64, &Vec<Value>)> = log
                .iter()
                .filter(|e| pred.as_ref().map_or(true, |p| p.eval(&e.values).unwrap_or(false)))
                .map(|e| (e.seq, &e.values))
                .collect();
            let got: Vec<(u64, &Vec<Value>)> = s.delivered.iter().map(|e| (e.seq, &e.values)).collect();
            if got != expected {
                let at = got.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(got.len().min(expected.len()));
                failures.push(format!(
                    "{who}: delivered {} events, log has {} matching; first difference at index {at}",
                    got.len(),
                    expected.len()
                ));
            }
        }
    }
    Check::new("ordered_consistency", failures, checked)
}

fn durability(sim: &Sim) -> Check {
    let g = live_graph(sim);
    let mut failures = Vec::new();
    let mut checked = 0;
    for c in sim.clients() {
        for (&pub_id, (space, seq)) in &c.acked {
            checked += 1;
            let log = match authoritative(sim, &g, space) {
                Ok(l) => l,
                Err(e) => {
                    failures.push(e);
                    continue;
                }
            };
            let found = log.iter().any(|e| e.seq == *seq && e.pub_id == Some(pub_id) && e.origin == c.id());
            if !found {
                failures.push(format!("{} publish {pub_id} acknowledged as {space}#{seq} is missing", c.id()));
            }
        }
    }
    Check::new("durability", failures, checked)
}

fn convergence(sim: &Sim, name: &str, mode: Mode) -> Check {
    let g = live_graph(sim);
    let mut failures = Vec::new();
    let mut checked = 0;
    for c in sim.clients() {
        for (sid, s) in &c.subs {
            if s.spec.mode != mode {
                continue;
            }
            checked += 1;
            let who = format!("{}/{sid}", c.id());
            let Some(state) = &s.state else {
                failures.push(format!("{who}: no state kept"));
                continue;
            };
            let Some((input, spec)) = g.arcs().iter().find(|a| a.dst == s.spec.space).and_then(|a| match &a.op {
                ArcOp::Interpret(spec) => Some((a.src.clone(), spec.clone())),
                _ => None,
            }) else {
                failures.push(format!("{who}: `{}` is not an interpretation", s.spec.space));
                continue;
            };
            let log = match authoritative(sim, &g, &input) {
                Ok(l) => l,
                Err(e) => {
                    failures.push(format!("{who}: {e}"));
                    continue;
                }
            };
            let mut oracle = InterpState::new(spec);
            for e in &log {
                oracle.apply_values(&e.values, e.seq, Layout::Input);
            }
            match states_equal(state, &oracle) {
                Ok(true) => {}
                Ok(false) => failures.push(format!("{who}: state differs from the oracle ({} vs {} rows)", state.len(), oracle.len())),
                Err(e) => failures.push(format!("{who}: {e}")),
            }
        }
    }
    Check::new(name, failures, checked)
}
