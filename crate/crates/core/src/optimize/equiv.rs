use crate::graph::FlowGraph;
use crate::interp::states_equal;
use crate::model::Value;
use crate::sim::{ClientSpec, Generate, GraphRef, Scenario, Sim, SubAt};
use crate::wire::Mode;

#[derive(Debug, Clone)]
pub struct EquivConfig {
    /// Spaces clients subscribe to; empty means every sink.
    pub subscribed: Vec<String>,
    /// Events per trial, spread round-robin over the sources.
    pub events: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EquivConfig {
    fn default() -> Self {
        EquivConfig { subscribed: Vec::new(), events: 1000, trials: 1, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    pub equivalent: bool,
    /// First difference found, when not equivalent.
    pub counterexample: Option<String>,
    /// Link transmissions per trial, for each graph.
    pub transmissions: Vec<(u64, u64)>,
}

impl Verdict {
    fn differ(msg: String, transmissions: Vec<(u64, u64)>) -> Verdict {
        Verdict { equivalent: false, counterexample: Some(msg), transmissions }
    }
}

enum View {
    History(Vec<Vec<Value>>),
    State(crate::interp::InterpState),
}

fn scenario(g: &FlowGraph, subscribed: &[String], events: usize) -> Scenario {
    let sources: Vec<_> = g.sources().into_iter().filter(|s| s.is_history()).collect();
    let n = sources.len().max(1);
    let mut clients = Vec::new();
    let mut generate = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        let id = format!("pub-{}", s.name);
        clients.push(ClientSpec { id: id.clone(), broker: s.broker.clone(), connect_at: 0, subs: vec![], offline: vec![] });
        let count = events / n + usize::from(i < events % n);
        // Distinct ticks per source keep merge interleaving unambiguous.
        generate.push(Generate {
            client: id,
            space: s.name.clone(),
            count,
            start: 2 + i as u64,
            every: n as u64,
            keys: 10,
        });
    }
    for name in subscribed {
        let s = g.space(name).expect("checked by caller");
        let mode = if s.is_history() { Mode::Ordered } else { Mode::Optimistic };
        clients.push(ClientSpec {
            id: format!("sub-{name}"),
            broker: s.broker.clone(),
            connect_at: 0,
            subs: vec![SubAt { sub: "s".into(), space: name.clone(), predicate: None, mode, at: 0 }],
            offline: vec![],
        });
    }
    Scenario {
        graph: GraphRef::Inline(Box::new(g.to_doc())),
        seed: 0,
        max_ticks: 10_000_000,
        delay: 1,
        jitter: 0,
        clients,
        workload: vec![],
        generate,
        meta: vec![],
        faults: vec![],
        assertions: vec![],
    }
}

fn observe(g: &FlowGraph, subscribed: &[String], events: usize, seed: u64) -> Result<(Vec<View>, u64), String> {
    let scn = scenario(g, subscribed, events);
    let mut sim = Sim::new(&scn, g.clone(), seed).map_err(|e| e.to_string())?;
    if !sim.run() {
        return Err("simulation did not quiesce".into());
    }
    let views = subscribed
        .iter()
        .map(|name| {
            let sub = &sim.client(&format!("sub-{name}")).expect("declared").subs["s"];
            match &sub.state {
                Some(st) => View::State(st.clone()),
                None => View::History(sub.delivered.iter().map(|e| e.values.clone()).collect()),
            }
        })
        .collect();
    Ok((views, sim.link_transmissions()))
}

/// Runs both graphs on the same random source histories and compares what
/// every subscriber ends up with: identical event values in identical
/// order for histories, equal final states for interpretations.
pub fn check_graph_equivalence(g1: &FlowGraph, g2: &FlowGraph, cfg: &EquivConfig) -> Verdict {
    let subscribed: Vec<String> = if cfg.subscribed.is_empty() {
        g1.sinks().iter().map(|s| s.name.clone()).collect()
    } else {
        cfg.subscribed.clone()
    };
    let shape = |g: &FlowGraph| {
        let mut v: Vec<(String, String)> =
            g.sources().iter().map(|s| (s.name.clone(), s.schema.to_string())).collect();
        v.sort();
        v
    };
    if shape(g1) != shape(g2) {
        return Verdict::differ("the graphs have different sources".into(), vec![]);
    }
    for name in &subscribed {
        match (g1.space(name), g2.space(name)) {
            (Some(a), Some(b)) if a.schema.same_shape(&b.schema) && a.kind == b.kind => {}
            _ => return Verdict::differ(format!("subscribed space `{name}` differs or is missing"), vec![]),
        }
    }
    let mut transmissions = Vec::new();
    for trial in 0..cfg.trials {
        let seed = cfg.seed.wrapping_add(trial as u64);
        let (a, b) = match (observe(g1, &subscribed, cfg.events, seed), observe(g2, &subscribed, cfg.events, seed)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => return Verdict::differ(format!("trial {trial}: {e}"), transmissions),
        };
        transmissions.push((a.1, b.1));
        for (name, (x, y)) in subscribed.iter().zip(a.0.iter().zip(&b.0)) {
            let diff = match (x, y) {
                (View::History(x), View::History(y)) => {
                    let at = x.iter().zip(y).position(|(p, q)| p != q);
                    match at {
                        Some(i) => Some(format!("event #{i} is {:?} vs {:?}", x[i], y[i])),
                        None if x.len() != y.len() => Some(format!("{} events vs {}", x.len(), y.len())),
                        None => None,
                    }
                }
                (View::State(x), View::State(y)) => match states_equal(x, y) {
                    Ok(true) => None,
                    Ok(false) => Some(format!("final states differ ({} vs {} rows)", x.len(), y.len())),
                    Err(e) => Some(e.to_string()),
                },
                _ => Some("subscription kinds differ".into()),
            };
            if let Some(d) = diff {
                return Verdict::differ(format!("trial {trial} (seed {seed}), `{name}`: {d}"), transmissions);
            }
        }
    }
    Verdict { equivalent: true, counterexample: None, transmissions }
}
