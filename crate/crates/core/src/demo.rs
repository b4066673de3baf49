//! The stocks pipeline: two exchanges merged, capital computed, big
//! trades selected and delivered to one client, all in-process over the
//! simulator so the output is reproducible.

use serde::Deserialize;

use crate::graph::FlowGraph;
use crate::model::Value;
use crate::sim::{ClientSpec, GraphRef, Publish, Report, Scenario, ScenarioError, Sim, SubAt};
use crate::wire::Mode;

pub const STOCKS_GRAPH: &str = include_str!("../../../fixtures/stocks.json");
pub const TRADES_CSV: &str = include_str!("../../../fixtures/trades.csv");

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct Trade {
    pub symbol: String,
    pub price: f64,
    pub volume: i64,
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("trades: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("demo did not quiesce")]
    Stuck,
}

/// `symbol,price,volume` lines; a header line is optional.
pub fn parse_trades(text: &str) -> Result<Vec<Trade>, csv::Error> {
    let has_header = text.lines().next().is_some_and(|l| l.trim_start().starts_with("symbol"));
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
        .into_deserialize()
        .skip(usize::from(has_header))
        .collect()
}

pub fn stocks_graph() -> FlowGraph {
    FlowGraph::from_json(STOCKS_GRAPH).expect("bundled graph is valid")
}

pub struct DemoRun {
    /// Values delivered to the BigCapitals subscriber, in order.
    pub delivered: Vec<Vec<Value>>,
    pub report: Report,
}

/// Publishes `trades` alternately on NYSE (b1) and NASDAQ (b2), one per
/// tick, with one ordered subscriber on BigCapitals at b3.
pub fn run_stocks(graph: &FlowGraph, trades: &[Trade], seed: u64) -> Result<DemoRun, DemoError> {
    let client = |id: &str, broker: &str| ClientSpec {
        id: id.into(),
        broker: broker.into(),
        connect_at: 0,
        subs: vec![],
        offline: vec![],
    };
    let mut alice = client("alice", "b3");
    alice.subs.push(SubAt { sub: "big".into(), space: "BigCapitals".into(), predicate: None, mode: Mode::Ordered, at: 0 });
    let workload = trades
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (client, space) = if i % 2 == 0 { ("nyse-feed", "NYSE") } else { ("nasdaq-feed", "NASDAQ") };
            Publish {
                tick: 2 + i as u64,
                client: client.into(),
                space: space.into(),
                values: vec![Value::from(t.symbol.as_str()), Value::Float(t.price), Value::Int(t.volume)],
            }
        })
        .collect();
    let scn = Scenario {
        graph: GraphRef::Inline(Box::new(graph.to_doc())),
        seed,
        max_ticks: 10_000_000,
        delay: 1,
        jitter: 0,
        clients: vec![client("nyse-feed", "b1"), client("nasdaq-feed", "b2"), alice],
        workload,
        generate: vec![],
        meta: vec![],
        faults: vec![],
        assertions: ["ordered_consistency", "durability", "frugality", "quiescence"].map(String::from).to_vec(),
    };
    let mut sim = Sim::new(&scn, graph.clone(), seed)?;
    if !sim.run() {
        return Err(DemoError::Stuck);
    }
    let delivered = sim.client("alice").expect("declared").subs["big"].delivered.iter().map(|e| e.values.clone()).collect();
    Ok(DemoRun { delivered, report: sim.finish() })
}

/// One JSON object per delivered event.
pub fn render(delivered: &[Vec<Value>]) -> String {
    let mut out = String::new();
    for v in delivered {
        let line = serde_json::json!({"symbol": v[0], "capital": v[1]});
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}
