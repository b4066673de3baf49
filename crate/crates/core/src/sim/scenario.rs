use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::broker::Tick;
use crate::graph::{FlowGraph, GraphDoc};
use crate::model::{AttrType, Schema, Value};
use crate::wire::Mode;

/// A simulated run: graph, clients, timed workload, faults and the checks
/// to perform at the end.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Inline graph document, or a path relative to the scenario file.
    pub graph: GraphRef,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_ticks")]
    pub max_ticks: Tick,
    /// Per-frame link latency in ticks.
    #[serde(default = "one")]
    pub delay: Tick,
    /// Extra uniformly random latency, 0..=jitter.
    #[serde(default)]
    pub jitter: Tick,
    #[serde(default)]
    pub clients: Vec<ClientSpec>,
    #[serde(default)]
    pub workload: Vec<Publish>,
    #[serde(default)]
    pub generate: Vec<Generate>,
    #[serde(default)]
    pub meta: Vec<MetaSubmit>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub assertions: Vec<String>,
}

fn default_max_ticks() -> Tick {
    1_000_000
}

fn one() -> Tick {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphRef {
    Path(String),
    Inline(Box<GraphDoc>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSpec {
    pub id: String,
    pub broker: String,
    #[serde(default)]
    pub connect_at: Tick,
    #[serde(default)]
    pub subs: Vec<SubAt>,
    /// Disconnect/reconnect windows `[from, to)`.
    #[serde(default)]
    pub offline: Vec<(Tick, Tick)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubAt {
    pub sub: String,
    pub space: String,
    #[serde(default)]
    pub predicate: Option<String>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub at: Tick,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Publish {
    pub tick: Tick,
    pub client: String,
    pub space: String,
    pub values: Vec<Value>,
}

/// Random events for a space: `count` publishes starting at `start`, one
/// every `every` ticks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generate {
    pub client: String,
    pub space: String,
    pub count: usize,
    #[serde(default)]
    pub start: Tick,
    #[serde(default = "one")]
    pub every: Tick,
    /// Distinct values for string attributes.
    #[serde(default = "default_keys")]
    pub keys: usize,
}

fn default_keys() -> usize {
    10
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaSubmit {
    pub tick: Tick,
    pub client: String,
    pub kind: String,
    /// A JSON document, or its text.
    pub payload: serde_json::Value,
}

/// Links are named by their two endpoints (brokers or clients), in either
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Fault {
    /// Lose the first transmission of each EVENT with seq in `seqs`.
    Drop {
        link: (String, String),
        #[serde(default)]
        space: Option<String>,
        seqs: (u64, u64),
    },
    /// Deliver the first transmission of EVENT `seq` twice.
    Duplicate {
        link: (String, String),
        #[serde(default)]
        space: Option<String>,
        seq: u64,
    },
    /// Add up to `window` ticks of random latency per frame during `ticks`.
    Reorder {
        link: (String, String),
        window: Tick,
        #[serde(default)]
        ticks: Option<(Tick, Tick)>,
    },
    /// Crash at `tick`, or right after the broker acknowledges its
    /// `after_publish`-th publish. `torn` cuts that publish's last log write
    /// short and loses its acknowledgement.
    Crash {
        broker: String,
        #[serde(default)]
        tick: Option<Tick>,
        #[serde(default)]
        after_publish: Option<u64>,
        #[serde(default)]
        torn: bool,
        /// Restart this many ticks after the crash.
        #[serde(default)]
        restart_after: Option<Tick>,
    },
    Restart {
        broker: String,
        tick: Tick,
    },
    /// Link unusable during `[from, to)`.
    Partition {
        link: (String, String),
        ticks: (Tick, Tick),
    },
}

impl Fault {
    pub fn kind(&self) -> &'static str {
        match self {
            Fault::Drop { .. } => "drop",
            Fault::Duplicate { .. } => "duplicate",
            Fault::Reorder { .. } => "reorder",
            Fault::Crash { .. } => "crash",
            Fault::Restart { .. } => "restart",
            Fault::Partition { .. } => "partition",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("scenario: {0}")]
    Parse(String),
    #[error("scenario graph: {0}")]
    Graph(#[from] crate::graph::GraphError),
    #[error("scenario: {0}")]
    Invalid(String),
    #[error("{path}: {err}")]
    Io { path: String, err: std::io::Error },
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))
    }

    /// Loads a scenario file, resolving a graph path against its directory.
    pub fn load(path: &Path) -> Result<(Scenario, FlowGraph), ScenarioError> {
        let io = |err| ScenarioError::Io { path: path.display().to_string(), err };
        let scn = Scenario::from_json(&std::fs::read_to_string(path).map_err(io)?)?;
        let graph = scn.resolve_graph(path.parent())?;
        Ok((scn, graph))
    }

    pub fn resolve_graph(&self, base: Option<&Path>) -> Result<FlowGraph, ScenarioError> {
        match &self.graph {
            GraphRef::Inline(doc) => Ok(FlowGraph::from_doc(doc)?),
            GraphRef::Path(p) => {
                let full = base.map_or_else(|| Path::new(p).to_path_buf(), |b| b.join(p));
                let text = std::fs::read_to_string(&full)
                    .map_err(|err| ScenarioError::Io { path: full.display().to_string(), err })?;
                Ok(FlowGraph::from_json(&text)?)
            }
        }
    }

    /// Explicit workload plus generated publishes, in (tick, listing) order.
    pub fn publishes(&self, graph: &FlowGraph, seed: u64) -> Result<Vec<Publish>, ScenarioError> {
        let mut out = self.workload.clone();
        for (i, g) in self.generate.iter().enumerate() {
            let space = graph
                .space(&g.space)
                .ok_or_else(|| ScenarioError::Invalid(format!("generate: unknown space `{}`", g.space)))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1)));
            for n in 0..g.count {
                out.push(Publish {
                    tick: g.start + n as Tick * g.every,
                    client: g.client.clone(),
                    space: g.space.clone(),
                    values: random_values(&space.schema, g.keys, &mut rng),
                });
            }
        }
        out.sort_by_key(|p| p.tick);
        Ok(out)
    }
}

pub const SYMBOLS: [&str; 16] =
    ["IBM", "AAPL", "MSFT", "GE", "KO", "XOM", "T", "F", "GM", "PG", "JNJ", "MRK", "PFE", "WMT", "HD", "DIS"];

/// Values loosely shaped like trades: prices 1–200 in cents, volumes up to
/// 20,000, so roughly a third of price×volume products exceed 1,000,000.
pub fn random_values(schema: &Schema, keys: usize, rng: &mut impl Rng) -> Vec<Value> {
    schema
        .attrs()
        .iter()
        .map(|a| match a.ty {
            AttrType::String => {
                let k = rng.gen_range(0..keys.max(1));
                Value::Str(SYMBOLS.get(k).map_or_else(|| format!("K{k}"), |s| s.to_string()))
            }
            AttrType::Float64 => Value::Float(rng.gen_range(100..=20_000) as f64 / 100.0),
            AttrType::Int64 => Value::Int(rng.gen_range(1..=200) * 100),
            AttrType::Bool => Value::Bool(rng.gen_bool(0.5)),
        })
        .collect()
}
