use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// On-disk graph definition. Parsing is strict: unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDoc {
    pub schemas: BTreeMap<String, String>,
    pub spaces: Vec<SpaceDoc>,
    #[serde(default)]
    pub arcs: Vec<ArcDoc>,
    pub brokers: Vec<String>,
    #[serde(default)]
    pub links: Vec<(String, String)>,
    /// Standing routes: keep a space's events flowing to a broker even
    /// without live subscribers there.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub routes: Vec<RouteDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    History,
    Interpretation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceDoc {
    pub name: String,
    pub kind: SpaceKind,
    /// Schema name. For interpretation spaces this is the input schema; the
    /// state schema is induced by `interp`.
    pub schema: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interp: Option<String>,
    pub broker: String,
    #[serde(default)]
    pub durable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArcType {
    Select,
    Transform,
    Merge,
    Interpret,
    Expand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArcDoc {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: ArcType,
    pub from: String,
    pub to: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteDoc {
    pub space: String,
    pub broker: String,
}
