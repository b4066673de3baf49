use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

/// Declared type of a schema attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrType {
    Int64,
    Float64,
    String,
    Bool,
}

impl AttrType {
    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "int64" => Some(AttrType::Int64),
            "float64" => Some(AttrType::Float64),
            "string" => Some(AttrType::String),
            "bool" => Some(AttrType::Bool),
            _ => None,
        }
    }

    pub fn is_numeric(self) -> bool {
        matches!(self, AttrType::Int64 | AttrType::Float64)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttrType::Int64 => "int64",
            AttrType::Float64 => "float64",
            AttrType::String => "string",
            AttrType::Bool => "bool",
        }
    }
}

impl fmt::Display for AttrType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One attribute value of an event.
///
/// Equality, ordering and hashing are structural: floats compare by
/// `f64::total_cmp`, so `Value` can key ordered maps. Predicate evaluation
/// uses IEEE comparison instead, see [`crate::model::Num`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
}

impl Value {
    pub fn attr_type(&self) -> AttrType {
        match self {
            Value::Int(_) => AttrType::Int64,
            Value::Float(_) => AttrType::Float64,
            Value::Str(_) => AttrType::String,
            Value::Bool(_) => AttrType::Bool,
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Int(_) => 0,
            Value::Float(_) => 1,
            Value::Str(_) => 2,
            Value::Bool(_) => 3,
        }
    }

    /// Converts a JSON value into a `Value` of the requested type. JSON
    /// integers are accepted for `float64` attributes.
    pub fn from_json(json: &serde_json::Value, ty: AttrType) -> Option<Value> {
        match (ty, json) {
            (AttrType::Int64, serde_json::Value::Number(n)) => n.as_i64().map(Value::Int),
            (AttrType::Float64, serde_json::Value::Number(n)) => n.as_f64().map(Value::Float),
            (AttrType::String, serde_json::Value::String(s)) => Some(Value::Str(s.clone())),
            (AttrType::Bool, serde_json::Value::Bool(b)) => Some(Value::Bool(*b)),
            _ => None,
        }
    }

    /// Canonical literal rendering, parseable by the predicate grammar.
    pub fn render_literal(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Float(x) => format!("{x:?}"),
            Value::Str(s) => serde_json::to_string(s).expect("string serializes"),
            Value::Bool(b) => b.to_string(),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Value {}

impl PartialOrd for Value {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Value {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (Value::Float(a), Value::Float(b)) => a.total_cmp(b),
            (Value::Str(a), Value::Str(b)) => a.cmp(b),
            (Value::Bool(a), Value::Bool(b)) => a.cmp(b),
            _ => self.rank().cmp(&other.rank()),
        }
    }
}

impl Hash for Value {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.rank().hash(state);
        match self {
            Value::Int(i) => i.hash(state),
            Value::Float(x) => x.to_bits().hash(state),
            Value::Str(s) => s.hash(state),
            Value::Bool(b) => b.hash(state),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render_literal())
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}
