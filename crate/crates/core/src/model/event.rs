use serde::{Deserialize, Serialize};

use super::{ModelError, Schema, Value};

/// A positional tuple of attribute values plus sequencing metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub values: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seq: Option<u64>,
    pub origin: String,
}

impl Event {
    pub fn new(values: Vec<Value>, origin: impl Into<String>) -> Self {
        Event { values, seq: None, origin: origin.into() }
    }

    pub fn sequenced(values: Vec<Value>, origin: impl Into<String>, seq: u64) -> Self {
        Event { values, seq: Some(seq), origin: origin.into() }
    }

    pub fn seq(&self) -> Option<u64> {
        self.seq
    }

    /// Assigns the sequence number. A sequence number, once set, never changes.
    pub fn with_seq(mut self, seq: u64) -> Result<Self, ModelError> {
        if let Some(existing) = self.seq {
            return Err(ModelError::SeqAlreadyAssigned(existing));
        }
        self.seq = Some(seq);
        Ok(self)
    }

    /// Copy of this event with the sequence number cleared, for re-sequencing
    /// into a downstream space.
    pub fn unsequenced(&self) -> Event {
        Event { values: self.values.clone(), seq: None, origin: self.origin.clone() }
    }
}

/// Checks arity and per-position types. No coercion: an `int64` value in a
/// `float64` position is a type mismatch.
pub fn validate_event(schema: &Schema, values: Vec<Value>, origin: impl Into<String>) -> Result<Event, ModelError> {
    check_values(schema, &values)?;
    Ok(Event::new(values, origin))
}

pub(crate) fn check_values(schema: &Schema, values: &[Value]) -> Result<(), ModelError> {
    if values.len() != schema.arity() {
        return Err(ModelError::ArityMismatch { expected: schema.arity(), found: values.len() });
    }
    for (pos, (v, a)) in values.iter().zip(schema.attrs()).enumerate() {
        if v.attr_type() != a.ty {
            return Err(ModelError::TypeMismatch { position: pos, expected: a.ty, found: v.attr_type() });
        }
    }
    Ok(())
}

/// Decodes a JSON array into values typed by `schema`.
pub fn values_from_json(schema: &Schema, json: &serde_json::Value) -> Result<Vec<Value>, ModelError> {
    let arr = json
        .as_array()
        .ok_or_else(|| ModelError::Syntax("event values must be a JSON array".into()))?;
    if arr.len() != schema.arity() {
        return Err(ModelError::ArityMismatch { expected: schema.arity(), found: arr.len() });
    }
    arr.iter()
        .zip(schema.attrs())
        .enumerate()
        .map(|(pos, (j, a))| {
            Value::from_json(j, a.ty).ok_or(ModelError::TypeMismatch {
                position: pos,
                expected: a.ty,
                found: json_type_guess(j),
            })
        })
        .collect()
}

fn json_type_guess(j: &serde_json::Value) -> super::AttrType {
    use super::AttrType;
    match j {
        serde_json::Value::Number(n) if n.is_i64() => AttrType::Int64,
        serde_json::Value::Number(_) => AttrType::Float64,
        serde_json::Value::Bool(_) => AttrType::Bool,
        _ => AttrType::String,
    }
}
