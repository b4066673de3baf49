//! Schemas, events, and the predicate / transform / interpretation languages.

mod event;
mod expr;
mod interp_spec;
pub(crate) mod lexer;
mod predicate;
mod schema;
mod transform;
mod value;

pub use event::{validate_event, values_from_json, Event};
pub(crate) use event::check_values;
pub use expr::{ArithExpr, BinOp, Num};
pub use interp_spec::{AggKind, Aggregate, ExpandFamily, InterpSpec};
pub use predicate::{eval_conjunction, eval_predicate, Atom, CmpOp, Predicate};
pub(crate) use predicate::canonical_conjunction;
pub use schema::{Attribute, Schema};
pub use transform::{apply_transform, Transform};
pub use value::{AttrType, Value};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("duplicate attribute `{0}`")]
    DuplicateAttribute(String),
    #[error("unknown type `{0}`")]
    UnknownType(String),
    #[error("schema has no attributes")]
    EmptyAttributes,
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("type error: {0}")]
    TypeError(String),
    #[error("arity mismatch: expected {expected} values, found {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("type mismatch at position {position}: expected {expected}, found {found}")]
    TypeMismatch { position: usize, expected: AttrType, found: AttrType },
    #[error("division by literal zero")]
    LiteralDivisionByZero,
    #[error("division by zero")]
    DivisionByZero,
    #[error("sequence number already assigned ({0})")]
    SeqAlreadyAssigned(u64),
    #[error("no binding for output attribute `{0}`")]
    MissingBinding(String),
    #[error("attribute `{0}` bound twice")]
    DuplicateBinding(String),
    #[error("duplicate output column `{0}`")]
    DuplicateOutput(String),
}
