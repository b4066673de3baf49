use std::fmt;

use super::expr::{parse_sum, ArithExpr, Num};
use super::lexer::{Token, Tokens};
use super::{AttrType, Event, ModelError, Schema, Value};

/// One expression per output attribute, evaluated over the input event.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Transform {
    input: Schema,
    output: Schema,
    bindings: Vec<ArithExpr>,
}

impl Transform {
    pub fn new(input: Schema, output: Schema, bindings: Vec<ArithExpr>) -> Result<Transform, ModelError> {
        if bindings.len() != output.arity() {
            return Err(ModelError::Syntax(format!(
                "transform has {} bindings for {} output attributes",
                bindings.len(),
                output.arity()
            )));
        }
        for (attr, b) in output.attrs().iter().zip(&bindings) {
            let ty = b.result_type(&input);
            let ok = match attr.ty {
                AttrType::Int64 => ty == AttrType::Int64,
                AttrType::Float64 => ty.is_numeric(),
                AttrType::String | AttrType::Bool => b.is_bare_attr().is_some() && ty == attr.ty,
            };
            if !ok {
                return Err(ModelError::TypeError(format!(
                    "binding `{b}` ({ty}) cannot produce {} attribute `{}`",
                    attr.ty, attr.name
                )));
            }
        }
        Ok(Transform { input, output, bindings })
    }

    /// Copies every attribute unchanged.
    pub fn identity(schema: &Schema) -> Transform {
        let bindings = schema
            .attrs()
            .iter()
            .enumerate()
            .map(|(index, a)| ArithExpr::Attr { index, name: a.name.clone() })
            .collect();
        Transform { input: schema.clone(), output: schema.clone(), bindings }
    }

    /// Parses `out := expr, ...` (`,` or `;` separated, any order). Every
    /// output attribute needs exactly one binding.
    pub fn parse(text: &str, input: &Schema, output: &Schema) -> Result<Transform, ModelError> {
        let mut toks = Tokens::new(text)?;
        let mut slots: Vec<Option<ArithExpr>> = vec![None; output.arity()];
        while !toks.at_end() {
            let name = toks.ident()?;
            toks.expect(&Token::Assign)?;
            let expr = parse_sum(&mut toks, input)?;
            let idx = output.index_of(&name).ok_or_else(|| ModelError::UnknownAttribute(name.clone()))?;
            if slots[idx].is_some() {
                return Err(ModelError::DuplicateBinding(name));
            }
            slots[idx] = Some(expr);
            if !(toks.eat(&Token::Comma) || toks.eat(&Token::Semicolon)) {
                break;
            }
        }
        toks.expect_end()?;
        let bindings = slots
            .into_iter()
            .enumerate()
            .map(|(i, b)| b.ok_or_else(|| ModelError::MissingBinding(output.attr(i).name.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Transform::new(input.clone(), output.clone(), bindings)
    }

    pub fn input(&self) -> &Schema {
        &self.input
    }

    pub fn output(&self) -> &Schema {
        &self.output
    }

    pub fn binding(&self, out_index: usize) -> &ArithExpr {
        &self.bindings[out_index]
    }

    pub fn bindings(&self) -> &[ArithExpr] {
        &self.bindings
    }

    pub fn is_identity(&self) -> bool {
        self.input.same_shape(&self.output)
            && self.bindings.iter().enumerate().all(|(i, b)| b.is_bare_attr() == Some(i))
    }

    pub fn apply_values(&self, values: &[Value]) -> Result<Vec<Value>, ModelError> {
        self.output
            .attrs()
            .iter()
            .zip(&self.bindings)
            .map(|(attr, b)| match attr.ty {
                AttrType::Float64 => Ok(Value::Float(b.eval_num(values).map(Num::as_f64)?)),
                _ => b.eval(values),
            })
            .collect()
    }
}

impl fmt::Display for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (attr, b)) in self.output.attrs().iter().zip(&self.bindings).enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{} := {}", attr.name, b)?;
        }
        Ok(())
    }
}

/// Produces exactly one output event. The sequence number is not carried
/// over (the destination re-sequences); the origin is.
pub fn apply_transform(t: &Transform, e: &Event) -> Result<Event, ModelError> {
    Ok(Event::new(t.apply_values(&e.values)?, e.origin.clone()))
}
