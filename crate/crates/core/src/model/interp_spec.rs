use std::fmt;

use super::lexer::{Token, Tokens};
use super::{AttrType, Attribute, ModelError, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AggKind {
    Latest,
    Max,
    Min,
    Sum,
    Count,
}

impl AggKind {
    fn parse(s: &str) -> Option<AggKind> {
        Some(match s {
            "latest" => AggKind::Latest,
            "max" => AggKind::Max,
            "min" => AggKind::Min,
            "sum" => AggKind::Sum,
            "count" => AggKind::Count,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            AggKind::Latest => "latest",
            AggKind::Max => "max",
            AggKind::Min => "min",
            AggKind::Sum => "sum",
            AggKind::Count => "count",
        }
    }
}

/// One aggregate column. `attr` is `None` only for `count`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Aggregate {
    pub out: String,
    pub kind: AggKind,
    pub attr: Option<usize>,
}

/// Which canonical expansion applies to a spec, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpandFamily {
    /// `latest(a)` with optional `max(a)` / `min(a)`.
    LatestExtrema { attr: usize },
    /// `count` with `sum(a)`.
    CountSum { attr: usize },
}

/// Keyed-aggregate interpretation function over an input schema.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InterpSpec {
    input: Schema,
    keys: Vec<usize>,
    aggregates: Vec<Aggregate>,
    state_schema: Schema,
    expansion_schema: Schema,
}

impl InterpSpec {
    pub fn new(input: Schema, keys: Vec<usize>, aggregates: Vec<Aggregate>) -> Result<InterpSpec, ModelError> {
        if aggregates.is_empty() {
            return Err(ModelError::Syntax("interpretation needs at least one aggregate".into()));
        }
        for (i, k) in keys.iter().enumerate() {
            if keys[..i].contains(k) {
                return Err(ModelError::DuplicateAttribute(input.attr(*k).name.clone()));
            }
        }
        for (i, a) in aggregates.iter().enumerate() {
            if aggregates[..i].iter().any(|b| b.out == a.out) {
                return Err(ModelError::DuplicateOutput(a.out.clone()));
            }
            if keys.iter().any(|k| input.attr(*k).name == a.out) {
                return Err(ModelError::DuplicateOutput(a.out.clone()));
            }
            match (a.kind, a.attr) {
                (AggKind::Count, None) => {}
                (AggKind::Count, Some(_)) | (_, None) => {
                    return Err(ModelError::Syntax(format!("malformed aggregate `{}`", a.out)))
                }
                (_, Some(idx)) => {
                    if !input.attr(idx).ty.is_numeric() {
                        return Err(ModelError::TypeError(format!(
                            "{}({}) needs a numeric attribute",
                            a.kind.name(),
                            input.attr(idx).name
                        )));
                    }
                }
            }
        }
        let key_attrs: Vec<Attribute> = keys.iter().map(|k| input.attr(*k).clone()).collect();
        let mut state_attrs = key_attrs.clone();
        let mut expansion_attrs = key_attrs;
        for a in &aggregates {
            let ty = match a.attr {
                Some(idx) => input.attr(idx).ty,
                None => AttrType::Int64,
            };
            state_attrs.push(Attribute { name: a.out.clone(), ty });
            if let Some(idx) = a.attr {
                let src = input.attr(idx);
                if !expansion_attrs.contains(src) {
                    expansion_attrs.push(src.clone());
                }
            }
        }
        let state_schema = Schema::new(format!("{}_state", input.name()), state_attrs)?;
        let expansion_schema = Schema::new(input.name().to_string(), expansion_attrs)?;
        Ok(InterpSpec { input, keys, aggregates, state_schema, expansion_schema })
    }

    /// Parses `[by(k1, k2)] out := agg(attr), ..., n := count`.
    pub fn parse(text: &str, input: &Schema) -> Result<InterpSpec, ModelError> {
        let mut toks = Tokens::new(text)?;
        let mut keys = Vec::new();
        if matches!(toks.peek(), Some(Token::Ident(s)) if s == "by") && toks.peek_at(1) == Some(&Token::LParen) {
            toks.next();
            toks.next();
            if !toks.eat(&Token::RParen) {
                loop {
                    let k = toks.ident()?;
                    keys.push(input.index_of(&k).ok_or(ModelError::UnknownAttribute(k))?);
                    if toks.eat(&Token::Comma) {
                        continue;
                    }
                    toks.expect(&Token::RParen)?;
                    break;
                }
            }
        }
        let mut aggregates = Vec::new();
        loop {
            let out = toks.ident()?;
            toks.expect(&Token::Assign)?;
            let fname = toks.ident()?;
            let kind = AggKind::parse(&fname)
                .ok_or_else(|| ModelError::Syntax(format!("unknown aggregate function `{fname}`")))?;
            let attr = if kind == AggKind::Count {
                if toks.eat(&Token::LParen) {
                    toks.expect(&Token::RParen)?;
                }
                None
            } else {
                toks.expect(&Token::LParen)?;
                let a = toks.ident()?;
                toks.expect(&Token::RParen)?;
                Some(input.index_of(&a).ok_or(ModelError::UnknownAttribute(a))?)
            };
            aggregates.push(Aggregate { out, kind, attr });
            if !toks.eat(&Token::Comma) {
                break;
            }
        }
        toks.expect_end()?;
        InterpSpec::new(input.clone(), keys, aggregates)
    }

    pub fn input(&self) -> &Schema {
        &self.input
    }

    pub fn keys(&self) -> &[usize] {
        &self.keys
    }

    pub fn aggregates(&self) -> &[Aggregate] {
        &self.aggregates
    }

    /// Key attributes followed by one column per aggregate.
    pub fn state_schema(&self) -> &Schema {
        &self.state_schema
    }

    /// Schema of histories produced by expanding this state: key attributes
    /// followed by the aggregated input attributes.
    pub fn expansion_schema(&self) -> &Schema {
        &self.expansion_schema
    }

    pub fn expand_family(&self) -> Option<ExpandFamily> {
        let kinds: Vec<AggKind> = self.aggregates.iter().map(|a| a.kind).collect();
        let attrs: Vec<usize> = self.aggregates.iter().filter_map(|a| a.attr).collect();
        let attr = *attrs.first()?;
        if attrs.iter().any(|a| *a != attr) {
            return None;
        }
        let count = |k: AggKind| kinds.iter().filter(|x| **x == k).count();
        if count(AggKind::Latest) == 1
            && count(AggKind::Max) <= 1
            && count(AggKind::Min) <= 1
            && count(AggKind::Sum) == 0
            && count(AggKind::Count) == 0
        {
            return Some(ExpandFamily::LatestExtrema { attr });
        }
        if kinds.len() == 2 && count(AggKind::Count) == 1 && count(AggKind::Sum) == 1 {
            return Some(ExpandFamily::CountSum { attr });
        }
        None
    }

    pub fn is_expandable(&self) -> bool {
        self.expand_family().is_some()
    }
}

impl fmt::Display for InterpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.keys.is_empty() {
            f.write_str("by(")?;
            for (i, k) in self.keys.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                f.write_str(&self.input.attr(*k).name)?;
            }
            f.write_str(") ")?;
        }
        for (i, a) in self.aggregates.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match a.attr {
                Some(idx) => write!(f, "{} := {}({})", a.out, a.kind.name(), self.input.attr(idx).name)?,
                None => write!(f, "{} := count", a.out)?,
            }
        }
        Ok(())
    }
}
