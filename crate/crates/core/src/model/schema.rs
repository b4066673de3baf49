use std::fmt;

use serde::{Deserialize, Serialize};

use super::lexer::{Token, Tokens};
use super::{AttrType, ModelError};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub ty: AttrType,
}

/// Ordered, typed attribute list. Events are positional tuples over it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schema {
    name: String,
    attrs: Vec<Attribute>,
}

impl Schema {
    pub fn new(name: impl Into<String>, attrs: Vec<Attribute>) -> Result<Self, ModelError> {
        if attrs.is_empty() {
            return Err(ModelError::EmptyAttributes);
        }
        for (i, a) in attrs.iter().enumerate() {
            if attrs[..i].iter().any(|b| b.name == a.name) {
                return Err(ModelError::DuplicateAttribute(a.name.clone()));
            }
        }
        Ok(Schema { name: name.into(), attrs })
    }

    /// Parses `name(attr:type, ...)`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut toks = Tokens::new(text)?;
        let name = toks.ident()?;
        toks.expect(&Token::LParen)?;
        let mut attrs = Vec::new();
        if !toks.eat(&Token::RParen) {
            loop {
                let attr = toks.ident()?;
                toks.expect(&Token::Colon)?;
                let ty_tok = toks.ident()?;
                let ty = AttrType::parse(&ty_tok).ok_or(ModelError::UnknownType(ty_tok))?;
                attrs.push(Attribute { name: attr, ty });
                if toks.eat(&Token::Comma) {
                    continue;
                }
                toks.expect(&Token::RParen)?;
                break;
            }
        }
        toks.expect_end()?;
        Schema::new(name, attrs)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn attrs(&self) -> &[Attribute] {
        &self.attrs
    }

    pub fn arity(&self) -> usize {
        self.attrs.len()
    }

    pub fn index_of(&self, attr: &str) -> Option<usize> {
        self.attrs.iter().position(|a| a.name == attr)
    }

    pub fn attr(&self, index: usize) -> &Attribute {
        &self.attrs[index]
    }

    /// Same attribute names and types in the same order; the schema label is ignored.
    pub fn same_shape(&self, other: &Schema) -> bool {
        self.attrs == other.attrs
    }

    pub fn renamed(&self, name: impl Into<String>) -> Schema {
        Schema { name: name.into(), attrs: self.attrs.clone() }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, a) in self.attrs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}:{}", a.name, a.ty)?;
        }
        f.write_str(")")
    }
}
