use std::cmp::Ordering;
use std::fmt;

use super::lexer::{Token, Tokens};
use super::{AttrType, ModelError, Schema, Value};

/// Numeric value produced by arithmetic. Mixed int/float arithmetic promotes
/// to float; int arithmetic wraps on overflow so evaluation stays total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Num {
    Int(i64),
    Float(f64),
}

impl Num {
    pub fn from_value(v: &Value) -> Option<Num> {
        match v {
            Value::Int(i) => Some(Num::Int(*i)),
            Value::Float(x) => Some(Num::Float(*x)),
            _ => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Num::Int(i) => i as f64,
            Num::Float(x) => x,
        }
    }

    pub fn into_value(self) -> Value {
        match self {
            Num::Int(i) => Value::Int(i),
            Num::Float(x) => Value::Float(x),
        }
    }

    /// IEEE comparison after promotion; `None` when either side is NaN.
    pub fn ieee_cmp(self, other: Num) -> Option<Ordering> {
        match (self, other) {
            (Num::Int(a), Num::Int(b)) => Some(a.cmp(&b)),
            (a, b) => a.as_f64().partial_cmp(&b.as_f64()),
        }
    }

    fn is_zero(self) -> bool {
        match self {
            Num::Int(i) => i == 0,
            Num::Float(x) => x == 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    pub fn apply(self, a: Num, b: Num) -> Result<Num, ModelError> {
        if self == BinOp::Div && b.is_zero() {
            return Err(ModelError::DivisionByZero);
        }
        Ok(match (a, b) {
            (Num::Int(x), Num::Int(y)) => Num::Int(match self {
                BinOp::Add => x.wrapping_add(y),
                BinOp::Sub => x.wrapping_sub(y),
                BinOp::Mul => x.wrapping_mul(y),
                BinOp::Div => x.wrapping_div(y),
            }),
            (a, b) => {
                let (x, y) = (a.as_f64(), b.as_f64());
                Num::Float(match self {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                })
            }
        })
    }
}

/// Arithmetic expression bound to a schema (attribute references carry both
/// the position and the name).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ArithExpr {
    Lit(Value),
    Attr { index: usize, name: String },
    Bin(BinOp, Box<ArithExpr>, Box<ArithExpr>),
}

impl ArithExpr {
    pub fn attr(schema: &Schema, name: &str) -> Result<ArithExpr, ModelError> {
        let index = schema.index_of(name).ok_or_else(|| ModelError::UnknownAttribute(name.to_string()))?;
        Ok(ArithExpr::Attr { index, name: name.to_string() })
    }

    /// Parses a complete expression.
    pub fn parse(text: &str, schema: &Schema) -> Result<ArithExpr, ModelError> {
        let mut toks = Tokens::new(text)?;
        let e = parse_sum(&mut toks, schema)?;
        toks.expect_end()?;
        Ok(e)
    }

    /// Static result type: string/bool for bare non-numeric attributes,
    /// otherwise int64 unless some leaf is a float.
    pub fn result_type(&self, schema: &Schema) -> AttrType {
        match self {
            ArithExpr::Lit(v) => v.attr_type(),
            ArithExpr::Attr { index, .. } => schema.attr(*index).ty,
            ArithExpr::Bin(_, l, r) => {
                if l.result_type(schema) == AttrType::Int64 && r.result_type(schema) == AttrType::Int64 {
                    AttrType::Int64
                } else {
                    AttrType::Float64
                }
            }
        }
    }

    pub fn eval(&self, values: &[Value]) -> Result<Value, ModelError> {
        match self {
            ArithExpr::Lit(v) => Ok(v.clone()),
            ArithExpr::Attr { index, .. } => Ok(values[*index].clone()),
            ArithExpr::Bin(..) => self.eval_num(values).map(Num::into_value),
        }
    }

    pub fn eval_num(&self, values: &[Value]) -> Result<Num, ModelError> {
        match self {
            ArithExpr::Lit(v) => Num::from_value(v).ok_or_else(|| ModelError::TypeError("non-numeric literal".into())),
            ArithExpr::Attr { index, name } => Num::from_value(&values[*index])
                .ok_or_else(|| ModelError::TypeError(format!("attribute `{name}` is not numeric"))),
            ArithExpr::Bin(op, l, r) => op.apply(l.eval_num(values)?, r.eval_num(values)?),
        }
    }

    pub fn is_bare_attr(&self) -> Option<usize> {
        match self {
            ArithExpr::Attr { index, .. } => Some(*index),
            _ => None,
        }
    }

    pub fn has_division(&self) -> bool {
        match self {
            ArithExpr::Bin(op, l, r) => *op == BinOp::Div || l.has_division() || r.has_division(),
            _ => false,
        }
    }

    pub fn attrs_referenced(&self, out: &mut Vec<usize>) {
        match self {
            ArithExpr::Lit(_) => {}
            ArithExpr::Attr { index, .. } => out.push(*index),
            ArithExpr::Bin(_, l, r) => {
                l.attrs_referenced(out);
                r.attrs_referenced(out);
            }
        }
    }

    pub fn min_attr(&self) -> Option<usize> {
        let mut v = Vec::new();
        self.attrs_referenced(&mut v);
        v.into_iter().min()
    }

    /// Replaces every attribute reference by `f(index)`.
    pub fn substitute(&self, f: &impl Fn(usize) -> ArithExpr) -> ArithExpr {
        match self {
            ArithExpr::Lit(v) => ArithExpr::Lit(v.clone()),
            ArithExpr::Attr { index, .. } => f(*index),
            ArithExpr::Bin(op, l, r) => ArithExpr::Bin(*op, Box::new(l.substitute(f)), Box::new(r.substitute(f))),
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            ArithExpr::Bin(op, ..) => op.precedence(),
            _ => 3,
        }
    }
}

impl fmt::Display for ArithExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArithExpr::Lit(v) => f.write_str(&v.render_literal()),
            ArithExpr::Attr { name, .. } => f.write_str(name),
            ArithExpr::Bin(op, l, r) => {
                let p = op.precedence();
                if l.precedence() < p {
                    write!(f, "({l})")?;
                } else {
                    write!(f, "{l}")?;
                }
                write!(f, " {} ", op.symbol())?;
                if r.precedence() <= p {
                    write!(f, "({r})")
                } else {
                    write!(f, "{r}")
                }
            }
        }
    }
}

pub(crate) fn parse_sum(toks: &mut Tokens, schema: &Schema) -> Result<ArithExpr, ModelError> {
    let mut lhs = parse_product(toks, schema)?;
    loop {
        let op = match toks.peek() {
            Some(Token::Plus) => BinOp::Add,
            Some(Token::Minus) => BinOp::Sub,
            _ => return Ok(lhs),
        };
        toks.next();
        let rhs = parse_product(toks, schema)?;
        lhs = make_bin(op, lhs, rhs, schema)?;
    }
}

fn parse_product(toks: &mut Tokens, schema: &Schema) -> Result<ArithExpr, ModelError> {
    let mut lhs = parse_primary(toks, schema)?;
    loop {
        let op = match toks.peek() {
            Some(Token::Star) => BinOp::Mul,
            Some(Token::Slash) => BinOp::Div,
            _ => return Ok(lhs),
        };
        toks.next();
        let rhs = parse_primary(toks, schema)?;
        lhs = make_bin(op, lhs, rhs, schema)?;
    }
}

fn parse_primary(toks: &mut Tokens, schema: &Schema) -> Result<ArithExpr, ModelError> {
    match toks.next() {
        Some(Token::Int(i)) => Ok(ArithExpr::Lit(Value::Int(i))),
        Some(Token::Float(x)) => Ok(ArithExpr::Lit(Value::Float(x))),
        Some(Token::Minus) => match toks.next() {
            Some(Token::Int(i)) => Ok(ArithExpr::Lit(Value::Int(-i))),
            Some(Token::Float(x)) => Ok(ArithExpr::Lit(Value::Float(-x))),
            Some(t) => Err(ModelError::Syntax(format!("unary minus applies only to literals, found {}", t.describe()))),
            None => Err(ModelError::Syntax("dangling `-`".into())),
        },
        Some(Token::Ident(name)) => ArithExpr::attr(schema, &name),
        Some(Token::LParen) => {
            let e = parse_sum(toks, schema)?;
            toks.expect(&Token::RParen)?;
            Ok(e)
        }
        Some(Token::Str(s)) => Err(ModelError::TypeError(format!("string literal {s:?} inside arithmetic"))),
        Some(t) => Err(ModelError::Syntax(format!("expected expression, found {}", t.describe()))),
        None => Err(ModelError::Syntax("expected expression, found end of input".into())),
    }
}

fn make_bin(op: BinOp, lhs: ArithExpr, rhs: ArithExpr, schema: &Schema) -> Result<ArithExpr, ModelError> {
    for side in [&lhs, &rhs] {
        if !side.result_type(schema).is_numeric() {
            return Err(ModelError::TypeError(format!("`{side}` is not numeric")));
        }
    }
    if op == BinOp::Div {
        if let ArithExpr::Lit(v) = &rhs {
            if Num::from_value(v).is_some_and(Num::is_zero) {
                return Err(ModelError::LiteralDivisionByZero);
            }
        }
    }
    Ok(ArithExpr::Bin(op, Box::new(lhs), Box::new(rhs)))
}
