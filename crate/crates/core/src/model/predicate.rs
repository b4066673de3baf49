use std::cmp::Ordering;
use std::fmt;

use super::expr::{parse_sum, ArithExpr, Num};
use super::lexer::{Token, Tokens};
use super::{Event, ModelError, Schema, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn from_token(t: &Token) -> Option<CmpOp> {
        Some(match t {
            Token::Eq => CmpOp::Eq,
            Token::Ne => CmpOp::Ne,
            Token::Lt => CmpOp::Lt,
            Token::Le => CmpOp::Le,
            Token::Gt => CmpOp::Gt,
            Token::Ge => CmpOp::Ge,
            _ => return None,
        })
    }

    /// Outcome for an IEEE comparison result (`None` = unordered / NaN).
    fn holds(self, ord: Option<Ordering>) -> bool {
        match ord {
            None => self == CmpOp::Ne,
            Some(o) => match self {
                CmpOp::Eq => o == Ordering::Equal,
                CmpOp::Ne => o != Ordering::Equal,
                CmpOp::Lt => o == Ordering::Less,
                CmpOp::Le => o != Ordering::Greater,
                CmpOp::Gt => o == Ordering::Greater,
                CmpOp::Ge => o != Ordering::Less,
            },
        }
    }
}

/// `lhs cmp constant`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    pub lhs: ArithExpr,
    pub op: CmpOp,
    pub rhs: Value,
}

impl Atom {
    pub fn new(lhs: ArithExpr, op: CmpOp, rhs: Value, schema: &Schema) -> Result<Atom, ModelError> {
        let lhs_ty = lhs.result_type(schema);
        if lhs_ty.is_numeric() {
            if !rhs.attr_type().is_numeric() {
                return Err(ModelError::TypeError(format!("`{lhs}` is numeric but compared with {rhs}")));
            }
        } else {
            if lhs.is_bare_attr().is_none() {
                return Err(ModelError::TypeError(format!("`{lhs}` is not numeric")));
            }
            if !matches!(op, CmpOp::Eq | CmpOp::Ne) {
                return Err(ModelError::TypeError(format!("{lhs_ty} attribute `{lhs}` only supports = and !=")));
            }
            if rhs.attr_type() != lhs_ty {
                return Err(ModelError::TypeError(format!("{lhs_ty} attribute `{lhs}` compared with {rhs}")));
            }
        }
        Ok(Atom { lhs, op, rhs })
    }

    pub fn eval(&self, values: &[Value]) -> Result<bool, ModelError> {
        if let Some(idx) = self.lhs.is_bare_attr() {
            let v = &values[idx];
            if !v.attr_type().is_numeric() {
                let eq = *v == self.rhs;
                return Ok(if self.op == CmpOp::Eq { eq } else { !eq });
            }
        }
        let lhs = self.lhs.eval_num(values)?;
        let rhs = Num::from_value(&self.rhs).ok_or_else(|| ModelError::TypeError("non-numeric constant".into()))?;
        Ok(self.op.holds(lhs.ieee_cmp(rhs)))
    }

    fn sort_key(&self) -> (usize, CmpOp, &Value, &ArithExpr) {
        (self.lhs.min_attr().unwrap_or(usize::MAX), self.op, &self.rhs, &self.lhs)
    }
}

impl PartialOrd for Atom {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Atom {
    /// Canonical order: attribute position, then operator, then constant.
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.op.symbol(), self.rhs.render_literal())
    }
}

/// All atoms true. An empty conjunction matches every event.
pub fn eval_conjunction(atoms: &[Atom], values: &[Value]) -> Result<bool, ModelError> {
    for a in atoms {
        if !a.eval(values)? {
            return Ok(false);
        }
    }
    Ok(true)
}

pub(crate) fn canonical_conjunction(mut atoms: Vec<Atom>) -> Vec<Atom> {
    atoms.sort();
    atoms.dedup();
    atoms
}

/// Disjunctive normal form over comparison atoms.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Predicate {
    disjuncts: Vec<Vec<Atom>>,
}

impl Predicate {
    pub fn from_disjuncts(disjuncts: Vec<Vec<Atom>>) -> Result<Predicate, ModelError> {
        if disjuncts.is_empty() || disjuncts.iter().any(Vec::is_empty) {
            return Err(ModelError::Syntax("predicate needs at least one non-empty conjunction".into()));
        }
        let mut ds: Vec<Vec<Atom>> = disjuncts.into_iter().map(canonical_conjunction).collect();
        ds.sort();
        ds.dedup();
        Ok(Predicate { disjuncts: ds })
    }

    pub fn parse(text: &str, schema: &Schema) -> Result<Predicate, ModelError> {
        let mut toks = Tokens::new(text)?;
        let mut disjuncts = Vec::new();
        loop {
            let mut conj = vec![parse_atom(&mut toks, schema)?];
            while toks.eat_keyword("and") {
                conj.push(parse_atom(&mut toks, schema)?);
            }
            disjuncts.push(conj);
            if !toks.eat_keyword("or") {
                break;
            }
        }
        toks.expect_end()?;
        Predicate::from_disjuncts(disjuncts)
    }

    pub fn disjuncts(&self) -> &[Vec<Atom>] {
        &self.disjuncts
    }

    pub fn eval(&self, values: &[Value]) -> Result<bool, ModelError> {
        for conj in &self.disjuncts {
            if eval_conjunction(conj, values)? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// `self ∧ other`, distributed back into DNF.
    pub fn and(&self, other: &Predicate) -> Predicate {
        let mut out = Vec::with_capacity(self.disjuncts.len() * other.disjuncts.len());
        for a in &self.disjuncts {
            for b in &other.disjuncts {
                out.push(a.iter().chain(b).cloned().collect());
            }
        }
        Predicate::from_disjuncts(out).expect("conjunction of non-empty predicates is non-empty")
    }

    pub fn has_division(&self) -> bool {
        self.atoms().any(|a| a.lhs.has_division())
    }

    pub fn atoms(&self) -> impl Iterator<Item = &Atom> {
        self.disjuncts.iter().flatten()
    }

    /// Rewrites every atom's left-hand side with `f`.
    pub fn map_lhs(&self, f: impl Fn(&ArithExpr) -> ArithExpr) -> Predicate {
        let ds = self
            .disjuncts
            .iter()
            .map(|c| c.iter().map(|a| Atom { lhs: f(&a.lhs), op: a.op, rhs: a.rhs.clone() }).collect())
            .collect();
        Predicate::from_disjuncts(ds).expect("shape preserved")
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, conj) in self.disjuncts.iter().enumerate() {
            if i > 0 {
                f.write_str(" or ")?;
            }
            for (j, a) in conj.iter().enumerate() {
                if j > 0 {
                    f.write_str(" and ")?;
                }
                write!(f, "{a}")?;
            }
        }
        Ok(())
    }
}

/// True iff `e` satisfies `p`. Fails only on a runtime division by zero.
pub fn eval_predicate(p: &Predicate, e: &Event) -> Result<bool, ModelError> {
    p.eval(&e.values)
}

fn parse_atom(toks: &mut Tokens, schema: &Schema) -> Result<Atom, ModelError> {
    let lhs = parse_sum(toks, schema)?;
    let op = match toks.next() {
        Some(t) => CmpOp::from_token(&t)
            .ok_or_else(|| ModelError::Syntax(format!("expected comparison operator, found {}", t.describe())))?,
        None => return Err(ModelError::Syntax("expected comparison operator, found end of input".into())),
    };
    let rhs = parse_literal(toks)?;
    Atom::new(lhs, op, rhs, schema)
}

pub(crate) fn parse_literal(toks: &mut Tokens) -> Result<Value, ModelError> {
    match toks.next() {
        Some(Token::Int(i)) => Ok(Value::Int(i)),
        Some(Token::Float(x)) => Ok(Value::Float(x)),
        Some(Token::Str(s)) => Ok(Value::Str(s)),
        Some(Token::Minus) => match toks.next() {
            Some(Token::Int(i)) => Ok(Value::Int(-i)),
            Some(Token::Float(x)) => Ok(Value::Float(-x)),
            _ => Err(ModelError::Syntax("expected numeric literal after `-`".into())),
        },
        Some(Token::Ident(s)) if s == "true" => Ok(Value::Bool(true)),
        Some(Token::Ident(s)) if s == "false" => Ok(Value::Bool(false)),
        Some(t) => Err(ModelError::Syntax(format!("expected literal constant, found {}", t.describe()))),
        None => Err(ModelError::Syntax("expected literal constant, found end of input".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trade() -> Schema {
        Schema::parse("trade(symbol:string, price:float64, volume:int64)").unwrap()
    }

    fn ev(sym: &str, price: f64, volume: i64) -> Event {
        Event::new(vec![sym.into(), price.into(), volume.into()], "t")
    }

    #[test]
    fn volume_threshold() {
        let p = Predicate::parse("volume > 1000", &trade()).unwrap();
        assert_eq!(p.disjuncts().len(), 1);
        assert_eq!(p.disjuncts()[0].len(), 1);
        assert!(eval_predicate(&p, &ev("IBM", 50.0, 30000)).unwrap());
        assert!(!eval_predicate(&p, &ev("IBM", 50.0, 1000)).unwrap());
    }

    #[test]
    fn capital_threshold_is_arithmetic() {
        let p = Predicate::parse("price*volume >= 1000000", &trade()).unwrap();
        assert!(matches!(p.disjuncts()[0][0].lhs, ArithExpr::Bin(..)));
        // 50.0 * 30000 = 1_500_000
        assert!(eval_predicate(&p, &ev("IBM", 50.0, 30000)).unwrap());
        assert!(!eval_predicate(&p, &ev("IBM", 50.0, 19999)).unwrap());
    }

    #[test]
    fn string_ordering_rejected() {
        assert!(matches!(Predicate::parse(r#"symbol < "A""#, &trade()), Err(ModelError::TypeError(_))));
        assert!(matches!(Predicate::parse("symbol = 3", &trade()), Err(ModelError::TypeError(_))));
        assert!(matches!(Predicate::parse("nope = 3", &trade()), Err(ModelError::UnknownAttribute(_))));
        assert!(matches!(Predicate::parse("volume >", &trade()), Err(ModelError::Syntax(_))));
    }

    #[test]
    fn string_equality() {
        let p = Predicate::parse(r#"symbol = "IBM" or symbol = "HP" and volume < 10"#, &trade()).unwrap();
        assert!(p.eval(&ev("IBM", 1.0, 100).values).unwrap());
        assert!(p.eval(&ev("HP", 1.0, 5).values).unwrap());
        assert!(!p.eval(&ev("HP", 1.0, 50).values).unwrap());
    }

    #[test]
    fn canonical_order_sorts_by_attribute_then_operator() {
        let p = Predicate::parse(r#"volume > 5 and price >= 1.5 and symbol = "X" and volume = 7"#, &trade()).unwrap();
        assert_eq!(p.to_string(), r#"symbol = "X" and price >= 1.5 and volume = 7 and volume > 5"#);
    }

    #[test]
    fn render_parse_is_idempotent() {
        let s = trade();
        let p = Predicate::parse("volume*2 - 3 > -4 or price / volume <= 0.25 and price != 3", &s).unwrap();
        let q = Predicate::parse(&p.to_string(), &s).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.to_string(), q.to_string());
    }

    #[test]
    fn conjunction_of_equal_predicates_dedups() {
        let s = trade();
        let p = Predicate::parse("volume > 1000", &s).unwrap();
        assert_eq!(p.and(&p), p);
    }

    #[test]
    fn nan_only_satisfies_not_equal() {
        let s = trade();
        let vals = ev("X", f64::NAN, 1).values;
        assert!(!Predicate::parse("price >= 0", &s).unwrap().eval(&vals).unwrap());
        assert!(Predicate::parse("price != 0", &s).unwrap().eval(&vals).unwrap());
    }

    #[test]
    fn runtime_division_error_surfaces() {
        let s = trade();
        let p = Predicate::parse("price / volume > 1", &s).unwrap();
        assert_eq!(p.eval(&ev("X", 1.0, 0).values), Err(ModelError::DivisionByZero));
    }
}
