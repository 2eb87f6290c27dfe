use std::collections::HashMap;
use std::fmt;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::naming::{parse_variable_name, VariableName};
use crate::temporal::format_ratio;

pub type Number = Ratio<i128>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Comparison {
    Lt,
    Le,
    Eq,
    Ne,
    Ge,
    Gt,
}

impl Comparison {
    pub fn holds(self, lhs: &Number, rhs: &Number) -> bool {
        match self {
            Comparison::Lt => lhs < rhs,
            Comparison::Le => lhs <= rhs,
            Comparison::Eq => lhs == rhs,
            Comparison::Ne => lhs != rhs,
            Comparison::Ge => lhs >= rhs,
            Comparison::Gt => lhs > rhs,
        }
    }

    /// `a op b` rewritten as `b op' a`.
    pub fn flipped(self) -> Comparison {
        match self {
            Comparison::Lt => Comparison::Gt,
            Comparison::Le => Comparison::Ge,
            Comparison::Gt => Comparison::Lt,
            Comparison::Ge => Comparison::Le,
            c => c,
        }
    }

    pub fn smt_op(self) -> &'static str {
        match self {
            Comparison::Lt => "<",
            Comparison::Le => "<=",
            Comparison::Eq => "=",
            Comparison::Ne => "distinct",
            Comparison::Ge => ">=",
            Comparison::Gt => ">",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::Lt => "LT",
            Comparison::Le => "LE",
            Comparison::Eq => "EQ",
            Comparison::Ne => "NE",
            Comparison::Ge => "GE",
            Comparison::Gt => "GT",
        }
    }

    pub fn parse(s: &str) -> Option<Comparison> {
        Some(match s {
            "LT" => Comparison::Lt,
            "LE" => Comparison::Le,
            "EQ" => Comparison::Eq,
            "NE" => Comparison::Ne,
            "GE" => Comparison::Ge,
            "GT" => Comparison::Gt,
            _ => return None,
        })
    }
}

/// Numeric interval; `None` bounds are unbounded.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NumInterval {
    pub lower: Option<Number>,
    pub upper: Option<Number>,
    pub lower_inclusive: bool,
    pub upper_inclusive: bool,
}

impl NumInterval {
    pub fn point(v: Number) -> Self {
        NumInterval { lower: Some(v), upper: Some(v), lower_inclusive: true, upper_inclusive: true }
    }

    /// Values `x` with `x cmp v`. `Ne` has no single interval.
    pub fn from_comparison(cmp: Comparison, v: Number) -> Option<Self> {
        let (lower, upper, li, ui) = match cmp {
            Comparison::Lt => (None, Some(v), false, false),
            Comparison::Le => (None, Some(v), false, true),
            Comparison::Eq => (Some(v), Some(v), true, true),
            Comparison::Ge => (Some(v), None, true, false),
            Comparison::Gt => (Some(v), None, false, false),
            Comparison::Ne => return None,
        };
        Some(NumInterval { lower, upper, lower_inclusive: li, upper_inclusive: ui })
    }

    pub fn contains(&self, x: &Number) -> bool {
        let lo = match &self.lower {
            None => true,
            Some(l) if self.lower_inclusive => x >= l,
            Some(l) => x > l,
        };
        let hi = match &self.upper {
            None => true,
            Some(u) if self.upper_inclusive => x <= u,
            Some(u) => x < u,
        };
        lo && hi
    }

    pub fn intersects(&self, other: &NumInterval) -> bool {
        use std::cmp::Ordering::*;
        let (lo, lo_inc) = match (&self.lower, &other.lower) {
            (None, None) => (None, true),
            (Some(a), None) => (Some(a), self.lower_inclusive),
            (None, Some(b)) => (Some(b), other.lower_inclusive),
            (Some(a), Some(b)) => match a.cmp(b) {
                Greater => (Some(a), self.lower_inclusive),
                Less => (Some(b), other.lower_inclusive),
                Equal => (Some(a), self.lower_inclusive && other.lower_inclusive),
            },
        };
        let (hi, hi_inc) = match (&self.upper, &other.upper) {
            (None, None) => (None, true),
            (Some(a), None) => (Some(a), self.upper_inclusive),
            (None, Some(b)) => (Some(b), other.upper_inclusive),
            (Some(a), Some(b)) => match a.cmp(b) {
                Less => (Some(a), self.upper_inclusive),
                Greater => (Some(b), other.upper_inclusive),
                Equal => (Some(a), self.upper_inclusive && other.upper_inclusive),
            },
        };
        match (lo, hi) {
            (Some(l), Some(h)) => match l.cmp(h) {
                Less => true,
                Equal => lo_inc && hi_inc,
                Greater => false,
            },
            _ => true,
        }
    }

    /// `inner` is a subset of `self`.
    pub fn contains_interval(&self, inner: &NumInterval) -> bool {
        let lo_ok = match (&self.lower, &inner.lower) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => a < b || (a == b && (self.lower_inclusive || !inner.lower_inclusive)),
        };
        let hi_ok = match (&self.upper, &inner.upper) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => a > b || (a == b && (self.upper_inclusive || !inner.upper_inclusive)),
        };
        lo_ok && hi_ok
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Bool(bool),
    Number { value: Number, unit: String },
    Interval { interval: NumInterval, unit: String },
}

impl Target {
    pub fn unit(&self) -> Option<&str> {
        match self {
            Target::Bool(_) => None,
            Target::Number { unit, .. } | Target::Interval { unit, .. } => Some(unit),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CanonicalPredicate {
    pub name: VariableName,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NonCanonicalPredicate {
    pub id: String,
    pub free_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Predicate {
    Canonical(CanonicalPredicate),
    NonCanonical(NonCanonicalPredicate),
}

impl Predicate {
    /// Classify a declared symbol. Names that parse but do not render back to
    /// the same text stay non-canonical.
    pub fn from_symbol(symbol: &str, free_text: &str) -> Predicate {
        match parse_variable_name(symbol) {
            Ok(name) if name.render() == symbol && name.validate().is_ok() => Predicate::Canonical(CanonicalPredicate { name }),
            _ => Predicate::NonCanonical(NonCanonicalPredicate { id: symbol.to_string(), free_text: free_text.to_string() }),
        }
    }

    pub fn symbol(&self) -> String {
        match self {
            Predicate::Canonical(c) => c.name.render(),
            Predicate::NonCanonical(n) => n.id.clone(),
        }
    }

    pub fn canonical(&self) -> Option<&VariableName> {
        match self {
            Predicate::Canonical(c) => Some(&c.name),
            Predicate::NonCanonical(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomicConstraint {
    pub predicate: Predicate,
    pub cmp: Comparison,
    pub target: Target,
}

impl AtomicConstraint {
    /// `symbol = true`.
    pub fn boolean(predicate: Predicate) -> Self {
        AtomicConstraint { predicate, cmp: Comparison::Eq, target: Target::Bool(true) }
    }

    pub fn numeric(predicate: Predicate, cmp: Comparison, value: Number, unit: &str) -> Self {
        AtomicConstraint { predicate, cmp, target: Target::Number { value, unit: unit.to_string() } }
    }

    pub fn symbol(&self) -> String {
        self.predicate.symbol()
    }

    pub fn is_canonical(&self) -> bool {
        matches!(self.predicate, Predicate::Canonical(_))
    }
}

impl fmt::Display for AtomicConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.target {
            Target::Bool(b) => write!(f, "{} {} {}", self.symbol(), self.cmp.as_str(), b),
            Target::Number { value, unit } => write!(f, "{} {} {} {}", self.symbol(), self.cmp.as_str(), format_ratio(value), unit),
            Target::Interval { interval, unit } => write!(
                f,
                "{} in {}{},{}{} {}",
                self.symbol(),
                if interval.lower_inclusive { '[' } else { '(' },
                interval.lower.as_ref().map(format_ratio).unwrap_or_else(|| "-inf".into()),
                interval.upper.as_ref().map(format_ratio).unwrap_or_else(|| "inf".into()),
                if interval.upper_inclusive { ']' } else { ')' },
                unit
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintFormula {
    Const(bool),
    Atom(AtomicConstraint),
    Not(Box<ConstraintFormula>),
    And(Vec<ConstraintFormula>),
    Or(Vec<ConstraintFormula>),
    /// At least `k` of the children hold.
    CountAtLeast(u32, Vec<ConstraintFormula>),
    Implies(Box<ConstraintFormula>, Box<ConstraintFormula>),
    Iff(Box<ConstraintFormula>, Box<ConstraintFormula>),
    /// Arithmetic the model does not interpret; always unknown.
    Opaque { text: String, symbols: Vec<String> },
}

impl ConstraintFormula {
    pub fn not(f: ConstraintFormula) -> Self {
        ConstraintFormula::Not(Box::new(f))
    }

    pub fn implies(a: ConstraintFormula, b: ConstraintFormula) -> Self {
        ConstraintFormula::Implies(Box::new(a), Box::new(b))
    }

    pub fn iff(a: ConstraintFormula, b: ConstraintFormula) -> Self {
        ConstraintFormula::Iff(Box::new(a), Box::new(b))
    }

    /// Atoms in left-to-right order, with repeats.
    pub fn atoms(&self) -> Vec<&AtomicConstraint> {
        let mut out = Vec::new();
        self.visit_atoms(&mut |a| out.push(a));
        out
    }

    fn visit_atoms<'a>(&'a self, f: &mut impl FnMut(&'a AtomicConstraint)) {
        match self {
            ConstraintFormula::Const(_) | ConstraintFormula::Opaque { .. } => {}
            ConstraintFormula::Atom(a) => f(a),
            ConstraintFormula::Not(x) => x.visit_atoms(f),
            ConstraintFormula::And(xs) | ConstraintFormula::Or(xs) | ConstraintFormula::CountAtLeast(_, xs) => {
                xs.iter().for_each(|x| x.visit_atoms(f))
            }
            ConstraintFormula::Implies(a, b) | ConstraintFormula::Iff(a, b) => {
                a.visit_atoms(f);
                b.visit_atoms(f);
            }
        }
    }

    /// Every symbol mentioned, including those inside opaque terms.
    pub fn symbols(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.collect_symbols(&mut out);
        out
    }

    fn collect_symbols(&self, out: &mut Vec<String>) {
        match self {
            ConstraintFormula::Const(_) => {}
            ConstraintFormula::Opaque { symbols, .. } => out.extend(symbols.iter().cloned()),
            ConstraintFormula::Atom(a) => out.push(a.symbol()),
            ConstraintFormula::Not(x) => x.collect_symbols(out),
            ConstraintFormula::And(xs) | ConstraintFormula::Or(xs) | ConstraintFormula::CountAtLeast(_, xs) => {
                xs.iter().for_each(|x| x.collect_symbols(out))
            }
            ConstraintFormula::Implies(a, b) | ConstraintFormula::Iff(a, b) => {
                a.collect_symbols(out);
                b.collect_symbols(out);
            }
        }
    }

    pub fn size(&self) -> usize {
        match self {
            ConstraintFormula::Const(_) | ConstraintFormula::Atom(_) | ConstraintFormula::Opaque { .. } => 1,
            ConstraintFormula::Not(x) => 1 + x.size(),
            ConstraintFormula::And(xs) | ConstraintFormula::Or(xs) | ConstraintFormula::CountAtLeast(_, xs) => {
                1 + xs.iter().map(Self::size).sum::<usize>()
            }
            ConstraintFormula::Implies(a, b) | ConstraintFormula::Iff(a, b) => 1 + a.size() + b.size(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TriState {
    True,
    False,
    Unknown,
}

impl TriState {
    pub fn from_bool(b: bool) -> Self {
        if b {
            TriState::True
        } else {
            TriState::False
        }
    }

    pub fn not(self) -> Self {
        match self {
            TriState::True => TriState::False,
            TriState::False => TriState::True,
            TriState::Unknown => TriState::Unknown,
        }
    }

    pub fn and(self, o: Self) -> Self {
        match (self, o) {
            (TriState::False, _) | (_, TriState::False) => TriState::False,
            (TriState::True, TriState::True) => TriState::True,
            _ => TriState::Unknown,
        }
    }

    pub fn or(self, o: Self) -> Self {
        match (self, o) {
            (TriState::True, _) | (_, TriState::True) => TriState::True,
            (TriState::False, TriState::False) => TriState::False,
            _ => TriState::Unknown,
        }
    }

    pub fn is_false(self) -> bool {
        self == TriState::False
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("unit mismatch on `{symbol}`: constraint uses `{expected}`, value has `{found}`")]
    UnitMismatch { symbol: String, expected: String, found: String },
}

/// A known numeric value with its unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NumValue {
    pub value: Number,
    pub unit: String,
}

/// Kleene evaluation with atoms resolved by `atom`.
pub fn eval_with<F>(f: &ConstraintFormula, atom: &mut F) -> Result<TriState, EvalError>
where
    F: FnMut(&AtomicConstraint) -> Result<TriState, EvalError>,
{
    Ok(match f {
        ConstraintFormula::Const(b) => TriState::from_bool(*b),
        ConstraintFormula::Opaque { .. } => TriState::Unknown,
        ConstraintFormula::Atom(a) => atom(a)?,
        ConstraintFormula::Not(x) => eval_with(x, atom)?.not(),
        ConstraintFormula::And(xs) => {
            let mut acc = TriState::True;
            for x in xs {
                acc = acc.and(eval_with(x, atom)?);
            }
            acc
        }
        ConstraintFormula::Or(xs) => {
            let mut acc = TriState::False;
            for x in xs {
                acc = acc.or(eval_with(x, atom)?);
            }
            acc
        }
        ConstraintFormula::CountAtLeast(k, xs) => {
            let (mut t, mut fl) = (0usize, 0usize);
            for x in xs {
                match eval_with(x, atom)? {
                    TriState::True => t += 1,
                    TriState::False => fl += 1,
                    TriState::Unknown => {}
                }
            }
            let k = *k as usize;
            if k > xs.len() {
                TriState::False
            } else if t >= k {
                TriState::True
            } else if fl > xs.len().saturating_sub(k) {
                TriState::False
            } else {
                TriState::Unknown
            }
        }
        ConstraintFormula::Implies(a, b) => eval_with(a, atom)?.not().or(eval_with(b, atom)?),
        ConstraintFormula::Iff(a, b) => {
            let (x, y) = (eval_with(a, atom)?, eval_with(b, atom)?);
            match (x, y) {
                (TriState::Unknown, _) | (_, TriState::Unknown) => TriState::Unknown,
                _ => TriState::from_bool(x == y),
            }
        }
    })
}

/// Evaluate one atom against a known value.
pub fn eval_atom(
    a: &AtomicConstraint,
    assignment: &HashMap<String, TriState>,
    numeric: &HashMap<String, NumValue>,
) -> Result<TriState, EvalError> {
    let sym = a.symbol();
    match &a.target {
        Target::Bool(b) => {
            let v = assignment.get(&sym).copied().unwrap_or(TriState::Unknown);
            let eq = match v {
                TriState::Unknown => return Ok(TriState::Unknown),
                TriState::True => *b,
                TriState::False => !*b,
            };
            Ok(match a.cmp {
                Comparison::Eq => TriState::from_bool(eq),
                Comparison::Ne => TriState::from_bool(!eq),
                _ => TriState::Unknown,
            })
        }
        Target::Number { value, unit } => match numeric.get(&sym) {
            None => Ok(TriState::Unknown),
            Some(v) => {
                check_unit(&sym, unit, &v.unit)?;
                Ok(TriState::from_bool(a.cmp.holds(&v.value, value)))
            }
        },
        Target::Interval { interval, unit } => match numeric.get(&sym) {
            None => Ok(TriState::Unknown),
            Some(v) => {
                check_unit(&sym, unit, &v.unit)?;
                let inside = interval.contains(&v.value);
                Ok(TriState::from_bool(if a.cmp == Comparison::Ne { !inside } else { inside }))
            }
        },
    }
}

fn check_unit(sym: &str, expected: &str, found: &str) -> Result<(), EvalError> {
    if !expected.is_empty() && !found.is_empty() && expected != found {
        return Err(EvalError::UnitMismatch { symbol: sym.to_string(), expected: expected.to_string(), found: found.to_string() });
    }
    Ok(())
}

/// Kleene evaluation against symbol assignments.
pub fn eval_formula(
    f: &ConstraintFormula,
    assignment: &HashMap<String, TriState>,
    numeric: &HashMap<String, NumValue>,
) -> Result<TriState, EvalError> {
    eval_with(f, &mut |a| eval_atom(a, assignment, numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ConstraintFormula as F;

    fn b(sym: &str) -> F {
        F::Atom(AtomicConstraint::boolean(Predicate::from_symbol(sym, "")))
    }

    fn env(pairs: &[(&str, TriState)]) -> HashMap<String, TriState> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn count_at_least_kleene() {
        use TriState::*;
        let f = F::CountAtLeast(2, vec![b("a"), b("b"), b("c")]);
        let e = env(&[("a", True), ("b", True)]);
        assert_eq!(eval_formula(&f, &e, &HashMap::new()).unwrap(), True);
        let g = F::CountAtLeast(3, vec![b("a"), b("b"), b("c")]);
        let e = env(&[("a", True), ("b", False)]);
        assert_eq!(eval_formula(&g, &e, &HashMap::new()).unwrap(), False);
        let e = env(&[("a", True)]);
        assert_eq!(eval_formula(&g, &e, &HashMap::new()).unwrap(), Unknown);
    }

    #[test]
    fn implication_and_iff() {
        use TriState::*;
        let f = F::implies(b("a"), b("b"));
        assert_eq!(eval_formula(&f, &env(&[("a", False)]), &HashMap::new()).unwrap(), True);
        assert_eq!(eval_formula(&f, &env(&[("a", True)]), &HashMap::new()).unwrap(), Unknown);
        let g = F::iff(b("a"), b("b"));
        assert_eq!(eval_formula(&g, &env(&[("a", True), ("b", True)]), &HashMap::new()).unwrap(), True);
        assert_eq!(eval_formula(&g, &env(&[("a", True), ("b", False)]), &HashMap::new()).unwrap(), False);
    }

    #[test]
    fn numeric_atoms_and_units() {
        let p = Predicate::from_symbol("patient_age_value_recorded_now_in_years", "");
        let f = F::Atom(AtomicConstraint::numeric(p, Comparison::Ge, Number::from_integer(18), "years"));
        let mut num = HashMap::new();
        num.insert("patient_age_value_recorded_now_in_years".to_string(), NumValue { value: Number::from_integer(58), unit: "years".into() });
        assert_eq!(eval_formula(&f, &HashMap::new(), &num).unwrap(), TriState::True);
        num.insert("patient_age_value_recorded_now_in_years".to_string(), NumValue { value: Number::from_integer(58), unit: "months".into() });
        assert!(matches!(eval_formula(&f, &HashMap::new(), &num), Err(EvalError::UnitMismatch { .. })));
        assert_eq!(eval_formula(&f, &HashMap::new(), &HashMap::new()).unwrap(), TriState::Unknown);
    }

    #[test]
    fn intervals() {
        let ge18 = NumInterval::from_comparison(Comparison::Ge, Number::from_integer(18)).unwrap();
        let lt18 = NumInterval::from_comparison(Comparison::Lt, Number::from_integer(18)).unwrap();
        assert!(!ge18.intersects(&lt18));
        assert!(ge18.intersects(&NumInterval::point(Number::from_integer(18))));
        assert!(!lt18.intersects(&NumInterval::point(Number::from_integer(18))));
        assert!(ge18.contains_interval(&NumInterval::point(Number::from_integer(40))));
    }

    #[test]
    fn canonical_classification() {
        assert!(Predicate::from_symbol("patient_is_pregnant_now", "").canonical().is_some());
        assert!(Predicate::from_symbol("patient_is_able_to_read_english_now", "").canonical().is_none());
    }
}
