//! Negation normal form and clause form by distribution.
//!
//! Kleene logic is a distributive De Morgan algebra, so both steps keep the
//! three-valued value of the formula. Only the clause cap and tautology
//! removal weaken it.

use std::collections::HashMap;

use crate::model::{AtomicConstraint, Comparison, ConstraintFormula, Target};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Lit {
    Atom { atom: AtomicConstraint, positive: bool },
    /// A subformula the gate cannot execute (counting, arithmetic).
    Opaque(String),
}

impl Lit {
    fn negated(&self) -> Option<Lit> {
        match self {
            Lit::Atom { atom, positive } => Some(Lit::Atom { atom: atom.clone(), positive: !positive }),
            Lit::Opaque(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Nnf {
    True,
    False,
    Lit(Lit),
    And(Vec<Nnf>),
    Or(Vec<Nnf>),
}

/// Atoms that imply a given atom, keyed by rendered symbol.
pub type Weakenings = HashMap<String, Vec<ConstraintFormula>>;

const MAX_WEAKENING_DEPTH: usize = 3;

/// Boolean atoms become `name = true` with a polarity.
fn literal(a: &AtomicConstraint, positive: bool) -> Lit {
    match (&a.target, a.cmp) {
        (Target::Bool(b), Comparison::Eq | Comparison::Ne) => {
            let pos = positive == (*b == (a.cmp == Comparison::Eq));
            Lit::Atom { atom: AtomicConstraint::boolean(a.predicate.clone()), positive: pos }
        }
        _ => Lit::Atom { atom: a.clone(), positive },
    }
}

pub fn to_nnf(f: &ConstraintFormula, positive: bool, weak: &Weakenings) -> Nnf {
    nnf(f, positive, weak, 0)
}

fn nnf(f: &ConstraintFormula, pos: bool, weak: &Weakenings, depth: usize) -> Nnf {
    use ConstraintFormula as F;
    match f {
        F::Const(b) => {
            if *b == pos {
                Nnf::True
            } else {
                Nnf::False
            }
        }
        F::Atom(a) => {
            let lit = literal(a, pos);
            let sym = a.symbol();
            match &lit {
                Lit::Atom { positive: true, .. } if depth < MAX_WEAKENING_DEPTH && weak.contains_key(&sym) => {
                    let mut alts = vec![Nnf::Lit(lit.clone())];
                    for w in &weak[&sym] {
                        alts.push(nnf(w, true, weak, depth + 1));
                    }
                    Nnf::Or(alts)
                }
                _ => Nnf::Lit(lit),
            }
        }
        F::Not(x) => nnf(x, !pos, weak, depth),
        F::And(xs) | F::Or(xs) => {
            let kids = xs.iter().map(|x| nnf(x, pos, weak, depth)).collect();
            if matches!(f, F::And(_)) == pos {
                Nnf::And(kids)
            } else {
                Nnf::Or(kids)
            }
        }
        F::Implies(a, b) => {
            if pos {
                Nnf::Or(vec![nnf(a, false, weak, depth), nnf(b, true, weak, depth)])
            } else {
                Nnf::And(vec![nnf(a, true, weak, depth), nnf(b, false, weak, depth)])
            }
        }
        F::Iff(a, b) => {
            let (ap, an, bp, bn) = (nnf(a, true, weak, depth), nnf(a, false, weak, depth), nnf(b, true, weak, depth), nnf(b, false, weak, depth));
            if pos {
                Nnf::And(vec![Nnf::Or(vec![an, bp]), Nnf::Or(vec![ap, bn])])
            } else {
                Nnf::And(vec![Nnf::Or(vec![ap, bp]), Nnf::Or(vec![an, bn])])
            }
        }
        F::CountAtLeast(k, xs) => Nnf::Lit(Lit::Opaque(format!("{}atleast{}/{}", if pos { "" } else { "not-" }, k, xs.len()))),
        F::Opaque { text, .. } => Nnf::Lit(Lit::Opaque(format!("{}{}", if pos { "" } else { "not-" }, text))),
    }
}

pub type Clause = Vec<Lit>;

/// Result of clause conversion.
#[derive(Clone, Debug, Default)]
pub struct ClauseSet {
    pub clauses: Vec<Clause>,
    /// Clauses lost to the cap.
    pub truncated: usize,
}

fn add_lit(c: &mut Clause, l: &Lit) -> bool {
    if c.contains(l) {
        return true;
    }
    if let Some(n) = l.negated() {
        if c.contains(&n) {
            return false;
        }
    }
    c.push(l.clone());
    true
}

/// Distribute to clause form, keeping at most `cap` clauses at every node.
/// Tautological clauses are removed.
pub fn to_cnf(f: &Nnf, cap: usize) -> ClauseSet {
    let mut truncated = 0;
    let clauses = cnf(f, cap, &mut truncated);
    ClauseSet { clauses, truncated }
}

fn cnf(f: &Nnf, cap: usize, truncated: &mut usize) -> Vec<Clause> {
    match f {
        Nnf::True => Vec::new(),
        Nnf::False => vec![Vec::new()],
        Nnf::Lit(l) => vec![vec![l.clone()]],
        Nnf::And(xs) => {
            let mut out: Vec<Clause> = Vec::new();
            for x in xs {
                for c in cnf(x, cap, truncated) {
                    if out.len() >= cap {
                        *truncated += 1;
                    } else if !out.contains(&c) {
                        out.push(c);
                    }
                }
            }
            out
        }
        Nnf::Or(xs) => {
            let mut acc: Vec<Clause> = vec![Vec::new()];
            for x in xs {
                let right = cnf(x, cap, truncated);
                let mut next = Vec::new();
                'outer: for a in &acc {
                    for b in &right {
                        let mut c = a.clone();
                        if b.iter().all(|l| add_lit(&mut c, l)) {
                            if next.len() >= cap {
                                *truncated += 1;
                                continue 'outer;
                            }
                            if !next.contains(&c) {
                                next.push(c);
                            }
                        }
                    }
                }
                acc = next;
            }
            acc
        }
    }
}
