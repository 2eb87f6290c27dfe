//! Projection of constraint programs and fact sets to executable gates.
//!
//! A trial gate is a set of clauses over canonical atoms that every
//! satisfying patient must pass. Clauses are only ever weakened or dropped,
//! never strengthened.

pub mod cnf;
pub mod policy;

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::naming::is_builtin_concept;
use crate::model::{AtomicConstraint, Comparison, ConstraintFormula, NumInterval, Predicate, Target, TriState, VariableName};
use crate::ontology::Ontology;
use crate::smt::{ConstraintClass, FactValue, PatientFactRecord, Side, Sort, TagKind, TrialProgram};
use crate::temporal::{criterion_window, TimeWindow};
use cnf::{to_cnf, to_nnf, Lit, Weakenings};
pub use policy::{CompiledPolicy, Missingness, MissingnessRule, SaliencePolicy, SpecificityAllow};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProjectionError {
    #[error("atom `{0}` references a concept or relation the ontology does not declare")]
    OntologyMiss(String),
    #[error("policy: {0}")]
    Policy(String),
    #[error("policy: `{ancestor}` is not an ancestor of `{concept}`")]
    NotAnAncestor { concept: String, ancestor: String },
    #[error("{0} atoms are too many to verify exhaustively")]
    TooLargeToVerify(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Trial,
    Patient,
}

impl EntityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Trial => "trial",
            EntityKind::Patient => "patient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "trial" => Some(EntityKind::Trial),
            "patient" => Some(EntityKind::Patient),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityRef {
    pub kind: EntityKind,
    pub id: String,
    /// Empty for patients.
    pub subcohort: String,
    pub side: Option<Side>,
}

impl EntityRef {
    pub fn trial(id: &str, subcohort: &str, side: Side) -> Self {
        EntityRef { kind: EntityKind::Trial, id: id.into(), subcohort: subcohort.into(), side: Some(side) }
    }

    pub fn patient(id: &str) -> Self {
        EntityRef { kind: EntityKind::Patient, id: id.into(), subcohort: String::new(), side: None }
    }
}

impl fmt::Display for EntityRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.side {
            Some(s) => write!(f, "{}:{}/{}/{}", self.kind.as_str(), self.id, self.subcohort, s.as_str()),
            None => write!(f, "{}:{}", self.kind.as_str(), self.id),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseRole {
    RetrievalRelevant,
    Deferred,
    /// All-negative exclusion clause, applied only to certain facts.
    Knockout,
}

impl ClauseRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ClauseRole::RetrievalRelevant => "relevant",
            ClauseRole::Deferred => "deferred",
            ClauseRole::Knockout => "knockout",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relevant" => Some(ClauseRole::RetrievalRelevant),
            "deferred" => Some(ClauseRole::Deferred),
            "knockout" => Some(ClauseRole::Knockout),
            _ => None,
        }
    }
}

/// A canonical atom in a gate. Trial atoms carry the window of their
/// timeframe; patient atoms carry both fact windows.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GateAtom {
    pub name: VariableName,
    pub cmp: Comparison,
    pub target: Target,
    pub positive: bool,
    pub window: TimeWindow,
    pub certain: Option<TimeWindow>,
}

impl GateAtom {
    pub fn constraint(&self) -> AtomicConstraint {
        AtomicConstraint { predicate: Predicate::from_symbol(&self.name.render(), ""), cmp: self.cmp, target: self.target.clone() }
    }

    pub fn is_numeric(&self) -> bool {
        !matches!(self.target, Target::Bool(_))
    }

    /// Total order used for canonical output.
    pub fn sort_key(&self) -> String {
        let t = match &self.target {
            Target::Bool(b) => format!("b:{b}"),
            Target::Number { value, unit } => format!("n:{}:{unit}", crate::temporal::format_ratio(value)),
            Target::Interval { interval, unit } => format!(
                "i:{:?}:{:?}:{}:{}:{unit}",
                interval.lower.map(|x| crate::temporal::format_ratio(&x)),
                interval.upper.map(|x| crate::temporal::format_ratio(&x)),
                interval.lower_inclusive,
                interval.upper_inclusive
            ),
        };
        format!("{}|{}|{}|{}|{}|{:?}", self.name, self.cmp.as_str(), t, !self.positive, self.window, self.certain)
    }
}

impl fmt::Display for GateAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.positive {
            f.write_str("NOT ")?;
        }
        write!(f, "{} {}", self.constraint(), self.window)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateClause {
    pub literals: Vec<GateAtom>,
    pub role: ClauseRole,
    /// Tag of the assertion the clause came from.
    pub origin: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCNF {
    pub owner: EntityRef,
    pub clauses: Vec<GateClause>,
}

impl GateCNF {
    pub fn new(owner: EntityRef) -> Self {
        GateCNF { owner, clauses: Vec::new() }
    }

    pub fn with_role(&self, role: ClauseRole) -> impl Iterator<Item = &GateClause> {
        self.clauses.iter().filter(move |c| c.role == role)
    }

    /// Sort literals and clauses and remove duplicates.
    pub fn canonicalize(&mut self) {
        for c in &mut self.clauses {
            c.literals.sort_by_cached_key(GateAtom::sort_key);
            c.literals.dedup();
        }
        self.clauses.sort_by_cached_key(|c| (c.role, c.origin.clone(), c.literals.iter().map(GateAtom::sort_key).collect::<Vec<_>>()));
        self.clauses.dedup();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NonCanonical,
    Opaque,
    UnknownConcept,
    NegativeLiteral,
    Missingness,
    ClauseCap,
    NotRequirement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dropped {
    pub origin: String,
    pub reason: DropReason,
    pub clauses: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Projection {
    pub gate: GateCNF,
    pub dropped: Vec<Dropped>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub clause_cap: usize,
    /// Fail on atoms whose concept the ontology lacks; otherwise drop their clauses.
    pub strict_concepts: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { clause_cap: 512, strict_concepts: true }
    }
}

/// Weakening disjuncts collected from auxiliary definitions and
/// qualifier-to-stem bridges.
pub fn weakenings(p: &TrialProgram) -> Weakenings {
    let mut w = Weakenings::new();
    let mut add = |target: &ConstraintFormula, by: &ConstraintFormula| {
        if let ConstraintFormula::Atom(a) = target {
            if a.target == Target::Bool(true) && a.cmp == Comparison::Eq && by != target {
                let e = w.entry(a.symbol()).or_default();
                if !e.contains(by) {
                    e.push(by.clone());
                }
            }
        }
    };
    let mut stack: Vec<&ConstraintFormula> = p.auxiliaries().map(|a| &a.formula).collect();
    while let Some(f) = stack.pop() {
        match f {
            ConstraintFormula::Implies(a, b) => add(b, a),
            ConstraintFormula::Iff(a, b) => {
                add(a, b);
                add(b, a);
            }
            ConstraintFormula::And(xs) => stack.extend(xs.iter()),
            _ => {}
        }
    }
    for d in &p.declarations {
        if d.sort != Sort::Bool {
            continue;
        }
        if let Some(n) = d.predicate.canonical() {
            if !n.qualifiers.is_empty() {
                let stem = ConstraintFormula::Atom(AtomicConstraint::boolean(Predicate::from_symbol(&n.stem().render(), "")));
                let q = ConstraintFormula::Atom(AtomicConstraint::boolean(d.predicate.clone()));
                add(&stem, &q);
            }
        }
    }
    w
}

fn concept_known(n: &VariableName, o: &Ontology) -> bool {
    o.relation_family(&n.relation).is_some() && (is_builtin_concept(n.relation.as_str(), &n.concept) || o.concept_by_token(&n.concept).is_some())
}

fn gate_atom(a: &AtomicConstraint, positive: bool) -> Option<GateAtom> {
    let name = a.predicate.canonical()?.clone();
    let window = criterion_window(name.timeframe.as_ref());
    Some(GateAtom { name, cmp: a.cmp, target: a.target.clone(), positive, window, certain: None })
}

struct Ctx<'a> {
    o: &'a Ontology,
    policy: &'a CompiledPolicy,
    cfg: &'a ProjectionConfig,
    side: Side,
}

impl Ctx<'_> {
    fn project(&self, f: &ConstraintFormula, tag: &str, class: Option<ConstraintClass>, w: &Weakenings, out: &mut Projection) -> Result<(), ProjectionError> {
        let set = to_cnf(&to_nnf(f, true, w), self.cfg.clause_cap);
        let mut drop = |reason: DropReason| match out.dropped.iter_mut().find(|d| d.origin == tag && d.reason == reason) {
            Some(d) => d.clauses += 1,
            None => out.dropped.push(Dropped { origin: tag.to_string(), reason, clauses: 1 }),
        };
        for _ in 0..set.truncated {
            drop(DropReason::ClauseCap);
        }
        'clauses: for clause in set.clauses {
            let mut lits = Vec::with_capacity(clause.len());
            for l in &clause {
                match l {
                    Lit::Opaque(_) => {
                        drop(DropReason::Opaque);
                        continue 'clauses;
                    }
                    Lit::Atom { atom, positive } => match gate_atom(atom, *positive) {
                        None => {
                            drop(DropReason::NonCanonical);
                            continue 'clauses;
                        }
                        Some(g) if !concept_known(&g.name, self.o) => {
                            if self.cfg.strict_concepts {
                                return Err(ProjectionError::OntologyMiss(g.name.render()));
                            }
                            drop(DropReason::UnknownConcept);
                            continue 'clauses;
                        }
                        Some(g) => lits.push(g),
                    },
                }
            }
            if class == Some(ConstraintClass::NotRequirementOrOneOffAction) {
                drop(DropReason::NotRequirement);
                continue;
            }
            let all_negative = !lits.is_empty() && lits.iter().all(|l| !l.positive && !l.is_numeric());
            if self.side == Side::Exclusion && all_negative {
                out.gate.clauses.push(GateClause { literals: lits, role: ClauseRole::Knockout, origin: tag.to_string() });
                continue;
            }
            let prescreen = class.is_none() || class == Some(ConstraintClass::PrescreenMustSuffice);
            if !prescreen {
                out.gate.clauses.push(GateClause { literals: lits, role: ClauseRole::Deferred, origin: tag.to_string() });
                continue;
            }
            if lits.iter().any(|l| !l.positive) {
                drop(DropReason::NegativeLiteral);
                out.gate.clauses.push(GateClause { literals: lits, role: ClauseRole::Deferred, origin: tag.to_string() });
                continue;
            }
            if lits.iter().any(|l| self.policy.missingness(&l.name.render(), class) != Missingness::RefutesIfMissing) {
                drop(DropReason::Missingness);
                out.gate.clauses.push(GateClause { literals: lits, role: ClauseRole::Deferred, origin: tag.to_string() });
                continue;
            }
            let mut expanded = lits.clone();
            for l in &lits {
                for anc in self.policy.allowed_ancestors(l.name.relation.as_str(), &l.name.concept) {
                    let mut alt = l.clone();
                    alt.name.concept = anc.clone();
                    expanded.push(alt);
                }
            }
            out.gate.clauses.push(GateClause { literals: expanded, role: ClauseRole::RetrievalRelevant, origin: tag.to_string() });
        }
        Ok(())
    }
}

/// Project a trial program to its gate.
pub fn project_trial(p: &TrialProgram, o: &Ontology, policy: &CompiledPolicy, cfg: &ProjectionConfig) -> Result<Projection, ProjectionError> {
    let owner = EntityRef::trial(&p.trial_id, &p.subcohort_id, p.side);
    let mut out = Projection { gate: GateCNF::new(owner), dropped: Vec::new() };
    let w = weakenings(p);
    let ctx = Ctx { o, policy, cfg, side: p.side };
    for a in &p.assertions {
        match &a.tag.kind {
            TagKind::Auxiliary { .. } => {}
            TagKind::Component { class, .. } => ctx.project(&a.formula, &a.tag.raw, Some(*class), &w, &mut out)?,
            TagKind::Target { .. } => ctx.project(&a.formula, &a.tag.raw, None, &w, &mut out)?,
        }
    }
    out.gate.canonicalize();
    Ok(out)
}

/// Patient facts as unit clauses.
pub fn project_patient(patient_id: &str, facts: &[PatientFactRecord]) -> GateCNF {
    let mut g = GateCNF::new(EntityRef::patient(patient_id));
    for f in facts {
        let (cmp, target) = match &f.value {
            FactValue::Bool(b) => (Comparison::Eq, Target::Bool(*b)),
            FactValue::Number(v) => {
                (Comparison::Eq, Target::Interval { interval: NumInterval::point(*v), unit: f.name.unit.clone().unwrap_or_default() })
            }
        };
        let atom = GateAtom { name: f.name.clone(), cmp, target, positive: true, window: f.possible.clone(), certain: Some(f.certain.clone()) };
        g.clauses.push(GateClause { literals: vec![atom], role: ClauseRole::RetrievalRelevant, origin: f.source.clone() });
    }
    g.canonicalize();
    g
}

/// The formula a trial gate must be implied by: every component and target.
pub fn trial_formula(p: &TrialProgram) -> ConstraintFormula {
    ConstraintFormula::And(p.assertions.iter().filter(|a| !matches!(a.tag.kind, TagKind::Auxiliary { .. })).map(|a| a.formula.clone()).collect())
}

fn atom_key(a: &AtomicConstraint) -> String {
    format!("{}|{:?}|{:?}", a.symbol(), a.cmp, a.target)
}

fn normalized(a: &AtomicConstraint) -> (AtomicConstraint, bool) {
    match (&a.target, a.cmp) {
        (Target::Bool(b), Comparison::Eq | Comparison::Ne) => (AtomicConstraint::boolean(a.predicate.clone()), *b == (a.cmp == Comparison::Eq)),
        _ => (a.clone(), true),
    }
}

/// Exhaustive check that every total assignment satisfying `tc` satisfies
/// every clause of `gate`. Opaque subformulas are free variables.
pub fn check_gate_entailment(tc: &ConstraintFormula, gate: &GateCNF) -> Result<bool, ProjectionError> {
    let mut vars: BTreeSet<String> = BTreeSet::new();
    let mut opaque = Vec::new();
    collect(tc, &mut vars, &mut opaque);
    for c in &gate.clauses {
        for l in &c.literals {
            vars.insert(atom_key(&normalized(&l.constraint()).0));
        }
    }
    let n = vars.len() + opaque.len();
    if n > 20 {
        return Err(ProjectionError::TooLargeToVerify(n));
    }
    let index: HashMap<&str, usize> = vars.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let nv = vars.len();
    for bits in 0u32..(1u32 << n) {
        let bit = |i: usize| bits >> i & 1 == 1;
        let mut op = 0usize;
        let sat = eval_opaque(tc, &mut |a| {
            let (na, pol) = normalized(a);
            let v = bit(index[atom_key(&na).as_str()]);
            TriState::from_bool(v == pol)
        }, &mut || {
            let v = bit(nv + op);
            op += 1;
            v
        });
        if sat != TriState::True {
            continue;
        }
        for c in &gate.clauses {
            let ok = c.literals.iter().any(|l| {
                let (na, pol) = normalized(&l.constraint());
                bit(index[atom_key(&na).as_str()]) == (pol == l.positive)
            });
            if !ok {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn collect(f: &ConstraintFormula, vars: &mut BTreeSet<String>, opaque: &mut Vec<()>) {
    use ConstraintFormula as F;
    match f {
        F::Const(_) => {}
        F::Atom(a) => {
            vars.insert(atom_key(&normalized(a).0));
        }
        F::Opaque { .. } => opaque.push(()),
        F::Not(x) => collect(x, vars, opaque),
        F::And(xs) | F::Or(xs) | F::CountAtLeast(_, xs) => xs.iter().for_each(|x| collect(x, vars, opaque)),
        F::Implies(a, b) | F::Iff(a, b) => {
            collect(a, vars, opaque);
            collect(b, vars, opaque);
        }
    }
}

/// Two-valued evaluation where each opaque node draws the next free bit.
fn eval_opaque(f: &ConstraintFormula, atom: &mut dyn FnMut(&AtomicConstraint) -> TriState, free: &mut dyn FnMut() -> bool) -> TriState {
    use ConstraintFormula as F;
    match f {
        F::Opaque { .. } => TriState::from_bool(free()),
        F::Atom(a) => atom(a),
        F::Const(b) => TriState::from_bool(*b),
        F::Not(x) => eval_opaque(x, atom, free).not(),
        F::And(xs) => xs.iter().fold(TriState::True, |acc, x| acc.and(eval_opaque(x, atom, free))),
        F::Or(xs) => xs.iter().fold(TriState::False, |acc, x| acc.or(eval_opaque(x, atom, free))),
        F::Implies(a, b) => eval_opaque(a, atom, free).not().or(eval_opaque(b, atom, free)),
        F::Iff(a, b) => TriState::from_bool(eval_opaque(a, atom, free) == eval_opaque(b, atom, free)),
        F::CountAtLeast(k, xs) => {
            let t = xs.iter().filter(|x| eval_opaque(x, atom, free) == TriState::True).count();
            TriState::from_bool(t >= *k as usize)
        }
    }
}
