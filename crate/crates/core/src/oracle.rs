//! Synthetic worlds and a brute-force reference matcher.
//!
//! The oracle evaluates original trial formulas in Kleene logic against
//! closed patient facts, without gates or SQL. The engine must return every
//! pair the oracle matches.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::closure::{run_closure, ClosureConfig, RuleSet};
use crate::model::{eval_with, AtomicConstraint, Comparison, Number, Predicate, Target, TriState, VariableName};
use crate::ontology::{default_token, vocab, CausalEdge, Concept, ConceptId, Ontology, RelationFamily, RelationId};
use crate::projection::policy::{Missingness, MissingnessRule, SaliencePolicy, SpecificityAllow};
use crate::projection::{project_patient, project_trial, ClauseRole, GateAtom, GateCNF, GateClause, ProjectionConfig, ProjectionError};
use crate::retrieval::{atoms_compatible, certainly_holds, retrieve, ObjectiveConfig, RetrievalError, RetrievalOptions};
use crate::smt::{facts_to_json, parse_trial_program, serialize_trial_program, ConstraintClass, FactValue, PatientFactRecord, Side, SmtError, TagKind, TrialProgram};
use crate::store::{Store, StoreError};
use crate::temporal::{Hours, TimeUnit, TimeWindow, Timeframe};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("world has {atoms} atom occurrences, over the budget of {budget}")]
    TooLarge { atoms: usize, budget: usize },
    #[error("generated program does not parse: {0}")]
    Generated(#[from] SmtError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct WorldParams {
    pub n_concepts: usize,
    pub n_trials: usize,
    pub n_patients: usize,
    /// Maximum is-a depth, at most 4.
    pub depth: usize,
    /// Share of concepts whose atoms get a non-refuting missingness tag.
    pub missingness_rate: f64,
    pub noncanonical_rate: f64,
    pub deferred_rate: f64,
    /// Only canonical, positive, prescreen, non-counting formulas.
    pub lossless: bool,
    /// Share of trials that also get an exclusion program.
    pub exclusion_rate: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            n_concepts: 100,
            n_trials: 200,
            n_patients: 20,
            depth: 4,
            missingness_rate: 0.1,
            noncanonical_rate: 0.2,
            deferred_rate: 0.3,
            lossless: false,
            exclusion_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub ontology: Ontology,
    pub trials: Vec<TrialProgram>,
    pub patients: Vec<(String, Vec<PatientFactRecord>)>,
    pub policy: SaliencePolicy,
    pub rules: RuleSet,
}

const ELIGIBILITY: &[&str] = &[vocab::HAS_FINDING_OF, vocab::HAS_DIAGNOSIS_OF, vocab::HAS_SYMPTOMS_OF, vocab::HAS_CLINICAL_SIGNS_OF, vocab::HAS_SUSPICION_OF, vocab::IS_TAKING];
const INTENTS: &[&str] = &[vocab::TREATS, vocab::TREATS, vocab::PREVENTS, vocab::IMPROVES_EFFECTIVENESS, vocab::MITIGATES_HARMS, vocab::NOT_CLINICALLY_RELEVANT];
const QUALIFIERS: &[&str] = &["severe", "very_severe"];

struct Gen {
    rng: ChaCha8Rng,
    p: WorldParams,
    tokens: Vec<String>,
    /// Concepts mentioned by patients and their ancestors.
    hot: Vec<String>,
}

fn hours(n: i128) -> Hours {
    Hours::from_integer(n)
}

fn timeframes() -> Vec<Timeframe> {
    vec![
        Timeframe::Now,
        Timeframe::InTheHistory,
        Timeframe::InTheFuture,
        Timeframe::InThePast(1, TimeUnit::Years),
        Timeframe::InThePast(6, TimeUnit::Months),
        Timeframe::InThePast(2, TimeUnit::Weeks),
        Timeframe::ForADurationOf(3, TimeUnit::Days),
    ]
}

impl Gen {
    fn concept(&mut self) -> String {
        if !self.hot.is_empty() && self.rng.gen_bool(0.7) {
            self.hot.choose(&mut self.rng).cloned().expect("non-empty")
        } else {
            self.tokens.choose(&mut self.rng).cloned().expect("concepts exist")
        }
    }

    fn window(&mut self) -> (TimeWindow, TimeWindow) {
        let spans = [0i128, 24, 168, 730, 8760, 87600];
        let lo = -*spans.choose(&mut self.rng).expect("spans");
        let hi = *[0i128, 0, 24, 720].choose(&mut self.rng).expect("ends");
        let possible = TimeWindow::new(hours(lo), hours(hi), true, true).expect("ordered");
        let c_lo = if lo == 0 { 0 } else { self.rng.gen_range(lo..=0) };
        let c_hi = self.rng.gen_range(c_lo.max(0).min(hi)..=hi).max(c_lo);
        let certain = TimeWindow::new(hours(c_lo), hours(c_hi), true, true).expect("ordered");
        (certain, possible)
    }

    fn fact(&mut self, name: VariableName, value: FactValue) -> PatientFactRecord {
        let (certain, possible) = self.window();
        PatientFactRecord { name, value, certain, possible, source: "generated".into() }
    }

    fn patient(&mut self) -> Vec<PatientFactRecord> {
        let mut facts = Vec::new();
        for _ in 0..self.rng.gen_range(2..9) {
            let rel = *ELIGIBILITY.choose(&mut self.rng).expect("relations");
            let mut name = VariableName::new(rel, &self.tokens.choose(&mut self.rng).cloned().expect("concepts"));
            if self.rng.gen_bool(0.1) {
                name = name.with_qualifier(QUALIFIERS.choose(&mut self.rng).expect("q"));
            }
            let v = self.rng.gen_bool(0.9);
            facts.push(self.fact(name, FactValue::Bool(v)));
        }
        if self.rng.gen_bool(0.8) {
            let age = self.rng.gen_range(1..95);
            let name = VariableName::new(vocab::AGE_VALUE_RECORDED, "age").with_unit("years");
            facts.push(self.fact(name, FactValue::Number(Number::from_integer(age))));
        }
        for _ in 0..self.rng.gen_range(1..4) {
            let rel = *vocab::PATIENT_FACT.choose(&mut self.rng).expect("labels");
            let c = if facts.is_empty() || self.rng.gen_bool(0.3) {
                self.tokens.choose(&mut self.rng).cloned().expect("concepts")
            } else {
                facts[self.rng.gen_range(0..facts.len())].name.concept.clone()
            };
            let c = if c == "age" { self.tokens[0].clone() } else { c };
            facts.push(self.fact(VariableName::new(rel, &c), FactValue::Bool(true)));
        }
        facts
    }

    fn eligibility_atom(&mut self) -> (String, bool) {
        let rel = *ELIGIBILITY.choose(&mut self.rng).expect("relations");
        let tf = *timeframes().choose(&mut self.rng).expect("timeframes");
        let mut name = VariableName::new(rel, &self.concept()).with_timeframe(Some(tf));
        if self.rng.gen_bool(0.05) {
            name = name.with_qualifier("severe");
        }
        (name.render(), false)
    }

    /// (symbol, is_numeric, numeric constraint text)
    fn atom(&mut self, k: &mut usize, noncanonical: &mut Vec<String>) -> String {
        let roll: f64 = self.rng.gen();
        if !self.p.lossless && roll < self.p.noncanonical_rate {
            *k += 1;
            let n = format!("patient_meets_note_{}_now", *k);
            noncanonical.push(n.clone());
            return n;
        }
        let roll: f64 = self.rng.gen();
        if roll < 0.15 {
            let bound = self.rng.gen_range(10..80);
            let op = *[">=", "<=", ">", "<"].choose(&mut self.rng).expect("ops");
            return format!("({op} patient_age_value_recorded_now_in_years {bound})");
        }
        if roll < 0.25 {
            let rel = *INTENTS.choose(&mut self.rng).expect("intents");
            return VariableName::new(rel, &self.concept()).render();
        }
        self.eligibility_atom().0
    }

    fn formula(&mut self, k: &mut usize, nc: &mut Vec<String>, positive_only: bool) -> String {
        let shape = self.rng.gen_range(0..100);
        let mut a = |g: &mut Gen| g.atom(k, nc);
        match shape {
            0..=39 => a(self),
            40..=64 => {
                let n = self.rng.gen_range(2..4);
                let xs: Vec<String> = (0..n).map(|_| a(self)).collect();
                format!("(or {})", xs.join(" "))
            }
            65..=74 => format!("(and {} {})", a(self), a(self)),
            75..=79 => format!("(or (and {} {}) {})", a(self), a(self), a(self)),
            _ if positive_only => a(self),
            80..=87 => format!("(not {})", a(self)),
            88..=91 => format!("(=> {} {})", a(self), a(self)),
            92..=95 => format!("(or {} (not {}))", a(self), a(self)),
            _ => format!("(>= (+ (ite {} 1 0) (ite {} 1 0)) 1)", a(self), a(self)),
        }
    }

    fn class_label(&mut self) -> &'static str {
        if self.p.lossless || !self.rng.gen_bool(self.p.deferred_rate) {
            return "PRESCREEN_NOTES_MUST_COMPLETELY_SUFFICE";
        }
        ["OTHER_REQUIREMENTS", "CAN_ALWAYS_GO_FROM_SATISFIED_TO_NOTSATISFIED", "NOT_REQUIREMNET_OR_ALWAYS_SATISFIABLE_WITH_ACTION"]
            .choose(&mut self.rng)
            .expect("labels")
    }

    fn program(&mut self, trial: &str, sub: &str, side: Side) -> Result<TrialProgram, OracleError> {
        let mut k = 0;
        let mut nc = Vec::new();
        let mut asserts = Vec::new();
        let n_components = self.rng.gen_range(1..5);
        for i in 0..n_components {
            let f = match side {
                Side::Inclusion => self.formula(&mut k, &mut nc, self.p.lossless),
                Side::Exclusion => {
                    let a = self.atom(&mut k, &mut nc);
                    if self.rng.gen_bool(0.3) {
                        let b = self.atom(&mut k, &mut nc);
                        format!("(not (and {a} {b}))")
                    } else {
                        format!("(not {a})")
                    }
                }
            };
            let label = self.class_label();
            asserts.push(format!("(assert (! {f} :named REQ{i}_COMPONENT0_{label}))"));
        }
        if side == Side::Inclusion {
            if !self.p.lossless && self.rng.gen_bool(0.3) {
                let (q, _) = self.eligibility_atom();
                let p = self.atom(&mut k, &mut nc);
                asserts.push(format!("(assert (! (=> {q} {p}) :named REQ0_AUXILIARY0))"));
            }
            let n = self.rng.gen_range(1..3);
            let xs: Vec<String> = (0..n).map(|_| VariableName::new(INTENTS[self.rng.gen_range(0..INTENTS.len())], &self.concept()).render()).collect();
            let t = if n == 1 { xs[0].clone() } else { format!("(or {})", xs.join(" ")) };
            asserts.push(format!("(assert (! {t} :named TARGET0))"));
        }
        let mut text = format!(";; satir-program trial={trial} subcohort={sub} side={}\n", side.as_str());
        let mut decls = BTreeSet::new();
        for a in &asserts {
            for tok in a.split(|c: char| c.is_whitespace() || c == '(' || c == ')') {
                if tok.starts_with("patient_") || tok.starts_with("trial_") {
                    decls.insert(tok.to_string());
                }
            }
        }
        for d in &decls {
            let sort = if d.contains("_value_recorded") { "Real" } else { "Bool" };
            if nc.contains(d) {
                let _ = writeln!(
                    text,
                    "(declare-const {d} {sort}) ;; \"free-text requirement\" {{\"when_to_set_to_true\": \"documented\", \"when_to_set_to_false\": \"ruled out\", \"when_to_set_to_null\": \"not mentioned\", \"meaning\": \"generated\"}}"
                );
            } else {
                let _ = writeln!(text, "(declare-const {d} {sort})");
            }
        }
        for a in asserts {
            text.push_str(&a);
            text.push('\n');
        }
        let first = parse_trial_program(&text)?;
        Ok(parse_trial_program(&serialize_trial_program(&first))?)
    }
}

fn build_ontology(rng: &mut ChaCha8Rng, n: usize, depth: usize) -> (Ontology, Vec<String>) {
    let mut o = Ontology::new();
    let mut level = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);
    for i in 0..n.max(1) {
        let id = format!("C{i}");
        tokens.push(default_token(&id));
        o.add_concept(Concept { id: ConceptId::new(id), token: default_token(&format!("C{i}")), label: None }).expect("fresh concept");
        let mut lv = 0;
        if i > 0 && depth > 0 && rng.gen_bool(0.8) {
            let candidates: Vec<usize> = (0..i).filter(|j| level[*j] < depth).collect();
            if let Some(&p) = candidates.choose(rng) {
                o.add_isa(&ConceptId::new(format!("C{i}")), &ConceptId::new(format!("C{p}"))).expect("known");
                lv = level[p] + 1;
                if rng.gen_bool(0.1) {
                    if let Some(&q) = candidates.choose(rng) {
                        if level[q] < depth {
                            o.add_isa(&ConceptId::new(format!("C{i}")), &ConceptId::new(format!("C{q}"))).expect("known");
                            lv = lv.max(level[q] + 1);
                        }
                    }
                }
            }
        }
        level.push(lv);
    }
    o.add_relsub(&RelationId::new(vocab::HAS_CLINICAL_SIGNS_OF), &RelationId::new(vocab::HAS_FINDING_OF)).expect("builtin");
    o.add_qualsub("very_severe", "severe");
    for e in 0..(n / 10) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        o.add_causal(CausalEdge {
            id: format!("g{e}"),
            src_rel: RelationId::new(vocab::HAS_DIAGNOSIS_OF),
            src_concept: ConceptId::new(format!("C{a}")),
            dst_rel: RelationId::new(vocab::HAS_FINDING_OF),
            dst_concept: ConceptId::new(format!("C{b}")),
            status: None,
        })
        .expect("known");
    }
    (o, tokens)
}

/// Deterministic world for `seed`.
pub fn generate_world(seed: u64, params: &WorldParams) -> Result<SyntheticWorld, OracleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = params.depth.min(4);
    let (ontology, tokens) = build_ontology(&mut rng, params.n_concepts, depth);
    let mut g = Gen { rng, p: params.clone(), tokens, hot: Vec::new() };
    let mut patients = Vec::new();
    let mut hot = BTreeSet::new();
    for i in 0..params.n_patients {
        let facts = g.patient();
        for f in &facts {
            if let Some(c) = ontology.concept_by_token(&f.name.concept) {
                hot.insert(f.name.concept.clone());
                for (a, _) in ontology.ancestors(c, 8) {
                    if let Some(t) = ontology.token_of(&a) {
                        hot.insert(t.to_string());
                    }
                }
            }
        }
        patients.push((format!("P{i:03}"), facts));
    }
    g.hot = hot.into_iter().collect();
    let mut trials = Vec::new();
    for i in 0..params.n_trials {
        let id = format!("NCT9{seed:04}{i:04}");
        let sub = if g.rng.gen_bool(0.1) { "arm_b" } else { "main" };
        trials.push(g.program(&id, sub, Side::Inclusion)?);
        if !params.lossless && g.rng.gen_bool(params.exclusion_rate) {
            trials.push(g.program(&id, sub, Side::Exclusion)?);
        }
    }
    let mut policy = SaliencePolicy::default();
    if !params.lossless {
        for t in &g.tokens {
            if g.rng.gen_bool(params.missingness_rate) {
                let tag = if g.rng.gen_bool(0.5) { Missingness::InconclusiveIfMissing } else { Missingness::SupportsIfMissing };
                policy.missingness.push(MissingnessRule { pattern: format!("patient_*_of_{t}_*"), tag });
            }
        }
        for i in 0..params.n_concepts {
            let c = ConceptId::new(format!("C{i}"));
            let parents = ontology.parents(&c).to_vec();
            if !parents.is_empty() && g.rng.gen_bool(0.05) {
                policy.specificity_allow.push(SpecificityAllow { relation: RelationId::new(vocab::TREATS), concept: c, ancestors: parents });
            }
        }
    }
    Ok(SyntheticWorld { seed, ontology, trials, patients, policy, rules: RuleSet::default_rules() })
}

impl SyntheticWorld {
    pub fn atom_count(&self) -> usize {
        self.trials.iter().flat_map(|p| &p.assertions).map(|a| a.formula.atoms().len()).sum()
    }

    /// Write the world as an ingestible corpus: `trials/*.smt2`,
    /// `patients/*.json`, `ontology.jsonl` and `policy.json`.
    pub fn write(&self, dir: &Path) -> Result<(), OracleError> {
        std::fs::create_dir_all(dir.join("trials"))?;
        std::fs::create_dir_all(dir.join("patients"))?;
        std::fs::write(dir.join("ontology.jsonl"), self.ontology.to_jsonl())?;
        std::fs::write(dir.join("policy.json"), serde_json::to_string_pretty(&self.policy).expect("policy serializes"))?;
        for p in &self.trials {
            let name = format!("{}_{}_{}.smt2", p.trial_id, p.subcohort_id, p.side.as_str());
            std::fs::write(dir.join("trials").join(name), serialize_trial_program(p))?;
        }
        for (id, facts) in &self.patients {
            std::fs::write(dir.join("patients").join(format!("{id}.json")), serde_json::to_string_pretty(&facts_to_json(facts)).expect("json"))?;
        }
        Ok(())
    }
}

pub type PairKey = (String, String, String);

/// One patient's closed facts, bucketed by concept token.
struct Evidence<'a> {
    by_concept: HashMap<&'a str, Vec<&'a PatientFactRecord>>,
}

impl<'a> Evidence<'a> {
    fn new(facts: &'a [PatientFactRecord]) -> Self {
        let mut by_concept: HashMap<&str, Vec<&PatientFactRecord>> = HashMap::new();
        for f in facts {
            by_concept.entry(f.name.concept.as_str()).or_default().push(f);
        }
        Evidence { by_concept }
    }
}

struct Judge<'a> {
    o: &'a Ontology,
    obj: &'a ObjectiveConfig,
    policy: &'a crate::projection::policy::CompiledPolicy,
}

impl Judge<'_> {
    /// The fact speaks about the trial variable: same concept, admissible
    /// relation, matching outcome, and every trial qualifier covered.
    fn about(&self, t: &VariableName, f: &PatientFactRecord) -> bool {
        let rel_ok = match self.o.relation_family(&t.relation) {
            Some(RelationFamily::TrialIntent) => self.obj.intent_map.contains(&(t.relation.0.clone(), f.name.relation.0.clone())),
            _ => t.relation == f.name.relation || self.o.relation_subsumes(&t.relation, &f.name.relation),
        };
        rel_ok
            && t.concept == f.name.concept
            && (t.outcome.is_none() || t.outcome == f.name.outcome)
            && t.qualifiers.iter().all(|q| f.name.qualifiers.iter().any(|fq| self.o.qualifier_subsumes(q, fq)))
    }

    fn value_fits(a: &AtomicConstraint, f: &PatientFactRecord) -> bool {
        match (&a.target, &f.value) {
            (Target::Bool(b), FactValue::Bool(v)) => match a.cmp {
                Comparison::Eq => b == v,
                Comparison::Ne => b != v,
                _ => false,
            },
            (Target::Number { value, unit }, FactValue::Number(v)) => f.name.unit.as_deref() == Some(unit.as_str()) && a.cmp.holds(v, value),
            (Target::Interval { interval, unit }, FactValue::Number(v)) => {
                f.name.unit.as_deref() == Some(unit.as_str()) && (interval.contains(v) == (a.cmp != Comparison::Ne))
            }
            _ => false,
        }
    }

    /// Kleene value from possible evidence: true when some fact could make it
    /// hold, otherwise read through the missingness policy.
    fn possible(&self, a: &AtomicConstraint, class: Option<ConstraintClass>, ev: &Evidence<'_>) -> TriState {
        let Some(name) = a.predicate.canonical() else { return TriState::Unknown };
        let window = crate::temporal::criterion_window(name.timeframe.as_ref());
        let facts = ev.by_concept.get(name.concept.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let about: Vec<&&PatientFactRecord> = facts.iter().filter(|f| self.about(name, f)).collect();
        let normalized = match (&a.target, a.cmp) {
            (Target::Bool(b), Comparison::Ne) => AtomicConstraint { predicate: a.predicate.clone(), cmp: Comparison::Eq, target: Target::Bool(!b) },
            _ => a.clone(),
        };
        if about.iter().any(|f| Self::value_fits(&normalized, f) && window.overlaps(&f.possible)) {
            return TriState::True;
        }
        if matches!(a.target, Target::Bool(_)) {
            let opposite = AtomicConstraint { target: match normalized.target {
                Target::Bool(b) => Target::Bool(!b),
                ref t => t.clone(),
            }, ..normalized.clone() };
            if about.iter().any(|f| Self::value_fits(&opposite, f) && window.overlaps(&f.possible)) {
                return TriState::False;
            }
        }
        match self.policy.missingness(&name.render(), class) {
            Missingness::RefutesIfMissing => TriState::False,
            _ => TriState::Unknown,
        }
    }

    /// True only when a fact certainly holds inside the criterion window.
    fn certain(&self, a: &AtomicConstraint, ev: &Evidence<'_>) -> TriState {
        let Some(name) = a.predicate.canonical() else { return TriState::Unknown };
        let Target::Bool(b) = a.target else { return TriState::Unknown };
        let want = b == (a.cmp == Comparison::Eq);
        let window = crate::temporal::criterion_window(name.timeframe.as_ref());
        let facts = ev.by_concept.get(name.concept.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let holds = facts.iter().any(|f| f.value == FactValue::Bool(true) && self.about(name, f) && window.contains(&f.certain));
        match (holds, want) {
            (true, true) => TriState::True,
            (true, false) => TriState::False,
            _ => TriState::Unknown,
        }
    }
}

fn never_fails<T>(r: Result<T, crate::model::EvalError>) -> T {
    r.unwrap_or_else(|_| unreachable!("atom callbacks are infallible"))
}

#[derive(Clone, Debug)]
pub struct OracleConfig {
    /// Refuse worlds with more atom occurrences than this.
    pub atom_budget: usize,
    pub closure: ClosureConfig,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { atom_budget: 200_000, closure: ClosureConfig::default() }
    }
}

/// Closed fact sets per patient.
pub fn closed_patients(world: &SyntheticWorld, cfg: &ClosureConfig) -> Vec<(String, Vec<PatientFactRecord>)> {
    world.patients.iter().map(|(id, facts)| (id.clone(), run_closure(facts, &world.ontology, &world.rules, cfg).records().cloned().collect())).collect()
}

/// Reference match set: for every (trial, subcohort), prescreen components
/// and targets are not false under possible evidence, and, with knockouts,
/// no exclusion requirement is false under certain evidence.
pub fn oracle_match(world: &SyntheticWorld, obj: &ObjectiveConfig, cfg: &OracleConfig) -> Result<BTreeSet<PairKey>, OracleError> {
    let atoms = world.atom_count();
    if atoms > cfg.atom_budget {
        return Err(OracleError::TooLarge { atoms, budget: cfg.atom_budget });
    }
    let policy = world.policy.compile(&world.ontology)?;
    let judge = Judge { o: &world.ontology, obj, policy: &policy };
    let mut groups: BTreeMap<(String, String), Vec<&TrialProgram>> = BTreeMap::new();
    for p in &world.trials {
        groups.entry((p.trial_id.clone(), p.subcohort_id.clone())).or_default().push(p);
    }
    let mut out = BTreeSet::new();
    for (pid, facts) in closed_patients(world, &cfg.closure) {
        let ev = Evidence::new(&facts);
        'group: for ((tid, sub), programs) in &groups {
            for p in programs {
                for a in &p.assertions {
                    let class = match &a.tag.kind {
                        TagKind::Component { class, .. } => Some(*class),
                        TagKind::Target { .. } => None,
                        TagKind::Auxiliary { .. } => continue,
                    };
                    if matches!(class, None | Some(ConstraintClass::PrescreenMustSuffice)) {
                        let v = never_fails(eval_with(&a.formula, &mut |x| Ok(judge.possible(x, class, &ev))));
                        if v == TriState::False {
                            continue 'group;
                        }
                    }
                    if obj.enforce_knockouts && p.side == Side::Exclusion && class.is_some() && class != Some(ConstraintClass::NotRequirementOrOneOffAction) {
                        let v = never_fails(eval_with(&a.formula, &mut |x| Ok(judge.certain(x, &ev))));
                        if v == TriState::False {
                            continue 'group;
                        }
                    }
                }
            }
            out.insert((tid.clone(), sub.clone(), pid.clone()));
        }
    }
    Ok(out)
}

/// Gates for a world, as the real pipeline builds them.
#[derive(Clone, Debug)]
pub struct WorldGates {
    pub trials: Vec<GateCNF>,
    pub patients: Vec<GateCNF>,
}

impl WorldGates {
    pub fn all(&self) -> Vec<GateCNF> {
        self.trials.iter().chain(&self.patients).cloned().collect()
    }
}

pub fn build_gates(world: &SyntheticWorld, closure: &ClosureConfig) -> Result<WorldGates, OracleError> {
    let policy = world.policy.compile(&world.ontology)?;
    let cfg = ProjectionConfig::default();
    let trials = world.trials.iter().map(|p| project_trial(p, &world.ontology, &policy, &cfg).map(|x| x.gate)).collect::<Result<Vec<_>, _>>()?;
    let patients = closed_patients(world, closure).iter().map(|(id, facts)| project_patient(id, facts)).collect();
    Ok(WorldGates { trials, patients })
}

/// Engine result set through an in-memory store and the SQL plan.
pub fn engine_match(world: &SyntheticWorld, gates: &WorldGates, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> Result<BTreeSet<PairKey>, OracleError> {
    let store = Store::build_in_memory(&gates.all(), &world.ontology)?;
    let o = Arc::new(world.ontology.clone());
    Ok(retrieve(&store, &o, obj, opts, None)?.into_iter().map(|m| m.key()).collect())
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct RecallReport {
    pub seed: u64,
    pub objective: String,
    pub missed: Vec<PairKey>,
    pub extra_count: usize,
    pub oracle_count: usize,
    pub engine_count: usize,
    pub recall: f64,
}

pub fn compare(seed: u64, objective: &str, oracle: &BTreeSet<PairKey>, engine: &BTreeSet<PairKey>) -> RecallReport {
    let missed: Vec<PairKey> = oracle.difference(engine).cloned().collect();
    let hit = oracle.len() - missed.len();
    RecallReport {
        seed,
        objective: objective.into(),
        extra_count: engine.difference(oracle).count(),
        oracle_count: oracle.len(),
        engine_count: engine.len(),
        recall: if oracle.is_empty() { 1.0 } else { hit as f64 / oracle.len() as f64 },
        missed,
    }
}

pub fn verify_full_recall(world: &SyntheticWorld, obj: &ObjectiveConfig) -> Result<RecallReport, OracleError> {
    let cfg = OracleConfig::default();
    let oracle = oracle_match(world, obj, &cfg)?;
    let gates = build_gates(world, &cfg.closure)?;
    let engine = engine_match(world, &gates, obj, &RetrievalOptions::default())?;
    Ok(compare(world.seed, &obj.name, &oracle, &engine))
}

/// Per-pair nested loops over gates with no index, for timing comparisons.
pub fn naive_match(gates: &WorldGates, o: &Ontology, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> Result<BTreeSet<PairKey>, OracleError> {
    let mut groups: BTreeMap<(String, String), Vec<&GateCNF>> = BTreeMap::new();
    for t in &gates.trials {
        groups.entry((t.owner.id.clone(), t.owner.subcohort.clone())).or_default().push(t);
    }
    let mut out = BTreeSet::new();
    for p in &gates.patients {
        let patoms: Vec<&GateAtom> = p.clauses.iter().flat_map(|c| &c.literals).collect();
        'group: for ((tid, sub), gs) in &groups {
            for g in gs {
                for c in &g.clauses {
                    match c.role {
                        ClauseRole::RetrievalRelevant => {
                            let mut ok = false;
                            for t in &c.literals {
                                for pa in &patoms {
                                    if atoms_compatible(t, pa, o, obj, opts)? {
                                        ok = true;
                                    }
                                }
                            }
                            if !ok {
                                continue 'group;
                            }
                        }
                        ClauseRole::Knockout if obj.enforce_knockouts => {
                            let mut all = true;
                            for t in &c.literals {
                                let mut hit = false;
                                for pa in &patoms {
                                    hit |= certainly_holds(t, pa, o, obj, opts)?;
                                }
                                all &= hit;
                            }
                            if all {
                                continue 'group;
                            }
                        }
                        _ => {}
                    }
                }
            }
            out.insert((tid.clone(), sub.clone(), p.owner.id.clone()));
        }
    }
    Ok(out)
}

/// Add a relevant clause no patient can support to one trial gate that has
/// at least one oracle match; returns the mutated trial id.
pub fn strengthen_gate(gates: &mut WorldGates, oracle: &BTreeSet<PairKey>, rng: &mut impl Rng) -> Option<String> {
    let matched: BTreeSet<&String> = oracle.iter().map(|(t, _, _)| t).collect();
    let candidates: Vec<usize> = gates.trials.iter().enumerate().filter(|(_, g)| matched.contains(&g.owner.id)).map(|(i, _)| i).collect();
    let &i = candidates.choose(rng)?;
    let g = &mut gates.trials[i];
    let name = VariableName::new(vocab::HAS_FINDING_OF, "zz_unmatched_concept").with_timeframe(Some(Timeframe::Now));
    let atom = GateAtom { name, cmp: Comparison::Eq, target: Target::Bool(true), positive: true, window: TimeWindow::point_now(), certain: None };
    g.clauses.push(GateClause { literals: vec![atom], role: ClauseRole::RetrievalRelevant, origin: "MUTATION".into() });
    g.canonicalize();
    Some(g.owner.id.clone())
}

/// Symbol check used by tests: predicates that are not canonical names.
pub fn is_noncanonical(symbol: &str) -> bool {
    matches!(Predicate::from_symbol(symbol, ""), Predicate::NonCanonical(_))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldParams {
        WorldParams { n_concepts: 30, n_trials: 40, n_patients: 8, ..WorldParams::default() }
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_world(7, &small()).unwrap();
        let b = generate_world(7, &small()).unwrap();
        assert_eq!(a.trials, b.trials);
        assert_eq!(a.patients, b.patients);
        assert_eq!(a.ontology.digest(), b.ontology.digest());
        let c = generate_world(8, &small()).unwrap();
        assert_ne!(a.trials, c.trials);
    }

    #[test]
    fn empty_world() {
        let w = generate_world(1, &WorldParams { n_trials: 0, ..small() }).unwrap();
        assert!(w.trials.is_empty());
        let r = verify_full_recall(&w, &ObjectiveConfig::treat_chief()).unwrap();
        assert!(r.missed.is_empty() && r.oracle_count == 0);
    }

    #[test]
    fn ontology_jsonl_round_trip() {
        let w = generate_world(3, &small()).unwrap();
        let back = Ontology::from_jsonl(&w.ontology.to_jsonl()).unwrap();
        assert_eq!(back.digest(), w.ontology.digest());
    }

    #[test]
    fn generated_mix_has_noncanonical_and_deferred() {
        let w = generate_world(11, &small()).unwrap();
        let nc = w.trials.iter().flat_map(|p| &p.declarations).filter(|d| is_noncanonical(&d.name)).count();
        assert!(nc > 0);
        let gates = build_gates(&w, &ClosureConfig::default()).unwrap();
        let deferred = gates.trials.iter().flat_map(|g| g.with_role(ClauseRole::Deferred)).count();
        assert!(deferred > 0);
    }

    #[test]
    fn recall_on_a_few_seeds() {
        for seed in 0..5 {
            let w = generate_world(seed, &small()).unwrap();
            for obj in [ObjectiveConfig::treat_chief(), ObjectiveConfig::relevant_to_any()] {
                let r = verify_full_recall(&w, &obj).unwrap();
                assert!(r.missed.is_empty(), "seed {seed} {}: {:?}", obj.name, r.missed);
            }
        }
    }

    #[test]
    fn lossless_worlds_agree_exactly() {
        for seed in 0..5 {
            let w = generate_world(seed, &WorldParams { lossless: true, ..small() }).unwrap();
            let obj = ObjectiveConfig::treat_any();
            let r = verify_full_recall(&w, &obj).unwrap();
            assert!(r.missed.is_empty() && r.extra_count == 0, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn mutation_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut detected = 0;
        for seed in 0..5 {
            let w = generate_world(seed, &WorldParams { lossless: true, ..small() }).unwrap();
            let obj = ObjectiveConfig::relevant_to_any();
            let oracle = oracle_match(&w, &obj, &OracleConfig::default()).unwrap();
            let mut gates = build_gates(&w, &ClosureConfig::default()).unwrap();
            if strengthen_gate(&mut gates, &oracle, &mut rng).is_none() {
                continue;
            }
            let engine = engine_match(&w, &gates, &obj, &RetrievalOptions::default()).unwrap();
            assert!(!compare(seed, &obj.name, &oracle, &engine).missed.is_empty());
            detected += 1;
        }
        assert!(detected > 0);
    }

    #[test]
    fn naive_baseline_agrees_with_sql() {
        let w = generate_world(4, &small()).unwrap();
        let gates = build_gates(&w, &ClosureConfig::default()).unwrap();
        let obj = ObjectiveConfig::treat_any().with_knockouts(true);
        let opts = RetrievalOptions::default();
        assert_eq!(naive_match(&gates, &w.ontology, &obj, &opts).unwrap(), engine_match(&w, &gates, &obj, &opts).unwrap());
    }

    fn fixture(exclusion: bool) -> SyntheticWorld {
        let mut o = Ontology::new();
        o.add_concept(Concept { id: ConceptId::new("X"), token: "x".into(), label: None }).unwrap();
        let head = |side: &str| format!(";; satir-program trial=NCT1 subcohort=main side={side}\n");
        let mut trials = vec![parse_trial_program(&format!(
            "{}(declare-const patient_has_finding_of_x_now Bool)\n(declare-const trial_treats_x Bool)\n\
             (assert (! patient_has_finding_of_x_now :named REQ0_COMPONENT0_PRESCREEN_NOTES_MUST_COMPLETELY_SUFFICE))\n\
             (assert (! trial_treats_x :named TARGET0))\n",
            head("inclusion")
        ))
        .unwrap()];
        if exclusion {
            trials.push(
                parse_trial_program(&format!(
                    "{}(declare-const patient_has_diagnosis_of_x_inthehistory Bool)\n\
                     (assert (! (not patient_has_diagnosis_of_x_inthehistory) :named REQ0_COMPONENT0_OTHER_REQUIREMENTS))\n",
                    head("exclusion")
                ))
                .unwrap(),
            );
        }
        let fact = |n: VariableName| PatientFactRecord { name: n, value: FactValue::Bool(true), certain: TimeWindow::point_now(), possible: TimeWindow::point_now(), source: "fixture".into() };
        let patient = vec![fact(VariableName::new(vocab::CHIEF_COMPLAINT, "x")), fact(VariableName::new(vocab::HAS_DIAGNOSIS_OF, "x").with_timeframe(Some(Timeframe::Now)))];
        SyntheticWorld { seed: 0, ontology: o, trials, patients: vec![("P1".into(), patient)], policy: SaliencePolicy::default(), rules: RuleSet::default_rules() }
    }

    #[test]
    fn minimal_positive_pair() {
        let w = fixture(false);
        let want: BTreeSet<PairKey> = [("NCT1".to_string(), "main".to_string(), "P1".to_string())].into();
        let obj = ObjectiveConfig::treat_chief();
        assert_eq!(oracle_match(&w, &obj, &OracleConfig::default()).unwrap(), want);
        let gates = build_gates(&w, &ClosureConfig::default()).unwrap();
        assert_eq!(engine_match(&w, &gates, &obj, &RetrievalOptions::default()).unwrap(), want);
    }

    #[test]
    fn patient_without_target_concept_is_not_matched() {
        let mut w = fixture(false);
        w.patients[0].1.retain(|f| f.name.relation.as_str() != vocab::CHIEF_COMPLAINT);
        assert!(oracle_match(&w, &ObjectiveConfig::treat_chief(), &OracleConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn certain_exclusion_removes_pair_from_both() {
        let w = fixture(true);
        let gates = build_gates(&w, &ClosureConfig::default()).unwrap();
        let off = ObjectiveConfig::treat_chief();
        let on = off.clone().with_knockouts(true);
        let opts = RetrievalOptions::default();
        assert_eq!(oracle_match(&w, &off, &OracleConfig::default()).unwrap().len(), 1);
        assert_eq!(engine_match(&w, &gates, &off, &opts).unwrap().len(), 1);
        assert!(oracle_match(&w, &on, &OracleConfig::default()).unwrap().is_empty());
        assert!(engine_match(&w, &gates, &on, &opts).unwrap().is_empty());
    }

    #[test]
    fn too_large() {
        let w = generate_world(2, &small()).unwrap();
        let cfg = OracleConfig { atom_budget: 1, ..OracleConfig::default() };
        assert!(matches!(oracle_match(&w, &ObjectiveConfig::treat_chief(), &cfg), Err(OracleError::TooLarge { .. })));
    }
}
