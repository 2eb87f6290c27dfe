//! Objective-conditioned retrieval over stored gates.
//!
//! A trial clause is supported when one of its atoms is compatible with a
//! patient atom; a (trial, subcohort) pair is returned when every relevant
//! clause is supported and, optionally, no knockout clause is certainly
//! violated. The plan runs as one SQL statement per patient, with an
//! in-memory hash join alongside for cross-checks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Comparison, NumInterval, Target};
use crate::ontology::{vocab, Ontology, RelationFamily, RelationId};
use crate::projection::{ClauseRole, EntityKind, EntityRef, GateAtom, GateCNF};
use crate::store::{register_functions, Store, StoreError};
use crate::temporal::{exclusion_time_match, inclusion_time_match};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown objective `{0}` (expected treat-chief, treat-any or relevant-to-any)")]
    UnknownObjective(String),
    #[error("objective `{objective}` uses relation `{relation}`, which is not a {expected} relation")]
    UndeclaredRelation { objective: String, relation: String, expected: &'static str },
    #[error("objective file: {0}")]
    Config(String),
    #[error("unit mismatch: trial atom `{trial}` uses `{trial_unit}`, patient atom `{patient}` uses `{patient_unit}`")]
    UnitMismatch { trial: String, patient: String, trial_unit: String, patient_unit: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("sqlite: {0}")]
    Sqlite(#[from] rusqlite::Error),
}

/// Which (trial intent, patient label) relation pairs may join.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub name: String,
    pub intent_map: BTreeSet<(String, String)>,
    #[serde(default)]
    pub enforce_knockouts: bool,
}

pub const OBJECTIVE_NAMES: [&str; 3] = ["treat-chief", "treat-any", "relevant-to-any"];

impl ObjectiveConfig {
    fn build(name: &str, pairs: &[(&str, &str)]) -> Self {
        ObjectiveConfig {
            name: name.into(),
            intent_map: pairs.iter().map(|(t, p)| (t.to_string(), p.to_string())).collect(),
            enforce_knockouts: false,
        }
    }

    pub fn treat_chief() -> Self {
        Self::build(
            "treat-chief",
            &[(vocab::TREATS, vocab::CHIEF_COMPLAINT), (vocab::TREATS, vocab::CHIEF_COMPLAINT_RELATED), (vocab::PREVENTS, vocab::PREVENTION_TARGET)],
        )
    }

    pub fn treat_any() -> Self {
        let mut o = Self::treat_chief();
        o.name = "treat-any".into();
        o.intent_map.insert((vocab::TREATS.into(), vocab::ANY_IMPORTANT_COMPLAINT.into()));
        o
    }

    pub fn relevant_to_any() -> Self {
        let mut pairs = Vec::new();
        for t in vocab::TRIAL_INTENT.iter().filter(|t| **t != vocab::NOT_CLINICALLY_RELEVANT) {
            for p in vocab::PATIENT_FACT {
                pairs.push((*t, *p));
            }
        }
        Self::build("relevant-to-any", &pairs)
    }

    pub fn named(name: &str) -> Result<Self, RetrievalError> {
        match name {
            "treat-chief" => Ok(Self::treat_chief()),
            "treat-any" => Ok(Self::treat_any()),
            "relevant-to-any" => Ok(Self::relevant_to_any()),
            other => Err(RetrievalError::UnknownObjective(other.into())),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, RetrievalError> {
        serde_json::from_str(text).map_err(|e| RetrievalError::Config(e.to_string()))
    }

    pub fn with_knockouts(mut self, on: bool) -> Self {
        self.enforce_knockouts = on;
        self
    }

    /// Every pair must join a trial-intent relation to a patient-label relation.
    pub fn validate(&self, o: &Ontology) -> Result<(), RetrievalError> {
        for (t, p) in &self.intent_map {
            for (rel, fam, expected) in [(t, RelationFamily::TrialIntent, "trial intent"), (p, RelationFamily::PatientFact, "patient label")] {
                if o.relation_family(&RelationId::new(rel.as_str())) != Some(fam) {
                    return Err(RetrievalError::UndeclaredRelation { objective: self.name.clone(), relation: rel.clone(), expected });
                }
            }
        }
        Ok(())
    }

    pub fn admits(&self, trial_rel: &str, patient_rel: &str) -> bool {
        self.intent_map.contains(&(trial_rel.to_string(), patient_rel.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalOptions {
    /// Knockouts need the certain window strictly inside the criterion window.
    pub strict_exclusion: bool,
    /// Also join concepts by is-a subsumption, for facts that were not closed.
    pub concept_fallback: bool,
    pub workers: usize,
}

impl Default for RetrievalOptions {
    fn default() -> Self {
        RetrievalOptions { strict_exclusion: false, concept_fallback: false, workers: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatchResult {
    pub patient_id: String,
    pub trial_id: String,
    pub subcohort: String,
    pub supported_clause_count: usize,
    pub relevant_clause_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<Explanation>,
}

impl MatchResult {
    pub fn key(&self) -> (String, String, String) {
        (self.trial_id.clone(), self.subcohort.clone(), self.patient_id.clone())
    }
}

/// Values `x` in `patient` can take that satisfy `x cmp target`.
pub fn numeric_compatible(cmp: Comparison, target: &Target, patient: &NumInterval) -> bool {
    match target {
        Target::Bool(_) => false,
        Target::Number { value, .. } => match NumInterval::from_comparison(cmp, *value) {
            Some(allowed) => allowed.intersects(patient),
            None => !NumInterval::point(*value).contains_interval(patient),
        },
        Target::Interval { interval, .. } => match cmp {
            Comparison::Eq => interval.intersects(patient),
            Comparison::Ne => !interval.contains_interval(patient),
            _ => true,
        },
    }
}

/// Every trial qualifier must be subsumed by some patient qualifier.
pub fn qualifiers_compatible(trial: &[String], patient: &[String], o: &Ontology) -> bool {
    trial.iter().all(|tq| patient.iter().any(|pq| o.qualifier_subsumes(tq, pq)))
}

fn patient_interval(t: &Target) -> Option<NumInterval> {
    match t {
        Target::Bool(_) => None,
        Target::Number { value, .. } => Some(NumInterval::point(*value)),
        Target::Interval { interval, .. } => Some(interval.clone()),
    }
}

/// Relation, concept, outcome and qualifier agreement.
fn names_compatible(t: &GateAtom, p: &GateAtom, o: &Ontology, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> bool {
    let (tn, pn) = (&t.name, &p.name);
    let relation_ok = if o.relation_family(&tn.relation) == Some(RelationFamily::TrialIntent) {
        obj.admits(tn.relation.as_str(), pn.relation.as_str())
    } else {
        o.relation_subsumes(&tn.relation, &pn.relation)
    };
    let concept_ok = tn.concept == pn.concept || (opts.concept_fallback && o.token_subsumes(&tn.concept, &pn.concept));
    relation_ok && concept_ok && (tn.outcome.is_none() || tn.outcome == pn.outcome) && qualifiers_compatible(&tn.qualifier_set(), &pn.qualifier_set(), o)
}

fn values_compatible(t: &GateAtom, p: &GateAtom) -> Result<bool, RetrievalError> {
    if !p.positive {
        return Ok(false);
    }
    match (&t.target, &p.target) {
        (Target::Bool(b), Target::Bool(v)) => Ok(match t.cmp {
            Comparison::Eq => b == v,
            Comparison::Ne => b != v,
            _ => false,
        }),
        (Target::Bool(_), _) | (_, Target::Bool(_)) => Ok(false),
        (tt, pt) => {
            let (tu, pu) = (tt.unit().unwrap_or(""), pt.unit().unwrap_or(""));
            if tu != pu {
                return Err(RetrievalError::UnitMismatch {
                    trial: t.name.render(),
                    patient: p.name.render(),
                    trial_unit: tu.into(),
                    patient_unit: pu.into(),
                });
            }
            Ok(patient_interval(pt).is_some_and(|iv| numeric_compatible(t.cmp, tt, &iv)))
        }
    }
}

/// A patient atom can witness a trial atom: admissible relations, matching
/// concept, qualifiers and outcome, overlapping windows and compatible values.
pub fn atoms_compatible(t: &GateAtom, p: &GateAtom, o: &Ontology, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> Result<bool, RetrievalError> {
    if !names_compatible(t, p, o, obj, opts) {
        return Ok(false);
    }
    Ok(values_compatible(t, p)? && inclusion_time_match(&t.window, &p.window))
}

/// A patient atom makes a Boolean trial atom certainly true over its window.
pub fn certainly_holds(t: &GateAtom, p: &GateAtom, o: &Ontology, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> Result<bool, RetrievalError> {
    if t.is_numeric() || !names_compatible(t, p, o, obj, opts) || !values_compatible(t, p)? {
        return Ok(false);
    }
    Ok(p.certain.as_ref().is_some_and(|c| exclusion_time_match(&t.window, c, opts.strict_exclusion)))
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ClauseStatus {
    /// (trial atom, patient atom) witnesses.
    Supported { by: Vec<(String, String)> },
    Unsupported,
    Deferred,
    /// Patient atoms that certainly violate the clause, with their certain windows.
    KnockedOut { by: Vec<(String, String)> },
    NotTriggered,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClauseExplanation {
    pub side: String,
    pub origin: String,
    pub literals: Vec<String>,
    #[serde(flatten)]
    pub status: ClauseStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Explanation {
    pub trial_id: String,
    pub subcohort: String,
    pub patient_id: String,
    pub matched: bool,
    /// Index into `clauses` of the first unsupported relevant clause.
    pub first_unsupported: Option<usize>,
    pub knocked_out: bool,
    pub clauses: Vec<ClauseExplanation>,
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.matched {
            "retrieved"
        } else if self.knocked_out {
            "knocked out"
        } else {
            "filtered"
        };
        writeln!(f, "{} / {} / patient {}: {verdict}", self.trial_id, self.subcohort, self.patient_id)?;
        for (i, c) in self.clauses.iter().enumerate() {
            let mark = if Some(i) == self.first_unsupported { " <- first unsupported" } else { "" };
            write!(f, "  [{}] {} ({})", c.side, c.origin, c.literals.join(" OR "))?;
            match &c.status {
                ClauseStatus::Supported { by } => {
                    writeln!(f, " supported")?;
                    for (t, p) in by {
                        writeln!(f, "      {t}  <=  {p}")?;
                    }
                }
                ClauseStatus::KnockedOut { by } => {
                    writeln!(f, " KNOCKED OUT")?;
                    for (t, p) in by {
                        writeln!(f, "      {t}  certainly violated by  {p}")?;
                    }
                }
                ClauseStatus::Unsupported => writeln!(f, " unsupported{mark}")?,
                ClauseStatus::Deferred => writeln!(f, " deferred")?,
                ClauseStatus::NotTriggered => writeln!(f, " knockout not triggered")?,
            }
        }
        Ok(())
    }
}

fn atom_text(a: &GateAtom) -> String {
    match &a.certain {
        Some(c) => format!("{a} certain {c}"),
        None => a.to_string(),
    }
}

/// Patient atoms bucketed by concept token.
struct PatientIndex<'a> {
    by_concept: HashMap<&'a str, Vec<&'a GateAtom>>,
    all: Vec<&'a GateAtom>,
}

impl<'a> PatientIndex<'a> {
    fn new(p: &'a GateCNF) -> Self {
        let mut by_concept: HashMap<&str, Vec<&GateAtom>> = HashMap::new();
        let mut all = Vec::new();
        for c in &p.clauses {
            for a in &c.literals {
                by_concept.entry(a.name.concept.as_str()).or_default().push(a);
                all.push(a);
            }
        }
        PatientIndex { by_concept, all }
    }

    fn candidates(&self, t: &GateAtom, fallback: bool) -> &[&'a GateAtom] {
        if fallback {
            return &self.all;
        }
        self.by_concept.get(t.name.concept.as_str()).map(Vec::as_slice).unwrap_or(&[])
    }
}

type Group<'a> = Vec<&'a GateCNF>;

fn trial_groups(trials: &[GateCNF]) -> BTreeMap<(String, String), Group<'_>> {
    let mut g: BTreeMap<(String, String), Group<'_>> = BTreeMap::new();
    for t in trials.iter().filter(|t| t.owner.kind == EntityKind::Trial) {
        g.entry((t.owner.id.clone(), t.owner.subcohort.clone())).or_default().push(t);
    }
    g
}

struct Ctx<'a> {
    o: &'a Ontology,
    obj: &'a ObjectiveConfig,
    opts: &'a RetrievalOptions,
}

impl Ctx<'_> {
    fn evaluate(&self, key: &(String, String), group: &[&GateCNF], patient: &GateCNF, idx: &PatientIndex<'_>, detail: bool) -> Result<(MatchResult, Explanation), RetrievalError> {
        let mut ex = Explanation {
            trial_id: key.0.clone(),
            subcohort: key.1.clone(),
            patient_id: patient.owner.id.clone(),
            matched: false,
            first_unsupported: None,
            knocked_out: false,
            clauses: Vec::new(),
        };
        let (mut relevant, mut supported) = (0, 0);
        for g in group {
            let side = g.owner.side.map(|s| s.as_str()).unwrap_or("").to_string();
            for c in &g.clauses {
                let status = match c.role {
                    ClauseRole::RetrievalRelevant => {
                        relevant += 1;
                        let mut by = Vec::new();
                        'lits: for t in &c.literals {
                            for p in idx.candidates(t, self.opts.concept_fallback) {
                                if atoms_compatible(t, p, self.o, self.obj, self.opts)? {
                                    by.push((t.to_string(), atom_text(p)));
                                    if !detail {
                                        break 'lits;
                                    }
                                }
                            }
                        }
                        if by.is_empty() {
                            ClauseStatus::Unsupported
                        } else {
                            supported += 1;
                            ClauseStatus::Supported { by }
                        }
                    }
                    ClauseRole::Knockout if self.obj.enforce_knockouts => {
                        let mut by = Vec::new();
                        let mut all = true;
                        for t in &c.literals {
                            let mut hit = None;
                            for p in idx.candidates(t, self.opts.concept_fallback) {
                                if certainly_holds(t, p, self.o, self.obj, self.opts)? {
                                    hit = Some(atom_text(p));
                                    break;
                                }
                            }
                            match hit {
                                Some(p) => by.push((t.to_string(), p)),
                                None => {
                                    all = false;
                                    break;
                                }
                            }
                        }
                        if all {
                            ex.knocked_out = true;
                            ClauseStatus::KnockedOut { by }
                        } else {
                            ClauseStatus::NotTriggered
                        }
                    }
                    ClauseRole::Knockout => ClauseStatus::NotTriggered,
                    ClauseRole::Deferred => ClauseStatus::Deferred,
                };
                if detail || matches!(status, ClauseStatus::Unsupported | ClauseStatus::KnockedOut { .. }) {
                    if status == ClauseStatus::Unsupported && ex.first_unsupported.is_none() {
                        ex.first_unsupported = Some(ex.clauses.len());
                    }
                    ex.clauses.push(ClauseExplanation { side: side.clone(), origin: c.origin.clone(), literals: c.literals.iter().map(|a| a.to_string()).collect(), status });
                }
            }
        }
        ex.matched = supported == relevant && !ex.knocked_out;
        let m = MatchResult {
            patient_id: patient.owner.id.clone(),
            trial_id: key.0.clone(),
            subcohort: key.1.clone(),
            supported_clause_count: supported,
            relevant_clause_count: relevant,
            explanation: None,
        };
        Ok((m, ex))
    }
}

/// Hash-join evaluation over gates held in memory.
pub fn retrieve_in_memory(trials: &[GateCNF], patients: &[GateCNF], o: &Ontology, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> Result<Vec<MatchResult>, RetrievalError> {
    let groups = trial_groups(trials);
    let ctx = Ctx { o, obj, opts };
    let mut out = Vec::new();
    for p in patients.iter().filter(|p| p.owner.kind == EntityKind::Patient) {
        let idx = PatientIndex::new(p);
        for (key, group) in &groups {
            let (m, ex) = ctx.evaluate(key, group, p, &idx, false)?;
            if ex.matched {
                out.push(m);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Per-clause report for every subcohort of `trial_id` against one patient.
pub fn explain(store: &Store, trial_id: &str, patient_id: &str, o: &Ontology, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> Result<Vec<Explanation>, RetrievalError> {
    let patient = store.dump_entity(&EntityRef::patient(patient_id)).map_err(|e| match e {
        StoreError::UnknownEntity(x) => RetrievalError::UnknownEntity(x),
        other => other.into(),
    })?;
    let mut trials = Vec::new();
    for e in store.entities()? {
        if e.kind == EntityKind::Trial && e.id == trial_id {
            trials.push(store.dump_entity(&e)?);
        }
    }
    if trials.is_empty() {
        return Err(RetrievalError::UnknownEntity(format!("trial:{trial_id}")));
    }
    let ctx = Ctx { o, obj, opts };
    let idx = PatientIndex::new(&patient);
    trial_groups(&trials).iter().map(|(k, g)| ctx.evaluate(k, g, &patient, &idx, true).map(|(_, ex)| ex)).collect()
}

fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

const WIN_T: &str = "t.win_lo, t.win_hi, t.win_lo_incl, t.win_hi_incl";

/// The retrieval statement for one patient (`?1`); `?2` is the strict flag.
pub fn retrieval_sql(obj: &ObjectiveConfig, opts: &RetrievalOptions) -> String {
    let im = if obj.intent_map.is_empty() {
        "SELECT NULL AS tr, NULL AS pr WHERE 0".to_string()
    } else {
        let rows: Vec<String> = obj.intent_map.iter().map(|(t, p)| format!("({}, {})", quote(t), quote(p))).collect();
        format!("SELECT column1 AS tr, column2 AS pr FROM (VALUES {})", rows.join(", "))
    };
    let concept = if opts.concept_fallback { "(t.concept = p.concept OR concept_sub(t.concept, p.concept))" } else { "t.concept = p.concept" };
    let relation = "(CASE WHEN t.family = 'trial_intent'
                THEN EXISTS (SELECT 1 FROM IM WHERE IM.tr = t.relation AND IM.pr = p.relation)
                ELSE t.relation = p.relation OR EXISTS (SELECT 1 FROM RELSUB r WHERE r.general = t.relation AND r.specific = p.relation) END)
            AND quals_ok(t.qual_digest, p.qual_digest)";
    let knockout = if obj.enforce_knockouts {
        "AND NOT EXISTS (SELECT 1 FROM KO k WHERE k.entity_id = g.entity_id AND k.subcohort = g.subcohort)"
    } else {
        ""
    };
    format!(
        "WITH
        IM AS ({im}),
        PC AS (SELECT c.clause_id FROM ECNF e JOIN CNFD c ON c.cnf_id = e.cnf_id WHERE e.entity_kind = 'patient' AND e.entity_id = ?1),
        PB AS (SELECT b.* FROM PC JOIN DA d ON d.clause_id = PC.clause_id JOIN AB b ON b.atom_id = d.atom_id WHERE b.polarity = 1 AND b.bool_target = 1),
        PN AS (SELECT n.* FROM PC JOIN DA d ON d.clause_id = PC.clause_id JOIN AN n ON n.atom_id = d.atom_id WHERE n.polarity = 1),
        TB AS (SELECT DISTINCT t.atom_id FROM PB p JOIN AB t ON {concept}
            WHERE t.cert_lo IS NULL AND t.polarity = 1 AND t.cmp = 'EQ' AND t.bool_target = 1
            AND (t.outcome IS NULL OR t.outcome = p.outcome) AND {relation}
            AND win_overlap({WIN_T}, p.win_lo, p.win_hi, p.win_lo_incl, p.win_hi_incl)),
        TN AS (SELECT DISTINCT t.atom_id FROM PN p JOIN AN t ON {concept}
            WHERE t.cert_lo IS NULL AND t.polarity = 1 AND t.unit = p.unit AND {relation}
            AND num_ok(t.cmp, t.target_kind, t.value, t.lower, t.upper, t.lower_incl, t.upper_incl,
                       COALESCE(p.lower, p.value), COALESCE(p.upper, p.value), COALESCE(p.lower_incl, 1), COALESCE(p.upper_incl, 1))
            AND win_overlap({WIN_T}, p.win_lo, p.win_hi, p.win_lo_incl, p.win_hi_incl)),
        SUPPORTED AS (SELECT DISTINCT c.clause_id FROM (SELECT atom_id FROM TB UNION SELECT atom_id FROM TN) a
            JOIN DA d ON d.atom_id = a.atom_id JOIN CNFD c ON c.clause_id = d.clause_id AND c.clause_role = 'relevant'),
        REL AS (SELECT e.entity_id, e.subcohort, COUNT(*) AS n FROM ECNF e JOIN CNFD c ON c.cnf_id = e.cnf_id
            WHERE e.entity_kind = 'trial' AND c.clause_role = 'relevant' GROUP BY e.entity_id, e.subcohort),
        SUP AS (SELECT e.entity_id, e.subcohort, COUNT(*) AS n FROM SUPPORTED s JOIN CNFD c ON c.clause_id = s.clause_id
            JOIN ECNF e ON e.cnf_id = c.cnf_id WHERE e.entity_kind = 'trial' GROUP BY e.entity_id, e.subcohort),
        GROUPS AS (SELECT DISTINCT entity_id, subcohort FROM ECNF WHERE entity_kind = 'trial'),
        CERT AS (SELECT DISTINCT t.atom_id FROM PB p JOIN AB t ON {concept}
            WHERE t.cert_lo IS NULL AND t.polarity = 0 AND t.cmp = 'EQ' AND t.bool_target = 1
            AND (t.outcome IS NULL OR t.outcome = p.outcome) AND {relation}
            AND win_contains({WIN_T}, p.cert_lo, p.cert_hi, p.cert_lo_incl, p.cert_hi_incl, ?2)),
        KO AS (SELECT DISTINCT e.entity_id, e.subcohort FROM ECNF e JOIN CNFD c ON c.cnf_id = e.cnf_id
            WHERE e.entity_kind = 'trial' AND c.clause_role = 'knockout'
            AND NOT EXISTS (SELECT 1 FROM DA d WHERE d.clause_id = c.clause_id AND d.atom_id NOT IN (SELECT atom_id FROM CERT)))
        SELECT g.entity_id, g.subcohort, COALESCE(s.n, 0), COALESCE(r.n, 0) FROM GROUPS g
        LEFT JOIN REL r ON r.entity_id = g.entity_id AND r.subcohort = g.subcohort
        LEFT JOIN SUP s ON s.entity_id = g.entity_id AND s.subcohort = g.subcohort
        WHERE COALESCE(s.n, 0) = COALESCE(r.n, 0) {knockout}
        ORDER BY g.entity_id, g.subcohort"
    )
}

fn prepare(store: &Store, o: &Arc<Ontology>, opts: &RetrievalOptions) -> Result<(), RetrievalError> {
    let conn = store.connection();
    register_functions(conn, o.clone(), Arc::new(store.qualifier_sets()?))?;
    if opts.concept_fallback {
        let o = o.clone();
        conn.create_scalar_function("concept_sub", 2, rusqlite::functions::FunctionFlags::SQLITE_UTF8 | rusqlite::functions::FunctionFlags::SQLITE_DETERMINISTIC, move |ctx| {
            let a: String = ctx.get(0)?;
            let b: String = ctx.get(1)?;
            Ok(o.token_subsumes(&a, &b))
        })?;
    }
    Ok(())
}

fn query_patient(store: &Store, sql: &str, patient: &str, opts: &RetrievalOptions) -> Result<Vec<MatchResult>, RetrievalError> {
    let mut st = store.connection().prepare_cached(sql)?;
    let rows = st.query_map(rusqlite::params![patient, opts.strict_exclusion], |r| {
        Ok(MatchResult {
            patient_id: patient.to_string(),
            trial_id: r.get(0)?,
            subcohort: r.get(1)?,
            supported_clause_count: r.get::<_, i64>(2)? as usize,
            relevant_clause_count: r.get::<_, i64>(3)? as usize,
            explanation: None,
        })
    })?;
    Ok(rows.collect::<Result<Vec<_>, _>>()?)
}

/// Run the SQL plan for the given patients (all patients when `None`).
pub fn retrieve(store: &Store, o: &Arc<Ontology>, obj: &ObjectiveConfig, opts: &RetrievalOptions, patients: Option<&[String]>) -> Result<Vec<MatchResult>, RetrievalError> {
    let known = store.patient_ids()?;
    let ids: Vec<String> = match patients {
        None => known,
        Some(ps) => {
            let set: BTreeSet<&String> = known.iter().collect();
            if let Some(missing) = ps.iter().find(|p| !set.contains(p)) {
                return Err(RetrievalError::UnknownEntity(format!("patient:{missing}")));
            }
            let mut v = ps.to_vec();
            v.sort();
            v.dedup();
            v
        }
    };
    let sql = retrieval_sql(obj, opts);
    let parallel = opts.workers > 1 && ids.len() > 1;
    let mut out = match store.path() {
        Some(path) if parallel => {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers).build().map_err(|e| RetrievalError::Config(e.to_string()))?;
            let chunks: Vec<Result<Vec<MatchResult>, RetrievalError>> = pool.install(|| {
                ids.par_iter()
                    .map_init(
                        || -> Result<Store, RetrievalError> {
                            let s = Store::open(path)?;
                            prepare(&s, o, opts)?;
                            Ok(s)
                        },
                        |conn, p| match conn {
                            Ok(s) => query_patient(s, &sql, p, opts),
                            Err(e) => Err(RetrievalError::Config(e.to_string())),
                        },
                    )
                    .collect()
            });
            let mut all = Vec::new();
            for c in chunks {
                all.extend(c?);
            }
            all
        }
        _ => {
            prepare(store, o, opts)?;
            let mut all = Vec::new();
            for p in &ids {
                all.extend(query_patient(store, &sql, p, opts)?);
            }
            all
        }
    };
    out.sort();
    Ok(out)
}

/// Attach explanations to results.
pub fn explain_results(store: &Store, results: &mut [MatchResult], o: &Ontology, obj: &ObjectiveConfig, opts: &RetrievalOptions) -> Result<(), RetrievalError> {
    for r in results.iter_mut() {
        let ex = explain(store, &r.trial_id, &r.patient_id, o, obj, opts)?;
        r.explanation = ex.into_iter().find(|e| e.subcohort == r.subcohort);
    }
    Ok(())
}
