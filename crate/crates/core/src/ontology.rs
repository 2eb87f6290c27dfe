//! Concept hierarchy, relation vocabulary and the subsumption checks built on
//! them.
//!
//! Four families of subsumption are kept: concept is-a, relation generality,
//! causal edges over (relation, concept) pairs, and qualifier/timeframe
//! generality. Every check is reflexive.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temporal::Timeframe;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub String);

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelationId(pub String);

impl ConceptId {
    pub fn new(s: impl Into<String>) -> Self {
        ConceptId(s.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl RelationId {
    pub fn new(s: impl Into<String>) -> Self {
        RelationId(s.into())
    }
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationFamily {
    /// Relations between a patient and a medical entity.
    Medical,
    /// Labels a patient fact with its role (chief complaint and so on).
    PatientFact,
    /// What a trial intends to do about an entity.
    TrialIntent,
}

/// Built-in relation vocabulary.
pub mod vocab {
    pub const HAS_DIAGNOSIS_OF: &str = "HasDiagnosisOf";
    pub const HAS_FINDING_OF: &str = "HasFindingOf";
    pub const HAS_SYMPTOMS_OF: &str = "HasSymptomsOf";
    pub const HAS_CLINICAL_SIGNS_OF: &str = "HasClinicalSignsOf";
    pub const HAS_SUSPICION_OF: &str = "HasSuspicionOf";
    pub const HAS_UNDERGONE: &str = "HasUndergone";
    pub const IS_UNDERGOING: &str = "IsUndergoing";
    pub const NEEDS_TO_UNDERGO: &str = "NeedsToUndergo";
    pub const WILL_UNDERGO: &str = "WillUndergo";
    pub const CAN_UNDERGO: &str = "CanUndergo";
    pub const IS_TAKING: &str = "IsTaking";
    pub const HAS_TAKEN: &str = "HasTaken";
    pub const HAS_HYPERSENSITIVITY_TO: &str = "HasHypersensitivityTo";
    pub const HAS_NONIMMUNE_HYPERSENSITIVITY_TO: &str = "HasNonimmuneHypersensitivityTo";
    pub const HAS_INTOLERANCE_TO: &str = "HasIntoleranceTo";
    pub const HAS_ALLERGY_TO: &str = "HasAllergyTo";
    pub const IS_EXPOSED_TO: &str = "IsExposedTo";
    pub const HAS_BEEN_EXPOSED_TO: &str = "HasBeenExposedTo";
    pub const IS_POSITIVE: &str = "IsPositive";
    pub const IS_NEGATIVE: &str = "IsNegative";
    pub const IS_NORMAL: &str = "IsNormal";
    pub const IS_ABNORMAL: &str = "IsAbnormal";
    pub const VALUE_RECORDED: &str = "ValueRecorded";
    pub const AGE_VALUE_RECORDED: &str = "AgeValueRecorded";
    pub const SEX_IS: &str = "SexIs";
    pub const DEMOGRAPHIC_STATUS: &str = "DemographicStatus";

    pub const CHIEF_COMPLAINT: &str = "ChiefComplaint";
    pub const CHIEF_COMPLAINT_RELATED: &str = "ChiefComplaintRelated";
    pub const ANY_IMPORTANT_COMPLAINT: &str = "AnyImportantComplaint";
    pub const PREVENTION_TARGET: &str = "PreventionTarget";

    pub const TREATS: &str = "Treats";
    pub const PREVENTS: &str = "Prevents";
    pub const OTHER: &str = "Other";
    pub const NOT_CLINICALLY_RELEVANT: &str = "NotClinicallyRelevant";
    pub const IMPROVES_EFFECTIVENESS: &str = "ImprovesEffectiveness";
    pub const REDUCES_PROCEDURE_RELATED_HARMS: &str = "ReducesProcedureRelatedHarms";
    pub const REDUCES_EXPOSURE_USE: &str = "ReducesExposureUse";
    pub const MITIGATES_HARMS: &str = "MitigatesHarms";
    pub const ENHANCES_BENEFITS: &str = "EnhancesBenefits";

    pub const MEDICAL: &[&str] = &[
        HAS_DIAGNOSIS_OF,
        HAS_FINDING_OF,
        HAS_SYMPTOMS_OF,
        HAS_CLINICAL_SIGNS_OF,
        HAS_SUSPICION_OF,
        HAS_UNDERGONE,
        IS_UNDERGOING,
        NEEDS_TO_UNDERGO,
        WILL_UNDERGO,
        CAN_UNDERGO,
        IS_TAKING,
        HAS_TAKEN,
        HAS_HYPERSENSITIVITY_TO,
        HAS_NONIMMUNE_HYPERSENSITIVITY_TO,
        HAS_INTOLERANCE_TO,
        HAS_ALLERGY_TO,
        IS_EXPOSED_TO,
        HAS_BEEN_EXPOSED_TO,
        IS_POSITIVE,
        IS_NEGATIVE,
        IS_NORMAL,
        IS_ABNORMAL,
        VALUE_RECORDED,
        AGE_VALUE_RECORDED,
        SEX_IS,
        DEMOGRAPHIC_STATUS,
    ];
    pub const PATIENT_FACT: &[&str] = &[CHIEF_COMPLAINT, CHIEF_COMPLAINT_RELATED, ANY_IMPORTANT_COMPLAINT, PREVENTION_TARGET];
    pub const TRIAL_INTENT: &[&str] = &[
        TREATS,
        PREVENTS,
        OTHER,
        NOT_CLINICALLY_RELEVANT,
        IMPROVES_EFFECTIVENESS,
        REDUCES_PROCEDURE_RELATED_HARMS,
        REDUCES_EXPOSURE_USE,
        MITIGATES_HARMS,
        ENHANCES_BENEFITS,
    ];
}

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("duplicate concept `{0}`")]
    DuplicateConcept(String),
    #[error("duplicate concept token `{0}`")]
    DuplicateToken(String),
    #[error("cycle in {family} hierarchy through `{node}`")]
    Cycle { family: &'static str, node: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    /// Snake-case token used inside variable names.
    pub token: String,
    pub label: Option<String>,
}

/// Outcome/status attached by a causal edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Positive,
    Negative,
    Normal,
    Abnormal,
}

impl Status {
    pub const ALL: [Status; 4] = [Status::Positive, Status::Negative, Status::Normal, Status::Abnormal];

    pub fn as_str(self) -> &'static str {
        match self {
            Status::Positive => "positive",
            Status::Negative => "negative",
            Status::Normal => "normal",
            Status::Abnormal => "abnormal",
        }
    }

    pub fn parse(s: &str) -> Option<Status> {
        Status::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub id: String,
    pub src_rel: RelationId,
    pub src_concept: ConceptId,
    pub dst_rel: RelationId,
    pub dst_concept: ConceptId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<Status>,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Record {
    Concept {
        id: String,
        #[serde(default)]
        token: Option<String>,
        #[serde(default)]
        label: Option<String>,
    },
    Isa {
        child: String,
        parent: String,
    },
    Relation {
        id: String,
        family: RelationFamily,
    },
    Relsub {
        specific: String,
        general: String,
    },
    Causal {
        #[serde(default)]
        id: Option<String>,
        src_rel: String,
        src_concept: String,
        dst_rel: String,
        dst_concept: String,
        #[serde(default)]
        status: Option<Status>,
    },
    Qualsub {
        specific: String,
        general: String,
    },
}

/// Default name token for a concept id: `AcuteAppendicitis` -> `acute_appendicitis`.
pub fn default_token(id: &str) -> String {
    let mut out = String::with_capacity(id.len() + 4);
    let chars: Vec<char> = id.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_ascii_uppercase() {
            let prev_lower = i > 0 && (chars[i - 1].is_ascii_lowercase() || chars[i - 1].is_ascii_digit());
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_ascii_lowercase());
            let prev_upper = i > 0 && chars[i - 1].is_ascii_uppercase();
            if !out.is_empty() && !out.ends_with('_') && (prev_lower || (prev_upper && next_lower)) {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else if c.is_ascii_alphanumeric() {
            out.push(c);
        } else if !out.is_empty() && !out.ends_with('_') {
            out.push('_');
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct Ontology {
    concepts: BTreeMap<ConceptId, Concept>,
    by_token: HashMap<String, ConceptId>,
    parents: HashMap<ConceptId, Vec<ConceptId>>,
    children: HashMap<ConceptId, Vec<ConceptId>>,
    relations: BTreeMap<RelationId, RelationFamily>,
    rel_general: HashMap<RelationId, Vec<RelationId>>,
    causal: Vec<CausalEdge>,
    causal_from: HashMap<(RelationId, ConceptId), Vec<usize>>,
    qual_general: HashMap<String, Vec<String>>,
}

impl Ontology {
    /// Empty ontology with the built-in relation vocabulary.
    pub fn new() -> Self {
        let mut o = Ontology::default();
        for (fam, names) in [
            (RelationFamily::Medical, vocab::MEDICAL),
            (RelationFamily::PatientFact, vocab::PATIENT_FACT),
            (RelationFamily::TrialIntent, vocab::TRIAL_INTENT),
        ] {
            for n in names {
                o.relations.insert(RelationId::new(*n), fam);
            }
        }
        o
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text)
    }

    /// Parse JSON-lines records. Blank lines and `#` comments are skipped.
    pub fn from_jsonl(text: &str) -> Result<Self, OntologyError> {
        let mut o = Ontology::new();
        let mut isa = Vec::new();
        let mut relsub = Vec::new();
        let mut causal = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let rec: Record = serde_json::from_str(t).map_err(|e| OntologyError::Parse { line: line_no, msg: e.to_string() })?;
            match rec {
                Record::Concept { id, token, label } => {
                    let token = token.unwrap_or_else(|| default_token(&id));
                    o.add_concept(Concept { id: ConceptId(id), token, label })?;
                }
                Record::Isa { child, parent } => isa.push((child, parent)),
                Record::Relation { id, family } => {
                    o.relations.insert(RelationId(id), family);
                }
                Record::Relsub { specific, general } => relsub.push((specific, general)),
                Record::Causal { id, src_rel, src_concept, dst_rel, dst_concept, status } => {
                    causal.push((line_no, id, src_rel, src_concept, dst_rel, dst_concept, status))
                }
                Record::Qualsub { specific, general } => o.qual_general.entry(specific).or_default().push(general),
            }
        }
        for (child, parent) in isa {
            o.add_isa(&ConceptId(child), &ConceptId(parent))?;
        }
        for (specific, general) in relsub {
            o.add_relsub(&RelationId(specific), &RelationId(general))?;
        }
        for (line_no, id, src_rel, src_concept, dst_rel, dst_concept, status) in causal {
            o.add_causal(CausalEdge {
                id: id.unwrap_or_else(|| format!("causal_{line_no}")),
                src_rel: RelationId(src_rel),
                src_concept: ConceptId(src_concept),
                dst_rel: RelationId(dst_rel),
                dst_concept: ConceptId(dst_concept),
                status,
            })?;
        }
        o.check_acyclic()?;
        Ok(o)
    }

    pub fn add_concept(&mut self, c: Concept) -> Result<(), OntologyError> {
        if self.concepts.contains_key(&c.id) {
            return Err(OntologyError::DuplicateConcept(c.id.0));
        }
        if self.by_token.contains_key(&c.token) {
            return Err(OntologyError::DuplicateToken(c.token));
        }
        self.by_token.insert(c.token.clone(), c.id.clone());
        self.concepts.insert(c.id.clone(), c);
        Ok(())
    }

    pub fn add_isa(&mut self, child: &ConceptId, parent: &ConceptId) -> Result<(), OntologyError> {
        for c in [child, parent] {
            if !self.concepts.contains_key(c) {
                return Err(OntologyError::UnknownConcept(c.0.clone()));
            }
        }
        let ps = self.parents.entry(child.clone()).or_default();
        if !ps.contains(parent) {
            ps.push(parent.clone());
            self.children.entry(parent.clone()).or_default().push(child.clone());
        }
        Ok(())
    }

    pub fn add_relsub(&mut self, specific: &RelationId, general: &RelationId) -> Result<(), OntologyError> {
        for r in [specific, general] {
            if !self.relations.contains_key(r) {
                return Err(OntologyError::UnknownRelation(r.0.clone()));
            }
        }
        let gs = self.rel_general.entry(specific.clone()).or_default();
        if !gs.contains(general) {
            gs.push(general.clone());
        }
        Ok(())
    }

    pub fn add_causal(&mut self, e: CausalEdge) -> Result<(), OntologyError> {
        for r in [&e.src_rel, &e.dst_rel] {
            if !self.relations.contains_key(r) {
                return Err(OntologyError::UnknownRelation(r.0.clone()));
            }
        }
        for c in [&e.src_concept, &e.dst_concept] {
            if !self.concepts.contains_key(c) {
                return Err(OntologyError::UnknownConcept(c.0.clone()));
            }
        }
        self.causal_from.entry((e.src_rel.clone(), e.src_concept.clone())).or_default().push(self.causal.len());
        self.causal.push(e);
        Ok(())
    }

    pub fn add_qualsub(&mut self, specific: &str, general: &str) {
        self.qual_general.entry(specific.to_string()).or_default().push(general.to_string());
    }

    /// Reject cycles in the is-a and relation hierarchies.
    pub fn check_acyclic(&self) -> Result<(), OntologyError> {
        fn visit<K: Clone + Eq + std::hash::Hash + fmt::Display>(
            start: &K,
            edges: &HashMap<K, Vec<K>>,
            state: &mut HashMap<K, u8>,
            family: &'static str,
        ) -> Result<(), OntologyError> {
            // iterative DFS: 1 = on stack, 2 = done
            let mut stack: Vec<(K, usize)> = vec![(start.clone(), 0)];
            state.insert(start.clone(), 1);
            while let Some((node, idx)) = stack.pop() {
                let next = edges.get(&node).and_then(|v| v.get(idx)).cloned();
                match next {
                    Some(n) => {
                        stack.push((node, idx + 1));
                        match state.get(&n) {
                            Some(1) => return Err(OntologyError::Cycle { family, node: n.to_string() }),
                            Some(_) => {}
                            None => {
                                state.insert(n.clone(), 1);
                                stack.push((n, 0));
                            }
                        }
                    }
                    None => {
                        state.insert(node, 2);
                    }
                }
            }
            Ok(())
        }
        let mut state = HashMap::new();
        let mut keys: Vec<&ConceptId> = self.parents.keys().collect();
        keys.sort();
        for k in keys {
            if !state.contains_key(k) {
                visit(k, &self.parents, &mut state, "is-a")?;
            }
        }
        let mut state = HashMap::new();
        let mut keys: Vec<&RelationId> = self.rel_general.keys().collect();
        keys.sort();
        for k in keys {
            if !state.contains_key(k) {
                visit(k, &self.rel_general, &mut state, "relation")?;
            }
        }
        Ok(())
    }

    pub fn concept(&self, id: &ConceptId) -> Option<&Concept> {
        self.concepts.get(id)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.concepts.values()
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn concept_by_token(&self, token: &str) -> Option<&ConceptId> {
        self.by_token.get(token)
    }

    pub fn token_of(&self, id: &ConceptId) -> Option<&str> {
        self.concepts.get(id).map(|c| c.token.as_str())
    }

    pub fn relation_family(&self, r: &RelationId) -> Option<RelationFamily> {
        self.relations.get(r).copied()
    }

    pub fn relations(&self) -> impl Iterator<Item = (&RelationId, &RelationFamily)> {
        self.relations.iter()
    }

    pub fn parents(&self, c: &ConceptId) -> &[ConceptId] {
        self.parents.get(c).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn children(&self, c: &ConceptId) -> &[ConceptId] {
        self.children.get(c).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn causal_edges(&self) -> &[CausalEdge] {
        &self.causal
    }

    pub fn causal_edges_from(&self, rel: &RelationId, concept: &ConceptId) -> impl Iterator<Item = &CausalEdge> {
        self.causal_from
            .get(&(rel.clone(), concept.clone()))
            .into_iter()
            .flatten()
            .map(move |&i| &self.causal[i])
    }

    /// Strict ancestors within `max_hops`, with their shortest hop distance,
    /// in breadth-first order.
    pub fn ancestors(&self, c: &ConceptId, max_hops: usize) -> Vec<(ConceptId, usize)> {
        bfs(c, max_hops, |x| self.parents(x))
    }

    /// Strict descendants within `max_hops`.
    pub fn descendants(&self, c: &ConceptId, max_hops: usize) -> Vec<(ConceptId, usize)> {
        bfs(c, max_hops, |x| self.children(x))
    }

    /// `ancestor` is `descendant` or one of its is-a ancestors.
    pub fn concept_subsumes(&self, ancestor: &ConceptId, descendant: &ConceptId) -> bool {
        if ancestor == descendant {
            return true;
        }
        let mut seen = HashSet::new();
        let mut stack = vec![descendant];
        while let Some(x) = stack.pop() {
            for p in self.parents(x) {
                if p == ancestor {
                    return true;
                }
                if seen.insert(p) {
                    stack.push(p);
                }
            }
        }
        false
    }

    /// Same check over name tokens. Tokens unknown to the ontology only
    /// subsume themselves.
    pub fn token_subsumes(&self, ancestor: &str, descendant: &str) -> bool {
        if ancestor == descendant {
            return true;
        }
        match (self.concept_by_token(ancestor), self.concept_by_token(descendant)) {
            (Some(a), Some(d)) => self.concept_subsumes(a, d),
            _ => false,
        }
    }

    /// `general` equals `specific` or is reachable from it through relation
    /// generality edges.
    pub fn relation_subsumes(&self, general: &RelationId, specific: &RelationId) -> bool {
        if general == specific {
            return true;
        }
        let mut seen = HashSet::new();
        let mut stack = vec![specific];
        while let Some(x) = stack.pop() {
            for g in self.rel_general.get(x).into_iter().flatten() {
                if g == general {
                    return true;
                }
                if seen.insert(g) {
                    stack.push(g);
                }
            }
        }
        false
    }

    /// All (general, specific) relation pairs, reflexive pairs included.
    pub fn relation_closure(&self) -> BTreeSet<(RelationId, RelationId)> {
        let mut out = BTreeSet::new();
        for r in self.relations.keys() {
            for g in self.relations.keys() {
                if self.relation_subsumes(g, r) {
                    out.insert((g.clone(), r.clone()));
                }
            }
        }
        out
    }

    /// Single-edge causal check: `specific` equals `general` or an edge leads
    /// straight from `specific` to `general`.
    pub fn causal_subsumes(&self, general: (&RelationId, &ConceptId), specific: (&RelationId, &ConceptId)) -> bool {
        if general == specific {
            return true;
        }
        self.causal_edges_from(specific.0, specific.1)
            .any(|e| (&e.dst_rel, &e.dst_concept) == general)
    }

    /// Composed causal check over chains of at most `max_depth` edges.
    pub fn causal_subsumes_composed(&self, general: (&RelationId, &ConceptId), specific: (&RelationId, &ConceptId), max_depth: usize) -> bool {
        if general == specific {
            return true;
        }
        let mut seen: HashSet<(RelationId, ConceptId)> = HashSet::new();
        let mut queue = VecDeque::from([((specific.0.clone(), specific.1.clone()), 0usize)]);
        while let Some(((r, c), d)) = queue.pop_front() {
            if d == max_depth {
                continue;
            }
            for e in self.causal_edges_from(&r, &c) {
                if (&e.dst_rel, &e.dst_concept) == general {
                    return true;
                }
                let key = (e.dst_rel.clone(), e.dst_concept.clone());
                if seen.insert(key.clone()) {
                    queue.push_back((key, d + 1));
                }
            }
        }
        false
    }

    /// Qualifier generality. Timeframe tokens compare by window containment;
    /// other qualifiers use declared edges.
    pub fn qualifier_subsumes(&self, general: &str, specific: &str) -> bool {
        if general == specific {
            return true;
        }
        if let (Some(g), Some(s)) = (Timeframe::parse(general), Timeframe::parse(specific)) {
            if g.window().contains(&s.window()) {
                return true;
            }
        }
        let mut seen = HashSet::new();
        let mut stack = vec![specific.to_string()];
        while let Some(x) = stack.pop() {
            for g in self.qual_general.get(&x).into_iter().flatten() {
                if g == general {
                    return true;
                }
                if seen.insert(g.clone()) {
                    stack.push(g.clone());
                }
            }
        }
        false
    }

    /// Stable digest of the ontology content, stored alongside built indexes.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for c in self.concepts.values() {
            h.update(format!("c|{}|{}\n", c.id, c.token));
        }
        let mut isa: Vec<_> = self.parents.iter().flat_map(|(c, ps)| ps.iter().map(move |p| (c, p))).collect();
        isa.sort();
        for (c, p) in isa {
            h.update(format!("i|{c}|{p}\n"));
        }
        for (r, f) in &self.relations {
            h.update(format!("r|{r}|{f:?}\n"));
        }
        let mut rs: Vec<_> = self.rel_general.iter().flat_map(|(s, gs)| gs.iter().map(move |g| (s, g))).collect();
        rs.sort();
        for (s, g) in rs {
            h.update(format!("s|{s}|{g}\n"));
        }
        for e in &self.causal {
            h.update(format!("e|{}|{}|{}|{}|{}|{:?}\n", e.id, e.src_rel, e.src_concept, e.dst_rel, e.dst_concept, e.status));
        }
        for (s, g) in self.qualifier_edges() {
            h.update(format!("q|{s}|{g}\n"));
        }
        h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
    }

    fn qualifier_edges(&self) -> Vec<(&String, &String)> {
        let mut qs: Vec<_> = self.qual_general.iter().flat_map(|(s, gs)| gs.iter().map(move |g| (s, g))).collect();
        qs.sort();
        qs
    }

    /// Render in the line format `from_jsonl` reads. Built-in relations are
    /// omitted.
    pub fn to_jsonl(&self) -> String {
        use serde_json::json;
        let builtin = Ontology::new();
        let mut lines = Vec::new();
        for c in self.concepts.values() {
            lines.push(json!({"type": "concept", "id": c.id.0, "token": c.token, "label": c.label}));
        }
        for (r, f) in &self.relations {
            if builtin.relations.get(r) != Some(f) {
                lines.push(json!({"type": "relation", "id": r.0, "family": f}));
            }
        }
        let mut isa: Vec<_> = self.parents.iter().flat_map(|(c, ps)| ps.iter().map(move |p| (c, p))).collect();
        isa.sort();
        for (c, p) in isa {
            lines.push(json!({"type": "isa", "child": c.0, "parent": p.0}));
        }
        let mut rs: Vec<_> = self.rel_general.iter().flat_map(|(s, gs)| gs.iter().map(move |g| (s, g))).collect();
        rs.sort();
        for (s, g) in rs {
            lines.push(json!({"type": "relsub", "specific": s.0, "general": g.0}));
        }
        for e in &self.causal {
            lines.push(json!({"type": "causal", "id": e.id, "src_rel": e.src_rel.0, "src_concept": e.src_concept.0, "dst_rel": e.dst_rel.0, "dst_concept": e.dst_concept.0, "status": e.status}));
        }
        for (s, g) in self.qualifier_edges() {
            lines.push(json!({"type": "qualsub", "specific": s, "general": g}));
        }
        let mut out: String = lines.iter().map(|l| format!("{l}\n")).collect();
        if out.is_empty() {
            out.push('\n');
        }
        out
    }
}

fn bfs<'a, F>(start: &'a ConceptId, max_hops: usize, next: F) -> Vec<(ConceptId, usize)>
where
    F: Fn(&ConceptId) -> &'a [ConceptId],
{
    let mut out = Vec::new();
    let mut seen: HashSet<&ConceptId> = HashSet::from([start]);
    let mut frontier = vec![start];
    for hop in 1..=max_hops {
        let mut nxt = Vec::new();
        for x in frontier {
            for y in next(x) {
                if seen.insert(y) {
                    out.push((y.clone(), hop));
                    nxt.push(y);
                }
            }
        }
        if nxt.is_empty() {
            break;
        }
        frontier = nxt;
    }
    out
}
