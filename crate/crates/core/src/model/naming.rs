//! Grammar of schematized variable names.
//!
//! A canonical name grounds a relation, a concept token, an optional
//! timeframe, and qualifiers:
//!
//! ```text
//! patient_has_finding_of_{entity}[_{timeframe}][@@{qualifier}]*
//! patient_has_undergone_{entity}[_{timeframe}][_outcome_is_{status}]
//! patients_{entity}_is_{status}[_{timeframe}]
//! patient_{entity}_value_recorded[_{timeframe}]_withunit_{unit}
//! patient_age_value_recorded[_{timeframe}]_in_{years|months|days}
//! patient_sex_is_{male|female|other}[_{timeframe}]
//! patient_is_pregnant[_{timeframe}]            (and the other status flags)
//! patient_chief_complaint_is_{entity}[_{timeframe}]
//! trial_treats_{entity}                        (and the other intents)
//! ```
//!
//! Patient facts usually omit the timeframe; their time is carried by
//! explicit windows instead.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{vocab, RelationId, Status};
use crate::temporal::Timeframe;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NameError {
    #[error("`{0}` matches no variable name template")]
    UnrecognizedStem(String),
    #[error("`{name}`: {msg}")]
    Invalid { name: String, msg: String },
}

/// Relations whose names are `{prefix}{entity}`.
const PREFIXES: &[(&str, &str)] = &[
    (vocab::HAS_DIAGNOSIS_OF, "patient_has_diagnosis_of_"),
    (vocab::HAS_FINDING_OF, "patient_has_finding_of_"),
    (vocab::HAS_SYMPTOMS_OF, "patient_has_symptoms_of_"),
    (vocab::HAS_CLINICAL_SIGNS_OF, "patient_has_clinical_signs_of_"),
    (vocab::HAS_SUSPICION_OF, "patient_has_suspicion_of_"),
    (vocab::HAS_UNDERGONE, "patient_has_undergone_"),
    (vocab::IS_UNDERGOING, "patient_is_undergoing_"),
    (vocab::NEEDS_TO_UNDERGO, "patient_needs_to_undergo_"),
    (vocab::WILL_UNDERGO, "patient_will_undergo_"),
    (vocab::CAN_UNDERGO, "patient_can_undergo_"),
    (vocab::IS_TAKING, "patient_is_taking_"),
    (vocab::HAS_TAKEN, "patient_has_taken_"),
    (vocab::HAS_HYPERSENSITIVITY_TO, "patient_has_hypersensitivity_to_"),
    (vocab::HAS_NONIMMUNE_HYPERSENSITIVITY_TO, "patient_has_nonimmune_hypersensitivity_to_"),
    (vocab::HAS_INTOLERANCE_TO, "patient_has_intolerance_to_"),
    (vocab::HAS_ALLERGY_TO, "patient_has_allergy_to_"),
    (vocab::IS_EXPOSED_TO, "patient_is_exposed_to_"),
    (vocab::HAS_BEEN_EXPOSED_TO, "patient_has_been_exposed_to_"),
    (vocab::CHIEF_COMPLAINT, "patient_chief_complaint_is_"),
    (vocab::CHIEF_COMPLAINT_RELATED, "patient_related_complaint_is_"),
    (vocab::ANY_IMPORTANT_COMPLAINT, "patient_important_complaint_is_"),
    (vocab::PREVENTION_TARGET, "patient_prevention_target_is_"),
    (vocab::TREATS, "trial_treats_"),
    (vocab::PREVENTS, "trial_prevents_"),
    (vocab::OTHER, "trial_other_intent_for_"),
    (vocab::NOT_CLINICALLY_RELEVANT, "trial_not_relevant_to_"),
    (vocab::IMPROVES_EFFECTIVENESS, "trial_improves_effectiveness_of_"),
    (vocab::REDUCES_PROCEDURE_RELATED_HARMS, "trial_reduces_procedure_harms_of_"),
    (vocab::REDUCES_EXPOSURE_USE, "trial_reduces_exposure_to_"),
    (vocab::MITIGATES_HARMS, "trial_mitigates_harms_of_"),
    (vocab::ENHANCES_BENEFITS, "trial_enhances_benefits_of_"),
];

/// Demographic flags. The concept token is the stem without `patient_`.
pub const DEMOGRAPHIC_FLAGS: &[&str] = &[
    "is_pregnant",
    "is_able_to_be_pregnant",
    "has_childbearing_potential",
    "is_breastfeeding",
    "is_lactating",
    "is_postmenopausal",
    "is_premenopausal",
    "is_perimenopausal",
    "is_in_transition_to_menopausal",
    "is_infertile",
    "is_postpartum",
    "is_postabortion",
    "is_inpatient",
    "is_outpatient",
    "has_been_inpatient",
    "has_been_outpatient",
    "is_emergency_department_patient",
    "is_long_term_care_resident",
    "is_nursing_home_resident",
    "is_assisted_living_resident",
    "is_neonate",
    "is_toddler",
    "is_preschooler",
    "is_school_aged",
    "is_child",
    "is_adolescent",
    "is_adult",
    "is_middle_aged",
    "is_older_adult",
];

pub const SEXES: &[&str] = &["male", "female", "other"];
pub const AGE_UNITS: &[&str] = &["years", "months", "days"];
pub const AGE_CONCEPT: &str = "age";

pub fn status_relation(s: Status) -> &'static str {
    match s {
        Status::Positive => vocab::IS_POSITIVE,
        Status::Negative => vocab::IS_NEGATIVE,
        Status::Normal => vocab::IS_NORMAL,
        Status::Abnormal => vocab::IS_ABNORMAL,
    }
}

fn relation_status(r: &str) -> Option<Status> {
    Status::ALL.into_iter().find(|s| status_relation(*s) == r)
}

pub fn prefix_of(relation: &str) -> Option<&'static str> {
    PREFIXES.iter().find(|(r, _)| *r == relation).map(|(_, p)| *p)
}

/// Relations that can be rendered as names.
pub fn nameable_relation(relation: &str) -> bool {
    prefix_of(relation).is_some()
        || relation_status(relation).is_some()
        || [vocab::VALUE_RECORDED, vocab::AGE_VALUE_RECORDED, vocab::SEX_IS, vocab::DEMOGRAPHIC_STATUS].contains(&relation)
}

/// Concepts that the grammar supplies without an ontology entry.
pub fn is_builtin_concept(relation: &str, concept: &str) -> bool {
    match relation {
        vocab::AGE_VALUE_RECORDED => concept == AGE_CONCEPT,
        vocab::SEX_IS => SEXES.contains(&concept),
        vocab::DEMOGRAPHIC_STATUS => DEMOGRAPHIC_FLAGS.contains(&concept),
        _ => false,
    }
}

/// `[a-z0-9]+(_[a-z0-9]+)*`
pub fn is_token(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with('_')
        && !s.ends_with('_')
        && !s.contains("__")
        && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VariableName {
    pub relation: RelationId,
    /// Concept token (snake case).
    pub concept: String,
    pub timeframe: Option<Timeframe>,
    /// Procedure outcome (`_outcome_is_{status}`).
    pub outcome: Option<Status>,
    /// Measurement unit for numeric stems.
    pub unit: Option<String>,
    /// Free qualifiers in written order.
    pub qualifiers: Vec<String>,
}

impl VariableName {
    pub fn new(relation: &str, concept: &str) -> Self {
        VariableName {
            relation: RelationId::new(relation),
            concept: concept.to_string(),
            timeframe: None,
            outcome: None,
            unit: None,
            qualifiers: Vec::new(),
        }
    }

    pub fn with_timeframe(mut self, tf: Option<Timeframe>) -> Self {
        self.timeframe = tf;
        self
    }

    pub fn with_outcome(mut self, o: Option<Status>) -> Self {
        self.outcome = o;
        self
    }

    pub fn with_unit(mut self, u: &str) -> Self {
        self.unit = Some(u.to_string());
        self
    }

    pub fn with_qualifier(mut self, q: &str) -> Self {
        self.qualifiers.push(q.to_string());
        self
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self.relation.as_str(), vocab::VALUE_RECORDED | vocab::AGE_VALUE_RECORDED)
    }

    /// Qualifiers sorted and deduplicated, for identity comparisons.
    pub fn qualifier_set(&self) -> Vec<String> {
        let mut q = self.qualifiers.clone();
        q.sort();
        q.dedup();
        q
    }

    /// The same name without free qualifiers.
    pub fn stem(&self) -> VariableName {
        VariableName { qualifiers: Vec::new(), ..self.clone() }
    }

    /// Check that rendering this name parses back to it.
    pub fn validate(&self) -> Result<(), NameError> {
        let bad = |msg: &str| Err(NameError::Invalid { name: self.render_unchecked(), msg: msg.to_string() });
        let r = self.relation.as_str();
        if !is_token(&self.concept) {
            return bad("concept is not a snake-case token");
        }
        for q in &self.qualifiers {
            if !is_token(q) {
                return bad("qualifier is not a snake-case token");
            }
        }
        if let Some(last) = self.concept.rsplit('_').next() {
            if Timeframe::parse(last).is_some() {
                return bad("concept ends with a timeframe token");
            }
        }
        if self.concept.contains("value_recorded") || self.concept.contains("withunit") || self.concept.contains("outcome_is") {
            return bad("concept contains a reserved segment");
        }
        if self.outcome.is_some() && r != vocab::HAS_UNDERGONE {
            return bad("outcome only applies to procedures undergone");
        }
        match r {
            vocab::VALUE_RECORDED => match &self.unit {
                Some(u) if is_token(u) => {}
                _ => return bad("numeric stem needs a unit token"),
            },
            vocab::AGE_VALUE_RECORDED => {
                if self.concept != AGE_CONCEPT || !self.unit.as_deref().is_some_and(|u| AGE_UNITS.contains(&u)) {
                    return bad("age stem needs concept `age` and a years/months/days unit");
                }
            }
            _ if self.unit.is_some() => return bad("unit only applies to numeric stems"),
            vocab::SEX_IS if !SEXES.contains(&self.concept.as_str()) => return bad("unknown sex"),
            vocab::DEMOGRAPHIC_STATUS if !DEMOGRAPHIC_FLAGS.contains(&self.concept.as_str()) => return bad("unknown demographic flag"),
            _ => {}
        }
        if relation_status(r).is_some() {
            for s in Status::ALL {
                if self.concept.ends_with(&format!("_is_{}", s.as_str())) {
                    return bad("status concept ends with a status suffix");
                }
            }
        }
        if !nameable_relation(r) {
            return bad("relation has no name template");
        }
        if prefix_of(r).is_some() {
            // The parser tries the fixed stems first; the rendered name must not
            // collide with one of them.
            let rendered = self.render_unchecked();
            let reparsed = parse_variable_name(&rendered);
            if reparsed.as_ref() != Ok(self) {
                return bad("rendered name is ambiguous");
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        self.render_unchecked()
    }

    fn render_unchecked(&self) -> String {
        let r = self.relation.as_str();
        let tf = self.timeframe.map(|t| format!("_{t}")).unwrap_or_default();
        let mut s = if let Some(p) = prefix_of(r) {
            let out = self.outcome.map(|o| format!("_outcome_is_{}", o.as_str())).unwrap_or_default();
            format!("{p}{}{tf}{out}", self.concept)
        } else if let Some(st) = relation_status(r) {
            format!("patients_{}_is_{}{tf}", self.concept, st.as_str())
        } else {
            match r {
                vocab::VALUE_RECORDED => format!(
                    "patient_{}_value_recorded{tf}_withunit_{}",
                    self.concept,
                    self.unit.as_deref().unwrap_or("")
                ),
                vocab::AGE_VALUE_RECORDED => format!("patient_age_value_recorded{tf}_in_{}", self.unit.as_deref().unwrap_or("")),
                vocab::SEX_IS => format!("patient_sex_is_{}{tf}", self.concept),
                vocab::DEMOGRAPHIC_STATUS => format!("patient_{}{tf}", self.concept),
                other => format!("{other}_{}{tf}", self.concept),
            }
        };
        for q in &self.qualifiers {
            s.push_str("@@");
            s.push_str(q);
        }
        s
    }
}

impl fmt::Display for VariableName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Split a trailing `_{timeframe}` off `base`.
fn split_timeframe(base: &str) -> (&str, Option<Timeframe>) {
    if let Some(idx) = base.rfind('_') {
        if let Some(tf) = Timeframe::parse(&base[idx + 1..]) {
            return (&base[..idx], Some(tf));
        }
    }
    (base, None)
}

/// Parse a symbol into a canonical name.
pub fn parse_variable_name(symbol: &str) -> Result<VariableName, NameError> {
    let unrecognized = || NameError::UnrecognizedStem(symbol.to_string());
    let mut parts = symbol.split("@@");
    let base = parts.next().unwrap_or("");
    let qualifiers: Vec<String> = parts.map(str::to_string).collect();
    if qualifiers.iter().any(|q| !is_token(q)) {
        return Err(unrecognized());
    }
    let mut name = parse_base(base).ok_or_else(unrecognized)?;
    name.qualifiers = qualifiers;
    if !is_token(&name.concept) {
        return Err(unrecognized());
    }
    if let Some(last) = name.concept.rsplit('_').next() {
        if Timeframe::parse(last).is_some() {
            return Err(unrecognized());
        }
    }
    Ok(name)
}

fn parse_base(base: &str) -> Option<VariableName> {
    // Fixed stems first.
    {
        let (stem, tf) = split_timeframe(base);
        if let Some(flag) = stem.strip_prefix("patient_") {
            if DEMOGRAPHIC_FLAGS.contains(&flag) {
                return Some(VariableName::new(vocab::DEMOGRAPHIC_STATUS, flag).with_timeframe(tf));
            }
        }
        if let Some(sex) = stem.strip_prefix("patient_sex_is_") {
            if SEXES.contains(&sex) {
                return Some(VariableName::new(vocab::SEX_IS, sex).with_timeframe(tf));
            }
        }
    }
    if let Some(rest) = base.strip_prefix("patient_age_value_recorded") {
        let (before, unit) = rest.rsplit_once("_in_")?;
        if !AGE_UNITS.contains(&unit) {
            return None;
        }
        let tf = match before {
            "" => None,
            s => Some(Timeframe::parse(s.strip_prefix('_')?)?),
        };
        return Some(VariableName::new(vocab::AGE_VALUE_RECORDED, AGE_CONCEPT).with_timeframe(tf).with_unit(unit));
    }
    if let (Some(rest), Some(_)) = (base.strip_prefix("patient_"), base.find("_withunit_")) {
        if let Some(vr) = rest.find("_value_recorded") {
            let concept = &rest[..vr];
            let after = &rest[vr + "_value_recorded".len()..];
            let (mid, unit) = after.split_once("_withunit_")?;
            let tf = match mid {
                "" => None,
                s => Some(Timeframe::parse(s.strip_prefix('_')?)?),
            };
            if !is_token(unit) || concept.contains("value_recorded") {
                return None;
            }
            return Some(VariableName::new(vocab::VALUE_RECORDED, concept).with_timeframe(tf).with_unit(unit));
        }
    }
    if let Some(rest) = base.strip_prefix("patients_") {
        let (stem, tf) = split_timeframe(rest);
        for s in Status::ALL {
            if let Some(concept) = stem.strip_suffix(&format!("_is_{}", s.as_str())) {
                return Some(VariableName::new(status_relation(s), concept).with_timeframe(tf));
            }
        }
        return None;
    }
    let mut best: Option<(&str, &str)> = None;
    for (rel, prefix) in PREFIXES {
        if base.starts_with(prefix) && best.map_or(true, |(_, p)| prefix.len() > p.len()) {
            best = Some((rel, prefix));
        }
    }
    let (rel, prefix) = best?;
    let rest = &base[prefix.len()..];
    let (rest, outcome) = match (rel, rest.rfind("_outcome_is_")) {
        (vocab::HAS_UNDERGONE, Some(i)) => {
            let st = Status::parse(&rest[i + "_outcome_is_".len()..])?;
            (&rest[..i], Some(st))
        }
        _ => (rest, None),
    };
    let (concept, tf) = split_timeframe(rest);
    Some(VariableName::new(rel, concept).with_timeframe(tf).with_outcome(outcome))
}
