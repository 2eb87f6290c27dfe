//! Materialization of the entailed patient fact set.
//!
//! Each pass applies three stages to the facts that were new in the previous
//! pass: is-a ancestors, relation rules, and causal edges. Stage outputs only
//! feed later passes. Windows are always copied from the source fact.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::naming::status_relation;
use crate::model::{parse_variable_name, VariableName};
use crate::ontology::{vocab, Ontology, RelationId};
use crate::smt::{FactValue, PatientFactRecord};
use crate::temporal::{TimeWindow, Timeframe};

pub const DEFAULT_RULES: &str = include_str!("../assets/closure_rules.json");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ClosureError {
    #[error("rules file: {0}")]
    Json(String),
    #[error("rule `{rule}`: template `{template}`: {msg}")]
    Template { rule: String, template: String, msg: String },
    #[error("rule `{rule}`: {msg}")]
    TemplateBind { rule: String, msg: String },
    #[error("rule `{rule}`: unsupported produce type `{sort}`")]
    UnsupportedSort { rule: String, sort: String },
    #[error("collapse_timeframes=true is not supported")]
    CollapseTimeframes,
}

/// Identity of a fact for deduplication.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DedupKey {
    pub name: String,
    pub value: FactValue,
    pub possible: TimeWindow,
    pub certain: TimeWindow,
}

impl DedupKey {
    pub fn of(r: &PatientFactRecord) -> Self {
        DedupKey { name: r.name.render(), value: r.value.clone(), possible: r.possible.clone(), certain: r.certain.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Concept,
    Rule,
    Causal,
    NegativeDescendant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derivation {
    pub stage: Stage,
    /// Rule id, causal edge id, or the ancestor concept id.
    pub via: String,
    pub from: DedupKey,
    /// Accumulated is-a hops along the derivation chain.
    pub hop: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub record: PatientFactRecord,
    pub derivation: Option<Derivation>,
}

impl Fact {
    pub fn key(&self) -> DedupKey {
        DedupKey::of(&self.record)
    }

    pub fn hop(&self) -> usize {
        self.derivation.as_ref().map_or(0, |d| d.hop)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosureConfig {
    pub max_passes: usize,
    pub max_hops_concept: usize,
    pub max_derived_per_pass: usize,
    pub enable_negative_descendants: bool,
    pub concept_stage: bool,
    pub rule_stage: bool,
    pub causal_stage: bool,
}

impl Default for ClosureConfig {
    fn default() -> Self {
        ClosureConfig {
            max_passes: 8,
            max_hops_concept: 16,
            max_derived_per_pass: 100_000,
            enable_negative_descendants: false,
            concept_stage: true,
            rule_stage: true,
            causal_stage: true,
        }
    }
}

/// A template with `{e}` and `{t}` holes, held in parsed form.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub name: VariableName,
    pub entity_hole: bool,
    pub time_hole: bool,
}

const ENTITY_PLACEHOLDER: &str = "zzentityzz";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Binding {
    pub entity: Option<String>,
    pub timeframe: Option<Timeframe>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Template, String> {
        let entity_hole = text.contains("{e}");
        let time_hole = text.contains("{t}");
        let filled = text.replace("{e}", ENTITY_PLACEHOLDER).replace("{t}", "now");
        if filled.contains('{') || filled.contains('}') {
            return Err("unknown hole".into());
        }
        let name = parse_variable_name(&filled).map_err(|e| e.to_string())?;
        if name.render() != filled {
            return Err("template is not in canonical form".into());
        }
        if entity_hole && name.concept != ENTITY_PLACEHOLDER {
            return Err("`{e}` must fill the concept slot".into());
        }
        if time_hole && name.timeframe != Some(Timeframe::Now) {
            return Err("`{t}` must fill the timeframe slot".into());
        }
        if !name.qualifiers.is_empty() {
            return Err("templates carry no qualifiers".into());
        }
        Ok(Template { name, entity_hole, time_hole })
    }

    pub fn matches(&self, n: &VariableName) -> Option<Binding> {
        let t = &self.name;
        if t.relation != n.relation || t.outcome != n.outcome || t.unit != n.unit {
            return None;
        }
        let mut b = Binding::default();
        if self.entity_hole {
            b.entity = Some(n.concept.clone());
        } else if t.concept != n.concept {
            return None;
        }
        if self.time_hole {
            b.timeframe = n.timeframe;
        } else if t.timeframe != n.timeframe {
            return None;
        }
        Some(b)
    }

    pub fn instantiate(&self, b: &Binding, qualifiers: &[String]) -> VariableName {
        let mut n = self.name.clone();
        if self.entity_hole {
            n.concept = b.entity.clone().unwrap_or_default();
        }
        if self.time_hole {
            n.timeframe = b.timeframe;
        }
        n.qualifiers = qualifiers.to_vec();
        n
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Produce {
    pub template: Template,
    pub value: bool,
    pub preserve_qualifiers: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationRule {
    pub id: String,
    pub template: Template,
    pub require_bool: bool,
    pub produce: Vec<Produce>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RuleSet {
    pub rules: Vec<RelationRule>,
    pub collapse_timeframes: bool,
}

#[derive(Deserialize)]
struct RawRules {
    rules: Vec<RawRule>,
    #[serde(default)]
    timeframe_implication: Option<RawTimeframeImplication>,
}

#[derive(Deserialize)]
struct RawTimeframeImplication {
    #[serde(default)]
    collapse_timeframes: bool,
}

#[derive(Deserialize)]
struct RawRule {
    id: String,
    match_template: String,
    require_bool: bool,
    produce: Vec<RawProduce>,
}

#[derive(Deserialize)]
struct RawProduce {
    template: String,
    #[serde(rename = "type")]
    sort: String,
    value: bool,
    #[serde(default)]
    preserve_qualifiers: bool,
}

impl RuleSet {
    pub fn empty() -> Self {
        RuleSet { rules: Vec::new(), collapse_timeframes: false }
    }

    /// The shipped rule inventory.
    pub fn default_rules() -> Self {
        RuleSet::from_json(DEFAULT_RULES).expect("shipped rules parse")
    }

    pub fn from_json(text: &str) -> Result<Self, ClosureError> {
        let raw: RawRules = serde_json::from_str(text).map_err(|e| ClosureError::Json(e.to_string()))?;
        let collapse = raw.timeframe_implication.map(|t| t.collapse_timeframes).unwrap_or(false);
        if collapse {
            return Err(ClosureError::CollapseTimeframes);
        }
        let mut rules = Vec::with_capacity(raw.rules.len());
        for r in raw.rules {
            let tmpl = |text: &str| {
                Template::parse(text).map_err(|msg| ClosureError::Template { rule: r.id.clone(), template: text.to_string(), msg })
            };
            let template = tmpl(&r.match_template)?;
            let mut produce = Vec::new();
            for p in &r.produce {
                if p.sort != "Bool" {
                    return Err(ClosureError::UnsupportedSort { rule: r.id.clone(), sort: p.sort.clone() });
                }
                let t = tmpl(&p.template)?;
                if (t.entity_hole && !template.entity_hole) || (t.time_hole && !template.time_hole) {
                    return Err(ClosureError::TemplateBind { rule: r.id.clone(), msg: format!("`{}` uses a hole the match template does not bind", p.template) });
                }
                produce.push(Produce { template: t, value: p.value, preserve_qualifiers: p.preserve_qualifiers });
            }
            rules.push(RelationRule { id: r.id, template, require_bool: r.require_bool, produce });
        }
        Ok(RuleSet { rules, collapse_timeframes: false })
    }
}

fn derived(src: &Fact, name: VariableName, value: bool, stage: Stage, via: &str, hop: usize) -> Fact {
    let record = PatientFactRecord {
        name,
        value: FactValue::Bool(value),
        certain: src.record.certain.clone(),
        possible: src.record.possible.clone(),
        source: src.record.source.clone(),
    };
    Fact { record, derivation: Some(Derivation { stage, via: via.to_string(), from: src.key(), hop }) }
}

/// Ancestor facts of a positive fact within the hop budget.
pub fn concept_closure(fact: &Fact, o: &Ontology, cfg: &ClosureConfig) -> Vec<Fact> {
    if fact.record.value != FactValue::Bool(true) {
        return Vec::new();
    }
    let budget = cfg.max_hops_concept.saturating_sub(fact.hop());
    let Some(c) = o.concept_by_token(&fact.record.name.concept) else { return Vec::new() };
    let mut out = Vec::new();
    for (anc, d) in o.ancestors(c, budget) {
        let Some(token) = o.token_of(&anc) else { continue };
        let name = VariableName { concept: token.to_string(), ..fact.record.name.clone() };
        out.push(derived(fact, name, true, Stage::Concept, anc.as_str(), fact.hop() + d));
    }
    out
}

/// A negated fact also negates every descendant concept.
pub fn negative_descendants(fact: &Fact, o: &Ontology, cfg: &ClosureConfig) -> Vec<Fact> {
    if fact.record.value != FactValue::Bool(false) {
        return Vec::new();
    }
    let budget = cfg.max_hops_concept.saturating_sub(fact.hop());
    let Some(c) = o.concept_by_token(&fact.record.name.concept) else { return Vec::new() };
    let mut out = Vec::new();
    for (desc, d) in o.descendants(c, budget) {
        let Some(token) = o.token_of(&desc) else { continue };
        let name = VariableName { concept: token.to_string(), ..fact.record.name.clone() };
        out.push(derived(fact, name, false, Stage::NegativeDescendant, desc.as_str(), fact.hop() + d));
    }
    out
}

pub fn rule_closure(fact: &Fact, rules: &RuleSet) -> Vec<Fact> {
    let FactValue::Bool(v) = fact.record.value else { return Vec::new() };
    let mut out = Vec::new();
    for r in &rules.rules {
        if r.require_bool != v {
            continue;
        }
        let Some(b) = r.template.matches(&fact.record.name) else { continue };
        for p in &r.produce {
            let quals: &[String] = if p.preserve_qualifiers { &fact.record.name.qualifiers } else { &[] };
            let name = p.template.instantiate(&b, quals);
            out.push(derived(fact, name, p.value, Stage::Rule, &r.id, fact.hop()));
        }
    }
    out
}

pub fn causal_closure(fact: &Fact, o: &Ontology) -> Vec<Fact> {
    if fact.record.value != FactValue::Bool(true) {
        return Vec::new();
    }
    let n = &fact.record.name;
    let Some(c) = o.concept_by_token(&n.concept) else { return Vec::new() };
    let mut out = Vec::new();
    for e in o.causal_edges_from(&n.relation, c) {
        let Some(token) = o.token_of(&e.dst_concept) else { continue };
        let (relation, outcome) = match e.status {
            Some(s) if e.dst_rel.as_str() == vocab::HAS_UNDERGONE => (e.dst_rel.clone(), Some(s)),
            Some(s) => (RelationId::new(status_relation(s)), None),
            None => (e.dst_rel.clone(), None),
        };
        let name = VariableName {
            relation,
            concept: token.to_string(),
            timeframe: n.timeframe,
            outcome,
            unit: None,
            qualifiers: n.qualifiers.clone(),
        };
        if let Err(err) = name.validate() {
            log::debug!("causal edge {} skipped: {err}", e.id);
            continue;
        }
        out.push(derived(fact, name, true, Stage::Causal, &e.id, fact.hop()));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosureReport {
    pub passes: usize,
    pub fixpoint: bool,
    pub input: usize,
    pub derived: usize,
    /// Candidates dropped by the per-pass cap.
    pub truncated: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Closure {
    /// Facts ordered by key.
    pub facts: Vec<Fact>,
    pub report: ClosureReport,
}

impl Closure {
    pub fn records(&self) -> impl Iterator<Item = &PatientFactRecord> {
        self.facts.iter().map(|f| &f.record)
    }

    pub fn keys(&self) -> Vec<DedupKey> {
        self.facts.iter().map(Fact::key).collect()
    }
}

fn stage_outputs(f: &Fact, o: &Ontology, rules: &RuleSet, cfg: &ClosureConfig) -> Vec<Fact> {
    let mut out = Vec::new();
    if cfg.concept_stage {
        out.extend(concept_closure(f, o, cfg));
        if cfg.enable_negative_descendants {
            out.extend(negative_descendants(f, o, cfg));
        }
    }
    if cfg.rule_stage {
        out.extend(rule_closure(f, rules));
    }
    if cfg.causal_stage {
        out.extend(causal_closure(f, o));
    }
    out
}

/// Multi-pass closure to a fixpoint or the pass cap.
pub fn run_closure(facts: &[PatientFactRecord], o: &Ontology, rules: &RuleSet, cfg: &ClosureConfig) -> Closure {
    let mut known: BTreeMap<DedupKey, Fact> = BTreeMap::new();
    for r in facts {
        known.entry(DedupKey::of(r)).or_insert_with(|| Fact { record: r.clone(), derivation: None });
    }
    let mut report = ClosureReport { input: known.len(), ..Default::default() };
    let mut seed: Vec<DedupKey> = known.keys().cloned().collect();
    while report.passes < cfg.max_passes {
        report.passes += 1;
        let mut fresh: BTreeMap<DedupKey, Fact> = BTreeMap::new();
        let mut truncated = 0usize;
        // Strict staging: every stage reads only the facts that seeded this pass.
        for k in &seed {
            let Some(src) = known.get(k) else { continue };
            for cand in stage_outputs(src, o, rules, cfg) {
                let key = cand.key();
                let better = match known.get(&key) {
                    None => true,
                    // A shorter is-a path re-opens the fact so the hop budget does
                    // not depend on derivation order.
                    Some(old) => old.derivation.is_some() && cand.hop() < old.hop(),
                };
                if !better {
                    continue;
                }
                match fresh.get(&key) {
                    Some(prev) if prev.hop() <= cand.hop() => {}
                    Some(_) => {
                        fresh.insert(key, cand);
                    }
                    None if fresh.len() >= cfg.max_derived_per_pass => truncated += 1,
                    None => {
                        fresh.insert(key, cand);
                    }
                }
            }
        }
        report.truncated += truncated;
        if fresh.is_empty() && truncated == 0 {
            report.fixpoint = true;
            break;
        }
        seed = if truncated > 0 { known.keys().chain(fresh.keys()).cloned().collect() } else { fresh.keys().cloned().collect() };
        known.extend(fresh);
    }
    if !report.fixpoint && report.passes == cfg.max_passes {
        // One more sweep decides whether the cap was reached at a fixpoint.
        report.fixpoint = seed.iter().all(|k| {
            known.get(k).map_or(true, |src| {
                stage_outputs(src, o, rules, cfg).iter().all(|c| known.get(&c.key()).is_some_and(|old| old.derivation.is_none() || old.hop() <= c.hop()))
            })
        });
    }
    report.derived = known.len() - report.input;
    Closure { facts: known.into_values().collect(), report }
}

/// Closure for many patients in parallel, in input order.
pub fn run_closure_many(patients: &[Vec<PatientFactRecord>], o: &Ontology, rules: &RuleSet, cfg: &ClosureConfig) -> Vec<Closure> {
    patients.par_iter().map(|p| run_closure(p, o, rules, cfg)).collect()
}

/// Re-derive a fact from its recorded source. Returns true when the stage
/// named in the provenance regenerates exactly this fact.
pub fn replay(f: &Fact, by_key: &BTreeMap<DedupKey, Fact>, o: &Ontology, rules: &RuleSet, cfg: &ClosureConfig) -> bool {
    let Some(d) = &f.derivation else { return true };
    let Some(src) = by_key.get(&d.from) else { return false };
    let cands = match d.stage {
        Stage::Concept => concept_closure(src, o, &ClosureConfig { max_hops_concept: usize::MAX, ..cfg.clone() }),
        Stage::NegativeDescendant => negative_descendants(src, o, &ClosureConfig { max_hops_concept: usize::MAX, ..cfg.clone() }),
        Stage::Rule => rule_closure(src, rules),
        Stage::Causal => causal_closure(src, o),
    };
    cands.iter().any(|c| c.record == f.record && c.derivation.as_ref().is_some_and(|cd| cd.via == d.via))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{CausalEdge, Concept, ConceptId, Status};

    fn onto() -> Ontology {
        let mut o = Ontology::new();
        for id in ["Disease", "Appendicitis", "AcuteAppendicitis", "PostoperativeHemorrhage", "SurgicalProcedure", "A", "B", "C"] {
            o.add_concept(Concept { id: ConceptId::new(id), token: crate::ontology::default_token(id), label: None }).unwrap();
        }
        o.add_isa(&ConceptId::new("Appendicitis"), &ConceptId::new("Disease")).unwrap();
        o.add_isa(&ConceptId::new("AcuteAppendicitis"), &ConceptId::new("Appendicitis")).unwrap();
        o.add_isa(&ConceptId::new("C"), &ConceptId::new("B")).unwrap();
        o.add_isa(&ConceptId::new("B"), &ConceptId::new("A")).unwrap();
        o.add_causal(CausalEdge {
            id: "interprets".into(),
            src_rel: RelationId::new(vocab::HAS_FINDING_OF),
            src_concept: ConceptId::new("PostoperativeHemorrhage"),
            dst_rel: RelationId::new(vocab::HAS_UNDERGONE),
            dst_concept: ConceptId::new("SurgicalProcedure"),
            status: None,
        })
        .unwrap();
        o
    }

    fn fact(name: &str, v: bool) -> PatientFactRecord {
        PatientFactRecord {
            name: parse_variable_name(name).unwrap(),
            value: FactValue::Bool(v),
            certain: TimeWindow::point_now(),
            possible: TimeWindow::closed(-24, 0).unwrap(),
            source: "t".into(),
        }
    }

    fn names(c: &Closure) -> Vec<(String, FactValue)> {
        c.facts.iter().filter(|f| f.derivation.is_some()).map(|f| (f.record.name.render(), f.record.value.clone())).collect()
    }

    fn only(stage: &str) -> ClosureConfig {
        ClosureConfig {
            concept_stage: stage == "concept",
            rule_stage: stage == "rule",
            causal_stage: stage == "causal",
            ..ClosureConfig::default()
        }
    }

    #[test]
    fn default_rules_load() {
        let r = RuleSet::default_rules();
        assert_eq!(r.rules.len(), 48);
        assert!(!r.collapse_timeframes);
    }

    #[test]
    fn ancestors_are_materialized() {
        let c = run_closure(&[fact("patient_has_diagnosis_of_acute_appendicitis", true)], &onto(), &RuleSet::empty(), &only("concept"));
        let n = names(&c);
        assert!(n.contains(&("patient_has_diagnosis_of_appendicitis".into(), FactValue::Bool(true))));
        assert!(n.contains(&("patient_has_diagnosis_of_disease".into(), FactValue::Bool(true))));
        assert_eq!(n.len(), 2);
    }

    #[test]
    fn hop_cap_holds_across_passes() {
        let cfg = ClosureConfig { max_hops_concept: 1, ..only("concept") };
        let c = run_closure(&[fact("patient_has_finding_of_c", true)], &onto(), &RuleSet::empty(), &cfg);
        assert_eq!(names(&c), vec![("patient_has_finding_of_b".into(), FactValue::Bool(true))]);
        let root = run_closure(&[fact("patient_has_finding_of_a", true)], &onto(), &RuleSet::empty(), &cfg);
        assert!(names(&root).is_empty());
    }

    #[test]
    fn false_facts_do_not_climb() {
        let c = run_closure(&[fact("patient_has_finding_of_c", false)], &onto(), &RuleSet::empty(), &only("concept"));
        assert!(names(&c).is_empty());
        let cfg = ClosureConfig { enable_negative_descendants: true, ..only("concept") };
        let c = run_closure(&[fact("patient_has_finding_of_a", false)], &onto(), &RuleSet::empty(), &cfg);
        assert_eq!(names(&c).len(), 2);
    }

    #[test]
    fn status_rule_negates_sibling() {
        let c = run_closure(&[fact("patients_x_is_positive_now", true)], &onto(), &RuleSet::default_rules(), &ClosureConfig { max_passes: 1, ..only("rule") });
        assert_eq!(names(&c), vec![("patients_x_is_negative_now".into(), FactValue::Bool(false))]);
    }

    #[test]
    fn polarity_gate() {
        let rules = RuleSet::default_rules();
        let c = run_closure(&[fact("patient_has_suspicion_of_x", false)], &onto(), &rules, &ClosureConfig { max_passes: 1, ..only("rule") });
        assert!(names(&c).is_empty());
    }

    #[test]
    fn qualifiers_carry_over() {
        let c = run_closure(&[fact("patient_is_undergoing_x_now@@left_side", true)], &onto(), &RuleSet::default_rules(), &ClosureConfig { max_passes: 1, ..only("rule") });
        let n = names(&c);
        assert!(n.contains(&("patient_has_undergone_x_now@@left_side".into(), FactValue::Bool(true))));
    }

    #[test]
    fn causal_edge_fires() {
        let c = run_closure(&[fact("patient_has_finding_of_postoperative_hemorrhage", true)], &onto(), &RuleSet::empty(), &only("causal"));
        assert_eq!(names(&c), vec![("patient_has_undergone_surgical_procedure".into(), FactValue::Bool(true))]);
        let bare = run_closure(&[fact("patient_has_finding_of_postoperative_hemorrhage", true)], &Ontology::new(), &RuleSet::empty(), &only("causal"));
        assert!(names(&bare).is_empty());
    }

    #[test]
    fn causal_status_sets_outcome_or_relation() {
        let mut o = onto();
        o.add_causal(CausalEdge {
            id: "abn".into(),
            src_rel: RelationId::new(vocab::HAS_FINDING_OF),
            src_concept: ConceptId::new("B"),
            dst_rel: RelationId::new(vocab::HAS_UNDERGONE),
            dst_concept: ConceptId::new("C"),
            status: Some(Status::Abnormal),
        })
        .unwrap();
        o.add_causal(CausalEdge {
            id: "pos".into(),
            src_rel: RelationId::new(vocab::HAS_FINDING_OF),
            src_concept: ConceptId::new("B"),
            dst_rel: RelationId::new(vocab::HAS_FINDING_OF),
            dst_concept: ConceptId::new("A"),
            status: Some(Status::Positive),
        })
        .unwrap();
        let c = run_closure(&[fact("patient_has_finding_of_b", true)], &o, &RuleSet::empty(), &only("causal"));
        let n: Vec<String> = names(&c).into_iter().map(|x| x.0).collect();
        assert!(n.contains(&"patient_has_undergone_c_outcome_is_abnormal".to_string()));
        assert!(n.contains(&"patients_a_is_positive".to_string()));
    }

    #[test]
    fn empty_and_idempotent() {
        let o = onto();
        let rules = RuleSet::default_rules();
        let cfg = ClosureConfig::default();
        assert!(run_closure(&[], &o, &rules, &cfg).facts.is_empty());
        let c = run_closure(&[fact("patient_has_suspicion_of_acute_appendicitis", true)], &o, &rules, &cfg);
        assert!(c.report.fixpoint);
        let again = run_closure(&c.records().cloned().collect::<Vec<_>>(), &o, &rules, &cfg);
        assert_eq!(again.report.derived, 0);
        assert_eq!(again.keys(), c.keys());
    }

    #[test]
    fn provenance_replays() {
        let o = onto();
        let rules = RuleSet::default_rules();
        let cfg = ClosureConfig::default();
        let c = run_closure(&[fact("patient_has_suspicion_of_acute_appendicitis", true), fact("patient_has_finding_of_postoperative_hemorrhage", true)], &o, &rules, &cfg);
        let by_key: BTreeMap<DedupKey, Fact> = c.facts.iter().map(|f| (f.key(), f.clone())).collect();
        for f in &c.facts {
            assert!(replay(f, &by_key, &o, &rules, &cfg), "{}", f.record.name);
            assert_eq!(f.record.possible, TimeWindow::closed(-24, 0).unwrap());
        }
    }

    #[test]
    fn per_pass_cap_truncates() {
        let cfg = ClosureConfig { max_derived_per_pass: 1, ..ClosureConfig::default() };
        let c = run_closure(&[fact("patient_has_suspicion_of_x", true)], &onto(), &RuleSet::default_rules(), &cfg);
        assert!(c.report.truncated > 0);
        assert!(c.report.passes <= cfg.max_passes);
    }

    #[test]
    fn bad_templates_rejected() {
        let bad = r#"{"rules":[{"id":"r","match_template":"patient_has_finding_of_x_{t}","require_bool":true,
            "produce":[{"template":"patient_has_diagnosis_of_{e}_{t}","type":"Bool","value":true,"preserve_qualifiers":true}]}]}"#;
        assert!(matches!(RuleSet::from_json(bad), Err(ClosureError::TemplateBind { .. })));
        let collapse = r#"{"rules":[],"timeframe_implication":{"collapse_timeframes":true}}"#;
        assert_eq!(RuleSet::from_json(collapse), Err(ClosureError::CollapseTimeframes));
    }
}
