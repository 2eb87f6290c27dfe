use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ProjectionError;
use crate::ontology::{ConceptId, Ontology, RelationId};
use crate::smt::ConstraintClass;

/// How an undocumented atom is read during prescreening.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Missingness {
    SupportsIfMissing,
    RefutesIfMissing,
    InconclusiveIfMissing,
}

impl Missingness {
    pub fn default_for(class: Option<ConstraintClass>) -> Missingness {
        match class {
            Some(ConstraintClass::PrescreenMustSuffice) | None => Missingness::RefutesIfMissing,
            _ => Missingness::InconclusiveIfMissing,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingnessRule {
    /// Glob over the rendered variable name.
    pub pattern: String,
    pub tag: Missingness,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecificityAllow {
    pub relation: RelationId,
    pub concept: ConceptId,
    pub ancestors: Vec<ConceptId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaliencePolicy {
    #[serde(default)]
    pub missingness: Vec<MissingnessRule>,
    #[serde(default)]
    pub specificity_allow: Vec<SpecificityAllow>,
}

/// A policy checked against an ontology, with compiled patterns.
#[derive(Clone, Debug, Default)]
pub struct CompiledPolicy {
    pub source: SaliencePolicy,
    patterns: Vec<(glob::Pattern, Missingness)>,
    /// (relation, concept token) -> ancestor tokens.
    allow: HashMap<(String, String), Vec<String>>,
}

impl SaliencePolicy {
    pub fn from_json(text: &str) -> Result<Self, ProjectionError> {
        serde_json::from_str(text).map_err(|e| ProjectionError::Policy(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ProjectionError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProjectionError::Policy(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Check allow-list entries against the ontology and compile patterns.
    pub fn compile(&self, o: &Ontology) -> Result<CompiledPolicy, ProjectionError> {
        let mut patterns = Vec::new();
        for r in &self.missingness {
            let p = glob::Pattern::new(&r.pattern).map_err(|e| ProjectionError::Policy(format!("pattern `{}`: {e}", r.pattern)))?;
            patterns.push((p, r.tag));
        }
        let mut allow: HashMap<(String, String), Vec<String>> = HashMap::new();
        for a in &self.specificity_allow {
            let token = o.token_of(&a.concept).ok_or_else(|| ProjectionError::OntologyMiss(a.concept.as_str().to_string()))?;
            let entry = allow.entry((a.relation.as_str().to_string(), token.to_string())).or_default();
            for anc in &a.ancestors {
                if anc == &a.concept || !o.concept_subsumes(anc, &a.concept) {
                    return Err(ProjectionError::NotAnAncestor { concept: a.concept.as_str().into(), ancestor: anc.as_str().into() });
                }
                let t = o.token_of(anc).ok_or_else(|| ProjectionError::OntologyMiss(anc.as_str().to_string()))?;
                if !entry.iter().any(|x| x == t) {
                    entry.push(t.to_string());
                }
            }
        }
        Ok(CompiledPolicy { source: self.clone(), patterns, allow })
    }
}

impl CompiledPolicy {
    pub fn missingness(&self, rendered: &str, class: Option<ConstraintClass>) -> Missingness {
        self.patterns
            .iter()
            .find(|(p, _)| p.matches(rendered))
            .map(|(_, m)| *m)
            .unwrap_or_else(|| Missingness::default_for(class))
    }

    pub fn allowed_ancestors(&self, relation: &str, token: &str) -> &[String] {
        self.allow.get(&(relation.to_string(), token.to_string())).map(Vec::as_slice).unwrap_or(&[])
    }
}
