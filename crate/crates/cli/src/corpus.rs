//! Loading trial and patient corpora from disk.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use walkdir::WalkDir;

use satir_core::closure::{run_closure, ClosureConfig, RuleSet};
use satir_core::ontology::{Concept, ConceptId};
use satir_core::projection::policy::CompiledPolicy;
use satir_core::projection::{project_patient, project_trial, GateCNF, ProjectionConfig};
use satir_core::smt::{parse_patient_facts, parse_trial_file, PatientFactRecord, TrialProgram};
use satir_core::Ontology;

#[derive(Debug, Serialize)]
pub struct FileError {
    pub file: String,
    pub error: String,
}

pub fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("reading {}", dir.display()))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|e| e == ext) {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

pub fn load_trials(dir: &Path, pool: &rayon::ThreadPool) -> Result<(Vec<TrialProgram>, Vec<FileError>)> {
    let files = files_with_ext(dir, "smt2")?;
    let parsed: Vec<_> = pool.install(|| files.par_iter().map(|f| (f, parse_trial_file(f))).collect());
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for (f, r) in parsed {
        match r {
            Ok(p) if p.trial_id.is_empty() => errors.push(FileError { file: f.display().to_string(), error: "no trial id in header or file name".into() }),
            Ok(p) => ok.push(p),
            Err(e) => errors.push(FileError { file: f.display().to_string(), error: e.to_string() }),
        }
    }
    Ok((ok, errors))
}

/// Patients are JSON fact arrays; the file stem is the patient id.
pub fn load_patients(dir: &Path) -> Result<(Vec<(String, Vec<PatientFactRecord>)>, Vec<FileError>)> {
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for f in files_with_ext(dir, "json")? {
        let id = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match std::fs::read_to_string(&f).map_err(|e| e.to_string()).and_then(|t| parse_patient_facts(&t).map_err(|e| e.to_string())) {
            Ok(facts) => ok.push((id, facts)),
            Err(error) => errors.push(FileError { file: f.display().to_string(), error }),
        }
    }
    Ok((ok, errors))
}

/// Register every concept token the corpus mentions as a flat concept.
pub fn extend_with_tokens(o: &mut Ontology, trials: &[TrialProgram], patients: &[(String, Vec<PatientFactRecord>)]) -> Result<usize> {
    let mut tokens = std::collections::BTreeSet::new();
    for p in trials {
        for d in &p.declarations {
            if let Some(n) = d.predicate.canonical() {
                tokens.insert(n.concept.clone());
            }
        }
    }
    for (_, facts) in patients {
        tokens.extend(facts.iter().map(|f| f.name.concept.clone()));
    }
    let mut added = 0;
    for t in tokens {
        if o.concept_by_token(&t).is_none() {
            o.add_concept(Concept { id: ConceptId::new(format!("auto:{t}")), token: t.clone(), label: None })?;
            added += 1;
        }
    }
    Ok(added)
}

pub struct Projected {
    pub gates: Vec<GateCNF>,
    pub errors: Vec<FileError>,
    pub trial_programs: usize,
    pub patients: usize,
    pub derived_facts: usize,
}

pub fn project_all(
    trials: &[TrialProgram],
    patients: &[(String, Vec<PatientFactRecord>)],
    o: &Ontology,
    rules: &RuleSet,
    policy: &CompiledPolicy,
    closure: &ClosureConfig,
    projection: &ProjectionConfig,
    pool: &rayon::ThreadPool,
) -> Projected {
    let trial_gates: Vec<_> = pool.install(|| trials.par_iter().map(|p| (p, project_trial(p, o, policy, projection))).collect());
    let patient_gates: Vec<_> = pool.install(|| {
        patients
            .par_iter()
            .map(|(id, facts)| {
                let c = run_closure(facts, o, rules, closure);
                let closed: Vec<PatientFactRecord> = c.records().cloned().collect();
                (project_patient(id, &closed), c.report.derived)
            })
            .collect()
    });
    let mut out = Projected { gates: Vec::new(), errors: Vec::new(), trial_programs: 0, patients: patient_gates.len(), derived_facts: 0 };
    for (p, r) in trial_gates {
        match r {
            Ok(proj) => {
                out.trial_programs += 1;
                out.gates.push(proj.gate);
            }
            Err(e) => out.errors.push(FileError { file: format!("{}/{}/{}", p.trial_id, p.subcohort_id, p.side.as_str()), error: e.to_string() }),
        }
    }
    for (g, derived) in patient_gates {
        out.derived_facts += derived;
        out.gates.push(g);
    }
    out
}
