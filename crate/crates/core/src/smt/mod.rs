//! Reading and writing trial programs and patient fact files.

pub mod patient;
pub mod sexpr;
pub mod trial;

use thiserror::Error;

pub use patient::{facts_to_json, parse_patient_facts, parse_patient_facts_detailed, FactValue, PatientFactRecord};
pub use trial::{
    parse_trial_file, parse_trial_program, parse_trial_program_with, serialize_trial_program, AnnotationStatus, Assertion, ConstraintClass,
    Declaration, ParseOptions, ProvenanceTag, Side, Sort, TagKind, TrialProgram,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmtError {
    #[error("syntax error at {line}:{col}: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("undeclared symbol `{name}` on line {line}")]
    UndeclaredSymbol { name: String, line: usize },
    #[error("declaration `{name}` on line {line} has no annotation")]
    MissingAnnotation { name: String, line: usize },
    #[error("declaration `{name}` on line {line} has a malformed annotation: {msg}")]
    BadAnnotation { name: String, line: usize, msg: String },
    #[error("bad or missing :named tag `{tag}` on line {line}")]
    BadNamedTag { tag: String, line: usize },
    #[error("patient facts: {0}")]
    PatientFacts(String),
    #[error("io: {0}")]
    Io(String),
}
