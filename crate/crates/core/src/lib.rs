//! Ontology-grounded constraint retrieval for matching patients to clinical
//! trials.
//!
//! Trials are written as tagged constraint programs. Each program is projected
//! to a conservative gate in conjunctive normal form over canonical atoms,
//! stored relationally, and joined against closed patient fact sets.

pub mod closure;
pub mod model;
pub mod ontology;
pub mod oracle;
pub mod projection;
pub mod retrieval;
pub mod smt;
pub mod store;
pub mod temporal;

pub use model::{AtomicConstraint, Comparison, ConstraintFormula, Predicate, Target, TriState, VariableName};
pub use ontology::{ConceptId, Ontology, RelationId};
pub use temporal::{TimeWindow, Timeframe};
