//! Constraint model: predicates, atoms, formulas and three-valued evaluation.

pub mod formula;
pub mod naming;

pub use formula::{
    eval_atom, eval_formula, eval_with, AtomicConstraint, CanonicalPredicate, Comparison, ConstraintFormula, EvalError,
    NonCanonicalPredicate, NumInterval, NumValue, Number, Predicate, Target, TriState,
};
pub use naming::{parse_variable_name, NameError, VariableName};
