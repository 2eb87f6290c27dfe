//! Shared fixtures for the criterion benches.

use satir_core::closure::ClosureConfig;
use satir_core::oracle::{build_gates, generate_world, SyntheticWorld, WorldGates, WorldParams};

pub const SEED: u64 = 2024;

/// A deterministic world sized like a mid-sized trial registry slice.
pub fn world(n_trials: usize, n_patients: usize) -> SyntheticWorld {
    let params = WorldParams { n_concepts: 500, n_trials, n_patients, ..WorldParams::default() };
    generate_world(SEED, &params).expect("world fits the atom budget")
}

pub fn gates(w: &SyntheticWorld) -> WorldGates {
    build_gates(w, &ClosureConfig::default()).expect("generated worlds project")
}
