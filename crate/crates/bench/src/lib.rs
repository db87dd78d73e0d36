//! Shared fixtures for the estimator benchmarks.

use grm_core::{simulate, starting_values, ItemParameters, ResponseMatrix, SimulationSpec};

/// A simulated dataset with its true items and shared starting values.
pub struct Fixture {
    pub truth: Vec<ItemParameters>,
    pub data: ResponseMatrix,
    pub init: Vec<ItemParameters>,
}

pub fn fixture(n_subjects: usize, n_items: usize, seed: u64) -> Fixture {
    let (truth, sim) = simulate(&SimulationSpec::new(n_items, n_subjects, seed)).expect("simulation succeeds");
    let init = starting_values(&sim.responses).expect("starting values");
    Fixture {
        truth,
        data: sim.responses,
        init,
    }
}
