//! True item parameters and complete response datasets for recovery studies.
//!
//! All randomness comes from ChaCha8 streams. A replicate of a study is
//! addressed by `stream_id = scenario_index * 2^20 + replicate`, and each
//! resimulation attempt of a dataset uses its own stream of the dataset seed,
//! so every draw is reproducible and independent of task scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};
use crate::model::{logistic, ItemParameters, ResponseMatrix, N_THRESHOLDS};

pub const DEFAULT_MAX_RESIMULATIONS: usize = 1000;
pub const REPLICATES_PER_SCENARIO: u64 = 1 << 20;

const A_MEANLOG: f64 = 0.05;
const A_SDLOG: f64 = 0.5;
const THRESHOLD_RANGES: [(f64, f64); N_THRESHOLDS] = [(-2.5, -1.1), (-1.0, -0.1), (0.1, 1.0), (1.1, 2.5)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n_items: usize,
    pub n_subjects: usize,
    pub seed: u64,
    pub max_resimulations: usize,
}

impl SimulationSpec {
    pub fn new(n_items: usize, n_subjects: usize, seed: u64) -> Self {
        SimulationSpec {
            n_items,
            n_subjects,
            seed,
            max_resimulations: DEFAULT_MAX_RESIMULATIONS,
        }
    }
}

/// A simulated dataset and how many whole-dataset redraws it took.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub responses: ResponseMatrix,
    pub resimulations: usize,
}

/// Contents of the sidecar JSON written next to a simulated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub seed: u64,
    pub resimulations: usize,
    pub n_subjects: usize,
    pub n_items: usize,
}

/// Draws `m` items: `a ~ LogNormal(0.05, 0.5)` and each threshold uniform on
/// its own disjoint range, so ordering holds by construction.
pub fn sample_item_parameters(m: usize, seed: u64) -> Result<Vec<ItemParameters>> {
    if m == 0 {
        return Err(GrmError::Domain("need at least one item".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_dist = LogNormal::new(A_MEANLOG, A_SDLOG).expect("valid lognormal");
    let b_dists = THRESHOLD_RANGES.map(|(lo, hi)| Uniform::new(lo, hi).expect("valid range"));
    (0..m)
        .map(|j| {
            let a = a_dist.sample(&mut rng);
            let b = std::array::from_fn(|k| b_dists[k].sample(&mut rng));
            ItemParameters::new(j, a, b)
        })
        .collect()
}

/// Simulates until every item column contains every category, redrawing
/// the whole dataset (latent values included) on failure.
pub fn simulate_dataset(
    items: &[ItemParameters],
    n_subjects: usize,
    seed: u64,
    max_resimulations: usize,
) -> Result<SimulatedData> {
    if items.is_empty() || n_subjects == 0 {
        return Err(GrmError::Domain("need at least one item and one subject".into()));
    }
    for it in items {
        it.validate()?;
    }
    for attempt in 0..=max_resimulations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(attempt as u64);
        let responses = draw_responses(items, n_subjects, &mut rng)?;
        if responses.all_categories_present() {
            return Ok(SimulatedData {
                responses,
                resimulations: attempt,
            });
        }
    }
    Err(GrmError::InfeasibleSimulation {
        attempts: max_resimulations + 1,
    })
}

/// One unconditional draw: `psi ~ N(0, 1)` per subject, then each score by
/// inverting the exceedance curve with a single uniform.
pub fn draw_responses<R: Rng + ?Sized>(items: &[ItemParameters], n_subjects: usize, rng: &mut R) -> Result<ResponseMatrix> {
    let mut out = Vec::with_capacity(n_subjects * items.len());
    for _ in 0..n_subjects {
        let psi: f64 = rng.sample(StandardNormal);
        for it in items {
            let u: f64 = rng.random();
            let y = it
                .b
                .iter()
                .take_while(|&&b| u < logistic(it.a * (psi - b)))
                .count();
            out.push(y as u8);
        }
    }
    ResponseMatrix::new(n_subjects, items.len(), out)
}

/// Samples items and a dataset from one spec.
pub fn simulate(spec: &SimulationSpec) -> Result<(Vec<ItemParameters>, SimulatedData)> {
    let seeds = ReplicateSeeds::derive(spec.seed, 0, 0);
    let items = sample_item_parameters(spec.n_items, seeds.item_seed)?;
    let data = simulate_dataset(&items, spec.n_subjects, seeds.data_seed, spec.max_resimulations)?;
    Ok((items, data))
}

/// Seeds for the item draw and the data draw of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicateSeeds {
    pub stream_id: u64,
    pub item_seed: u64,
    pub data_seed: u64,
}

impl ReplicateSeeds {
    pub fn derive(base_seed: u64, scenario_index: usize, replicate: usize) -> Self {
        let stream_id = stream_id(scenario_index, replicate);
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(stream_id);
        ReplicateSeeds {
            stream_id,
            item_seed: rng.next_u64(),
            data_seed: rng.next_u64(),
        }
    }
}

pub fn stream_id(scenario_index: usize, replicate: usize) -> u64 {
    assert!((replicate as u64) < REPLICATES_PER_SCENARIO, "replicate index exceeds 2^20");
    scenario_index as u64 * REPLICATES_PER_SCENARIO + replicate as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::category_prob;
    use crate::quadrature::gauss_hermite_normal;

    #[test]
    fn item_draws_respect_ranges() {
        let items = sample_item_parameters(2000, 5).unwrap();
        for it in &items {
            assert!(it.a > 0.0);
            assert!(it.b[0] >= -2.5 && it.b[0] < -1.1);
            assert!(it.b[1] >= -1.0 && it.b[1] < -0.1);
            assert!(it.b[2] >= 0.1 && it.b[2] < 1.0);
            assert!(it.b[3] >= 1.1 && it.b[3] < 2.5);
        }
        assert_eq!(items, sample_item_parameters(2000, 5).unwrap());
        assert_ne!(items, sample_item_parameters(2000, 6).unwrap());
    }

    #[test]
    fn discrimination_median_matches_lognormal() {
        let items = sample_item_parameters(100_000, 42).unwrap();
        let mut a: Vec<f64> = items.iter().map(|it| it.a).collect();
        a.sort_by(f64::total_cmp);
        let median = 0.5 * (a[49_999] + a[50_000]);
        assert!((median - 0.05f64.exp()).abs() < 0.02, "{median}");
    }

    #[test]
    fn datasets_contain_all_categories() {
        let items = sample_item_parameters(5, 1).unwrap();
        let sim = simulate_dataset(&items, 100, 2, 1000).unwrap();
        assert_eq!(sim.responses.n_subjects(), 100);
        assert_eq!(sim.responses.n_items(), 5);
        assert!(sim.responses.all_categories_present());
        assert_eq!(sim, simulate_dataset(&items, 100, 2, 1000).unwrap());
    }

    #[test]
    fn infeasible_simulation_is_reported() {
        let items = sample_item_parameters(3, 1).unwrap();
        assert!(matches!(
            simulate_dataset(&items, 2, 0, 5),
            Err(GrmError::InfeasibleSimulation { attempts: 6 })
        ));
    }

    #[test]
    fn category_frequencies_match_quadrature_marginals() {
        let it = ItemParameters::new(0, 1.3, [-1.5, -0.4, 0.5, 1.6]).unwrap();
        let n = 100_000;
        let sim = simulate_dataset(&[it], n, 9, 10).unwrap();
        let counts = sim.responses.category_counts()[0];
        let rule = gauss_hermite_normal(201).unwrap();
        for (s, &count) in counts.iter().enumerate() {
            let p = rule.integrate(|x| category_prob(it.a, &it.b, s, x));
            let se = (p * (1.0 - p) / n as f64).sqrt();
            let freq = count as f64 / n as f64;
            assert!((freq - p).abs() < 3.0 * se, "category {s}: {freq} vs {p}");
        }
    }

    #[test]
    fn resimulations_rise_for_small_samples() {
        let items = sample_item_parameters(5, 3).unwrap();
        let large: usize = (0..20)
            .map(|s| simulate_dataset(&items, 500, s, 1000).unwrap().resimulations)
            .sum();
        let small: usize = (0..20)
            .map(|s| simulate_dataset(&items, 50, s, 1000).unwrap().resimulations)
            .sum();
        assert!(small >= large);
    }

    #[test]
    fn replicate_streams_are_distinct() {
        let a = ReplicateSeeds::derive(7, 0, 0);
        let b = ReplicateSeeds::derive(7, 0, 1);
        let c = ReplicateSeeds::derive(7, 1, 0);
        assert_ne!(a.item_seed, b.item_seed);
        assert_ne!(a.item_seed, c.item_seed);
        assert_eq!(a, ReplicateSeeds::derive(7, 0, 0));
        assert_eq!(c.stream_id, 1 << 20);
    }
}
