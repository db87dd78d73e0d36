//! Simulation-study orchestration: runs the scenario grid, persists every
//! input and fit, and aggregates the recovery metrics from the files.
//!
//! Layout of a study directory:
//!
//! ```text
//! DIR/manifest.json
//! DIR/s{N}_{M}/r{r}/params_true.csv, data.csv, init.csv, simulation.json,
//!                   fit_laplace.json, fit_ghq_em.json
//! DIR/summary.csv, scores.csv, completion.csv, loglik.csv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::em::starting_values;
use crate::error::{GrmError, Result};
use crate::fit::{FitConfig, FitResult, FitStatus, Method};
use crate::io::{csv_writer, format_float, read_items_file, read_json_file, write_items_file, write_json_file, write_responses_file};
use crate::metrics::{
    completion_rate, estimation_errors, expected_score_error_curve, summarize_errors, ErrorRecord, ParameterClass,
};
use crate::model::ItemParameters;
use crate::quadrature::gauss_hermite_normal;
use crate::simulation::{
    sample_item_parameters, simulate_dataset, ReplicateSeeds, SimulationRecord, DEFAULT_MAX_RESIMULATIONS,
    REPLICATES_PER_SCENARIO,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const COMPLETION_FILE: &str = "completion.csv";
pub const LOGLIK_FILE: &str = "loglik.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub sample_sizes: Vec<usize>,
    pub item_counts: Vec<usize>,
    pub replicates: usize,
    pub base_seed: u64,
    pub methods: Vec<Method>,
    pub quadrature_points: usize,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub output_dir: PathBuf,
    /// Keep non-converged fits in the recovery summaries.
    pub include_nonconverged: bool,
    pub trim_fraction: f64,
    pub max_resimulations: usize,
    pub fit: FitConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            comment: None,
            sample_sizes: vec![50, 100, 250, 500],
            item_counts: vec![5, 20],
            replicates: 1000,
            base_seed: 20240101,
            methods: vec![Method::Laplace, Method::GhqEm],
            quadrature_points: crate::quadrature::DEFAULT_QUADRATURE_POINTS,
            jobs: 0,
            output_dir: PathBuf::from("study_out"),
            include_nonconverged: false,
            trim_fraction: 0.01,
            max_resimulations: DEFAULT_MAX_RESIMULATIONS,
            fit: FitConfig::default(),
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(GrmError::Precondition(msg));
        if self.sample_sizes.is_empty() || self.item_counts.is_empty() {
            return fail("sample_sizes and item_counts must be non-empty".into());
        }
        if self.sample_sizes.contains(&0) || self.item_counts.contains(&0) {
            return fail("sample sizes and item counts must be positive".into());
        }
        if self.replicates == 0 || self.replicates as u64 > REPLICATES_PER_SCENARIO {
            return fail(format!("replicates must be in 1..=2^20, got {}", self.replicates));
        }
        if self.methods.is_empty() {
            return fail("at least one method is required".into());
        }
        if !(0.0..0.5).contains(&self.trim_fraction) {
            return fail(format!("trim_fraction must be in [0, 0.5), got {}", self.trim_fraction));
        }
        gauss_hermite_normal(self.quadrature_points)?;
        self.fit_config().validate()
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            quadrature_points: self.quadrature_points,
            ..self.fit.clone()
        }
    }

    pub fn scenarios(&self) -> Vec<Scenario> {
        self.sample_sizes
            .iter()
            .flat_map(|&n| self.item_counts.iter().map(move |&m| (n, m)))
            .enumerate()
            .map(|(index, (n_subjects, n_items))| Scenario {
                index,
                n_subjects,
                n_items,
            })
            .collect()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        read_json_file(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub index: usize,
    pub n_subjects: usize,
    pub n_items: usize,
}

impl Scenario {
    pub fn label(&self) -> String {
        format!("s{}_{}", self.n_subjects, self.n_items)
    }

    pub fn replicate_dir(&self, root: &Path, replicate: usize) -> PathBuf {
        root.join(self.label()).join(format!("r{replicate}"))
    }
}

pub fn fit_file_name(method: Method) -> String {
    format!("fit_{}.json", method.slug())
}

/// A fit as persisted in a study tree, tagged with the key of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFit {
    #[serde(flatten)]
    pub fit: FitResult,
    pub key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    pub method: Method,
    pub key: String,
    pub status: FitStatus,
    pub converged: bool,
    pub wall_time_ms: f64,
    /// Loaded from a previous run instead of being recomputed.
    pub reused: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEntry {
    pub scenario: String,
    pub replicate: usize,
    pub seeds: ReplicateSeeds,
    pub resimulations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation_error: Option<String>,
    pub fits: Vec<FitEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: StudyConfig,
    pub scenarios: Vec<Scenario>,
    pub replicates: Vec<ReplicateEntry>,
    pub fits_run: usize,
    pub fits_reused: usize,
    pub total_fit_wall_time_ms: f64,
    pub elapsed_ms: f64,
}

/// Runs (or resumes) the study described by `config` and aggregates it.
pub fn run_study(config: &StudyConfig) -> Result<Manifest> {
    config.validate()?;
    let started = Instant::now();
    let root = config.output_dir.as_path();
    std::fs::create_dir_all(root)?;
    let scenarios = config.scenarios();
    let tasks: Vec<(Scenario, usize)> = scenarios
        .iter()
        .flat_map(|&s| (0..config.replicates).map(move |r| (s, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| GrmError::Resource(format!("cannot start worker pool: {e}")))?;
    let replicates = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, r)| run_replicate(config, root, s, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let fit_entries = || replicates.iter().flat_map(|r| &r.fits);
    let manifest = Manifest {
        config: config.clone(),
        scenarios,
        fits_run: fit_entries().filter(|f| !f.reused).count(),
        fits_reused: fit_entries().filter(|f| f.reused).count(),
        total_fit_wall_time_ms: fit_entries().map(|f| f.wall_time_ms).sum(),
        replicates,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    write_json_file(&root.join(MANIFEST_FILE), &manifest)?;
    aggregate(root, root, config.include_nonconverged)?;
    Ok(manifest)
}

fn failed_fit(method: Method) -> FitResult {
    FitResult {
        method,
        converged: false,
        status: FitStatus::NumericalFailure,
        loglik: f64::NAN,
        outer_iterations: 0,
        wall_time_ms: 0.0,
        estimates: Vec::new(),
        loglik_history: Vec::new(),
    }
}

fn input_key(method: Method, config: &FitConfig, data: &[u8], init: &[ItemParameters]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(method.slug().as_bytes());
    h.update(serde_json::to_vec(config)?);
    h.update(serde_json::to_vec(init)?);
    h.update(data);
    Ok(hex::encode(h.finalize()))
}

fn run_replicate(config: &StudyConfig, root: &Path, scenario: Scenario, replicate: usize) -> Result<ReplicateEntry> {
    let seeds = ReplicateSeeds::derive(config.base_seed, scenario.index, replicate);
    let dir = scenario.replicate_dir(root, replicate);
    std::fs::create_dir_all(&dir)?;
    let truth = sample_item_parameters(scenario.n_items, seeds.item_seed)?;
    write_items_file(&dir.join("params_true.csv"), &truth)?;
    let fit_config = config.fit_config();
    let mut entry = ReplicateEntry {
        scenario: scenario.label(),
        replicate,
        seeds,
        resimulations: None,
        simulation_error: None,
        fits: Vec::new(),
    };

    let sim = match simulate_dataset(&truth, scenario.n_subjects, seeds.data_seed, config.max_resimulations) {
        Ok(sim) => sim,
        Err(e) => {
            // Recorded as failed fits so completion rates account for it.
            entry.simulation_error = Some(e.to_string());
            for &method in &config.methods {
                let stored = StoredFit {
                    fit: failed_fit(method),
                    key: String::new(),
                };
                write_json_file(&dir.join(fit_file_name(method)), &stored)?;
                entry.fits.push(fit_entry(&stored, false));
            }
            return Ok(entry);
        }
    };
    entry.resimulations = Some(sim.resimulations);
    write_responses_file(&dir.join("data.csv"), &sim.responses)?;
    write_json_file(
        &dir.join("simulation.json"),
        &SimulationRecord {
            seed: seeds.data_seed,
            resimulations: sim.resimulations,
            n_subjects: scenario.n_subjects,
            n_items: scenario.n_items,
        },
    )?;
    let init = starting_values(&sim.responses)?;
    write_items_file(&dir.join("init.csv"), &init)?;

    for &method in &config.methods {
        let path = dir.join(fit_file_name(method));
        let key = input_key(method, &fit_config, sim.responses.as_slice(), &init)?;
        if let Ok(previous) = read_json_file::<StoredFit>(&path) {
            if previous.key == key {
                entry.fits.push(fit_entry(&previous, true));
                continue;
            }
        }
        let fit = crate::fit(method, &sim.responses, &init, &fit_config).unwrap_or_else(|_| failed_fit(method));
        let stored = StoredFit { fit, key };
        write_json_file(&path, &stored)?;
        entry.fits.push(fit_entry(&stored, false));
    }
    Ok(entry)
}

fn fit_entry(stored: &StoredFit, reused: bool) -> FitEntry {
    FitEntry {
        method: stored.fit.method,
        key: stored.key.clone(),
        status: stored.fit.status,
        converged: stored.fit.converged,
        wall_time_ms: stored.fit.wall_time_ms,
        reused,
    }
}

/// One replicate as read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateData {
    pub replicate: usize,
    pub truth: Vec<ItemParameters>,
    pub fits: BTreeMap<Method, FitResult>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioData {
    pub scenario: Scenario,
    pub replicates: Vec<ReplicateData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    pub config: StudyConfig,
    pub scenarios: Vec<ScenarioData>,
}

impl StudyData {
    pub fn scenario(&self, n_subjects: usize, n_items: usize) -> Option<&ScenarioData> {
        self.scenarios
            .iter()
            .find(|s| s.scenario.n_subjects == n_subjects && s.scenario.n_items == n_items)
    }
}

impl ScenarioData {
    pub fn fits(&self, method: Method) -> Vec<&FitResult> {
        self.replicates.iter().filter_map(|r| r.fits.get(&method)).collect()
    }

    /// `(estimates, truth)` of fits usable for recovery metrics.
    pub fn usable_pairs(&self, method: Method, include_nonconverged: bool) -> Vec<(usize, &[ItemParameters], &[ItemParameters])> {
        self.replicates
            .iter()
            .filter_map(|r| {
                let f = r.fits.get(&method)?;
                ((f.converged || include_nonconverged) && f.has_valid_estimates())
                    .then(|| (r.replicate, f.estimates.as_slice(), r.truth.as_slice()))
            })
            .collect()
    }
}

/// Reads every persisted fit of a study directory.
pub fn load_study(dir: &Path) -> Result<StudyData> {
    let manifest: Manifest = read_json_file(&dir.join(MANIFEST_FILE))?;
    let config = manifest.config;
    let scenarios = manifest
        .scenarios
        .iter()
        .map(|&scenario| {
            let replicates = (0..config.replicates)
                .map(|r| {
                    let rdir = scenario.replicate_dir(dir, r);
                    let truth = read_items_file(&rdir.join("params_true.csv"))?;
                    let fits = config
                        .methods
                        .iter()
                        .map(|&m| Ok((m, read_json_file::<StoredFit>(&rdir.join(fit_file_name(m)))?.fit)))
                        .collect::<Result<BTreeMap<_, _>>>()?;
                    Ok(ReplicateData {
                        replicate: r,
                        truth,
                        fits,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ScenarioData { scenario, replicates })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyData { config, scenarios })
}

/// Latent grid of the expected-score curves: -4 to 4 in steps of 0.1.
pub fn score_grid() -> Vec<f64> {
    (0..=80).map(|k| (k as f64 - 40.0) / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSummary {
    pub summary_rows: usize,
    pub files: Vec<PathBuf>,
}

/// Recomputes all aggregate CSVs of the study in `study_dir` from its
/// persisted files and writes them to `out_dir`.
pub fn aggregate(study_dir: &Path, out_dir: &Path, include_nonconverged: bool) -> Result<AggregateSummary> {
    let study = load_study(study_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let trim = study.config.trim_fraction;
    let methods = &study.config.methods;
    let io_err = |e: csv::Error| GrmError::Io(e.into());

    let mut summary = csv_writer(Vec::new());
    summary
        .write_record(["scenario", "method", "parameter", "bias", "rmse", "rrmse", "n"])
        .map_err(io_err)?;
    let mut scores = csv_writer(Vec::new());
    scores
        .write_record(["scenario", "method", "psi", "mean_err", "p2.5", "p97.5"])
        .map_err(io_err)?;
    let mut completion = csv_writer(Vec::new());
    completion.write_record(["scenario", "method", "rate"]).map_err(io_err)?;
    let mut loglik = csv_writer(Vec::new());
    loglik
        .write_record(["scenario", "replicate", "loglik_laplace", "loglik_ghq"])
        .map_err(io_err)?;

    let grid = score_grid();
    let mut summary_rows = 0;
    for sd in &study.scenarios {
        let label = sd.scenario.label();
        for &method in methods {
            let pairs = sd.usable_pairs(method, include_nonconverged);
            let mut records: Vec<ErrorRecord> = Vec::new();
            for &(r, est, truth) in &pairs {
                records.extend(estimation_errors(est, truth, sd.scenario.index, r)?);
            }
            for class in ParameterClass::ALL {
                let errors: Vec<f64> = records.iter().filter(|e| e.parameter == class).map(|e| e.error).collect();
                let (bias, rmse, rrmse) = if errors.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN)
                } else {
                    summarize_errors(&errors, trim)?
                };
                summary
                    .write_record([
                        label.clone(),
                        method.to_string(),
                        class.to_string(),
                        format_float(bias),
                        format_float(rmse),
                        format_float(rrmse),
                        errors.len().to_string(),
                    ])
                    .map_err(io_err)?;
                summary_rows += 1;
            }

            if !pairs.is_empty() {
                let owned: Vec<_> = pairs.iter().map(|&(_, e, t)| (e.to_vec(), t.to_vec())).collect();
                for p in expected_score_error_curve(&owned, &grid)? {
                    scores
                        .write_record([
                            label.clone(),
                            method.to_string(),
                            format_float(p.psi),
                            format_float(p.mean_error),
                            format_float(p.p025),
                            format_float(p.p975),
                        ])
                        .map_err(io_err)?;
                }
            }

            let fits: Vec<FitResult> = sd.fits(method).into_iter().cloned().collect();
            completion
                .write_record([label.clone(), method.to_string(), format_float(completion_rate(&fits)?)])
                .map_err(io_err)?;
        }

        if methods.contains(&Method::Laplace) && methods.contains(&Method::GhqEm) {
            for r in &sd.replicates {
                loglik
                    .write_record([
                        label.clone(),
                        r.replicate.to_string(),
                        format_float(r.fits[&Method::Laplace].loglik),
                        format_float(r.fits[&Method::GhqEm].loglik),
                    ])
                    .map_err(io_err)?;
            }
        }
    }

    let mut files = Vec::new();
    for (name, wtr) in [
        (SUMMARY_FILE, summary),
        (SCORES_FILE, scores),
        (COMPLETION_FILE, completion),
        (LOGLIK_FILE, loglik),
    ] {
        let bytes = wtr.into_inner().map_err(|e| GrmError::Io(e.into_error()))?;
        let path = out_dir.join(name);
        std::fs::write(&path, bytes)?;
        files.push(path);
    }
    Ok(AggregateSummary { summary_rows, files })
}
