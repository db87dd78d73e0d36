//! Marginal maximum-likelihood estimation for the graded response model.
//!
//! Two estimators are provided: a Laplace approximation of the per-subject
//! marginal likelihood maximized by projected quasi-Newton, and an EM
//! algorithm on a fixed Gauss-Hermite rule. The crate also contains the data
//! simulator, recovery metrics and the study orchestration used to compare
//! them.

pub mod em;
pub mod error;
pub mod figure;
pub mod fit;
pub mod io;
pub mod laplace;
pub mod metrics;
pub mod model;
pub mod quadrature;
pub mod simulation;
pub mod study;

pub use em::{e_step, fit_ghq_em, m_step, starting_values, ExpectedCounts};
pub use error::{GrmError, Result};
pub use figure::{emit_likelihood_figure, FigureData, FigureRow};
pub use fit::{from_unconstrained, to_unconstrained, Bounds, FitConfig, FitResult, FitStatus, Method, Unconstrained};
pub use laplace::{
    find_posterior_mode, fit_laplace, joint_logdensity, marginal_loglik_laplace, LaplaceObjective, ModeResult,
};
pub use metrics::{
    completion_rate, estimation_errors, expected_score_error_curve, loglik_comparison, recovery_summary,
    ErrorRecord, LoglikComparison, ParameterClass, RecoverySummary, ScoreErrorPoint,
};
pub use model::{
    category_probabilities, expected_total_score, pattern_loglik, pattern_loglik_derivatives, prob_at_least,
    ItemParameters, ResponseMatrix, SlopeInterceptParameters, N_CATEGORIES, N_THRESHOLDS,
};
pub use quadrature::{gauss_hermite_normal, marginal_loglik_ghq, QuadratureRule};
pub use simulation::{sample_item_parameters, simulate, simulate_dataset, SimulatedData, SimulationSpec};
pub use study::{aggregate, run_study, StudyConfig};

/// Fits `data` with the chosen method from the given starting values.
pub fn fit(method: Method, data: &ResponseMatrix, init: &[ItemParameters], config: &FitConfig) -> Result<FitResult> {
    match method {
        Method::Laplace => fit_laplace(data, init, config),
        Method::GhqEm => fit_ghq_em(data, init, config),
    }
}
