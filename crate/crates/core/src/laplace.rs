//! Laplace approximation of the per-subject marginal likelihood and the
//! outer maximum-likelihood fit over item parameters.
//!
//! For one subject the joint log-density is
//! `g(eta) = pattern_loglik(eta) - eta^2 / 2 - ln(2 pi) / 2`. Its mode
//! `eta_hat` is found by Newton iteration and, with `H = -g''(eta_hat)`,
//! the marginal is approximated by `g(eta_hat) + ln(2 pi) / 2 - ln(H) / 2`.
//!
//! The gradient of the summed approximation with respect to the item
//! parameters is exact: the mode moves with the parameters, and the
//! implicit-function theorem gives `d eta_hat / d theta = g'_theta / H`, so
//! `dL/dtheta = l_theta + l''_theta / (2H) + g''' l'_theta / (2H^2)`.

use std::time::Instant;

use crate::error::{GrmError, Result};
use crate::fit::{
    chain_gradient, from_unconstrained, to_unconstrained, FitConfig, FitResult, FitStatus, Method,
    Unconstrained,
};
use crate::model::{
    pattern_derivs_unchecked, pattern_loglik, response_derivs, response_param_derivs, ItemParameters,
    ResponseMatrix, N_CATEGORIES,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
pub const DEFAULT_INNER_TOLERANCE: f64 = 1e-9;
const MAX_NEWTON_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeResult {
    pub eta_hat: f64,
    /// `-g''(eta_hat)`, always positive.
    pub curvature: f64,
    pub iterations: usize,
}

/// `(g, g', g'')` of the joint log-density with a standard normal prior.
pub fn joint_logdensity(items: &[ItemParameters], responses: &[u8], eta: f64) -> Result<(f64, f64, f64)> {
    pattern_loglik(items, responses, eta)?;
    let d = pattern_derivs_unchecked(items, responses, eta);
    Ok((d[0] - 0.5 * eta * eta - HALF_LN_2PI, d[1] - eta, d[2] - 1.0))
}

pub fn find_posterior_mode(items: &[ItemParameters], responses: &[u8], inner_tolerance: f64) -> Result<ModeResult> {
    if !(inner_tolerance > 0.0) {
        return Err(GrmError::Precondition(format!(
            "inner tolerance must be positive, got {inner_tolerance}"
        )));
    }
    pattern_loglik(items, responses, 0.0)?;
    mode_from(items, responses, 0.0, inner_tolerance)
}

/// Damped Newton ascent on `g` from `start`.
fn mode_from(items: &[ItemParameters], responses: &[u8], start: f64, tol: f64) -> Result<ModeResult> {
    let eval = |eta: f64| {
        let d = pattern_derivs_unchecked(items, responses, eta);
        (d[0] - 0.5 * eta * eta, d[1] - eta, 1.0 - d[2])
    };
    let mut eta = if start.is_finite() { start } else { 0.0 };
    let (mut g, mut g1, mut h) = eval(eta);
    for iterations in 0..=MAX_NEWTON_STEPS {
        if g1.abs() < tol && h > 0.0 {
            return Ok(ModeResult { eta_hat: eta, curvature: h, iterations });
        }
        if iterations == MAX_NEWTON_STEPS {
            break;
        }
        // The prior keeps h >= 1 wherever the floor is not active.
        let mut step = g1 / h.max(1.0);
        let mut accepted = false;
        for _ in 0..60 {
            let cand = eta + step;
            let (gc, g1c, hc) = eval(cand);
            if gc >= g || (g1c.abs() < g1.abs() && gc >= g - 1e-12 * g.abs()) {
                eta = cand;
                g = gc;
                g1 = g1c;
                h = hc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(GrmError::InnerFailure { iterations: MAX_NEWTON_STEPS })
}

/// Laplace approximation of `ln integral exp(pattern_loglik) phi`.
pub fn marginal_loglik_laplace(items: &[ItemParameters], responses: &[u8]) -> Result<f64> {
    let mode = find_posterior_mode(items, responses, DEFAULT_INNER_TOLERANCE)?;
    let l = pattern_derivs_unchecked(items, responses, mode.eta_hat)[0];
    Ok(l - 0.5 * mode.eta_hat * mode.eta_hat - 0.5 * mode.curvature.ln())
}

/// Summed Laplace marginal over a dataset, with warm-started modes.
#[derive(Debug, Clone)]
pub struct LaplaceObjective<'a> {
    data: &'a ResponseMatrix,
    inner_tolerance: f64,
}

/// Value of the summed objective, its gradient in natural coordinates
/// (`(a, b1..b4)` per item, item-major) and the modes it was built on.
#[derive(Debug, Clone)]
pub struct LaplaceEvaluation {
    pub loglik: f64,
    pub gradient: Vec<f64>,
    pub modes: Vec<f64>,
    pub min_curvature: f64,
}

impl<'a> LaplaceObjective<'a> {
    pub fn new(data: &'a ResponseMatrix, inner_tolerance: f64) -> Self {
        LaplaceObjective { data, inner_tolerance }
    }

    /// Evaluates at `items`, starting each mode search from `warm` (or zero).
    pub fn evaluate(&self, items: &[ItemParameters], warm: Option<&[f64]>, with_gradient: bool) -> Result<LaplaceEvaluation> {
        if items.len() != self.data.n_items() {
            return Err(GrmError::Dimension(format!(
                "{} items but data has {} columns",
                items.len(),
                self.data.n_items()
            )));
        }
        let mut loglik = 0.0;
        let mut gradient = vec![0.0; if with_gradient { items.len() * N_CATEGORIES } else { 0 }];
        let mut modes = Vec::with_capacity(self.data.n_subjects());
        let mut min_curvature = f64::INFINITY;
        for (i, row) in self.data.rows().enumerate() {
            let start = warm.map_or(0.0, |w| w[i]);
            let mode = mode_from(items, row, start, self.inner_tolerance)?;
            let eta = mode.eta_hat;
            let mut l0 = 0.0;
            let mut third = 0.0;
            for (it, &y) in items.iter().zip(row) {
                let d = response_derivs(it, y as usize, eta);
                l0 += d[0];
                third += d[3];
            }
            let h = mode.curvature;
            debug_assert!(h > 0.0);
            min_curvature = min_curvature.min(h);
            loglik += l0 - 0.5 * eta * eta - 0.5 * h.ln();
            if with_gradient {
                let c2 = 0.5 / h;
                let c1 = third * 0.5 / (h * h);
                for (j, (it, &y)) in items.iter().zip(row).enumerate() {
                    let pd = response_param_derivs(it, y as usize, eta);
                    let g = &mut gradient[j * N_CATEGORIES..(j + 1) * N_CATEGORIES];
                    for k in 0..N_CATEGORIES {
                        g[k] += pd[0][k] + c2 * pd[2][k] + c1 * pd[1][k];
                    }
                }
            }
            modes.push(eta);
        }
        Ok(LaplaceEvaluation { loglik, gradient, modes, min_curvature })
    }
}

/// Summed Laplace marginal log-likelihood of a dataset.
pub fn dataset_loglik_laplace(items: &[ItemParameters], data: &ResponseMatrix) -> Result<f64> {
    Ok(LaplaceObjective::new(data, DEFAULT_INNER_TOLERANCE)
        .evaluate(items, None, false)?
        .loglik)
}

/// State of the outer minimization of `phi(z) = -loglik / N`.
struct Point {
    z: Vec<f64>,
    phi: f64,
    loglik: f64,
    grad: Vec<f64>,
    modes: Vec<f64>,
}

struct Problem<'a> {
    objective: LaplaceObjective<'a>,
    config: &'a FitConfig,
    n_items: usize,
    scale: f64,
}

impl Problem<'_> {
    fn items(&self, z: &[f64]) -> Vec<ItemParameters> {
        z.chunks_exact(N_CATEGORIES)
            .enumerate()
            .map(|(j, c)| from_unconstrained(j, &unconstrained(c)))
            .collect()
    }

    /// Maps `z` to the closest point whose natural parameters are in bounds.
    fn project(&self, z: &[f64]) -> Vec<f64> {
        let bounds = &self.config.bounds;
        let mut out = z.to_vec();
        for (j, chunk) in out.chunks_exact_mut(N_CATEGORIES).enumerate() {
            let it = from_unconstrained(j, &unconstrained(chunk));
            if !bounds.contains(&it) || !it.b.iter().all(|b| b.is_finite()) {
                chunk.copy_from_slice(&to_unconstrained(&bounds.project(&it)));
            }
        }
        out
    }

    fn at_bound(&self, z: &[f64]) -> bool {
        self.items(z)
            .iter()
            .any(|it| self.config.bounds.touches(it, 1e-9))
    }

    fn evaluate(&self, z: Vec<f64>, warm: &[f64]) -> Option<Point> {
        let items = self.items(&z);
        let eval = self.objective.evaluate(&items, Some(warm), true).ok()?;
        if !eval.loglik.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
            return None;
        }
        let mut grad = Vec::with_capacity(z.len());
        for (j, zc) in z.chunks_exact(N_CATEGORIES).enumerate() {
            let g_nat: [f64; N_CATEGORIES] =
                std::array::from_fn(|k| eval.gradient[j * N_CATEGORIES + k]);
            grad.extend(chain_gradient(&unconstrained(zc), &g_nat).map(|g| -g / self.scale));
        }
        Some(Point {
            z,
            phi: -eval.loglik / self.scale,
            loglik: eval.loglik,
            grad,
            modes: eval.modes,
        })
    }
}

fn unconstrained(c: &[f64]) -> Unconstrained {
    std::array::from_fn(|k| c[k])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Maximizes the summed Laplace marginal over all item parameters with a
/// projected BFGS iteration in the ordered coordinates.
pub fn fit_laplace(data: &ResponseMatrix, init: &[ItemParameters], config: &FitConfig) -> Result<FitResult> {
    let started = Instant::now();
    config.validate()?;
    if init.len() != data.n_items() {
        return Err(GrmError::Dimension(format!(
            "{} initial items but data has {} columns",
            init.len(),
            data.n_items()
        )));
    }
    for it in init {
        it.validate()?;
        if !config.bounds.contains(it) {
            return Err(GrmError::Precondition(format!(
                "initial item {} lies outside the bounds {:?}",
                it.item_id, config.bounds
            )));
        }
    }
    let ids: Vec<usize> = init.iter().map(|it| it.item_id).collect();
    let relabel = |items: Vec<ItemParameters>| -> Vec<ItemParameters> {
        items
            .into_iter()
            .zip(&ids)
            .map(|(mut it, &id)| {
                it.item_id = id;
                it
            })
            .collect()
    };

    let problem = Problem {
        objective: LaplaceObjective::new(data, config.inner_tolerance),
        config,
        n_items: init.len(),
        scale: data.n_subjects() as f64,
    };
    let z0: Vec<f64> = init.iter().flat_map(to_unconstrained).collect();
    let zeros = vec![0.0; data.n_subjects()];
    let Some(mut cur) = problem.evaluate(z0, &zeros) else {
        return Ok(FitResult::new(
            Method::Laplace,
            FitStatus::NumericalFailure,
            f64::NAN,
            0,
            started,
            init.to_vec(),
            Vec::new(),
        ));
    };

    let dim = problem.n_items * N_CATEGORIES;
    let mut inv_hess = identity(dim);
    let mut fresh_hessian = true;
    let mut history = vec![cur.loglik];
    let mut small_changes = 0;
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    let grad_tol = 10.0 * config.outer_tolerance;

    while iterations < config.max_outer_iterations {
        let mut dir: Vec<f64> = mat_vec(&inv_hess, &cur.grad).iter().map(|v| -v).collect();
        if dot(&dir, &cur.grad) >= 0.0 {
            inv_hess = identity(dim);
            fresh_hessian = true;
            dir = cur.grad.iter().map(|g| -g).collect();
        }
        let longest = max_abs(&dir);
        if longest > 2.0 {
            dir.iter_mut().for_each(|d| *d *= 2.0 / longest);
        }

        let mut t = 1.0;
        let mut next = None;
        for _ in 0..50 {
            let trial: Vec<f64> = cur.z.iter().zip(&dir).map(|(z, d)| z + t * d).collect();
            let trial = problem.project(&trial);
            let step: Vec<f64> = trial.iter().zip(&cur.z).map(|(a, b)| a - b).collect();
            if max_abs(&step) < 1e-15 {
                break;
            }
            if let Some(p) = problem.evaluate(trial, &cur.modes) {
                if p.phi <= cur.phi + 1e-4 * dot(&cur.grad, &step) && p.phi <= cur.phi {
                    next = Some((p, step));
                    break;
                }
            }
            t *= 0.5;
        }

        let Some((new, step)) = next else {
            if !fresh_hessian {
                inv_hess = identity(dim);
                fresh_hessian = true;
                continue;
            }
            status = if max_abs(&cur.grad) < grad_tol {
                FitStatus::Converged
            } else if problem.at_bound(&cur.z) {
                FitStatus::BoundaryStuck
            } else {
                FitStatus::LineSearchFailure
            };
            break;
        };
        iterations += 1;

        let y: Vec<f64> = new.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&step, &y);
        if sy > 1e-12 * dot(&step, &step).sqrt() * dot(&y, &y).sqrt() {
            if fresh_hessian {
                let scale = sy / dot(&y, &y);
                inv_hess = identity(dim);
                inv_hess.iter_mut().for_each(|v| *v *= scale);
            }
            bfgs_update(&mut inv_hess, &step, &y, sy);
            fresh_hessian = false;
        }

        let rel = (new.phi - cur.phi).abs() / cur.phi.abs().max(1.0);
        cur = new;
        history.push(cur.loglik);
        small_changes = if rel < config.outer_tolerance { small_changes + 1 } else { 0 };
        if small_changes >= 2 && (max_abs(&cur.grad) < grad_tol || problem.at_bound(&cur.z)) {
            status = FitStatus::Converged;
            break;
        }
    }

    let estimates = relabel(problem.items(&cur.z));
    let status = if estimates.iter().all(ItemParameters::is_valid) {
        status
    } else {
        FitStatus::NumericalFailure
    };
    Ok(FitResult::new(
        Method::Laplace,
        status,
        cur.loglik,
        iterations,
        started,
        estimates,
        history,
    ))
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks_exact(v.len()).map(|row| dot(row, v)).collect()
}

/// Inverse-Hessian BFGS update `(I - r s y^T) H (I - r y s^T) + r s s^T`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let r = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let coef = (1.0 + r * yhy) * r;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - r * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
