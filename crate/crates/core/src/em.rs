//! Marginal maximum likelihood by EM on a fixed Gauss-Hermite grid.
//!
//! The E-step turns each subject's pattern into posterior weights over the
//! grid and accumulates expected counts per item, category and node. The
//! M-step maximizes each item's expected complete-data log-likelihood on its
//! own with a damped Newton iteration in the ordered coordinates.

use std::time::Instant;

use crate::error::{GrmError, Result};
use crate::fit::{
    chain_gradient, chain_hessian, from_unconstrained, order_thresholds, to_unconstrained, Bounds,
    FitConfig, FitResult, FitStatus, Method, Unconstrained,
};
use crate::model::{
    log_gap_factor, ItemParameters, LogisticLogs, ResponseMatrix, N_CATEGORIES, N_THRESHOLDS,
};
use crate::quadrature::{dataset_loglik_ghq, shared_rule, LogProbTable, QuadratureRule};

const MAX_NEWTON_STEPS: usize = 50;
const MAX_DAMPING_ESCALATIONS: usize = 50;
/// Newton decrement below which the current point is accepted.
const NEWTON_STOP: f64 = 1e-12;
/// Newton decrement below which one full step ends the M-step.
const NEWTON_FINAL_STEP: f64 = 1e-5;

/// Expected complete-data sufficient statistics on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    n_items: usize,
    n_nodes: usize,
    /// `sum_i pi_iq` per node.
    pub node_mass: Vec<f64>,
    category_mass: Vec<f64>,
    /// Dataset quadrature log-likelihood at the parameters used.
    pub loglik: f64,
    /// Items of the E-step and their logistic terms on the grid, reused by
    /// the first M-step evaluation.
    cache: Option<(Vec<ItemParameters>, Vec<LogisticLogs>)>,
}

impl ExpectedCounts {
    /// Builds counts directly; `category_mass` is item-major, then category,
    /// then node. Node masses are recomputed from the first item.
    pub fn from_category_mass(n_items: usize, n_nodes: usize, category_mass: Vec<f64>) -> Result<Self> {
        if n_items == 0 || category_mass.len() != n_items * N_CATEGORIES * n_nodes {
            return Err(GrmError::Dimension(format!(
                "category mass of length {} does not match {n_items} items x {N_CATEGORIES} x {n_nodes}",
                category_mass.len()
            )));
        }
        let node_mass = (0..n_nodes)
            .map(|q| (0..N_CATEGORIES).map(|s| category_mass[s * n_nodes + q]).sum())
            .collect();
        Ok(ExpectedCounts {
            n_items,
            n_nodes,
            node_mass,
            category_mass,
            loglik: f64::NAN,
            cache: None,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// `r_jsq` over nodes for one item and category.
    pub fn category_mass(&self, item: usize, category: usize) -> &[f64] {
        let start = (item * N_CATEGORIES + category) * self.n_nodes;
        &self.category_mass[start..start + self.n_nodes]
    }
}

/// Correlation-based starting values.
///
/// The slope comes from the item / rest-score correlation `r` as
/// `2r / sqrt(1 - r^2)` clipped to `[0.2, 5]`; thresholds invert the observed
/// exceedance fractions on that slope and are kept at least 0.05 apart.
pub fn starting_values(data: &ResponseMatrix) -> Result<Vec<ItemParameters>> {
    let n = data.n_subjects();
    let totals: Vec<f64> = data.rows().map(|r| r.iter().map(|&y| y as f64).sum()).collect();
    let counts = data.category_counts();
    (0..data.n_items())
        .map(|j| {
            if counts[j].iter().filter(|&&c| c > 0).count() < 2 {
                return Err(GrmError::DegenerateItem {
                    item: j,
                    reason: "column shows a single category".into(),
                });
            }
            let item: Vec<f64> = data.column(j).map(f64::from).collect();
            let rest: Vec<f64> = item.iter().zip(&totals).map(|(y, t)| t - y).collect();
            let a = slope_from_correlation(pearson(&item, &rest));
            let mut exceed = [0.0; N_THRESHOLDS];
            let mut above = n;
            for s in 1..N_CATEGORIES {
                above -= counts[j][s - 1];
                exceed[s - 1] = above as f64 / n as f64;
            }
            let floor = 0.5 / n as f64;
            let exceed = exceed.map(|p| p.clamp(floor, 1.0 - floor));
            ItemParameters::new(j, a, thresholds_from_exceedance(exceed, a))
        })
        .collect()
}

/// `2r / sqrt(1 - r^2)` clipped to `[0.2, 5]`.
pub fn slope_from_correlation(r: f64) -> f64 {
    if !r.is_finite() || r <= 0.0 {
        return 0.2;
    }
    if r >= 1.0 {
        return 5.0;
    }
    (2.0 * r / (1.0 - r * r).sqrt()).clamp(0.2, 5.0)
}

/// `b_s = -logit(p_s) / a`, then ordered with a minimum gap of 0.05 inside
/// the default threshold box.
pub fn thresholds_from_exceedance(exceed: [f64; N_THRESHOLDS], a: f64) -> [f64; N_THRESHOLDS] {
    let bounds = Bounds::default();
    let raw = exceed.map(|p| -(p / (1.0 - p)).ln() / a);
    order_thresholds(raw, bounds.b_min, bounds.b_max, 0.05)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Posterior node weights per subject, accumulated into expected counts.
pub fn e_step(data: &ResponseMatrix, items: &[ItemParameters], rule: &QuadratureRule) -> Result<ExpectedCounts> {
    if items.len() != data.n_items() {
        return Err(GrmError::Dimension(format!(
            "{} items but data has {} columns",
            items.len(),
            data.n_items()
        )));
    }
    let q = rule.len();
    let (table, logistics) = LogProbTable::with_logistics(items, rule);
    let mut node_mass = vec![0.0; q];
    let mut category_mass = vec![0.0; items.len() * N_CATEGORIES * q];
    let mut post = vec![0.0; q];
    let mut loglik = 0.0;
    for row in data.rows() {
        loglik += table.posterior(rule, row, &mut post);
        for (p, nm) in post.iter().zip(node_mass.iter_mut()) {
            *nm += p;
        }
        for (j, &y) in row.iter().enumerate() {
            let start = (j * N_CATEGORIES + y as usize) * q;
            for (c, p) in category_mass[start..start + q].iter_mut().zip(&post) {
                *c += p;
            }
        }
    }
    Ok(ExpectedCounts {
        n_items: items.len(),
        n_nodes: q,
        node_mass,
        category_mass,
        loglik,
        cache: Some((items.to_vec(), logistics)),
    })
}

// The objective uses the factorization
// P_s = sigma(u_{s-1}) * sigma(-u_s) * (1 - exp(-a (b_s - b_{s-1}))),
// with u_k = a (x - b_k), so each node needs one logistic per threshold and
// the gap factors do not depend on x.

fn category_totals(counts: &ExpectedCounts, item_index: usize) -> [f64; N_CATEGORIES] {
    std::array::from_fn(|s| counts.category_mass(item_index, s).iter().sum())
}

/// `Q_j = sum_q sum_s r_jsq ln P_s(x_q)` for one item.
pub fn item_objective(counts: &ExpectedCounts, item_index: usize, item: &ItemParameters, rule: &QuadratureRule) -> f64 {
    let mass: [&[f64]; N_CATEGORIES] = std::array::from_fn(|s| counts.category_mass(item_index, s));
    let mut total = 0.0;
    for (q, &x) in rule.nodes().iter().enumerate() {
        for k in 0..N_THRESHOLDS {
            let l = LogisticLogs::at(item.a * (x - item.b[k]));
            total += mass[k + 1][q] * l.ln_f + mass[k][q] * l.ln_g;
        }
    }
    let totals = category_totals(counts, item_index);
    for s in 1..N_THRESHOLDS {
        total += totals[s] * log_gap_factor(item.a * (item.b[s] - item.b[s - 1])).0;
    }
    total
}

/// Value, gradient and Hessian of `Q_j` in the natural parameters
/// `(a, b1, b2, b3, b4)`.
fn item_objective_natural(
    counts: &ExpectedCounts,
    item_index: usize,
    item: &ItemParameters,
    rule: &QuadratureRule,
    logistics: Option<&[LogisticLogs]>,
) -> (f64, [f64; N_CATEGORIES], [[f64; N_CATEGORIES]; N_CATEGORIES]) {
    let n_nodes = rule.len();
    let a = item.a;
    let mass: [&[f64]; N_CATEGORIES] = std::array::from_fn(|s| counts.category_mass(item_index, s));
    let mut value = 0.0;
    let mut grad = [0.0; N_CATEGORIES];
    let mut hess = [[0.0; N_CATEGORIES]; N_CATEGORIES];
    for k in 0..N_THRESHOLDS {
        // Sums over nodes of w1, w1*d, w2*d^2, w2*d and w2 with d = x - b_k,
        // where w1 and w2 are the first and second u-derivatives.
        let mut acc = [0.0; 5];
        for (q, &x) in rule.nodes().iter().enumerate() {
            let (r_up, r_down) = (mass[k + 1][q], mass[k][q]);
            let d = x - item.b[k];
            let l = match logistics {
                Some(cached) => cached[k * n_nodes + q],
                None => LogisticLogs::at(a * d),
            };
            value += r_up * l.ln_f + r_down * l.ln_g;
            let w1 = r_up * l.g - r_down * l.f;
            let w2 = -(r_up + r_down) * l.f * l.g;
            acc[0] += w1;
            acc[1] += w1 * d;
            acc[2] += w2 * d * d;
            acc[3] += w2 * d;
            acc[4] += w2;
        }
        let bk = k + 1;
        grad[0] += acc[1];
        grad[bk] -= a * acc[0];
        hess[0][0] += acc[2];
        hess[0][bk] += -a * acc[3] - acc[0];
        hess[bk][bk] += a * a * acc[4];
    }
    let totals = category_totals(counts, item_index);
    for s in 1..N_THRESHOLDS {
        let gap = item.b[s] - item.b[s - 1];
        let (lc, d1, d2) = log_gap_factor(a * gap);
        let r = totals[s];
        value += r * lc;
        let (lo, hi) = (s, s + 1);
        grad[0] += r * d1 * gap;
        grad[hi] += r * d1 * a;
        grad[lo] -= r * d1 * a;
        hess[0][0] += r * d2 * gap * gap;
        let cross = r * (d2 * a * gap + d1);
        hess[0][hi] += cross;
        hess[0][lo] -= cross;
        let bb = r * d2 * a * a;
        hess[hi][hi] += bb;
        hess[lo][lo] += bb;
        hess[lo][hi] -= bb;
    }
    for i in 0..N_CATEGORIES {
        for j in 0..i {
            hess[i][j] = hess[j][i];
        }
    }
    (value, grad, hess)
}

/// Gradient and Hessian of `Q_j` in the ordered coordinates.
pub fn item_objective_derivatives(
    counts: &ExpectedCounts,
    item_index: usize,
    item: &ItemParameters,
    rule: &QuadratureRule,
) -> (f64, [f64; N_CATEGORIES], [[f64; N_CATEGORIES]; N_CATEGORIES]) {
    derivatives_in_z(counts, item_index, item, rule, None)
}

fn derivatives_in_z(
    counts: &ExpectedCounts,
    item_index: usize,
    item: &ItemParameters,
    rule: &QuadratureRule,
    logistics: Option<&[LogisticLogs]>,
) -> (f64, [f64; N_CATEGORIES], [[f64; N_CATEGORIES]; N_CATEGORIES]) {
    let (value, grad, hess) = item_objective_natural(counts, item_index, item, rule, logistics);
    let z = to_unconstrained(item);
    (value, chain_gradient(&z, &grad), chain_hessian(&z, &grad, &hess))
}

/// Maximizes every item's expected complete-data log-likelihood.
pub fn m_step(counts: &ExpectedCounts, items: &[ItemParameters], rule: &QuadratureRule) -> Result<Vec<ItemParameters>> {
    if items.len() != counts.n_items() || rule.len() != counts.n_nodes() {
        return Err(GrmError::Dimension(format!(
            "counts cover {} items x {} nodes, got {} items and {} nodes",
            counts.n_items(),
            counts.n_nodes(),
            items.len(),
            rule.len()
        )));
    }
    items
        .iter()
        .enumerate()
        .map(|(j, it)| maximize_item(counts, j, it, rule, &Bounds::em_guard()))
        .collect()
}

fn maximize_item(
    counts: &ExpectedCounts,
    j: usize,
    start: &ItemParameters,
    rule: &QuadratureRule,
    guard: &Bounds,
) -> Result<ItemParameters> {
    let mut item = guard.project(start);
    let stride = N_THRESHOLDS * rule.len();
    let cached = counts
        .cache
        .as_ref()
        .filter(|(items, logs)| items.get(j) == Some(&item) && logs.len() == items.len() * stride)
        .map(|(_, logs)| &logs[j * stride..(j + 1) * stride]);
    let (mut value, mut grad, mut hess) = derivatives_in_z(counts, j, &item, rule, cached);
    for _ in 0..MAX_NEWTON_STEPS {
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(GrmError::ItemUpdate { item: j, reason: "non-finite objective or gradient".into() });
        }
        let dir = damped_newton_direction(&grad, &hess).ok_or_else(|| GrmError::ItemUpdate {
            item: j,
            reason: "Hessian could not be made negative definite".into(),
        })?;
        // Twice the predicted gain of a full step.
        let decrement: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if decrement < NEWTON_STOP {
            break;
        }
        let z = to_unconstrained(&item);
        let step = |t: f64| {
            let cand_z: Unconstrained = std::array::from_fn(|k| z[k] + t * dir[k]);
            guard.project(&from_unconstrained(item.item_id, &cand_z))
        };
        let full = step(1.0);
        if decrement < NEWTON_FINAL_STEP {
            // A full step from this close leaves a negligible residual.
            let v = item_objective(counts, j, &full, rule);
            if v.is_finite() && v >= value + 1e-4 * decrement {
                item = full;
                break;
            }
        } else {
            // Evaluated with derivatives, which the next iteration needs
            // whenever the step is accepted.
            let (v, g, h) = item_objective_derivatives(counts, j, &full, rule);
            if v.is_finite() && v >= value + 1e-4 * decrement {
                item = full;
                (value, grad, hess) = (v, g, h);
                continue;
            }
        }
        let mut t = 0.5;
        let mut improved = None;
        for _ in 0..40 {
            let cand = step(t);
            let v = item_objective(counts, j, &cand, rule);
            if v.is_finite() && v >= value + 1e-4 * t * decrement {
                improved = Some(cand);
                break;
            }
            t *= 0.5;
        }
        let Some(cand) = improved else { break };
        item = cand;
        (value, grad, hess) = item_objective_derivatives(counts, j, &item, rule);
    }
    item.item_id = start.item_id;
    Ok(item)
}

/// Solves `(-H + lambda I) d = g`, raising `lambda` until the system is
/// positive definite.
fn damped_newton_direction(
    grad: &[f64; N_CATEGORIES],
    hess: &[[f64; N_CATEGORIES]; N_CATEGORIES],
) -> Option<[f64; N_CATEGORIES]> {
    let scale = (0..N_CATEGORIES).fold(0.0f64, |m, k| m.max(hess[k][k].abs())).max(1e-12);
    let mut lambda = 0.0;
    for _ in 0..=MAX_DAMPING_ESCALATIONS {
        let mut m = [[0.0; N_CATEGORIES]; N_CATEGORIES];
        for k in 0..N_CATEGORIES {
            for l in 0..N_CATEGORIES {
                m[k][l] = -hess[k][l];
            }
            m[k][k] += lambda;
        }
        if let Some(d) = cholesky_solve(m, *grad) {
            return Some(d);
        }
        lambda = if lambda == 0.0 { 1e-8 * scale } else { lambda * 10.0 };
    }
    None
}

fn cholesky_solve(
    m: [[f64; N_CATEGORIES]; N_CATEGORIES],
    rhs: [f64; N_CATEGORIES],
) -> Option<[f64; N_CATEGORIES]> {
    let n = N_CATEGORIES;
    let mut l = [[0.0; N_CATEGORIES]; N_CATEGORIES];
    for i in 0..n {
        for j in 0..=i {
            let s = m[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            if i == j {
                if !(s > 0.0 && s.is_finite()) {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = [0.0; N_CATEGORIES];
    for i in 0..n {
        y[i] = (rhs[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; N_CATEGORIES];
    for i in (0..n).rev() {
        x[i] = (y[i] - ((i + 1)..n).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Largest change between two item sets in slope-intercept coordinates.
fn max_change(old: &[ItemParameters], new: &[ItemParameters]) -> f64 {
    old.iter()
        .zip(new)
        .map(|(o, n)| {
            let mut m = (o.a - n.a).abs();
            for k in 0..N_THRESHOLDS {
                m = m.max((o.a * o.b[k] - n.a * n.b[k]).abs());
            }
            m
        })
        .fold(0.0, f64::max)
}

/// Alternates E- and M-steps until the largest parameter change drops
/// below `config.em_tolerance`.
pub fn fit_ghq_em(data: &ResponseMatrix, init: &[ItemParameters], config: &FitConfig) -> Result<FitResult> {
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
    }
    let rule = shared_rule(config.quadrature_points)?;
    let rule = rule.as_ref();
    let mut items = init.to_vec();
    let mut history = Vec::new();
    let mut status = FitStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < config.max_outer_iterations {
        let counts = e_step(data, &items, rule)?;
        history.push(counts.loglik);
        let updated = match m_step(&counts, &items, rule) {
            Ok(u) => u,
            Err(_) => {
                status = FitStatus::NumericalFailure;
                break;
            }
        };
        iterations += 1;
        let change = max_change(&items, &updated);
        items = updated;
        if !change.is_finite() {
            status = FitStatus::NumericalFailure;
            break;
        }
        if change < config.em_tolerance {
            status = FitStatus::Converged;
            break;
        }
    }
    let loglik = dataset_loglik_ghq(&items, data, rule)?;
    history.push(loglik);
    let status = if items.iter().all(ItemParameters::is_valid) && loglik.is_finite() {
        status
    } else {
        FitStatus::NumericalFailure
    };
    Ok(FitResult::new(Method::GhqEm, status, loglik, iterations, started, items, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::category_prob;
    use crate::quadrature::gauss_hermite_normal;
    use crate::simulation::{sample_item_parameters, simulate_dataset};
    use approx::assert_abs_diff_eq;

    #[test]
    fn exceedance_thresholds() {
        // -logit(0.8) = -ln 4
        let b = thresholds_from_exceedance([0.8, 0.6, 0.4, 0.2], 1.0);
        let expected = [-4f64.ln(), -1.5f64.ln(), 1.5f64.ln(), 4f64.ln()];
        for (x, e) in b.iter().zip(expected) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(b[0], -1.386, epsilon = 1e-3);
        assert_abs_diff_eq!(b[1], -0.405, epsilon = 1e-3);

        let b = thresholds_from_exceedance([0.5, 0.5, 0.5, 0.1], 1.0);
        assert_abs_diff_eq!(b[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b[1], 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(b[2], 0.10, epsilon = 1e-15);
        assert!(b[3] > b[2]);
    }

    #[test]
    fn slope_clipping() {
        assert_eq!(slope_from_correlation(0.0), 0.2);
        assert_eq!(slope_from_correlation(-0.3), 0.2);
        assert_eq!(slope_from_correlation(0.999), 5.0);
        assert_abs_diff_eq!(slope_from_correlation(0.6), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn starting_values_are_valid_and_reject_constant_items() {
        let items = sample_item_parameters(6, 1).unwrap();
        let data = simulate_dataset(&items, 200, 2, 1000).unwrap().responses;
        let init = starting_values(&data).unwrap();
        assert!(init.iter().all(|it| it.is_valid() && Bounds::default().contains(it)));

        let constant = ResponseMatrix::from_rows(&[vec![2, 1], vec![2, 3], vec![2, 0]]).unwrap();
        assert!(matches!(starting_values(&constant), Err(GrmError::DegenerateItem { item: 0, .. })));
    }

    #[test]
    fn e_step_two_node_bayes_rule() {
        let rule = gauss_hermite_normal(2).unwrap();
        let it = ItemParameters::new(0, 1.3, [-1.0, -0.2, 0.4, 1.1]).unwrap();
        let data = ResponseMatrix::from_rows(&[vec![1], vec![4]]).unwrap();
        let counts = e_step(&data, &[it], &rule).unwrap();
        // Direct Bayes rule at nodes -1 and +1 with equal prior mass.
        let post = |y: usize| {
            let l = [category_prob(1.3, &it.b, y, -1.0), category_prob(1.3, &it.b, y, 1.0)];
            let z = l[0] + l[1];
            [l[0] / z, l[1] / z]
        };
        let (p1, p4) = (post(1), post(4));
        assert_abs_diff_eq!(counts.category_mass(0, 1)[0], p1[0], epsilon = 1e-12);
        assert_abs_diff_eq!(counts.category_mass(0, 4)[1], p4[1], epsilon = 1e-12);
        assert_abs_diff_eq!(counts.node_mass[0], p1[0] + p4[0], epsilon = 1e-12);
        let ll = (0.5 * (category_prob(1.3, &it.b, 1, -1.0) + category_prob(1.3, &it.b, 1, 1.0))).ln()
            + (0.5 * (category_prob(1.3, &it.b, 4, -1.0) + category_prob(1.3, &it.b, 4, 1.0))).ln();
        assert_abs_diff_eq!(counts.loglik, ll, epsilon = 1e-12);
    }

    #[test]
    fn e_step_mass_balance() {
        let items = sample_item_parameters(5, 4).unwrap();
        let data = simulate_dataset(&items, 150, 5, 1000).unwrap().responses;
        let rule = gauss_hermite_normal(31).unwrap();
        let counts = e_step(&data, &items, &rule).unwrap();
        assert_abs_diff_eq!(counts.node_mass.iter().sum::<f64>(), 150.0, epsilon = 1e-8);
        for j in 0..5 {
            for q in 0..rule.len() {
                let s: f64 = (0..5).map(|s| counts.category_mass(j, s)[q]).sum();
                assert_abs_diff_eq!(s, counts.node_mass[q], epsilon = 1e-8);
            }
        }
        let single = ResponseMatrix::from_rows(&[data.row(0).to_vec()]).unwrap();
        let c1 = e_step(&single, &items, &rule).unwrap();
        assert_abs_diff_eq!(c1.node_mass.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    fn exact_counts(items: &[ItemParameters], rule: &QuadratureRule, n: f64) -> ExpectedCounts {
        let q = rule.len();
        let mut mass = vec![0.0; items.len() * N_CATEGORIES * q];
        for (j, it) in items.iter().enumerate() {
            for s in 0..N_CATEGORIES {
                for (k, (&x, &w)) in rule.nodes().iter().zip(rule.weights()).enumerate() {
                    mass[(j * N_CATEGORIES + s) * q + k] = n * w * category_prob(it.a, &it.b, s, x);
                }
            }
        }
        ExpectedCounts::from_category_mass(items.len(), q, mass).unwrap()
    }

    #[test]
    fn m_step_fixed_point_and_recovery() {
        let rule = gauss_hermite_normal(61).unwrap();
        let items = sample_item_parameters(3, 8).unwrap();
        let counts = exact_counts(&items, &rule, 1000.0);
        let updated = m_step(&counts, &items, &rule).unwrap();
        for (u, it) in updated.iter().zip(&items) {
            assert_abs_diff_eq!(u.a, it.a, epsilon = 1e-6);
            for (x, y) in u.b.iter().zip(it.b) {
                assert_abs_diff_eq!(*x, y, epsilon = 1e-6);
            }
        }

        // Recovery from a perturbed start with N = 1e5 equivalent mass.
        let truth = ItemParameters::new(0, 1.4, [-1.8, -0.6, 0.3, 1.7]).unwrap();
        let counts = exact_counts(&[truth], &rule, 1e5);
        let start = ItemParameters::new(0, 0.8, [-1.0, -0.2, 0.6, 1.0]).unwrap();
        let got = m_step(&counts, &[start], &rule).unwrap()[0];
        assert_abs_diff_eq!(got.a, truth.a, epsilon = 1e-2);
        for (x, y) in got.b.iter().zip(truth.b) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-2);
        }
    }

    #[test]
    fn m_step_never_decreases_item_objective() {
        let rule = gauss_hermite_normal(21).unwrap();
        for seed in 0..5 {
            let truth = sample_item_parameters(4, 40 + seed).unwrap();
            let data = simulate_dataset(&truth, 120, 50 + seed, 1000).unwrap().responses;
            let start = starting_values(&data).unwrap();
            let counts = e_step(&data, &start, &rule).unwrap();
            let updated = m_step(&counts, &start, &rule).unwrap();
            for j in 0..4 {
                let before = item_objective(&counts, j, &start[j], &rule);
                let after = item_objective(&counts, j, &updated[j], &rule);
                assert!(after >= before, "seed {seed} item {j}: {after} < {before}");
            }
        }
    }

    #[test]
    fn item_derivatives_match_finite_differences() {
        let rule = gauss_hermite_normal(21).unwrap();
        let truth = sample_item_parameters(2, 77).unwrap();
        let data = simulate_dataset(&truth, 80, 78, 1000).unwrap().responses;
        let counts = e_step(&data, &truth, &rule).unwrap();
        let it = truth[1];
        let z = to_unconstrained(&it);
        let (_, g, h) = item_objective_derivatives(&counts, 1, &it, &rule);
        let eps = 1e-5;
        for m in 0..5 {
            let at = |d: f64| {
                let mut zz = z;
                zz[m] += d;
                from_unconstrained(1, &zz)
            };
            let fd = (item_objective(&counts, 1, &at(eps), &rule) - item_objective(&counts, 1, &at(-eps), &rule)) / (2.0 * eps);
            assert!((g[m] - fd).abs() <= 1e-6 * g[m].abs().max(1.0), "{m}: {} vs {fd}", g[m]);
            let gu = item_objective_derivatives(&counts, 1, &at(eps), &rule).1;
            let gd = item_objective_derivatives(&counts, 1, &at(-eps), &rule).1;
            for n in 0..5 {
                let fd = (gu[n] - gd[n]) / (2.0 * eps);
                assert!((h[n][m] - fd).abs() <= 1e-6 * h[n][m].abs().max(1.0), "{n},{m}: {} vs {fd}", h[n][m]);
            }
        }
    }

    #[test]
    fn em_is_monotone_and_dominates_truth() {
        let truth = sample_item_parameters(5, 31).unwrap();
        let data = simulate_dataset(&truth, 300, 32, 1000).unwrap().responses;
        let config = FitConfig::default();
        let fit = fit_ghq_em(&data, &truth, &config).unwrap();
        assert_eq!(fit.status, FitStatus::Converged);
        assert!(fit.loglik_history.windows(2).all(|w| w[1] >= w[0] - 1e-10));
        let rule = gauss_hermite_normal(61).unwrap();
        assert!(fit.loglik >= dataset_loglik_ghq(&truth, &data, &rule).unwrap());
        let again = fit_ghq_em(&data, &truth, &config).unwrap();
        assert_eq!(again.estimates, fit.estimates);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        let mut m = [[0.0; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                m[i][j] = 1.0 / (1.0 + i as f64 + j as f64) + if i == j { 1.0 } else { 0.0 };
            }
        }
        let x = [1.0, -2.0, 0.5, 3.0, -1.0];
        let b: [f64; 5] = std::array::from_fn(|i| (0..5).map(|j| m[i][j] * x[j]).sum());
        let got = cholesky_solve(m, b).unwrap();
        for (g, e) in got.iter().zip(x) {
            assert_abs_diff_eq!(*g, e, epsilon = 1e-12);
        }
        let mut neg = m;
        neg[0][0] = -1.0;
        assert!(cholesky_solve(neg, b).is_none());
    }
}
