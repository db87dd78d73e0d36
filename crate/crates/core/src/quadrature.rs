//! Gauss-Hermite rules for expectations under the standard normal density,
//! and the quadrature approximation of the marginal log-likelihood.
//!
//! Nodes are the eigenvalues of the symmetric tridiagonal Jacobi matrix of
//! the probabilists' Hermite recurrence (zero diagonal, off-diagonal
//! `sqrt(k)`), found with implicit QL iterations. Each node is then polished
//! with a Newton step on the orthonormal recurrence and its weight is the
//! Christoffel number `1 / sum_k p_k(x)^2`, which is the squared first
//! eigenvector component but evaluated in log space so that tail weights do
//! not lose relative precision.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{GrmError, Result};
use crate::model::{gap_logs, ItemParameters, LogisticLogs, ResponseMatrix, N_CATEGORIES, N_THRESHOLDS};

pub const DEFAULT_QUADRATURE_POINTS: usize = 61;
pub const MAX_QUADRATURE_POINTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Normalised weights; may underflow to zero in the far tails of very
    /// large rules, in which case `log_weights` remains exact.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `sum_q w_q f(x_q)`, approximating `E[f(X)]` for `X ~ N(0, 1)`.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Probabilists' Gauss-Hermite rule with `q` nodes, weights summing to one.
pub fn gauss_hermite_normal(q: usize) -> Result<QuadratureRule> {
    if q < 1 {
        return Err(GrmError::Domain("quadrature needs at least one node".into()));
    }
    if q > MAX_QUADRATURE_POINTS {
        return Err(GrmError::Resource(format!(
            "{q} quadrature nodes requested, at most {MAX_QUADRATURE_POINTS} supported"
        )));
    }

    let mut diag = vec![0.0; q];
    let mut off: Vec<f64> = (1..=q).map(|k| if k < q { (k as f64).sqrt() } else { 0.0 }).collect();
    tridiagonal_eigenvalues(&mut diag, &mut off)?;
    let mut nodes = diag;
    nodes.sort_by(f64::total_cmp);

    for x in nodes.iter_mut() {
        for _ in 0..2 {
            let (p_q, p_qm1, _) = orthonormal_hermite(*x, q);
            let step = p_q / ((q as f64).sqrt() * p_qm1);
            if step.is_finite() {
                *x -= step;
            }
        }
    }

    // Exact symmetry about zero.
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let half = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -half;
        nodes[j] = half;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
    }

    let mut log_weights: Vec<f64> = nodes
        .iter()
        .map(|&x| -orthonormal_hermite(x, q).2)
        .collect();
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let avg = 0.5 * (log_weights[i] + log_weights[j]);
        log_weights[i] = avg;
        log_weights[j] = avg;
    }
    let norm = log_sum_exp(&log_weights);
    for lw in log_weights.iter_mut() {
        *lw -= norm;
    }
    let mut weights: Vec<f64> = log_weights.iter().map(|lw| lw.exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }

    Ok(QuadratureRule {
        nodes,
        weights,
        log_weights,
    })
}

/// Process-wide cache of built rules, keyed by size.
pub fn shared_rule(q: usize) -> Result<Arc<QuadratureRule>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<QuadratureRule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(rule) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&q) {
        return Ok(Arc::clone(rule));
    }
    let rule = Arc::new(gauss_hermite_normal(q)?);
    cache
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .insert(q, Arc::clone(&rule));
    Ok(rule)
}

/// Returns `(p_q(x), p_{q-1}(x), ln sum_{k<q} p_k(x)^2)` for the
/// orthonormal probabilists' Hermite polynomials, with the first two values
/// sharing an arbitrary positive scale.
fn orthonormal_hermite(x: f64, q: usize) -> (f64, f64, f64) {
    const RESCALE: f64 = 1e100;
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum_sq = 1.0;
    let mut log_scale = 0.0;
    for k in 0..q {
        let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
        prev = cur;
        cur = next;
        if k + 1 < q {
            sum_sq += cur * cur;
        }
        if cur.abs() > RESCALE {
            prev /= RESCALE;
            cur /= RESCALE;
            sum_sq /= RESCALE * RESCALE;
            log_scale += 2.0 * RESCALE.ln();
        }
    }
    (cur, prev, sum_sq.ln() + log_scale)
}

/// Implicit QL with Wilkinson shifts on a symmetric tridiagonal matrix.
/// `off[i]` couples rows `i` and `i + 1`; eigenvalues overwrite `diag`.
fn tridiagonal_eigenvalues(diag: &mut [f64], off: &mut [f64]) -> Result<()> {
    let n = diag.len();
    for l in 0..n {
        let mut iterations = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = diag[m].abs() + diag[m + 1].abs();
                if off[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 100 {
                return Err(GrmError::Resource(
                    "tridiagonal eigenvalue iteration did not converge".into(),
                ));
            }
            let mut g = (diag[l + 1] - diag[l]) / (2.0 * off[l]);
            let mut r = g.hypot(1.0);
            g = diag[m] - diag[l] + off[l] / (g + r.copysign(g));
            let (mut s, mut c, mut p) = (1.0, 1.0, 0.0);
            let mut deflated = false;
            for i in (l..m).rev() {
                let f = s * off[i];
                let b = c * off[i];
                r = f.hypot(g);
                off[i + 1] = r;
                if r == 0.0 {
                    diag[i + 1] -= p;
                    off[m] = 0.0;
                    deflated = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = diag[i + 1] - p;
                r = (diag[i] - g) * s + 2.0 * c * b;
                p = s * r;
                diag[i + 1] = g + p;
                g = c * r - b;
            }
            if deflated {
                continue;
            }
            diag[l] -= p;
            off[l] = g;
            off[m] = 0.0;
        }
    }
    Ok(())
}

/// `ln sum exp(v)`, returning `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln P(Y_j = s | x_q)` for every item, category and node.
#[derive(Debug, Clone)]
pub(crate) struct LogProbTable {
    n_nodes: usize,
    table: Vec<f64>,
}

impl LogProbTable {
    pub fn new(items: &[ItemParameters], rule: &QuadratureRule) -> Self {
        Self::with_logistics(items, rule).0
    }

    /// Also returns the logistic terms of every item, threshold and node
    /// (item-major, then threshold, then node).
    pub fn with_logistics(items: &[ItemParameters], rule: &QuadratureRule) -> (Self, Vec<LogisticLogs>) {
        let n_nodes = rule.len();
        let mut table = vec![0.0; items.len() * N_CATEGORIES * n_nodes];
        let mut logistics = Vec::with_capacity(items.len() * N_THRESHOLDS * n_nodes);
        for (j, it) in items.iter().enumerate() {
            let gaps = gap_logs(it.a, &it.b);
            for k in 0..N_THRESHOLDS {
                logistics.extend(rule.nodes().iter().map(|&x| LogisticLogs::at(it.a * (x - it.b[k]))));
            }
            let l = &logistics[j * N_THRESHOLDS * n_nodes..];
            let block = &mut table[j * N_CATEGORIES * n_nodes..(j + 1) * N_CATEGORIES * n_nodes];
            for q in 0..n_nodes {
                let at = |k: usize| &l[k * n_nodes + q];
                block[q] = at(0).ln_g;
                for s in 1..N_THRESHOLDS {
                    block[s * n_nodes + q] = at(s - 1).ln_f + at(s).ln_g + gaps[s - 1];
                }
                block[N_THRESHOLDS * n_nodes + q] = at(N_THRESHOLDS - 1).ln_f;
            }
        }
        (LogProbTable { n_nodes, table }, logistics)
    }

    #[inline]
    pub fn row(&self, item: usize, category: usize) -> &[f64] {
        let start = (item * N_CATEGORIES + category) * self.n_nodes;
        &self.table[start..start + self.n_nodes]
    }

    /// Writes `ln w_q + pattern_loglik(x_q)` into `out` and returns the
    /// subject's log marginal.
    pub fn log_joint(&self, rule: &QuadratureRule, responses: &[u8], out: &mut [f64]) -> f64 {
        out.copy_from_slice(rule.log_weights());
        for (j, &y) in responses.iter().enumerate() {
            for (o, lp) in out.iter_mut().zip(self.row(j, y as usize)) {
                *o += lp;
            }
        }
        log_sum_exp(out)
    }

    /// Writes the subject's posterior node weights into `out` and returns
    /// the subject's log marginal.
    pub fn posterior(&self, rule: &QuadratureRule, responses: &[u8], out: &mut [f64]) -> f64 {
        out.copy_from_slice(rule.log_weights());
        for (j, &y) in responses.iter().enumerate() {
            for (o, lp) in out.iter_mut().zip(self.row(j, y as usize)) {
                *o += lp;
            }
        }
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
        max + total.ln()
    }
}

fn check_dims(items: &[ItemParameters], n_responses: usize) -> Result<()> {
    if items.len() != n_responses {
        return Err(GrmError::Dimension(format!(
            "{} items but {} responses per subject",
            items.len(),
            n_responses
        )));
    }
    Ok(())
}

/// `ln sum_q w_q exp(pattern_loglik(x_q))` for one response row.
pub fn marginal_loglik_ghq(
    items: &[ItemParameters],
    responses: &[u8],
    rule: &QuadratureRule,
) -> Result<f64> {
    check_dims(items, responses.len())?;
    crate::model::pattern_loglik(items, responses, 0.0)?;
    let terms: Vec<f64> = rule
        .nodes()
        .iter()
        .zip(rule.log_weights())
        .map(|(&x, &lw)| lw + crate::model::pattern_loglik_unchecked(items, responses, x))
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Sum of per-subject quadrature marginals.
pub fn dataset_loglik_ghq(
    items: &[ItemParameters],
    data: &ResponseMatrix,
    rule: &QuadratureRule,
) -> Result<f64> {
    check_dims(items, data.n_items())?;
    let table = LogProbTable::new(items, rule);
    let mut buf = vec![0.0; rule.len()];
    Ok(data.rows().map(|row| table.log_joint(rule, row, &mut buf)).sum())
}
