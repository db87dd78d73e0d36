//! Graded response model: item parameters, response data and the cumulative
//! logistic category probabilities built from them.
//!
//! Every item has five ordered categories (scores 0..=4) and therefore four
//! thresholds. `P(Y >= s | psi) = logistic(a * (psi - b_s))` and the
//! probability of an exact score is the difference of two neighbouring
//! exceedance curves.

use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};

pub const N_CATEGORIES: usize = 5;
pub const N_THRESHOLDS: usize = 4;

/// Category probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Traditional (discrimination / threshold) parameterization of one item.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "ItemRecord", into = "ItemRecord")]
pub struct ItemParameters {
    pub item_id: usize,
    pub a: f64,
    pub b: [f64; N_THRESHOLDS],
}

/// Flat `item,a,b1,b2,b3,b4` record shared by the CSV and JSON encodings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub(crate) struct ItemRecord {
    pub item: usize,
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub b4: f64,
}

impl From<ItemRecord> for ItemParameters {
    fn from(r: ItemRecord) -> Self {
        ItemParameters {
            item_id: r.item,
            a: r.a,
            b: [r.b1, r.b2, r.b3, r.b4],
        }
    }
}

impl From<ItemParameters> for ItemRecord {
    fn from(p: ItemParameters) -> Self {
        ItemRecord {
            item: p.item_id,
            a: p.a,
            b1: p.b[0],
            b2: p.b[1],
            b3: p.b[2],
            b4: p.b[3],
        }
    }
}

impl ItemParameters {
    pub fn new(item_id: usize, a: f64, b: [f64; N_THRESHOLDS]) -> Result<Self> {
        let item = ItemParameters { item_id, a, b };
        item.validate()?;
        Ok(item)
    }

    /// Checks `a > 0`, finiteness and strictly increasing thresholds.
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0) {
            return Err(GrmError::Domain(format!(
                "item {}: discrimination must be positive and finite, got {}",
                self.item_id, self.a
            )));
        }
        if self.b.iter().any(|b| !b.is_finite()) {
            return Err(GrmError::Domain(format!(
                "item {}: thresholds must be finite, got {:?}",
                self.item_id, self.b
            )));
        }
        if self.b.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GrmError::Domain(format!(
                "item {}: thresholds must be strictly increasing, got {:?}",
                self.item_id, self.b
            )));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn to_slope_intercept(&self) -> Result<SlopeInterceptParameters> {
        if !(self.a > 0.0) {
            return Err(GrmError::Domain(format!(
                "item {}: slope-intercept conversion needs a > 0, got {}",
                self.item_id, self.a
            )));
        }
        Ok(SlopeInterceptParameters {
            item_id: self.item_id,
            a: self.a,
            d: self.b.map(|b| -self.a * b),
        })
    }

    pub fn from_slope_intercept(si: &SlopeInterceptParameters) -> Result<Self> {
        si.to_traditional()
    }

    /// `P(Y >= s | psi)` for `s` in `1..=4`.
    pub fn prob_at_least(&self, s: usize, psi: f64) -> Result<f64> {
        prob_at_least(self, s, psi)
    }

    pub fn category_probabilities(&self, psi: f64) -> [f64; N_CATEGORIES] {
        category_probabilities(self, psi)
    }
}

/// Slope-intercept parameterization, `d_s = -a * b_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeInterceptParameters {
    pub item_id: usize,
    pub a: f64,
    pub d: [f64; N_THRESHOLDS],
}

impl SlopeInterceptParameters {
    pub fn to_traditional(&self) -> Result<ItemParameters> {
        if !(self.a > 0.0) {
            return Err(GrmError::Domain(format!(
                "item {}: slope-intercept conversion needs a > 0, got {}",
                self.item_id, self.a
            )));
        }
        Ok(ItemParameters {
            item_id: self.item_id,
            a: self.a,
            b: self.d.map(|d| -d / self.a),
        })
    }
}

/// N subjects by M items of scores in `0..=4`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResponseMatrix {
    n_subjects: usize,
    n_items: usize,
    responses: Vec<u8>,
}

impl ResponseMatrix {
    pub fn new(n_subjects: usize, n_items: usize, responses: Vec<u8>) -> Result<Self> {
        if n_subjects == 0 || n_items == 0 {
            return Err(GrmError::Domain(format!(
                "response matrix needs at least one subject and one item, got {n_subjects}x{n_items}"
            )));
        }
        if responses.len() != n_subjects * n_items {
            return Err(GrmError::Dimension(format!(
                "expected {} responses for {n_subjects}x{n_items}, got {}",
                n_subjects * n_items,
                responses.len()
            )));
        }
        if let Some(pos) = responses.iter().position(|&y| y as usize >= N_CATEGORIES) {
            return Err(GrmError::Domain(format!(
                "response {} at subject {}, item {} is outside 0..=4",
                responses[pos],
                pos / n_items,
                pos % n_items
            )));
        }
        Ok(ResponseMatrix {
            n_subjects,
            n_items,
            responses,
        })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_items = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_items) {
            return Err(GrmError::Dimension("rows have different lengths".into()));
        }
        Self::new(rows.len(), n_items, rows.concat())
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn row(&self, subject: usize) -> &[u8] {
        &self.responses[subject * self.n_items..(subject + 1) * self.n_items]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> + '_ {
        self.responses.chunks_exact(self.n_items)
    }

    pub fn get(&self, subject: usize, item: usize) -> u8 {
        self.responses[subject * self.n_items + item]
    }

    pub fn column(&self, item: usize) -> impl Iterator<Item = u8> + '_ {
        self.rows().map(move |r| r[item])
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.responses
    }

    /// Per item, how many subjects scored in each category.
    pub fn category_counts(&self) -> Vec<[usize; N_CATEGORIES]> {
        let mut counts = vec![[0usize; N_CATEGORIES]; self.n_items];
        for row in self.rows() {
            for (c, &y) in counts.iter_mut().zip(row) {
                c[y as usize] += 1;
            }
        }
        counts
    }

    /// True when every item column contains every category.
    pub fn all_categories_present(&self) -> bool {
        self.category_counts()
            .iter()
            .all(|c| c.iter().all(|&n| n > 0))
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn prob_at_least(item: &ItemParameters, s: usize, psi: f64) -> Result<f64> {
    if !(1..=N_THRESHOLDS).contains(&s) {
        return Err(GrmError::Domain(format!(
            "exceedance category must be in 1..=4, got {s}"
        )));
    }
    Ok(logistic(item.a * (psi - item.b[s - 1])))
}

/// `P(Y = s)` without flooring. Differences of neighbouring logistic curves
/// are evaluated as `F(hi) * (1 - F(lo)) * (1 - exp(lo - hi))`, which keeps
/// full relative precision in both tails.
#[inline]
pub(crate) fn category_prob(a: f64, b: &[f64; N_THRESHOLDS], s: usize, psi: f64) -> f64 {
    match s {
        0 => logistic(-a * (psi - b[0])),
        N_THRESHOLDS => logistic(a * (psi - b[N_THRESHOLDS - 1])),
        _ => {
            let hi = a * (psi - b[s - 1]);
            let lo = a * (psi - b[s]);
            logistic(hi) * logistic(-lo) * -(lo - hi).exp_m1()
        }
    }
}

pub fn category_probabilities(item: &ItemParameters, psi: f64) -> [f64; N_CATEGORIES] {
    std::array::from_fn(|s| category_prob(item.a, &item.b, s, psi))
}

#[inline]
pub(crate) fn log_category_prob(a: f64, b: &[f64; N_THRESHOLDS], s: usize, psi: f64) -> f64 {
    category_prob(a, b, s, psi).max(PROB_FLOOR).ln()
}

fn check_pattern(items: &[ItemParameters], responses: &[u8]) -> Result<()> {
    if items.len() != responses.len() {
        return Err(GrmError::Dimension(format!(
            "{} items but {} responses",
            items.len(),
            responses.len()
        )));
    }
    if let Some(&y) = responses.iter().find(|&&y| y as usize >= N_CATEGORIES) {
        return Err(GrmError::Domain(format!("response {y} is outside 0..=4")));
    }
    Ok(())
}

/// Log-likelihood of one response row at a latent value.
pub fn pattern_loglik(items: &[ItemParameters], responses: &[u8], psi: f64) -> Result<f64> {
    check_pattern(items, responses)?;
    Ok(pattern_loglik_unchecked(items, responses, psi))
}

#[inline]
pub(crate) fn pattern_loglik_unchecked(items: &[ItemParameters], responses: &[u8], psi: f64) -> f64 {
    items
        .iter()
        .zip(responses)
        .map(|(it, &y)| log_category_prob(it.a, &it.b, y as usize, psi))
        .sum()
}

/// Value and first three latent-variable derivatives of `pattern_loglik`.
pub fn pattern_loglik_derivatives(
    items: &[ItemParameters],
    responses: &[u8],
    psi: f64,
) -> Result<[f64; 4]> {
    check_pattern(items, responses)?;
    Ok(pattern_derivs_unchecked(items, responses, psi))
}

pub(crate) fn pattern_derivs_unchecked(items: &[ItemParameters], responses: &[u8], psi: f64) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for (it, &y) in items.iter().zip(responses) {
        let d = response_derivs(it, y as usize, psi);
        for (a, v) in acc.iter_mut().zip(d) {
            *a += v;
        }
    }
    acc
}

/// Expected score summed over items, normalised by nothing.
pub fn expected_total_score(items: &[ItemParameters], psi: f64) -> Result<f64> {
    if items.is_empty() {
        return Err(GrmError::Domain(
            "expected total score needs at least one item".into(),
        ));
    }
    Ok(items
        .iter()
        .map(|it| {
            category_probabilities(it, psi)
                .iter()
                .enumerate()
                .map(|(s, p)| s as f64 * p)
                .sum::<f64>()
        })
        .sum())
}

/// Logistic curve derivatives with respect to its argument, orders 0..=3.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LogisticTerm {
    pub d: [f64; 4],
}

impl LogisticTerm {
    #[inline]
    pub fn at(u: f64) -> Self {
        let f = logistic(u);
        let g = logistic(-u);
        let f1 = f * g;
        LogisticTerm {
            d: [f, f1, f1 * (g - f), f1 * (1.0 - 6.0 * f1)],
        }
    }
}

/// The (at most two) logistic curves that make up one category probability,
/// as `(threshold index, sign)`.
#[inline]
pub(crate) fn category_terms(s: usize) -> impl Iterator<Item = (usize, f64)> {
    let upper = (s >= 1).then(|| (s - 1, 1.0));
    let lower = (s < N_THRESHOLDS).then_some((s, -1.0));
    upper.into_iter().chain(lower)
}

/// `ln P(Y = y | psi)` and its first three derivatives in `psi`.
pub(crate) fn response_derivs(item: &ItemParameters, y: usize, psi: f64) -> [f64; 4] {
    let p = category_prob(item.a, &item.b, y, psi).max(PROB_FLOOR);
    let mut dp = [0.0; 3];
    for (t, sign) in category_terms(y) {
        let term = LogisticTerm::at(item.a * (psi - item.b[t]));
        let mut ak = 1.0;
        for (n, v) in dp.iter_mut().enumerate() {
            ak *= item.a;
            *v += sign * ak * term.d[n + 1];
        }
    }
    let l1 = dp[0] / p;
    let l2 = dp[1] / p - l1 * l1;
    let l3 = dp[2] / p - 3.0 * l1 * l2 - l1 * l1 * l1;
    [p.ln(), l1, l2, l3]
}

/// Derivatives of `(ln P, d/dpsi ln P, d2/dpsi2 ln P)` with respect to the
/// natural item parameters `(a, b1, b2, b3, b4)`.
pub(crate) fn response_param_derivs(
    item: &ItemParameters,
    y: usize,
    psi: f64,
) -> [[f64; N_CATEGORIES]; 3] {
    let p = category_prob(item.a, &item.b, y, psi).max(PROB_FLOOR);
    let a = item.a;
    // p_n[n] = d^n P / dpsi^n, p_theta[n][k] = d/dtheta_k of that.
    let mut p_n = [0.0; 3];
    let mut p_theta = [[0.0; N_CATEGORIES]; 3];
    for (t, sign) in category_terms(y) {
        let diff = psi - item.b[t];
        let term = LogisticTerm::at(a * diff);
        let pow = [1.0, a, a * a, a * a * a];
        for n in 0..3 {
            if n > 0 {
                p_n[n] += sign * pow[n] * term.d[n];
            }
            let da = if n > 0 { n as f64 * pow[n - 1] * term.d[n] } else { 0.0 }
                + pow[n] * term.d[n + 1] * diff;
            p_theta[n][0] += sign * da;
            p_theta[n][t + 1] += sign * -pow[n + 1] * term.d[n + 1];
        }
    }
    let l1 = p_n[1] / p;
    let p2_ratio = p_n[2] / p;
    let mut out = [[0.0; N_CATEGORIES]; 3];
    for k in 0..N_CATEGORIES {
        let l_t = p_theta[0][k] / p;
        let l1_t = p_theta[1][k] / p - l1 * l_t;
        let l2_t = p_theta[2][k] / p - p2_ratio * l_t - 2.0 * l1 * l1_t;
        out[0][k] = l_t;
        out[1][k] = l1_t;
        out[2][k] = l2_t;
    }
    out
}

/// `ln sigma(u)` and `ln sigma(-u)` with their `u`-derivatives, sharing one
/// exponential.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct LogisticLogs {
    pub ln_f: f64,
    pub ln_g: f64,
    pub f: f64,
    pub g: f64,
}

impl LogisticLogs {
    #[inline]
    pub fn at(u: f64) -> Self {
        let e = (-u.abs()).exp();
        let l1p = e.ln_1p();
        let (small, large) = (e / (1.0 + e), 1.0 / (1.0 + e));
        if u >= 0.0 {
            LogisticLogs { ln_f: -l1p, ln_g: -u - l1p, f: large, g: small }
        } else {
            LogisticLogs { ln_f: u - l1p, ln_g: -l1p, f: small, g: large }
        }
    }
}

/// `ln(1 - exp(-t))` and its first two derivatives for `t > 0`.
#[inline]
pub(crate) fn log_gap_factor(t: f64) -> (f64, f64, f64) {
    let rho = 1.0 / t.exp_m1();
    ((-(-t).exp_m1()).ln(), rho, -rho * (1.0 + rho))
}

pub(crate) fn gap_logs(a: f64, b: &[f64; N_THRESHOLDS]) -> [f64; N_THRESHOLDS - 1] {
    std::array::from_fn(|s| log_gap_factor(a * (b[s + 1] - b[s])).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn item(a: f64, b: [f64; 4]) -> ItemParameters {
        ItemParameters::new(0, a, b).unwrap()
    }

    #[test]
    fn prob_at_least_examples() {
        let it = item(1.0, [-1.0, 0.0, 1.0, 2.0]);
        assert_eq!(it.prob_at_least(2, 0.0).unwrap(), 0.5);
        let it = item(2.0, [-1.0, 1.3, 1.5, 2.0]);
        assert_eq!(it.prob_at_least(2, 1.3).unwrap(), 0.5);
        let it = item(1.2, [0.5, 0.6, 0.7, 0.8]);
        // 1 / (1 + exp(-0.6))
        assert_abs_diff_eq!(it.prob_at_least(1, 1.0).unwrap(), 0.6456563062257954, epsilon = 1e-15);
    }

    /// `ln P(Y = s | x)` for all categories, via
    /// `P_s = sigma(u_{s-1}) sigma(-u_s) (1 - exp(-a (b_s - b_{s-1})))`.
    /// `gap_logs` holds `ln(1 - exp(-a (b_s - b_{s-1})))` for `s = 1..=3`.
    fn log_category_probs_factored(
        a: f64,
        b: &[f64; N_THRESHOLDS],
        gap_logs: &[f64; N_THRESHOLDS - 1],
        x: f64,
    ) -> [f64; N_CATEGORIES] {
        let l: [LogisticLogs; N_THRESHOLDS] = std::array::from_fn(|k| LogisticLogs::at(a * (x - b[k])));
        [
            l[0].ln_g,
            l[0].ln_f + l[1].ln_g + gap_logs[0],
            l[1].ln_f + l[2].ln_g + gap_logs[1],
            l[2].ln_f + l[3].ln_g + gap_logs[2],
            l[3].ln_f,
        ]
    }

    #[test]
    fn factored_log_probs_match_direct_form() {
        let it = item(1.7, [-1.2, -0.3, 0.2, 1.9]);
        let gaps = gap_logs(it.a, &it.b);
        for x in [-9.0, -2.0, -0.25, 0.0, 0.7, 3.0, 9.0] {
            let f = log_category_probs_factored(it.a, &it.b, &gaps, x);
            for (s, v) in f.iter().enumerate() {
                assert_abs_diff_eq!(*v, log_category_prob(it.a, &it.b, s, x), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn prob_at_least_rejects_bad_category() {
        let it = item(1.0, [-1.0, 0.0, 1.0, 2.0]);
        assert!(matches!(it.prob_at_least(0, 0.0), Err(GrmError::Domain(_))));
        assert!(matches!(it.prob_at_least(5, 0.0), Err(GrmError::Domain(_))));
    }

    #[test]
    fn logistic_is_finite_at_extremes() {
        for x in [-800.0, -700.0, 700.0, 800.0] {
            let v = logistic(x);
            assert!(v.is_finite() && (0.0..=1.0).contains(&v));
        }
        let it = item(10.0, [-1.0, 0.0, 1.0, 2.0]);
        for psi in [-70.0, 70.0] {
            let p = it.category_probabilities(psi);
            assert!(p.iter().all(|v| v.is_finite()));
            assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn category_probability_examples() {
        let it = item(1.0, [-2.0, -1.0, 0.0, 1.0]);
        let p = it.category_probabilities(-50.0);
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        assert!(p[1..].iter().all(|&v| v < 1e-20));

        let it = item(1.0, [-2.0, -1.0, 1.0, 2.0]);
        let p = it.category_probabilities(0.0);
        // logistic(1) - logistic(-1)
        assert_abs_diff_eq!(p[2], 0.46211715726000974, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], p[4], epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], p[3], epsilon = 1e-15);
    }

    #[test]
    fn pattern_loglik_reductions() {
        assert_eq!(pattern_loglik(&[], &[], 0.3).unwrap(), 0.0);
        let it = item(1.3, [-1.5, -0.2, 0.4, 1.9]);
        let single = pattern_loglik(&[it], &[3], 0.7).unwrap();
        assert_abs_diff_eq!(single, it.category_probabilities(0.7)[3].ln(), epsilon = 1e-15);

        let items = [
            item(0.8, [-2.0, -1.0, 0.5, 1.5]),
            ItemParameters::new(1, 1.7, [-1.2, -0.3, 0.2, 2.2]).unwrap(),
            ItemParameters::new(2, 1.1, [-2.4, -0.5, 0.9, 1.2]).unwrap(),
        ];
        let resp = [0u8, 2, 4];
        let expected: f64 = items
            .iter()
            .zip(resp)
            .map(|(it, y)| (it.category_probabilities(0.0)[y as usize]).ln())
            .sum();
        assert_abs_diff_eq!(pattern_loglik(&items, &resp, 0.0).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn pattern_loglik_errors_and_floor() {
        let it = item(1.0, [-1.0, 0.0, 1.0, 2.0]);
        assert!(matches!(pattern_loglik(&[it], &[1, 2], 0.0), Err(GrmError::Dimension(_))));
        assert!(matches!(pattern_loglik(&[it], &[7], 0.0), Err(GrmError::Domain(_))));
        let extreme = item(50.0, [-1.0, 0.0, 1.0, 2.0]);
        let v = pattern_loglik(&[extreme], &[4], -40.0).unwrap();
        assert!(v.is_finite());
        assert_abs_diff_eq!(v, PROB_FLOOR.ln(), epsilon = 1e-9);
    }

    #[test]
    fn expected_total_score_examples() {
        let sym = item(1.0, [-2.0, -1.0, 1.0, 2.0]);
        assert_abs_diff_eq!(expected_total_score(&[sym], 0.0).unwrap(), 2.0, epsilon = 1e-14);
        let items: Vec<_> = (0..3)
            .map(|j| ItemParameters::new(j, 1.0 + j as f64 * 0.3, [-1.0, 0.0, 0.5, 1.0]).unwrap())
            .collect();
        assert_abs_diff_eq!(expected_total_score(&items, 50.0).unwrap(), 12.0, epsilon = 1e-9);
        assert!(matches!(expected_total_score(&[], 0.0), Err(GrmError::Domain(_))));

        // Sum of exceedance curves is an independent route to the same score.
        let it = item(1.2, [-2.0, -0.5, 0.5, 2.0]);
        let oracle: f64 = (1..=4).map(|s| logistic(1.2 * (1.0 - it.b[s - 1]))).sum();
        assert_abs_diff_eq!(expected_total_score(&[it], 1.0).unwrap(), oracle, epsilon = 1e-14);
    }

    #[test]
    fn slope_intercept_examples() {
        let si = item(1.0, [-1.0, 0.0, 1.0, 2.0]).to_slope_intercept().unwrap();
        assert_eq!(si.d, [1.0, -0.0, -1.0, -2.0]);
        let si = item(2.0, [-1.5, 0.0, 1.0, 2.0]).to_slope_intercept().unwrap();
        assert_eq!(si.d[0], 3.0);
        let bad = ItemParameters { item_id: 0, a: -1.0, b: [0.0, 1.0, 2.0, 3.0] };
        assert!(bad.to_slope_intercept().is_err());
        let bad_si = SlopeInterceptParameters { item_id: 0, a: 0.0, d: [0.0; 4] };
        assert!(bad_si.to_traditional().is_err());
    }

    #[test]
    fn validation_rejects_bad_items() {
        assert!(ItemParameters::new(0, 0.0, [0.0, 1.0, 2.0, 3.0]).is_err());
        assert!(ItemParameters::new(0, 1.0, [0.0, 0.0, 2.0, 3.0]).is_err());
        assert!(ItemParameters::new(0, 1.0, [0.0, 1.0, f64::NAN, 3.0]).is_err());
    }

    #[test]
    fn response_matrix_checks() {
        assert!(ResponseMatrix::new(0, 1, vec![]).is_err());
        assert!(ResponseMatrix::new(2, 2, vec![0, 1, 2]).is_err());
        assert!(ResponseMatrix::new(1, 2, vec![0, 5]).is_err());
        let m = ResponseMatrix::from_rows(&[vec![0, 1], vec![4, 3]]).unwrap();
        assert_eq!(m.row(1), &[4, 3]);
        assert_eq!(m.column(0).collect::<Vec<_>>(), vec![0, 4]);
        assert!(!m.all_categories_present());
    }

    fn finite_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_close(analytic: f64, numeric: f64, tol: f64) -> bool {
        (analytic - numeric).abs() <= tol * analytic.abs().max(numeric.abs()).max(1.0)
    }

    prop_compose! {
        fn arb_item()(a in 0.2f64..4.0, b1 in -3.0f64..0.0, g in prop::array::uniform3(0.05f64..1.5)) -> ItemParameters {
            ItemParameters::new(0, a, [b1, b1 + g[0], b1 + g[0] + g[1], b1 + g[0] + g[1] + g[2]]).unwrap()
        }
    }

    proptest! {
        #[test]
        fn categories_sum_to_one(it in arb_item(), psi in -8.0f64..8.0) {
            let p = it.category_probabilities(psi);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn exceedance_monotone(it in arb_item(), psi in -6.0f64..6.0, dpsi in 0.01f64..2.0) {
            for s in 1..4 {
                prop_assert!(it.prob_at_least(s, psi).unwrap() > it.prob_at_least(s + 1, psi).unwrap());
            }
            for s in 1..=4 {
                prop_assert!(it.prob_at_least(s, psi + dpsi).unwrap() > it.prob_at_least(s, psi).unwrap());
            }
        }

        #[test]
        fn expected_score_strictly_increasing(items in prop::collection::vec(arb_item(), 1..6), psi in -4.0f64..4.0, dpsi in 0.01f64..1.0) {
            let lo = expected_total_score(&items, psi).unwrap();
            let hi = expected_total_score(&items, psi + dpsi).unwrap();
            prop_assert!(hi > lo);
            prop_assert!(lo >= 0.0 && hi <= 4.0 * items.len() as f64);
        }

        #[test]
        fn slope_intercept_roundtrip(it in arb_item()) {
            let back = it.to_slope_intercept().unwrap().to_traditional().unwrap();
            prop_assert_eq!(back.a, it.a);
            for (x, y) in back.b.iter().zip(it.b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn latent_derivatives_match_finite_differences(
            items in prop::collection::vec(arb_item(), 1..6),
            ys in prop::collection::vec(0u8..5, 6),
            psi in -3.0f64..3.0,
        ) {
            let ys = &ys[..items.len()];
            let d = pattern_loglik_derivatives(&items, ys, psi).unwrap();
            let h = 1e-5;
            let f = |x: f64| pattern_loglik(&items, ys, x).unwrap();
            prop_assert!(rel_close(d[1], finite_diff(f, psi, h), 1e-6));
            let f1 = |x: f64| pattern_loglik_derivatives(&items, ys, x).unwrap()[1];
            prop_assert!(rel_close(d[2], finite_diff(f1, psi, h), 1e-6));
            let f2 = |x: f64| pattern_loglik_derivatives(&items, ys, x).unwrap()[2];
            prop_assert!(rel_close(d[3], finite_diff(f2, psi, h), 1e-6));
        }

        #[test]
        fn parameter_derivatives_match_finite_differences(it in arb_item(), y in 0usize..5, psi in -3.0f64..3.0) {
            let analytic = response_param_derivs(&it, y, psi);
            let h = 1e-5;
            for k in 0..5 {
                let shifted = |delta: f64| {
                    let mut p = it;
                    if k == 0 { p.a += delta } else { p.b[k - 1] += delta }
                    response_derivs(&p, y, psi)
                };
                let (up, dn) = (shifted(h), shifted(-h));
                for n in 0..3 {
                    let fd = (up[n] - dn[n]) / (2.0 * h);
                    prop_assert!(rel_close(analytic[n][k], fd, 1e-6), "n={} k={} {} vs {}", n, k, analytic[n][k], fd);
                }
            }
        }
    }
}
