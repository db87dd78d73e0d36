//! Recovery metrics: per-parameter errors, bias, RMSE, trimmed RMSE,
//! expected-score error curves, completion rates and log-likelihood
//! comparisons between the two estimators.

use serde::{Deserialize, Serialize};

use crate::error::{GrmError, Result};
use crate::fit::{FitResult, Method};
use crate::model::{expected_total_score, ItemParameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParameterClass {
    A,
    B1,
    B2,
    B3,
    B4,
}

impl ParameterClass {
    pub const ALL: [ParameterClass; 5] = [
        ParameterClass::A,
        ParameterClass::B1,
        ParameterClass::B2,
        ParameterClass::B3,
        ParameterClass::B4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParameterClass::A => "a",
            ParameterClass::B1 => "b1",
            ParameterClass::B2 => "b2",
            ParameterClass::B3 => "b3",
            ParameterClass::B4 => "b4",
        }
    }

    pub fn value(self, item: &ItemParameters) -> f64 {
        match self {
            ParameterClass::A => item.a,
            ParameterClass::B1 => item.b[0],
            ParameterClass::B2 => item.b[1],
            ParameterClass::B3 => item.b[2],
            ParameterClass::B4 => item.b[3],
        }
    }
}

impl std::fmt::Display for ParameterClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub scenario_id: usize,
    pub replicate: usize,
    pub item_id: usize,
    pub parameter: ParameterClass,
    /// Estimate minus truth.
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub parameter: ParameterClass,
    pub bias: f64,
    pub rmse: f64,
    pub rrmse: f64,
    pub n: usize,
}

/// Five error records per item, paired by item id.
pub fn estimation_errors(
    estimates: &[ItemParameters],
    truth: &[ItemParameters],
    scenario_id: usize,
    replicate: usize,
) -> Result<Vec<ErrorRecord>> {
    check_pairing(estimates, truth)?;
    let mut out = Vec::with_capacity(truth.len() * ParameterClass::ALL.len());
    for t in truth {
        let e = estimates.iter().find(|e| e.item_id == t.item_id).expect("pairing checked");
        for parameter in ParameterClass::ALL {
            out.push(ErrorRecord {
                scenario_id,
                replicate,
                item_id: t.item_id,
                parameter,
                error: parameter.value(e) - parameter.value(t),
            });
        }
    }
    Ok(out)
}

fn check_pairing(estimates: &[ItemParameters], truth: &[ItemParameters]) -> Result<()> {
    if estimates.len() != truth.len() {
        return Err(GrmError::Pairing(format!(
            "{} estimated items vs {} true items",
            estimates.len(),
            truth.len()
        )));
    }
    let mut a: Vec<usize> = estimates.iter().map(|e| e.item_id).collect();
    let mut b: Vec<usize> = truth.iter().map(|t| t.item_id).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b || a.windows(2).any(|w| w[0] == w[1]) {
        return Err(GrmError::Pairing(format!("item ids differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Bias, RMSE and trimmed RMSE of one set of errors.
///
/// The trimmed RMSE drops the `ceil(trim_fraction * n)` smallest and largest
/// signed errors (capped so that at least one value remains).
pub fn summarize_errors(errors: &[f64], trim_fraction: f64) -> Result<(f64, f64, f64)> {
    if errors.is_empty() {
        return Err(GrmError::EmptyInput("no errors to summarize".into()));
    }
    if !(0.0..0.5).contains(&trim_fraction) {
        return Err(GrmError::Domain(format!(
            "trim fraction must be in [0, 0.5), got {trim_fraction}"
        )));
    }
    let n = errors.len();
    let bias = errors.iter().sum::<f64>() / n as f64;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();
    let k = ((trim_fraction * n as f64).ceil() as usize).min((n - 1) / 2);
    if k == 0 {
        return Ok((bias, rmse, rmse));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let kept = &sorted[k..n - k];
    let rrmse = (kept.iter().map(|e| e * e).sum::<f64>() / kept.len() as f64).sqrt();
    Ok((bias, rmse, rrmse))
}

/// One summary per parameter class, pooled over items and replicates.
pub fn recovery_summary(records: &[ErrorRecord], trim_fraction: f64) -> Result<Vec<RecoverySummary>> {
    ParameterClass::ALL
        .iter()
        .map(|&parameter| {
            let errors: Vec<f64> = records
                .iter()
                .filter(|r| r.parameter == parameter)
                .map(|r| r.error)
                .collect();
            if errors.is_empty() {
                return Err(GrmError::EmptyInput(format!("no errors for parameter {parameter}")));
            }
            let (bias, rmse, rrmse) = summarize_errors(&errors, trim_fraction)?;
            Ok(RecoverySummary {
                parameter,
                bias,
                rmse,
                rrmse,
                n: errors.len(),
            })
        })
        .collect()
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorPoint {
    pub psi: f64,
    pub mean_error: f64,
    pub p025: f64,
    pub p975: f64,
}

/// Expected-total-score error per item across replicates on a latent grid.
/// Each entry of `pairs` is `(estimates, truth)` for one replicate.
pub fn expected_score_error_curve(
    pairs: &[(Vec<ItemParameters>, Vec<ItemParameters>)],
    psi_grid: &[f64],
) -> Result<Vec<ScoreErrorPoint>> {
    if psi_grid.is_empty() {
        return Err(GrmError::EmptyInput("latent grid is empty".into()));
    }
    if pairs.is_empty() {
        return Err(GrmError::EmptyInput("no replicates".into()));
    }
    for (est, truth) in pairs {
        check_pairing(est, truth)?;
    }
    psi_grid
        .iter()
        .map(|&psi| {
            let mut errors = pairs
                .iter()
                .map(|(est, truth)| {
                    let m = truth.len() as f64;
                    Ok((expected_total_score(est, psi)? - expected_total_score(truth, psi)?) / m)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
            errors.sort_by(f64::total_cmp);
            Ok(ScoreErrorPoint {
                psi,
                mean_error,
                p025: quantile_sorted(&errors, 0.025),
                p975: quantile_sorted(&errors, 0.975),
            })
        })
        .collect()
}

pub fn completion_rate(results: &[FitResult]) -> Result<f64> {
    if results.is_empty() {
        return Err(GrmError::EmptyInput("no fits".into()));
    }
    Ok(results.iter().filter(|r| r.converged).count() as f64 / results.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoglikDifference {
    pub laplace: f64,
    pub ghq: f64,
    /// `laplace - ghq`.
    pub difference: f64,
    /// `|difference| / max(|laplace|, |ghq|)`.
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoglikComparison {
    pub differences: Vec<LoglikDifference>,
    /// Share of pairs where Laplace is lower by more than the threshold.
    pub laplace_lower_fraction: f64,
    /// Share of pairs where quadrature EM is lower by more than the threshold.
    pub ghq_lower_fraction: f64,
    /// Share of pairs whose relative difference exceeds 5%.
    pub above_five_percent_fraction: f64,
}

/// Compares paired `(Laplace, GHQ-EM)` fits of the same replicates.
/// `relative_threshold` of zero counts any strictly lower value.
pub fn loglik_comparison(pairs: &[(FitResult, FitResult)], relative_threshold: f64) -> Result<LoglikComparison> {
    if pairs.is_empty() {
        return Err(GrmError::EmptyInput("no fit pairs".into()));
    }
    let mut differences = Vec::with_capacity(pairs.len());
    for (lap, ghq) in pairs {
        if lap.method != Method::Laplace || ghq.method != Method::GhqEm {
            return Err(GrmError::Pairing(format!(
                "expected (Laplace, GhqEm) pairs, got ({}, {})",
                lap.method, ghq.method
            )));
        }
        let difference = lap.loglik - ghq.loglik;
        let denom = lap.loglik.abs().max(ghq.loglik.abs());
        let relative = if denom > 0.0 { difference.abs() / denom } else { 0.0 };
        differences.push(LoglikDifference {
            laplace: lap.loglik,
            ghq: ghq.loglik,
            difference,
            relative,
        });
    }
    let n = differences.len() as f64;
    let frac = |f: &dyn Fn(&LoglikDifference) -> bool| differences.iter().filter(|d| f(d)).count() as f64 / n;
    Ok(LoglikComparison {
        laplace_lower_fraction: frac(&|d| d.difference < 0.0 && d.relative > relative_threshold),
        ghq_lower_fraction: frac(&|d| d.difference > 0.0 && d.relative > relative_threshold),
        above_five_percent_fraction: frac(&|d| d.relative > 0.05),
        differences,
    })
}

/// Pearson correlation; `None` if either side has no spread.
pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::FitStatus;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn item(id: usize, a: f64) -> ItemParameters {
        ItemParameters::new(id, a, [-1.0, 0.0, 1.0, 2.0]).unwrap()
    }

    fn fit(method: Method, loglik: f64, converged: bool) -> FitResult {
        FitResult {
            method,
            converged,
            status: if converged { FitStatus::Converged } else { FitStatus::MaxIterations },
            loglik,
            outer_iterations: 1,
            wall_time_ms: 0.0,
            estimates: vec![],
            loglik_history: vec![],
        }
    }

    #[test]
    fn errors_are_estimate_minus_truth() {
        let truth = vec![item(0, 1.0), item(1, 0.7)];
        let zero = estimation_errors(&truth, &truth, 0, 0).unwrap();
        assert_eq!(zero.len(), 10);
        assert!(zero.iter().all(|r| r.error == 0.0));

        let est = vec![item(0, 1.2)];
        let recs = estimation_errors(&est, &truth[..1], 2, 3).unwrap();
        assert_eq!(recs[0].parameter, ParameterClass::A);
        assert_abs_diff_eq!(recs[0].error, 0.2, epsilon = 1e-15);
        assert_eq!((recs[0].scenario_id, recs[0].replicate), (2, 3));

        assert!(matches!(estimation_errors(&est, &truth, 0, 0), Err(GrmError::Pairing(_))));
        assert!(matches!(estimation_errors(&[item(5, 1.0)], &truth[..1], 0, 0), Err(GrmError::Pairing(_))));
    }

    #[test]
    fn slope_intercept_roundtrip_leaves_errors_unchanged() {
        let truth = vec![item(0, 1.0)];
        let est = vec![ItemParameters::new(0, 1.37, [-1.3, -0.2, 0.9, 2.4]).unwrap()];
        let round: Vec<_> = est
            .iter()
            .map(|e| e.to_slope_intercept().unwrap().to_traditional().unwrap())
            .collect();
        let a = estimation_errors(&est, &truth, 0, 0).unwrap();
        let b = estimation_errors(&round, &truth, 0, 0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x.error, y.error, epsilon = 1e-12);
        }
    }

    #[test]
    fn summary_examples() {
        let (bias, rmse, _) = summarize_errors(&[1.0, -1.0], 0.01).unwrap();
        assert_eq!((bias, rmse), (0.0, 1.0));

        let mut errs = vec![0.0; 999];
        errs.push(1e6);
        let (_, rmse, rrmse) = summarize_errors(&errs, 0.01).unwrap();
        assert_abs_diff_eq!(rmse, 1e9f64.sqrt(), epsilon = 1e-9);
        assert_abs_diff_eq!(rmse, 31622.78, epsilon = 0.01);
        assert_eq!(rrmse, 0.0);

        assert_eq!(summarize_errors(&[0.0; 10], 0.01).unwrap(), (0.0, 0.0, 0.0));
        assert!(matches!(summarize_errors(&[], 0.01), Err(GrmError::EmptyInput(_))));
        assert!(summarize_errors(&[1.0], 0.5).is_err());
    }

    #[test]
    fn recovery_summary_requires_every_class() {
        let recs = estimation_errors(&[item(0, 1.5)], &[item(0, 1.0)], 0, 0).unwrap();
        let summary = recovery_summary(&recs, 0.01).unwrap();
        assert_eq!(summary.len(), 5);
        assert_abs_diff_eq!(summary[0].bias, 0.5, epsilon = 1e-15);
        assert!(matches!(recovery_summary(&recs[..1], 0.01), Err(GrmError::EmptyInput(_))));
    }

    #[test]
    fn trimming_shrinks_on_symmetric_outliers() {
        let mut errs: Vec<f64> = (0..200).map(|k| ((k as f64) * 0.37).sin() * 0.1).collect();
        errs.extend([50.0, -40.0]);
        let (bias, rmse, rrmse) = summarize_errors(&errs, 0.01).unwrap();
        assert!(rmse >= bias.abs());
        assert!(rrmse <= rmse);
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_abs_diff_eq!(quantile_sorted(&v, 0.025), 1.075, epsilon = 1e-12);
    }

    #[test]
    fn score_curve_examples() {
        let truth = vec![item(0, 1.0)];
        let grid = [-1.0, 0.0, 1.0];
        let flat = expected_score_error_curve(&[(truth.clone(), truth.clone())], &grid).unwrap();
        assert!(flat.iter().all(|p| p.mean_error == 0.0 && p.p025 == 0.0 && p.p975 == 0.0));

        let est = vec![ItemParameters::new(0, 1.5, [-1.2, 0.1, 0.8, 2.3]).unwrap()];
        let curve = expected_score_error_curve(&[(est.clone(), truth.clone())], &[0.0]).unwrap();
        let oracle = expected_total_score(&est, 0.0).unwrap() - expected_total_score(&truth, 0.0).unwrap();
        assert_abs_diff_eq!(curve[0].mean_error, oracle, epsilon = 1e-15);

        let shifts = [-0.3, 0.2, 0.5, -0.1];
        let pairs: Vec<_> = shifts
            .iter()
            .map(|d| (vec![ItemParameters::new(0, 1.0, [-1.0 + d, 0.0 + d, 1.0 + d, 2.0 + d]).unwrap()], truth.clone()))
            .collect();
        for p in expected_score_error_curve(&pairs, &grid).unwrap() {
            assert!(p.p025 <= p.mean_error && p.mean_error <= p.p975);
        }
        assert!(expected_score_error_curve(&pairs, &[]).is_err());
        assert!(matches!(
            expected_score_error_curve(&[(vec![], truth)], &grid),
            Err(GrmError::Pairing(_))
        ));
    }

    #[test]
    fn completion_examples() {
        let all: Vec<_> = (0..4).map(|_| fit(Method::GhqEm, -1.0, true)).collect();
        assert_eq!(completion_rate(&all).unwrap(), 1.0);
        let mixed: Vec<_> = (0..1000).map(|k| fit(Method::Laplace, -1.0, k < 843)).collect();
        assert_abs_diff_eq!(completion_rate(&mixed).unwrap(), 0.843, epsilon = 1e-15);
        let none: Vec<_> = (0..3).map(|_| fit(Method::GhqEm, -1.0, false)).collect();
        assert_eq!(completion_rate(&none).unwrap(), 0.0);
        assert!(completion_rate(&[]).is_err());
    }

    #[test]
    fn loglik_comparison_examples() {
        let same = vec![(fit(Method::Laplace, -10.0, true), fit(Method::GhqEm, -10.0, true))];
        let c = loglik_comparison(&same, 0.0).unwrap();
        assert_eq!(c.differences[0].difference, 0.0);
        assert_eq!((c.laplace_lower_fraction, c.ghq_lower_fraction), (0.0, 0.0));

        let one = vec![(fit(Method::Laplace, -1000.0, true), fit(Method::GhqEm, -995.0, true))];
        let c = loglik_comparison(&one, 0.0).unwrap();
        assert_eq!(c.differences[0].difference, -5.0);
        assert_abs_diff_eq!(c.differences[0].relative, 0.005, epsilon = 1e-15);
        assert_eq!(c.laplace_lower_fraction, 1.0);
        assert_eq!(c.above_five_percent_fraction, 0.0);

        let set: Vec<_> = (0..100)
            .map(|k| {
                let lap = if k < 8 { -101.0 } else { -100.0 };
                (fit(Method::Laplace, lap, true), fit(Method::GhqEm, -100.0, true))
            })
            .collect();
        assert_abs_diff_eq!(loglik_comparison(&set, 0.0).unwrap().laplace_lower_fraction, 0.08, epsilon = 1e-15);

        let swapped = vec![(fit(Method::GhqEm, -1.0, true), fit(Method::Laplace, -1.0, true))];
        assert!(matches!(loglik_comparison(&swapped, 0.0), Err(GrmError::Pairing(_))));
    }

    proptest! {
        #[test]
        fn rmse_decomposes_into_bias_and_variance(errs in prop::collection::vec(-5.0f64..5.0, 1..200)) {
            let (bias, rmse, rrmse0) = summarize_errors(&errs, 0.0).unwrap();
            let n = errs.len() as f64;
            let var = errs.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / n;
            prop_assert!((rmse * rmse - (bias * bias + var)).abs() < 1e-10);
            prop_assert_eq!(rrmse0, rmse);
            prop_assert!(rmse + 1e-12 >= bias.abs());
        }

        #[test]
        fn summaries_ignore_replicate_order(mut errs in prop::collection::vec(-5.0f64..5.0, 2..100), k in 0usize..100) {
            let before = summarize_errors(&errs, 0.01).unwrap();
            let len = errs.len();
            errs.rotate_left(k % len);
            let after = summarize_errors(&errs, 0.01).unwrap();
            prop_assert!((before.0 - after.0).abs() < 1e-12);
            prop_assert!((before.1 - after.1).abs() < 1e-12);
            prop_assert_eq!(before.2, after.2);
        }

        #[test]
        fn score_curve_ignores_item_order(shift in -0.5f64..0.5, a in 0.5f64..2.0) {
            let truth = vec![item(0, 1.0), item(1, 1.4)];
            let est = vec![
                ItemParameters::new(0, a, [-1.0 + shift, 0.0, 1.0, 2.0]).unwrap(),
                ItemParameters::new(1, 1.3, [-1.1, 0.1, 1.0 + shift, 2.1]).unwrap(),
            ];
            let grid = [-2.0, 0.0, 2.0];
            let fwd = expected_score_error_curve(&[(est.clone(), truth.clone())], &grid).unwrap();
            let rev_est: Vec<_> = est.iter().rev().cloned().collect();
            let rev_truth: Vec<_> = truth.iter().rev().cloned().collect();
            let rev = expected_score_error_curve(&[(rev_est, rev_truth)], &grid).unwrap();
            for (x, y) in fwd.iter().zip(&rev) {
                prop_assert!((x.mean_error - y.mean_error).abs() < 1e-12);
            }
        }
    }
}
