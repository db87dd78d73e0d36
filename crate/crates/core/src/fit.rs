//! Configuration and result types shared by both estimators, and the
//! ordered-threshold reparameterization both of them optimize in.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::{ItemParameters, N_CATEGORIES, N_THRESHOLDS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(alias = "laplace")]
    Laplace,
    #[serde(alias = "ghq-em", alias = "ghq_em")]
    GhqEm,
}

impl Method {
    /// File-name fragment used in study output trees.
    pub fn slug(self) -> &'static str {
        match self {
            Method::Laplace => "laplace",
            Method::GhqEm => "ghq_em",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Laplace => "Laplace",
            Method::GhqEm => "GhqEm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitStatus {
    Converged,
    MaxIterations,
    LineSearchFailure,
    BoundaryStuck,
    NumericalFailure,
}

/// Box constraints on the natural parameter scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    /// Smallest allowed distance between neighbouring thresholds.
    pub min_gap: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            a_min: 1e-6,
            a_max: 50.0,
            b_min: -10.0,
            b_max: 10.0,
            min_gap: 1e-6,
        }
    }
}

impl Bounds {
    /// Numerical guard rails for the unbounded EM fit.
    pub fn em_guard() -> Self {
        Bounds {
            a_min: 1e-6,
            a_max: 1e3,
            b_min: -1e4,
            b_max: 1e4,
            min_gap: 1e-8,
        }
    }

    pub fn contains(&self, item: &ItemParameters) -> bool {
        item.a >= self.a_min
            && item.a <= self.a_max
            && item.b[0] >= self.b_min
            && item.b[N_THRESHOLDS - 1] <= self.b_max
            && item.b.windows(2).all(|w| w[1] - w[0] >= self.min_gap * (1.0 - 1e-9))
    }

    /// True when any parameter sits on (or within `eps` of) a bound.
    pub fn touches(&self, item: &ItemParameters, eps: f64) -> bool {
        item.a >= self.a_max - eps
            || item.a <= self.a_min + eps
            || item.b[0] <= self.b_min + eps
            || item.b[N_THRESHOLDS - 1] >= self.b_max - eps
            || item.b.windows(2).any(|w| w[1] - w[0] <= self.min_gap * (1.0 + 1e-9) + eps)
    }

    /// Nearest feasible item: clamps `a`, then clamps and re-orders thresholds.
    pub fn project(&self, item: &ItemParameters) -> ItemParameters {
        let mut out = *item;
        out.a = out.a.clamp(self.a_min, self.a_max);
        out.b = order_thresholds(out.b, self.b_min, self.b_max, self.min_gap);
        out
    }
}

/// Clamps thresholds into `[lo, hi]` and enforces `b[k] >= b[k-1] + gap`.
pub fn order_thresholds(mut b: [f64; N_THRESHOLDS], lo: f64, hi: f64, gap: f64) -> [f64; N_THRESHOLDS] {
    for (k, v) in b.iter_mut().enumerate() {
        let low = lo + k as f64 * gap;
        let high = hi - (N_THRESHOLDS - 1 - k) as f64 * gap;
        *v = if v.is_nan() { low } else { v.clamp(low, high) };
    }
    for k in 1..N_THRESHOLDS {
        if b[k] < b[k - 1] + gap {
            let high = hi - (N_THRESHOLDS - 1 - k) as f64 * gap;
            b[k] = (b[k - 1] + gap).min(high);
        }
    }
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_outer_iterations: usize,
    /// Relative objective change that counts as converged (Laplace).
    pub outer_tolerance: f64,
    /// Gradient threshold for the per-subject mode search (Laplace).
    pub inner_tolerance: f64,
    /// Largest parameter change that counts as converged (EM).
    pub em_tolerance: f64,
    /// Box constraints for the Laplace fit; EM runs unbounded.
    pub bounds: Bounds,
    pub quadrature_points: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_outer_iterations: 500,
            outer_tolerance: 1e-7,
            inner_tolerance: 1e-9,
            em_tolerance: 1e-4,
            bounds: Bounds::default(),
            quadrature_points: crate::quadrature::DEFAULT_QUADRATURE_POINTS,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let b = &self.bounds;
        let ok = self.outer_tolerance > 0.0
            && self.inner_tolerance > 0.0
            && self.em_tolerance > 0.0
            && self.max_outer_iterations > 0
            && b.a_min > 0.0
            && b.a_min < b.a_max
            && b.b_min < b.b_max
            && b.min_gap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(crate::GrmError::Precondition(format!("invalid fit configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub method: Method,
    pub converged: bool,
    pub status: FitStatus,
    #[serde(with = "nullable_f64")]
    pub loglik: f64,
    pub outer_iterations: usize,
    pub wall_time_ms: f64,
    #[serde(rename = "items")]
    pub estimates: Vec<ItemParameters>,
    /// Objective value after each accepted iteration (not serialized).
    #[serde(skip)]
    pub loglik_history: Vec<f64>,
}

impl FitResult {
    pub(crate) fn new(
        method: Method,
        status: FitStatus,
        loglik: f64,
        outer_iterations: usize,
        started: std::time::Instant,
        estimates: Vec<ItemParameters>,
        loglik_history: Vec<f64>,
    ) -> Self {
        FitResult {
            method,
            converged: status == FitStatus::Converged,
            status,
            loglik,
            outer_iterations,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            estimates,
            loglik_history,
        }
    }

    /// Estimates are present, finite and satisfy the item invariants.
    pub fn has_valid_estimates(&self) -> bool {
        !self.estimates.is_empty() && self.estimates.iter().all(ItemParameters::is_valid)
    }
}

/// JSON has no NaN or infinity; those are written as `null`.
pub(crate) mod nullable_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Unconstrained coordinates `(ln a, b1, ln(b2-b1), ln(b3-b2), ln(b4-b3))`.
pub type Unconstrained = [f64; N_CATEGORIES];

pub fn to_unconstrained(item: &ItemParameters) -> Unconstrained {
    [
        item.a.ln(),
        item.b[0],
        (item.b[1] - item.b[0]).ln(),
        (item.b[2] - item.b[1]).ln(),
        (item.b[3] - item.b[2]).ln(),
    ]
}

pub fn from_unconstrained(item_id: usize, z: &Unconstrained) -> ItemParameters {
    let b1 = z[1];
    let b2 = b1 + z[2].exp();
    let b3 = b2 + z[3].exp();
    let b4 = b3 + z[4].exp();
    ItemParameters {
        item_id,
        a: z[0].exp(),
        b: [b1, b2, b3, b4],
    }
}

/// `jac[k][m] = d theta_k / d z_m` for natural `theta = (a, b1..b4)`.
/// Every non-zero entry of column `m != 1` equals the pure second derivative
/// `d^2 theta_k / d z_m^2`; all mixed second derivatives vanish.
pub(crate) fn unconstrained_jacobian(z: &Unconstrained) -> [[f64; N_CATEGORIES]; N_CATEGORIES] {
    let mut jac = [[0.0; N_CATEGORIES]; N_CATEGORIES];
    jac[0][0] = z[0].exp();
    for k in 1..N_CATEGORIES {
        jac[k][1] = 1.0;
        for m in 2..=k {
            jac[k][m] = z[m].exp();
        }
    }
    jac
}

pub(crate) fn chain_gradient(z: &Unconstrained, grad_nat: &[f64; N_CATEGORIES]) -> [f64; N_CATEGORIES] {
    let jac = unconstrained_jacobian(z);
    std::array::from_fn(|m| (0..N_CATEGORIES).map(|k| jac[k][m] * grad_nat[k]).sum())
}

pub(crate) fn chain_hessian(
    z: &Unconstrained,
    grad_nat: &[f64; N_CATEGORIES],
    hess_nat: &[[f64; N_CATEGORIES]; N_CATEGORIES],
) -> [[f64; N_CATEGORIES]; N_CATEGORIES] {
    let jac = unconstrained_jacobian(z);
    let mut out = [[0.0; N_CATEGORIES]; N_CATEGORIES];
    for m in 0..N_CATEGORIES {
        for n in 0..N_CATEGORIES {
            let mut acc = 0.0;
            for k in 0..N_CATEGORIES {
                if jac[k][m] == 0.0 {
                    continue;
                }
                for l in 0..N_CATEGORIES {
                    acc += jac[k][m] * hess_nat[k][l] * jac[l][n];
                }
            }
            out[m][n] = acc;
        }
        if m != 1 {
            out[m][m] += (0..N_CATEGORIES).map(|k| grad_nat[k] * jac[k][m]).sum::<f64>();
        }
    }
    out
}
