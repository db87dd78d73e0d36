//! Plot-ready data illustrating how the Laplace approximation and the
//! quadrature rule each see the likelihood of a single response pattern.

use std::io::Write;

use crate::error::{GrmError, Result};
use crate::io::{csv_writer, format_float};
use crate::laplace::{find_posterior_mode, joint_logdensity, DEFAULT_INNER_TOLERANCE};
use crate::model::{pattern_loglik, prob_at_least, ItemParameters};
use crate::quadrature::QuadratureRule;

#[derive(Debug, Clone, PartialEq)]
pub struct FigureRow {
    pub psi: f64,
    /// `P(Y >= 1)` for each item.
    pub icc: Vec<f64>,
    pub likelihood: f64,
    pub joint_density: f64,
    pub laplace: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhqMass {
    pub node: f64,
    pub weight: f64,
    /// `w_q * exp(pattern_loglik(x_q))`.
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureData {
    pub eta_hat: f64,
    pub curvature: f64,
    pub rows: Vec<FigureRow>,
    pub masses: Vec<GhqMass>,
}

/// Evaluates every curve of the figure on `psi_grid` plus the quadrature
/// mass points of `rule`.
pub fn emit_likelihood_figure(
    items: &[ItemParameters],
    responses: &[u8],
    rule: &QuadratureRule,
    psi_grid: &[f64],
) -> Result<FigureData> {
    if psi_grid.is_empty() {
        return Err(GrmError::EmptyInput("latent grid is empty".into()));
    }
    if items.len() != responses.len() {
        return Err(GrmError::Dimension(format!(
            "{} items but {} responses",
            items.len(),
            responses.len()
        )));
    }
    let mode = find_posterior_mode(items, responses, DEFAULT_INNER_TOLERANCE)?;
    let g_hat = joint_logdensity(items, responses, mode.eta_hat)?.0;
    let rows = psi_grid
        .iter()
        .map(|&psi| {
            let icc = items.iter().map(|it| prob_at_least(it, 1, psi)).collect::<Result<_>>()?;
            let dev = psi - mode.eta_hat;
            Ok(FigureRow {
                psi,
                icc,
                likelihood: pattern_loglik(items, responses, psi)?.exp(),
                joint_density: joint_logdensity(items, responses, psi)?.0.exp(),
                laplace: (g_hat - 0.5 * mode.curvature * dev * dev).exp(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let masses = rule
        .nodes()
        .iter()
        .zip(rule.weights())
        .map(|(&node, &weight)| {
            Ok(GhqMass {
                node,
                weight,
                mass: weight * pattern_loglik(items, responses, node)?.exp(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FigureData {
        eta_hat: mode.eta_hat,
        curvature: mode.curvature,
        rows,
        masses,
    })
}

impl FigureData {
    /// Grid curves: `psi, icc_1..icc_M, likelihood, joint_density, laplace`.
    pub fn write_curves<W: Write>(&self, w: W) -> Result<()> {
        let n_items = self.rows.first().map_or(0, |r| r.icc.len());
        let mut wtr = csv_writer(w);
        let mut header = vec!["psi".to_string()];
        header.extend((1..=n_items).map(|j| format!("icc_{j}")));
        header.extend(["likelihood", "joint_density", "laplace"].map(String::from));
        wtr.write_record(&header).map_err(std::io::Error::from)?;
        for r in &self.rows {
            let mut rec = vec![format_float(r.psi)];
            rec.extend(r.icc.iter().map(|&p| format_float(p)));
            rec.extend([r.likelihood, r.joint_density, r.laplace].map(format_float));
            wtr.write_record(&rec).map_err(std::io::Error::from)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Quadrature points: `node, weight, mass`.
    pub fn write_masses<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv_writer(w);
        wtr.write_record(["node", "weight", "mass"]).map_err(std::io::Error::from)?;
        for m in &self.masses {
            wtr.write_record([m.node, m.weight, m.mass].map(format_float))
                .map_err(std::io::Error::from)?;
        }
        wtr.flush()?;
        Ok(())
    }
}
