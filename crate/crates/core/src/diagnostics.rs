//! Plug-in checks of the model's testable implications.
//!
//! For every treatment, switch level, outcome bin, and covariate cell, the
//! identified joint quantity `Q_t(x, (B, Sigma_{t,k})) = btilde_{t,k}
//! 1B_{t,Z}(x)` must lie in `[0, 1]`. Coinciding unions of type sets add
//! equality restrictions across treatments; those only constrain the
//! marginal (whole-outcome-range) level, where they reduce to identities on
//! the type probabilities, so that is where they are checked.
//!
//! This is a diagnostic, not a sized test: the auto tolerance is three
//! plug-in standard errors per check (binomial approximation from cell
//! counts), and strictly positive violations are expected under noise at
//! tolerance zero.
//!
//! The range and coinciding-union families are the restrictions that can be
//! evaluated without constructing the unidentified joint kernels; whether
//! configurations richer than the built-in presets admit further checkable
//! restrictions is left open.

use serde::Serialize;

use crate::cells::CellIndex;
use crate::error::{Error, Result};
use crate::nuisance::{Dataset, NuisanceFit};
use crate::typeconfig::TypeConfig;

/// Outcome bins: `breaks` are the interior breakpoints, sorted strictly
/// increasing; bin `i` is left-closed right-open, with the first and last
/// bins unbounded.
#[derive(Debug, Clone, Serialize)]
pub struct BinGrid {
    pub breaks: Vec<f64>,
}

impl BinGrid {
    pub fn from_breaks(mut breaks: Vec<f64>) -> Result<Self> {
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        breaks.dedup();
        if breaks.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidData("non-finite breakpoint".into()));
        }
        Ok(Self { breaks })
    }

    /// Equal-probability bins from pooled outcomes: breakpoints at the
    /// `j/n_bins` sample quantiles. Ties may merge bins.
    pub fn equal_probability(ys: &[f64], n_bins: usize) -> Result<Self> {
        if n_bins < 1 || ys.is_empty() {
            return Err(Error::InvalidData("need outcomes and at least one bin".into()));
        }
        let mut sorted = ys.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len();
        let mut breaks = Vec::new();
        for j in 1..n_bins {
            let pos = (n * j).div_ceil(n_bins).saturating_sub(1);
            breaks.push(sorted[pos]);
        }
        Self::from_breaks(breaks)
    }

    pub fn n_bins(&self) -> usize {
        self.breaks.len() + 1
    }

    /// Half-open `[lo, hi)` edges of bin `b` (`None` = unbounded).
    pub fn edges(&self, b: usize) -> (Option<f64>, Option<f64>) {
        let lo = if b == 0 { None } else { Some(self.breaks[b - 1]) };
        let hi = if b == self.breaks.len() { None } else { Some(self.breaks[b]) };
        (lo, hi)
    }
}

/// One evaluated range check.
#[derive(Debug, Clone, Serialize)]
pub struct QEntry {
    pub t: String,
    pub k: usize,
    pub bin: usize,
    pub cell_x: Vec<f64>,
    pub q_hat: f64,
    /// Plug-in standard error from the cell counts.
    pub std_error: f64,
    /// `max(-q, q - 1, 0)`.
    pub violation: f64,
}

/// One evaluated equality restriction at the marginal level for one cell.
#[derive(Debug, Clone, Serialize)]
pub struct EqualityEntry {
    pub relation: String,
    pub cell_x: Vec<f64>,
    pub lhs: f64,
    pub rhs: f64,
    pub discrepancy: f64,
    pub std_error: f64,
}

/// Which range bounds can bind at all for a given `(t, k)`: with no negative
/// contraction weight the estimate cannot go below zero, and with positive
/// weights summing to at most one it cannot exceed one. The attainable
/// checks form the reduced implication system for the configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ActiveCheck {
    pub t: String,
    pub k: usize,
    pub lower_attainable: bool,
    pub upper_attainable: bool,
}

/// Raw evaluated implication quantities, before a tolerance is applied.
#[derive(Debug, Clone, Serialize)]
pub struct RawImplications {
    pub entries: Vec<QEntry>,
    pub equalities: Vec<EqualityEntry>,
    pub active: Vec<ActiveCheck>,
    pub bins: BinGrid,
    pub n: usize,
}

/// Tolerance policy for the pass/fail summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tolerance {
    /// Three plug-in standard errors per check (with a small floor so exact
    /// identities are not failed on rounding noise).
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct Flagged {
    pub description: String,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImplicationReport {
    pub raw: RawImplications,
    pub flagged: Vec<Flagged>,
    pub max_violation: f64,
    pub n_checks: usize,
    pub passed: bool,
    /// Reminder that this is a plug-in diagnostic with a heuristic
    /// tolerance, not a formal hypothesis test.
    pub note: String,
}

/// Evaluates the binned joint quantities and the marginal equality
/// restrictions on a cell-mean fit.
pub fn q_kernel_estimates(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    bins: &BinGrid,
) -> Result<RawImplications> {
    if !fit.is_discrete_cells() {
        return Err(Error::Estimation(
            "implication checks require the cell-mean first stage".into(),
        ));
    }
    let index = CellIndex::build(data, config)?;
    let n_z = config.n_instruments();
    let mut entries = Vec::new();
    let mut active = Vec::new();

    // Per-(t, k) contractions, skipping empty type sets.
    let mut contractions: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for t in 0..config.n_treatments() {
        let part = config.partition_by_index(t);
        for k in 1..=n_z {
            if part.sets[k].is_empty() {
                continue;
            }
            let btilde: Vec<f64> = config.btilde_by_index(t, k)?.iter().cloned().collect();
            let lower_attainable = btilde.iter().any(|&b| b < -1e-12);
            let upper_attainable = btilde.iter().map(|&b| b.max(0.0)).sum::<f64>() > 1.0 + 1e-12;
            active.push(ActiveCheck {
                t: config.treatments()[t].clone(),
                k,
                lower_attainable,
                upper_attainable,
            });
            contractions.push((t, k, btilde));
        }
    }

    for (cell_idx, cell) in index.cells.iter().enumerate() {
        for bin in 0..bins.n_bins() {
            let (lo, hi) = bins.edges(bin);
            for (t, k, btilde) in &contractions {
                let mut q = 0.0;
                let mut var = 0.0;
                for (z, &b) in btilde.iter().enumerate() {
                    let n_arm = cell.z_counts[z] as f64;
                    let g = cell.tz[t * n_z + z].count_in(lo, hi) as f64 / n_arm;
                    q += b * g;
                    var += b * b * g * (1.0 - g) / n_arm;
                }
                entries.push(QEntry {
                    t: config.treatments()[*t].clone(),
                    k: *k,
                    bin,
                    cell_x: index.x_repr[cell_idx].clone(),
                    q_hat: q,
                    std_error: var.sqrt(),
                    violation: (-q).max(q - 1.0).max(0.0),
                });
            }
        }
    }

    // Equality restrictions: checked at the marginal level, where coinciding
    // unions pin the same subpopulation probability on both sides.
    let mut equalities = Vec::new();
    for relation in config.find_equality_restrictions() {
        let side_value = |cells_side: &[(String, usize)], cell: usize| -> Result<(f64, f64)> {
            let mut total = 0.0;
            let mut var = 0.0;
            for (t_label, k) in cells_side {
                let t = config.treatment_index(t_label)?;
                let btilde = config.btilde_by_index(t, *k)?;
                for z in 0..n_z {
                    let n_arm = index.cells[cell].z_counts[z] as f64;
                    let p = index.cells[cell].tz[t * n_z + z].count() as f64 / n_arm;
                    total += btilde[z] * p;
                    var += btilde[z] * btilde[z] * p * (1.0 - p) / n_arm;
                }
            }
            Ok((total, var))
        };
        for cell in 0..index.cells.len() {
            let (lhs, var_l) = side_value(&relation.lhs, cell)?;
            let (rhs, var_r) = side_value(&relation.rhs, cell)?;
            equalities.push(EqualityEntry {
                relation: relation.to_string(),
                cell_x: index.x_repr[cell].clone(),
                lhs,
                rhs,
                discrepancy: (lhs - rhs).abs(),
                std_error: (var_l + var_r).sqrt(),
            });
        }
    }

    Ok(RawImplications { entries, equalities, active, bins: bins.clone(), n: data.n() })
}

/// Applies a tolerance to the raw quantities and summarizes.
pub fn check_implications(raw: &RawImplications, tolerance: Tolerance) -> ImplicationReport {
    let tol_of = |se: f64| match tolerance {
        Tolerance::Auto => (3.0 * se).max(1e-9),
        Tolerance::Fixed(v) => v,
    };
    let mut flagged = Vec::new();
    let mut max_violation = 0.0f64;
    let mut n_checks = 0usize;
    for e in &raw.entries {
        n_checks += 1;
        max_violation = max_violation.max(e.violation);
        if e.violation > tol_of(e.std_error) {
            flagged.push(Flagged {
                description: format!(
                    "range: Q[{},{}] bin {} at x=({}) = {:.4}",
                    e.t,
                    e.k,
                    e.bin,
                    fmt_x(&e.cell_x),
                    e.q_hat
                ),
                value: e.violation,
                tolerance: tol_of(e.std_error),
            });
        }
    }
    for e in &raw.equalities {
        n_checks += 1;
        max_violation = max_violation.max(e.discrepancy);
        if e.discrepancy > tol_of(e.std_error) {
            flagged.push(Flagged {
                description: format!(
                    "equality: {} at x=({}) (lhs {:.4}, rhs {:.4})",
                    e.relation,
                    fmt_x(&e.cell_x),
                    e.lhs,
                    e.rhs
                ),
                value: e.discrepancy,
                tolerance: tol_of(e.std_error),
            });
        }
    }
    ImplicationReport {
        raw: raw.clone(),
        passed: flagged.is_empty(),
        flagged,
        max_violation,
        n_checks,
        note: "plug-in diagnostic with heuristic tolerance (3 x plug-in standard error per \
               check under `auto`); not a sized hypothesis test"
            .into(),
    }
}

fn fmt_x(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}
