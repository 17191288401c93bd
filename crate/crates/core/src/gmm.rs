//! Two-step optimally weighted GMM for parameters implicitly defined by
//! moment conditions on the subpopulation outcome laws.
//!
//! Each moment entry targets the law of the outcome conditional on a type
//! set `(t, k)` (optionally conditional on also receiving `t`). Moments may
//! be non-smooth in the parameter (quantile restrictions), so both stages
//! minimize with multi-start Nelder–Mead, and the Jacobian is estimated by
//! central numerical differences with a step of order `n^(-1/4)`.
//!
//! The moment nuisances are the within-cell conditional expectations of
//! `m_j(Y, eta) 1{T = t_j}` per instrument arm, re-evaluated lazily at every
//! requested `eta` from cached per-cell sorted outcomes. Only the cell-mean
//! first stage supports this exact re-evaluation, so this module requires a
//! `DiscreteCells` fit.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::cells::CellIndex;
use crate::error::{Error, Result};
use crate::nuisance::{Dataset, NuisanceFit};
use crate::optim;
use crate::typeconfig::TypeConfig;

/// Arbitrary moment function `m(y, eta)`, shareable across threads.
pub type CustomMoment = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

/// Functional form of one moment condition on a pseudo-outcome.
#[derive(Clone)]
pub enum MomentKind {
    /// `m_j(y, eta) = y - a' eta` with `a` the selector over coordinates.
    Mean { selector: Vec<f64> },
    /// `m_j(y, eta) = 1{y <= a' eta} - tau`.
    Quantile { tau: f64, selector: Vec<f64> },
    /// Arbitrary `m_j(y, eta)`; available through the library API only.
    Custom(CustomMoment),
}

impl fmt::Debug for MomentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Mean { selector } => write!(f, "Mean({selector:?})"),
            Self::Quantile { tau, selector } => write!(f, "Quantile({tau}, {selector:?})"),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// One moment condition: the subpopulation `(t, k)` it constrains and the
/// functional form. With `treated` set, the moment constrains the law of the
/// outcome among those who also receive `t` (weighting by the uniform
/// instrument set of that subpopulation).
#[derive(Debug, Clone)]
pub struct MomentEntry {
    pub t: String,
    pub k: usize,
    pub kind: MomentKind,
    pub treated: bool,
}

/// A collection of `J` moment conditions sharing the parameter vector `eta`,
/// searched over the compact box `bounds`.
#[derive(Debug, Clone)]
pub struct MomentSpec {
    pub entries: Vec<MomentEntry>,
    pub d_eta: usize,
    pub bounds: Vec<(f64, f64)>,
}

#[derive(Deserialize)]
struct MomentEntryJson {
    #[allow(dead_code)]
    j: Option<usize>,
    t: String,
    k: usize,
    kind: String,
    selector: Option<Vec<f64>>,
    tau: Option<f64>,
    #[serde(default)]
    treated: bool,
}

#[derive(Deserialize)]
struct MomentSpecJson {
    d_eta: usize,
    bounds: Vec<(f64, f64)>,
    moments: Vec<MomentEntryJson>,
}

impl<'de> Deserialize<'de> for MomentSpec {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let raw = MomentSpecJson::deserialize(de)?;
        let mut entries = Vec::with_capacity(raw.moments.len());
        for m in raw.moments {
            let selector = m.selector.unwrap_or_else(|| vec![1.0]);
            let kind = match m.kind.as_str() {
                "mean" => MomentKind::Mean { selector },
                "quantile" => MomentKind::Quantile {
                    tau: m.tau.ok_or_else(|| {
                        serde::de::Error::custom("quantile moment requires `tau`")
                    })?,
                    selector,
                },
                other => {
                    return Err(serde::de::Error::custom(format!(
                        "unknown moment kind `{other}` (custom moments are library-only)"
                    )))
                }
            };
            entries.push(MomentEntry { t: m.t, k: m.k, kind, treated: m.treated });
        }
        Ok(MomentSpec { entries, d_eta: raw.d_eta, bounds: raw.bounds })
    }
}

impl MomentSpec {
    pub fn j(&self) -> usize {
        self.entries.len()
    }

    /// Single mean restriction on the `(t, k)` subpopulation outcome law:
    /// the GMM estimate of `eta` is then the corresponding structural
    /// function.
    pub fn single_mean(t: &str, k: usize, bounds: (f64, f64)) -> Self {
        Self {
            entries: vec![MomentEntry {
                t: t.into(),
                k,
                kind: MomentKind::Mean { selector: vec![1.0] },
                treated: false,
            }],
            d_eta: 1,
            bounds: vec![bounds],
        }
    }

    fn validate(&self, config: &TypeConfig) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidMomentSpec("no moment conditions".into()));
        }
        if self.d_eta == 0 || self.d_eta > self.entries.len() {
            return Err(Error::InvalidMomentSpec(format!(
                "d_eta = {} must be in 1..=J = {}",
                self.d_eta,
                self.entries.len()
            )));
        }
        if self.bounds.len() != self.d_eta {
            return Err(Error::InvalidMomentSpec("one bound pair per coordinate".into()));
        }
        for &(lo, hi) in &self.bounds {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidMomentSpec(format!("bad bounds [{lo}, {hi}]")));
            }
        }
        for entry in &self.entries {
            let t = config.treatment_index(&entry.t)?;
            let sigma = config.sigma_by_index(t, entry.k)?;
            if sigma.is_empty() {
                return Err(Error::InvalidMomentSpec(format!(
                    "no types support the ({}, {}) subpopulation",
                    entry.t, entry.k
                )));
            }
            let selector = match &entry.kind {
                MomentKind::Mean { selector } | MomentKind::Quantile { selector, .. } => {
                    Some(selector)
                }
                MomentKind::Custom(_) => None,
            };
            if let Some(sel) = selector {
                if sel.len() != self.d_eta {
                    return Err(Error::InvalidMomentSpec(format!(
                        "selector length {} != d_eta {}",
                        sel.len(),
                        self.d_eta
                    )));
                }
            }
            if let MomentKind::Quantile { tau, .. } = entry.kind {
                if !(0.0 < tau && tau < 1.0) {
                    return Err(Error::InvalidMomentSpec(format!("tau = {tau} not in (0,1)")));
                }
            }
        }
        Ok(())
    }
}

/// Everything the two GMM stages share: the cell index, resolved
/// contractions, and the per-cell trimmed propensities.
struct GmmContext<'a> {
    data: &'a Dataset,
    index: CellIndex,
    entries: Vec<ResolvedEntry>,
    pi: Vec<Vec<f64>>,
    d_eta: usize,
    bounds: Vec<(f64, f64)>,
}

struct ResolvedEntry {
    t: usize,
    btilde: Vec<f64>,
    w_mask: Option<Vec<bool>>,
    kind: MomentKind,
}

impl<'a> GmmContext<'a> {
    fn build(
        data: &'a Dataset,
        config: &TypeConfig,
        fit: &NuisanceFit,
        spec: &MomentSpec,
    ) -> Result<Self> {
        spec.validate(config)?;
        if !fit.is_discrete_cells() {
            return Err(Error::Estimation(
                "moment nuisances require the cell-mean first stage".into(),
            ));
        }
        let index = CellIndex::build(data, config)?;
        let pi: Vec<Vec<f64>> = (0..index.cells.len())
            .map(|c| index.pi_trimmed(c, fit.trim_floor()))
            .collect();
        let mut entries = Vec::with_capacity(spec.entries.len());
        for entry in &spec.entries {
            let t = config.treatment_index(&entry.t)?;
            let btilde: Vec<f64> =
                config.btilde_by_index(t, entry.k)?.iter().cloned().collect();
            let w_mask = if entry.treated {
                let w = config.w_set_by_index(t, t, entry.k)?.ok_or_else(|| {
                    Error::MissingWSet { t_prime: entry.t.clone(), t: entry.t.clone(), k: entry.k }
                })?;
                let mut mask = vec![false; config.n_instruments()];
                for i in w {
                    mask[i] = true;
                }
                Some(mask)
            } else {
                None
            };
            entries.push(ResolvedEntry { t, btilde, w_mask, kind: entry.kind.clone() });
        }
        Ok(Self { data, index, entries, pi, d_eta: spec.d_eta, bounds: spec.bounds.clone() })
    }

    /// `m_j(y, eta)`.
    fn m_of(&self, j: usize, y: f64, eta: &[f64]) -> f64 {
        match &self.entries[j].kind {
            MomentKind::Mean { selector } => y - dot(selector, eta),
            MomentKind::Quantile { tau, selector } => {
                if y <= dot(selector, eta) {
                    1.0 - tau
                } else {
                    -tau
                }
            }
            MomentKind::Custom(f) => f(y, eta),
        }
    }

    /// The moment nuisance for entry `j` in `cell` at arm `z`: the
    /// within-cell mean of `m_j(Y, eta) 1{T = t_j}` among `Z = z` rows.
    fn m_hat(&self, j: usize, cell: usize, z: usize, eta: &[f64]) -> f64 {
        let entry = &self.entries[j];
        let c = &self.index.cells[cell];
        let bucket = &c.tz[entry.t * self.index.n_z + z];
        let n_z_obs = c.z_counts[z] as f64;
        match &entry.kind {
            MomentKind::Mean { selector } => {
                (bucket.ysum - dot(selector, eta) * bucket.count() as f64) / n_z_obs
            }
            MomentKind::Quantile { tau, selector } => {
                let v = dot(selector, eta);
                (bucket.count_le(v) as f64 - tau * bucket.count() as f64) / n_z_obs
            }
            MomentKind::Custom(f) => bucket.ys.iter().map(|&y| f(y, eta)).sum::<f64>() / n_z_obs,
        }
    }

    /// Sample mean of the moment influence vector. Under cell-mean nuisances
    /// the inverse-propensity corrections cancel exactly within every cell,
    /// so the mean reduces to the cell-weighted plug-in term (for treated
    /// moments, weighted by the raw within-cell arm frequency, which is the
    /// exact mean of the observed-arm indicator).
    fn g_n(&self, eta: &[f64]) -> DVector<f64> {
        let n_cells = self.index.cells.len();
        let n_total = self.data.n();
        let mut g = DVector::zeros(self.entries.len());
        for (j, entry) in self.entries.iter().enumerate() {
            let mut acc = 0.0;
            for cell in 0..n_cells {
                let mut plug = 0.0;
                for z in 0..self.index.n_z {
                    plug += entry.btilde[z] * self.m_hat(j, cell, z, eta);
                }
                let weight = match &entry.w_mask {
                    None => 1.0,
                    Some(mask) => {
                        let c = &self.index.cells[cell];
                        (0..self.index.n_z)
                            .filter(|&z| mask[z])
                            .map(|z| c.z_counts[z] as f64 / c.n as f64)
                            .sum()
                    }
                };
                acc += self.index.weight(cell, n_total) * plug * weight;
            }
            g[j] = acc;
        }
        g
    }

    /// Per-observation influence values, `n x J`.
    fn psi_matrix(&self, eta: &[f64]) -> DMatrix<f64> {
        let n = self.data.n();
        let j_count = self.entries.len();
        let mut out = DMatrix::zeros(n, j_count);
        for i in 0..n {
            let cell = self.index.row_cell[i];
            let (y, t_obs, z_obs) = (self.data.y(i), self.data.t(i), self.data.z(i));
            let pi = &self.pi[cell];
            for (j, entry) in self.entries.iter().enumerate() {
                let (w_corr, w_ind) = match &entry.w_mask {
                    None => (1.0, 1.0),
                    Some(mask) => {
                        let pi_w: f64 =
                            (0..self.index.n_z).filter(|&z| mask[z]).map(|z| pi[z]).sum();
                        (pi_w, if mask[z_obs] { 1.0 } else { 0.0 })
                    }
                };
                let ind = if t_obs == entry.t { 1.0 } else { 0.0 };
                let m_hat_here = self.m_hat(j, cell, z_obs, eta);
                let mut psi = entry.btilde[z_obs] / pi[z_obs]
                    * (self.m_of(j, y, eta) * ind - m_hat_here)
                    * w_corr;
                let mut plug = 0.0;
                for z in 0..self.index.n_z {
                    plug += entry.btilde[z] * self.m_hat(j, cell, z, eta);
                }
                psi += plug * w_ind;
                out[(i, j)] = psi;
            }
        }
        out
    }

    /// Multi-start minimization over the bounded box: a five-level grid over
    /// the first (at most three) coordinates plus the center plus an optional
    /// warm start, each polished by Nelder–Mead; one-dimensional problems get
    /// golden-section refinements (global and around the incumbent).
    /// Returns `(argmin, min, objective spread across starts)`.
    fn minimize(
        &self,
        obj: &mut dyn FnMut(&[f64]) -> f64,
        warm: Option<&[f64]>,
    ) -> (Vec<f64>, f64, f64) {
        let d = self.d_eta;
        let center: Vec<f64> = self.bounds.iter().map(|&(lo, hi)| 0.5 * (lo + hi)).collect();
        let mut starts: Vec<Vec<f64>> = vec![center.clone()];
        let grid_dims = d.min(3);
        let levels = 5usize;
        let mut combo = vec![0usize; grid_dims];
        loop {
            let mut point = center.clone();
            for (dim, &lvl) in combo.iter().enumerate() {
                let (lo, hi) = self.bounds[dim];
                point[dim] = lo + (lvl as f64 + 1.0) * (hi - lo) / (levels as f64 + 1.0);
            }
            starts.push(point);
            let mut carry = 0;
            while carry < grid_dims {
                combo[carry] += 1;
                if combo[carry] < levels {
                    break;
                }
                combo[carry] = 0;
                carry += 1;
            }
            if carry == grid_dims {
                break;
            }
        }
        if let Some(w) = warm {
            starts.push(w.to_vec());
        }
        // Flatness is judged on the raw surface at the start grid, before
        // any minimization.
        let mut lo_obj = f64::INFINITY;
        let mut hi_obj = f64::NEG_INFINITY;
        for start in &starts {
            let v = obj(start);
            lo_obj = lo_obj.min(v);
            hi_obj = hi_obj.max(v);
        }
        let mut best: Option<(Vec<f64>, f64)> = None;
        for start in &starts {
            let (x, v) = optim::nelder_mead(obj, start, &self.bounds);
            if best.as_ref().is_none_or(|(_, bv)| v < *bv) {
                best = Some((x, v));
            }
        }
        let (mut x, mut v) = best.expect("at least one start");
        if d == 1 {
            let (lo, hi) = self.bounds[0];
            let mut scalar = |t: f64| obj(&[t]);
            let (g_x, g_v) = optim::golden_section(&mut scalar, lo, hi);
            if g_v < v {
                x = vec![g_x];
                v = g_v;
            }
            // The global pass can land on a different step of a piecewise
            // constant criterion; polish around the incumbent too.
            let span = 0.1 * (hi - lo);
            let (l_x, l_v) =
                optim::golden_section(&mut scalar, (x[0] - span).max(lo), (x[0] + span).min(hi));
            if l_v < v {
                x = vec![l_x];
                v = l_v;
            }
        }
        (x, v, hi_obj - lo_obj)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-observation influence values of the moment vector at `eta`.
pub fn psi_m_values(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    spec: &MomentSpec,
    eta: &[f64],
) -> Result<DMatrix<f64>> {
    let ctx = GmmContext::build(data, config, fit, spec)?;
    Ok(ctx.psi_matrix(eta))
}

/// First stage: identity-weighted GMM, minimizing the Euclidean norm of the
/// sample moment vector over the box.
pub fn gmm_first_stage(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    spec: &MomentSpec,
) -> Result<Vec<f64>> {
    let ctx = GmmContext::build(data, config, fit, spec)?;
    let mut obj = |eta: &[f64]| ctx.g_n(eta).norm_squared();
    let (eta, _, _) = ctx.minimize(&mut obj, None);
    Ok(eta)
}

/// Outer-product covariance of the moment influence vector at `eta_tilde`.
/// The flag reports whether the matrix is singular, in which case downstream
/// weighting falls back to the pseudoinverse.
pub fn estimate_v(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    spec: &MomentSpec,
    eta_tilde: &[f64],
) -> Result<(DMatrix<f64>, bool)> {
    let ctx = GmmContext::build(data, config, fit, spec)?;
    let psi = ctx.psi_matrix(eta_tilde);
    let v = psi.transpose() * &psi / data.n() as f64;
    let singular = is_singular(&v);
    Ok((v, singular))
}

fn is_singular(v: &DMatrix<f64>) -> bool {
    let svd = v.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    !max_sv.is_finite() || max_sv <= 0.0 || min_sv <= 1e-12 * max_sv
}

/// Inverse weighting matrix, with pseudoinverse fallback for singular `V`.
fn weighting(v: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if is_singular(v) {
        (crate::typeconfig::pseudoinverse(v), true)
    } else {
        (v.clone().try_inverse().expect("nonsingular"), false)
    }
}

/// Second stage: minimizes the `V^-1`-weighted quadratic form, warm-started
/// at the first-stage estimate when given.
pub fn gmm_second_stage(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    spec: &MomentSpec,
    v_hat: &DMatrix<f64>,
    warm: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let ctx = GmmContext::build(data, config, fit, spec)?;
    let (weight, _) = weighting(v_hat);
    let mut obj = |eta: &[f64]| {
        let g = ctx.g_n(eta);
        (g.transpose() * &weight * &g)[(0, 0)]
    };
    let (eta, _, _) = ctx.minimize(&mut obj, warm);
    Ok(eta)
}

/// Numerical-derivative Jacobian of the averaged moment nuisances,
/// `J x d_eta`. Steps that would leave the box are clipped to the boundary,
/// turning the central difference into a one-sided one.
pub fn gamma_hat(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    spec: &MomentSpec,
    eta_hat: &[f64],
    epsilon: f64,
) -> Result<DMatrix<f64>> {
    let ctx = GmmContext::build(data, config, fit, spec)?;
    let mut out = DMatrix::zeros(spec.j(), spec.d_eta);
    for l in 0..spec.d_eta {
        let (lo, hi) = ctx.bounds[l];
        let up = (eta_hat[l] + epsilon).min(hi);
        let down = (eta_hat[l] - epsilon).max(lo);
        let mut eta_up = eta_hat.to_vec();
        eta_up[l] = up;
        let mut eta_down = eta_hat.to_vec();
        eta_down[l] = down;
        let g_up = ctx.g_n(&eta_up);
        let g_down = ctx.g_n(&eta_down);
        for j in 0..spec.j() {
            out[(j, l)] = (g_up[j] - g_down[j]) / (up - down);
        }
    }
    Ok(out)
}

/// `(Gamma' V^-1 Gamma)^-1`; the covariance of the estimate is this divided
/// by `n`. Errors when the Jacobian lacks full column rank.
pub fn gmm_covariance(
    gamma: &DMatrix<f64>,
    v_hat: &DMatrix<f64>,
    _n: usize,
) -> Result<DMatrix<f64>> {
    let svd = gamma.clone().svd(false, false);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !max_sv.is_finite() || max_sv <= 0.0 || min_sv <= 1e-10 * max_sv.max(1.0) {
        return Err(Error::JacobianRankDeficient);
    }
    let (weight, _) = weighting(v_hat);
    let middle = gamma.transpose() * weight * gamma;
    middle.try_inverse().ok_or(Error::JacobianRankDeficient)
}

/// Full two-step GMM result.
#[derive(Debug, Clone)]
pub struct GmmResult {
    pub first_stage_eta: Vec<f64>,
    pub eta_hat: Vec<f64>,
    pub v_hat: DMatrix<f64>,
    pub gamma_hat: DMatrix<f64>,
    /// `(Gamma' V^-1 Gamma)^-1`; estimate covariance is this over `n`.
    pub covariance: DMatrix<f64>,
    pub standard_errors: Vec<f64>,
    pub objective_value: f64,
    pub epsilon: f64,
    pub n: usize,
    /// The weighting matrix was singular and the pseudoinverse was used.
    pub pseudoinverse_weighting: bool,
    /// The criterion barely moved across the start grid; identification by
    /// the supplied moments is in doubt (a user obligation, not checkable
    /// for custom moments).
    pub near_flat_objective: bool,
}

/// Pipeline options. `epsilon` defaults to `n^(-1/4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GmmOptions {
    pub epsilon: Option<f64>,
}

/// Runs first stage, weighting, second stage, Jacobian, and covariance.
pub fn fit_gmm(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    spec: &MomentSpec,
    options: GmmOptions,
) -> Result<GmmResult> {
    let ctx = GmmContext::build(data, config, fit, spec)?;
    let mut first_obj = |eta: &[f64]| ctx.g_n(eta).norm_squared();
    let (first_stage_eta, first_val, first_spread) = ctx.minimize(&mut first_obj, None);

    let psi = ctx.psi_matrix(&first_stage_eta);
    let v_hat = psi.transpose() * &psi / data.n() as f64;
    let (weight, pseudoinverse_weighting) = weighting(&v_hat);

    let mut second_obj = |eta: &[f64]| {
        let g = ctx.g_n(eta);
        (g.transpose() * &weight * &g)[(0, 0)]
    };
    let (eta_hat, objective_value, second_spread) =
        ctx.minimize(&mut second_obj, Some(&first_stage_eta));

    let epsilon = options.epsilon.unwrap_or((data.n() as f64).powf(-0.25));
    let gamma = gamma_hat(data, config, fit, spec, &eta_hat, epsilon)?;
    let covariance = gmm_covariance(&gamma, &v_hat, data.n())?;
    let standard_errors: Vec<f64> = (0..spec.d_eta)
        .map(|l| (covariance[(l, l)] / data.n() as f64).sqrt())
        .collect();
    let flat_scale = 1e-10 * (1.0 + first_val.abs() + objective_value.abs());
    Ok(GmmResult {
        first_stage_eta,
        eta_hat,
        v_hat,
        gamma_hat: gamma,
        covariance,
        standard_errors,
        objective_value,
        epsilon,
        n: data.n(),
        pseudoinverse_weighting,
        near_flat_objective: first_spread < flat_scale && second_spread < flat_scale,
    })
}
