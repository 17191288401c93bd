//! First-stage nuisance estimation.
//!
//! The estimators downstream only ever consume three conditional objects:
//! the instrument propensities `pi_z(x)`, and the two families of
//! conditional expectations `h_{Y,t,z}(x) = E[1{Z=z} Y 1{T=t} | X=x]` and
//! `h_{t,z}(x) = E[1{Z=z} 1{T=t} | X=x]`. Two fitters ship: exact cell
//! means for discrete covariates, and least-squares polynomial series.
//!
//! The downstream asymptotics assume the first stage converges fast enough
//! and lives in a class of bounded complexity. Those are regularity
//! assumptions on the chosen model, not something this module can verify;
//! cell means satisfy them trivially on finite supports, and series fits
//! require adequate smoothness relative to the chosen degree.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::typeconfig::TypeConfig;

/// Default overlap floor applied to propensity evaluations.
pub const DEFAULT_TRIM_FLOOR: f64 = 0.01;

/// Observation table. Treatment and instrument labels are stored as indices
/// into the configuration they were validated against.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    t: Vec<usize>,
    z: Vec<usize>,
    x: Vec<f64>,
    d_x: usize,
}

impl Dataset {
    /// Builds a dataset from index-coded treatment/instrument columns.
    pub fn new(
        y: Vec<f64>,
        t: Vec<usize>,
        z: Vec<usize>,
        x: Vec<f64>,
        d_x: usize,
        config: &TypeConfig,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        if t.len() != n || z.len() != n || x.len() != n * d_x {
            return Err(Error::InvalidData("column lengths disagree".into()));
        }
        if let Some(v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite outcome {v}")));
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite covariate {v}")));
        }
        if t.iter().any(|&ti| ti >= config.n_treatments()) {
            return Err(Error::InvalidData("treatment index out of range".into()));
        }
        if z.iter().any(|&zi| zi >= config.n_instruments()) {
            return Err(Error::InvalidData("instrument index out of range".into()));
        }
        Ok(Self { y, t, z, x, d_x })
    }

    /// Builds a dataset from labeled rows, resolving labels against `config`.
    pub fn from_labeled(
        rows: &[(f64, String, String, Vec<f64>)],
        config: &TypeConfig,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidData("dataset is empty".into()));
        }
        let d_x = rows[0].3.len();
        let mut y = Vec::with_capacity(rows.len());
        let mut t = Vec::with_capacity(rows.len());
        let mut z = Vec::with_capacity(rows.len());
        let mut x = Vec::with_capacity(rows.len() * d_x);
        for (yi, ti, zi, xi) in rows {
            if xi.len() != d_x {
                return Err(Error::InvalidData("ragged covariate rows".into()));
            }
            y.push(*yi);
            t.push(config.treatment_index(ti)?);
            z.push(config.instrument_index(zi)?);
            x.extend_from_slice(xi);
        }
        Self::new(y, t, z, x, d_x, config)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn y(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn t(&self, i: usize) -> usize {
        self.t[i]
    }

    pub fn z(&self, i: usize) -> usize {
        self.z[i]
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn ys(&self) -> &[f64] {
        &self.y
    }

    /// Returns a copy with outcomes transformed by `f`.
    pub fn map_y(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for v in &mut out.y {
            *v = f(*v);
        }
        out
    }
}

/// Nonparametric model family for the first stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Exact within-cell frequencies/means; requires discrete covariates with
    /// every instrument level observed in every cell.
    DiscreteCells,
    /// Least-squares projection on polynomials of total degree `degree`
    /// (covariates standardized first), with the propensity vector projected
    /// back to the probability simplex.
    PolynomialSeries { degree: usize },
}

/// Canonical cell key: covariates rounded to 12 significant digits,
/// stored by bit pattern so hashing is exact and reproducible.
pub(crate) type CellKey = Vec<u64>;

pub(crate) fn cell_key(x: &[f64]) -> CellKey {
    x.iter()
        .map(|&v| {
            let r = if v == 0.0 { 0.0 } else { format!("{v:.11e}").parse::<f64>().unwrap() };
            r.to_bits()
        })
        .collect()
}

fn key_display(key: &CellKey) -> String {
    let parts: Vec<String> = key.iter().map(|&b| format!("{}", f64::from_bits(b))).collect();
    format!("x=({})", parts.join(","))
}

#[derive(Debug, Clone)]
pub(crate) struct CellStats {
    pub n: usize,
    /// Count of rows with Z = z.
    pub z_counts: Vec<usize>,
    /// Count of rows with T = t and Z = z, laid out t-major.
    pub tz_counts: Vec<usize>,
    /// Sum of Y over rows with T = t and Z = z, t-major.
    pub tz_ysums: Vec<f64>,
}

impl CellStats {
    fn new(n_t: usize, n_z: usize) -> Self {
        Self {
            n: 0,
            z_counts: vec![0; n_z],
            tz_counts: vec![0; n_t * n_z],
            tz_ysums: vec![0.0; n_t * n_z],
        }
    }
}

#[derive(Debug, Clone)]
struct CellsFit {
    cells: BTreeMap<CellKey, CellStats>,
}

#[derive(Debug, Clone)]
struct SeriesFit {
    degree: usize,
    /// Per-coordinate standardization (mean, scale) fixed at fit time.
    standardize: Vec<(f64, f64)>,
    /// Monomial exponent tuples of total degree <= degree.
    exponents: Vec<Vec<u32>>,
    /// Coefficient matrix: one column per fitted target, laid out
    /// [pi_z ...][h_t (t-major, z-minor) ...][h_y ...].
    coefs: DMatrix<f64>,
}

#[derive(Debug, Clone)]
enum FitInner {
    Cells(CellsFit),
    Series(SeriesFit),
}

/// A fitted first stage. Immutable; evaluation is thread-safe.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    kind: ModelKind,
    trim_floor: f64,
    n_t: usize,
    n_z: usize,
    inner: FitInner,
}

/// Evaluated nuisance vectors at one covariate point, ordered like the
/// configuration's instrument list. `pi` is already floored at the trim
/// level; the ratios use the same floored values.
#[derive(Debug, Clone)]
pub struct EvalVectors {
    /// P(T = t | Z = z, x) for the requested treatment.
    pub p_tz: Vec<f64>,
    /// E[Y 1{T = t} | Z = z, x].
    pub i_tz: Vec<f64>,
    /// Trimmed instrument propensities.
    pub pi: Vec<f64>,
}

/// Evaluation contract shared by fitted first stages and injected oracles
/// (used by the cross-fitted estimators and their tests).
pub trait NuisanceModel: Send + Sync {
    fn eval(&self, x: &[f64], t_idx: usize) -> Result<EvalVectors>;
    fn n_instruments(&self) -> usize;
}

impl NuisanceModel for NuisanceFit {
    fn eval(&self, x: &[f64], t_idx: usize) -> Result<EvalVectors> {
        self.eval_vectors(x, t_idx)
    }

    fn n_instruments(&self) -> usize {
        self.n_z
    }
}

impl NuisanceFit {
    /// Fits the chosen model on the full dataset.
    pub fn fit(
        dataset: &Dataset,
        config: &TypeConfig,
        kind: ModelKind,
        trim_floor: f64,
    ) -> Result<Self> {
        Self::fit_rows(dataset, config, kind, trim_floor, None)
    }

    /// Fits on a row subset (cross-fitting complements pass explicit rows).
    pub fn fit_rows(
        dataset: &Dataset,
        config: &TypeConfig,
        kind: ModelKind,
        trim_floor: f64,
        rows: Option<&[usize]>,
    ) -> Result<Self> {
        if !(0.0..0.5).contains(&trim_floor) {
            return Err(Error::InvalidData(format!("trim floor {trim_floor} not in [0, 0.5)")));
        }
        let n_t = config.n_treatments();
        let n_z = config.n_instruments();
        let indices: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..dataset.n()).collect(),
        };
        if indices.is_empty() {
            return Err(Error::InvalidData("no rows to fit on".into()));
        }
        let inner = match kind {
            ModelKind::DiscreteCells => {
                FitInner::Cells(fit_cells(dataset, &indices, config, n_t, n_z)?)
            }
            ModelKind::PolynomialSeries { degree } => {
                FitInner::Series(fit_series(dataset, &indices, n_t, n_z, degree)?)
            }
        };
        Ok(Self { kind, trim_floor, n_t, n_z, inner })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn trim_floor(&self) -> f64 {
        self.trim_floor
    }

    pub fn is_discrete_cells(&self) -> bool {
        matches!(self.inner, FitInner::Cells(_))
    }

    /// Raw (untrimmed) propensity vector at `x`.
    pub fn pi_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.inner {
            FitInner::Cells(c) => {
                let stats = self.lookup_cell(c, x)?;
                Ok(stats.z_counts.iter().map(|&c| c as f64 / stats.n as f64).collect())
            }
            FitInner::Series(s) => {
                let preds = series_predict(s, x);
                Ok(simplex_with_floor(&preds[..self.n_z], self.trim_floor))
            }
        }
    }

    /// `(P_tZ, I_tZ, pi)` at `x` for treatment index `t_idx`, with the
    /// propensities floored at the trim level before any division.
    pub fn eval_vectors(&self, x: &[f64], t_idx: usize) -> Result<EvalVectors> {
        let n_z = self.n_z;
        match &self.inner {
            FitInner::Cells(c) => {
                let stats = self.lookup_cell(c, x)?;
                let n = stats.n as f64;
                let mut p_tz = vec![0.0; n_z];
                let mut i_tz = vec![0.0; n_z];
                let mut pi = vec![0.0; n_z];
                for z in 0..n_z {
                    let pi_raw = stats.z_counts[z] as f64 / n;
                    let pi_trim = pi_raw.max(self.trim_floor);
                    let h_t = stats.tz_counts[t_idx * n_z + z] as f64 / n;
                    let h_y = stats.tz_ysums[t_idx * n_z + z] / n;
                    pi[z] = pi_trim;
                    p_tz[z] = h_t / pi_trim;
                    i_tz[z] = h_y / pi_trim;
                }
                Ok(EvalVectors { p_tz, i_tz, pi })
            }
            FitInner::Series(s) => {
                let preds = series_predict(s, x);
                let pi = simplex_with_floor(&preds[..n_z], self.trim_floor);
                let mut p_tz = vec![0.0; n_z];
                let mut i_tz = vec![0.0; n_z];
                for z in 0..n_z {
                    let h_t = preds[n_z + t_idx * n_z + z];
                    let h_y = preds[n_z + self.n_t * n_z + t_idx * n_z + z];
                    p_tz[z] = h_t / pi[z];
                    i_tz[z] = h_y / pi[z];
                }
                Ok(EvalVectors { p_tz, i_tz, pi })
            }
        }
    }

    fn lookup_cell<'a>(&self, cells: &'a CellsFit, x: &[f64]) -> Result<&'a CellStats> {
        let key = cell_key(x);
        cells
            .cells
            .get(&key)
            .ok_or_else(|| Error::UnseenCovariateCell(key_display(&key)))
    }
}

fn fit_cells(
    dataset: &Dataset,
    rows: &[usize],
    config: &TypeConfig,
    n_t: usize,
    n_z: usize,
) -> Result<CellsFit> {
    let mut cells: BTreeMap<CellKey, CellStats> = BTreeMap::new();
    for &i in rows {
        let key = cell_key(dataset.x_row(i));
        let stats = cells.entry(key).or_insert_with(|| CellStats::new(n_t, n_z));
        let (t, z, y) = (dataset.t(i), dataset.z(i), dataset.y(i));
        stats.n += 1;
        stats.z_counts[z] += 1;
        stats.tz_counts[t * n_z + z] += 1;
        stats.tz_ysums[t * n_z + z] += y;
    }
    for (key, stats) in &cells {
        for z in 0..n_z {
            if stats.z_counts[z] == 0 {
                return Err(Error::EmptyInstrumentCell(format!(
                    "cell {} has no observations with instrument `{}`",
                    key_display(key),
                    config.instruments()[z]
                )));
            }
        }
    }
    Ok(CellsFit { cells })
}

fn fit_series(
    dataset: &Dataset,
    rows: &[usize],
    n_t: usize,
    n_z: usize,
    degree: usize,
) -> Result<SeriesFit> {
    let d = dataset.d_x();
    let m = rows.len();
    // Standardize coordinates for conditioning.
    let mut standardize = Vec::with_capacity(d);
    for j in 0..d {
        let mean = rows.iter().map(|&i| dataset.x_row(i)[j]).sum::<f64>() / m as f64;
        let var = rows
            .iter()
            .map(|&i| (dataset.x_row(i)[j] - mean).powi(2))
            .sum::<f64>()
            / m as f64;
        let scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        standardize.push((mean, scale));
    }
    let exponents = monomial_exponents(d, degree);
    let b = exponents.len();
    let mut design = DMatrix::zeros(m, b);
    for (r, &i) in rows.iter().enumerate() {
        let xs = dataset.x_row(i);
        for (c, exps) in exponents.iter().enumerate() {
            design[(r, c)] = monomial(xs, exps, &standardize);
        }
    }
    let n_targets = n_z + 2 * n_t * n_z;
    let mut targets = DMatrix::zeros(m, n_targets);
    for (r, &i) in rows.iter().enumerate() {
        let (t, z, y) = (dataset.t(i), dataset.z(i), dataset.y(i));
        targets[(r, z)] = 1.0;
        targets[(r, n_z + t * n_z + z)] = 1.0;
        targets[(r, n_z + n_t * n_z + t * n_z + z)] = y;
    }
    let svd = design.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let min_sv = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !max_sv.is_finite() || max_sv <= 0.0 || min_sv < 1e-10 * max_sv {
        return Err(Error::RankDeficientDesign);
    }
    let coefs = svd
        .solve(&targets, 1e-12 * max_sv)
        .map_err(|e| Error::Estimation(format!("series solve failed: {e}")))?;
    Ok(SeriesFit { degree, standardize, exponents, coefs })
}

fn monomial_exponents(d: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; d]];
    let mut frontier = out.clone();
    for _ in 0..degree {
        let mut next = Vec::new();
        for e in &frontier {
            // Extend only at or after the last incremented coordinate to
            // avoid duplicates.
            let start = e.iter().rposition(|&v| v > 0).unwrap_or(0);
            for j in start..d {
                let mut e2 = e.clone();
                e2[j] += 1;
                next.push(e2);
            }
        }
        next.sort();
        next.dedup();
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn monomial(x: &[f64], exps: &[u32], standardize: &[(f64, f64)]) -> f64 {
    exps.iter()
        .enumerate()
        .map(|(j, &e)| {
            let u = (x[j] - standardize[j].0) / standardize[j].1;
            u.powi(e as i32)
        })
        .product()
}

fn series_predict(fit: &SeriesFit, x: &[f64]) -> Vec<f64> {
    let _ = fit.degree;
    let mut out = vec![0.0; fit.coefs.ncols()];
    for (c, exps) in fit.exponents.iter().enumerate() {
        let basis = monomial(x, exps, &fit.standardize);
        for (k, v) in out.iter_mut().enumerate() {
            *v += basis * fit.coefs[(c, k)];
        }
    }
    out
}

/// Projects raw predictions onto the probability simplex with a lower bound:
/// coordinates pinned at the floor, remaining mass shared proportionally.
fn simplex_with_floor(raw: &[f64], floor: f64) -> Vec<f64> {
    let k = raw.len();
    let mut pinned = vec![false; k];
    loop {
        let free_mass = 1.0 - floor * pinned.iter().filter(|&&p| p).count() as f64;
        let total: f64 = raw
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(&v, _)| v.max(floor))
            .sum();
        let mut out = vec![0.0; k];
        let mut changed = false;
        for i in 0..k {
            if pinned[i] {
                out[i] = floor;
            } else {
                out[i] = raw[i].max(floor) / total * free_mass;
                if out[i] < floor {
                    pinned[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            return out;
        }
    }
}
