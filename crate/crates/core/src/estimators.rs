//! Two-step projection estimators and their efficient influence functions.
//!
//! Point estimators plug the fitted nuisances into the identification
//! equations: type probabilities `p_{t,k}`, treated-and-type probabilities
//! `q_{t',t,k}`, local average structural functions `beta_{t,k}`, and their
//! on-the-treated counterparts `gamma_{t',t,k}`. Joint inference comes from
//! the plugged-in influence functions: `V_hat` is the uncentered outer
//! product average, and the covariance of the estimate vector is `V_hat / n`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::{Dataset, NuisanceFit, NuisanceModel};
use crate::typeconfig::TypeConfig;

/// Below this magnitude a subpopulation probability is treated as degenerate.
pub const DEGENERACY_FLOOR: f64 = 1e-10;

/// Identifies one estimand. `Q` and `Gamma` carry the realized treatment
/// `t_prime` first, then the potential-outcome treatment `t` whose type sets
/// index the subpopulation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParameterId {
    P { t: String, k: usize },
    Q { t_prime: String, t: String, k: usize },
    Beta { t: String, k: usize },
    Gamma { t_prime: String, t: String, k: usize },
}

impl ParameterId {
    pub fn p(t: &str, k: usize) -> Self {
        Self::P { t: t.into(), k }
    }

    pub fn q(t_prime: &str, t: &str, k: usize) -> Self {
        Self::Q { t_prime: t_prime.into(), t: t.into(), k }
    }

    pub fn beta(t: &str, k: usize) -> Self {
        Self::Beta { t: t.into(), k }
    }

    pub fn gamma(t_prime: &str, t: &str, k: usize) -> Self {
        Self::Gamma { t_prime: t_prime.into(), t: t.into(), k }
    }

    /// The companion estimate required when evaluating the influence
    /// function: the subpopulation probability in the denominator.
    pub fn companion(&self) -> Option<ParameterId> {
        match self {
            Self::Beta { t, k } => Some(Self::P { t: t.clone(), k: *k }),
            Self::Gamma { t_prime, t, k } => {
                Some(Self::Q { t_prime: t_prime.clone(), t: t.clone(), k: *k })
            }
            _ => None,
        }
    }
}

impl fmt::Display for ParameterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::P { t, k } => write!(f, "p:{t}:{k}"),
            Self::Q { t_prime, t, k } => write!(f, "q:{t_prime}:{t}:{k}"),
            Self::Beta { t, k } => write!(f, "beta:{t}:{k}"),
            Self::Gamma { t_prime, t, k } => write!(f, "gamma:{t_prime}:{t}:{k}"),
        }
    }
}

impl FromStr for ParameterId {
    type Err = Error;

    /// Parses `kind:labels:k`, e.g. `beta:t1:1`, `p:t1:2`, `q:t3:t3:1`.
    /// For `q`/`gamma` a two-label form like `gamma:t3:1` is shorthand for
    /// the own-treatment case `gamma:t3:t3:1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidData(format!("cannot parse parameter id `{s}`"));
        let k_of = |p: &str| p.parse::<usize>().map_err(|_| bad());
        match parts.as_slice() {
            ["p", t, k] => Ok(Self::p(t, k_of(k)?)),
            ["beta", t, k] => Ok(Self::beta(t, k_of(k)?)),
            ["q", tp, t, k] => Ok(Self::q(tp, t, k_of(k)?)),
            ["q", t, k] => Ok(Self::q(t, t, k_of(k)?)),
            ["gamma", tp, t, k] => Ok(Self::gamma(tp, t, k_of(k)?)),
            ["gamma", t, k] => Ok(Self::gamma(t, t, k_of(k)?)),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ParameterId {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ParameterId {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Map of estimates keyed by parameter, used to pass companion values into
/// the influence evaluation.
pub type ParamEstimates = BTreeMap<ParameterId, f64>;

/// A parameter resolved against a configuration: indices, contraction
/// vector, and (for treated parameters) the instrument weighting set.
#[derive(Debug, Clone)]
pub(crate) struct ResolvedParam {
    pub id: ParameterId,
    pub t: usize,
    pub btilde: Vec<f64>,
    /// `Some(mask)` for q/gamma: indicator of `W_{t',t,k}` over instruments.
    pub w_mask: Option<Vec<bool>>,
    /// Whether the parameter is a ratio (beta/gamma) or a probability (p/q).
    pub is_ratio: bool,
}

pub(crate) fn resolve(config: &TypeConfig, id: &ParameterId) -> Result<ResolvedParam> {
    let (t_label, k, t_prime, is_ratio) = match id {
        ParameterId::P { t, k } => (t, *k, None, false),
        ParameterId::Beta { t, k } => (t, *k, None, true),
        ParameterId::Q { t_prime, t, k } => (t, *k, Some(t_prime), false),
        ParameterId::Gamma { t_prime, t, k } => (t, *k, Some(t_prime), true),
    };
    let t = config.treatment_index(t_label)?;
    let btilde = config.btilde_by_index(t, k)?;
    let w_mask = match t_prime {
        None => None,
        Some(tp_label) => {
            let tp = config.treatment_index(tp_label)?;
            let w = config.w_set_by_index(tp, t, k)?.ok_or_else(|| Error::MissingWSet {
                t_prime: tp_label.clone(),
                t: t_label.clone(),
                k,
            })?;
            let mut mask = vec![false; config.n_instruments()];
            for i in w {
                mask[i] = true;
            }
            Some(mask)
        }
    };
    Ok(ResolvedParam {
        id: id.clone(),
        t,
        btilde: btilde.iter().cloned().collect(),
        w_mask,
        is_ratio,
    })
}

/// Nuisance vectors evaluated on every dataset row for one treatment,
/// deduplicated by canonical covariate cell.
pub(crate) struct EvalTable {
    /// n x N_Z each: conditional treatment probabilities, conditional
    /// outcome products, trimmed propensities.
    pub p: DMatrix<f64>,
    pub i: DMatrix<f64>,
    pub pi: DMatrix<f64>,
}

pub(crate) fn eval_table(
    data: &Dataset,
    model: &dyn NuisanceModel,
    t: usize,
) -> Result<EvalTable> {
    let n = data.n();
    let n_z = model.n_instruments();
    let mut p = DMatrix::zeros(n, n_z);
    let mut i_m = DMatrix::zeros(n, n_z);
    let mut pi = DMatrix::zeros(n, n_z);
    // Deduplicate on the raw bit pattern: identical inputs evaluate once.
    let mut memo: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    for row in 0..n {
        let key: Vec<u64> = data.x_row(row).iter().map(|v| v.to_bits()).collect();
        if let Some(&src) = memo.get(&key) {
            for z in 0..n_z {
                p[(row, z)] = p[(src, z)];
                i_m[(row, z)] = i_m[(src, z)];
                pi[(row, z)] = pi[(src, z)];
            }
        } else {
            let ev = model.eval(data.x_row(row), t)?;
            for z in 0..n_z {
                p[(row, z)] = ev.p_tz[z];
                i_m[(row, z)] = ev.i_tz[z];
                pi[(row, z)] = ev.pi[z];
            }
            memo.insert(key, row);
        }
    }
    Ok(EvalTable { p, i: i_m, pi })
}

/// Evaluation tables shared across parameters, built once per treatment.
pub(crate) struct TableCache<'a> {
    data: &'a Dataset,
    fit: &'a NuisanceFit,
    tables: BTreeMap<usize, EvalTable>,
}

impl<'a> TableCache<'a> {
    pub(crate) fn new(data: &'a Dataset, fit: &'a NuisanceFit) -> Self {
        Self { data, fit, tables: BTreeMap::new() }
    }

    pub(crate) fn table(&mut self, t: usize) -> Result<&EvalTable> {
        if let std::collections::btree_map::Entry::Vacant(slot) = self.tables.entry(t) {
            slot.insert(eval_table(self.data, self.fit, t)?);
        }
        Ok(&self.tables[&t])
    }
}

/// The two orthogonal score pieces of one observation for one parameter:
/// the outcome part (numerator family) and the treatment part (denominator
/// family). Both include the inverse-propensity correction. For treated
/// parameters the correction is weighted by `pi_W(x)` and the plug-in term
/// by the observed-arm indicator `1{Z in W}`, whose within-cell mean is the
/// empirical `pi_W` — that is what makes the score average out to the
/// weighted plug-in estimator exactly under cell means.
pub(crate) fn obs_scores(
    param: &ResolvedParam,
    table: &EvalTable,
    row: usize,
    y: f64,
    t_obs: usize,
    z_obs: usize,
) -> (f64, f64) {
    let n_z = param.btilde.len();
    let ind = if t_obs == param.t { 1.0 } else { 0.0 };
    let (w_corr, w_ind) = match &param.w_mask {
        None => (1.0, 1.0),
        Some(mask) => {
            let pi_w: f64 =
                (0..n_z).filter(|&z| mask[z]).map(|z| table.pi[(row, z)]).sum();
            (pi_w, if mask[z_obs] { 1.0 } else { 0.0 })
        }
    };
    let bz = param.btilde[z_obs];
    let pi_z = table.pi[(row, z_obs)];
    let mut score_y = bz / pi_z * (y * ind - table.i[(row, z_obs)]) * w_corr;
    let mut score_t = bz / pi_z * (ind - table.p[(row, z_obs)]) * w_corr;
    let mut plug_y = 0.0;
    let mut plug_t = 0.0;
    for z in 0..n_z {
        plug_y += param.btilde[z] * table.i[(row, z)];
        plug_t += param.btilde[z] * table.p[(row, z)];
    }
    score_y += plug_y * w_ind;
    score_t += plug_t * w_ind;
    (score_y, score_t)
}

/// Plug-in means over the sample: `(mean of btilde-contracted I, mean of
/// btilde-contracted P)`, with the `pi_W` factor applied for treated
/// parameters.
pub(crate) fn plugin_means(data: &Dataset, param: &ResolvedParam, table: &EvalTable) -> (f64, f64) {
    let n = data.n();
    let n_z = param.btilde.len();
    let mut sum_i = 0.0;
    let mut sum_p = 0.0;
    for row in 0..n {
        let weight = match &param.w_mask {
            None => 1.0,
            Some(mask) => (0..n_z).filter(|&z| mask[z]).map(|z| table.pi[(row, z)]).sum(),
        };
        let mut bi = 0.0;
        let mut bp = 0.0;
        for z in 0..n_z {
            bi += param.btilde[z] * table.i[(row, z)];
            bp += param.btilde[z] * table.p[(row, z)];
        }
        sum_i += bi * weight;
        sum_p += bp * weight;
    }
    (sum_i / n as f64, sum_p / n as f64)
}

fn point_estimate(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    id: &ParameterId,
) -> Result<f64> {
    let mut cache = TableCache::new(data, fit);
    point_estimate_cached(data, config, id, &mut cache)
}

fn point_estimate_cached(
    data: &Dataset,
    config: &TypeConfig,
    id: &ParameterId,
    cache: &mut TableCache,
) -> Result<f64> {
    let param = resolve(config, id)?;
    let table = cache.table(param.t)?;
    let (mean_i, mean_p) = plugin_means(data, &param, table);
    if param.is_ratio {
        if mean_p.abs() < DEGENERACY_FLOOR {
            return Err(Error::DegenerateSubpopulation {
                parameter: param.id.companion().unwrap().to_string(),
                value: mean_p,
            });
        }
        Ok(mean_i / mean_p)
    } else {
        Ok(mean_p)
    }
}

/// Type probability `p_{t,k}`: sample mean of the contracted conditional
/// treatment probabilities. May be negative in finite samples; downstream
/// ratio estimators refuse denominators below `1e-10` in magnitude.
pub fn estimate_p(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    t: &str,
    k: usize,
) -> Result<f64> {
    point_estimate(data, config, fit, &ParameterId::p(t, k))
}

/// Treated-and-type probability `q_{t',t,k}`; zero when the uniform
/// instrument set is empty, an error when it does not exist.
pub fn estimate_q(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    t_prime: &str,
    t: &str,
    k: usize,
) -> Result<f64> {
    point_estimate(data, config, fit, &ParameterId::q(t_prime, t, k))
}

/// Local average structural function `beta_{t,k}`.
pub fn estimate_beta(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    t: &str,
    k: usize,
) -> Result<f64> {
    point_estimate(data, config, fit, &ParameterId::beta(t, k))
}

/// Local average structural function on the treated, `gamma_{t',t,k}`.
pub fn estimate_gamma(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    t_prime: &str,
    t: &str,
    k: usize,
) -> Result<f64> {
    point_estimate(data, config, fit, &ParameterId::gamma(t_prime, t, k))
}

/// Per-observation efficient influence values, one column per parameter.
///
/// `estimates` must contain an entry for every requested parameter and, for
/// `beta`/`gamma`, the companion probability (`p`/`q`).
pub fn influence_values(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    params: &[ParameterId],
    estimates: &ParamEstimates,
) -> Result<DMatrix<f64>> {
    let mut cache = TableCache::new(data, fit);
    influence_values_cached(data, config, params, estimates, &mut cache)
}

fn influence_values_cached(
    data: &Dataset,
    config: &TypeConfig,
    params: &[ParameterId],
    estimates: &ParamEstimates,
    cache: &mut TableCache,
) -> Result<DMatrix<f64>> {
    let n = data.n();
    let mut out = DMatrix::zeros(n, params.len());
    for (col, id) in params.iter().enumerate() {
        let param = resolve(config, id)?;
        let own = *estimates
            .get(id)
            .ok_or_else(|| Error::MissingCompanion(id.to_string()))?;
        let denom = match id.companion() {
            None => None,
            Some(cid) => Some(
                *estimates
                    .get(&cid)
                    .ok_or_else(|| Error::MissingCompanion(cid.to_string()))?,
            ),
        };
        let table = cache.table(param.t)?;
        for row in 0..n {
            let (sy, st) = obs_scores(&param, table, row, data.y(row), data.t(row), data.z(row));
            out[(row, col)] = match denom {
                // Psi_p / Psi_q: orthogonal score minus the estimate.
                None => st - own,
                // Psi_beta / Psi_gamma.
                Some(d) => (sy - own * st) / d,
            };
        }
    }
    Ok(out)
}

/// `V_hat`: uncentered outer-product average of the influence rows. The
/// covariance of the estimate vector is `V_hat / n`.
pub fn covariance(influence: &DMatrix<f64>) -> DMatrix<f64> {
    let n = influence.nrows() as f64;
    influence.transpose() * influence / n
}

/// Joint point estimates, influence values, covariance, and standard errors
/// for a list of parameters.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub parameters: Vec<ParameterId>,
    pub estimates: Vec<f64>,
    /// `sqrt(V_hat[i][i] / n)`.
    pub standard_errors: Vec<f64>,
    /// V_hat; the covariance of the estimates is this matrix divided by n.
    pub covariance: Vec<Vec<f64>>,
    pub n: usize,
    /// Equality relations among probability cells implied by the
    /// configuration. Estimation does not impose them; they are listed so
    /// overidentified configurations are visible in reports.
    pub equality_notes: Vec<String>,
    #[serde(skip)]
    pub influence: DMatrix<f64>,
}

impl EstimateReport {
    pub fn estimate_of(&self, id: &ParameterId) -> Option<f64> {
        self.parameters.iter().position(|p| p == id).map(|i| self.estimates[i])
    }

    pub fn std_error_of(&self, id: &ParameterId) -> Option<f64> {
        self.parameters.iter().position(|p| p == id).map(|i| self.standard_errors[i])
    }
}

/// Runs the full CEP pipeline for `params`: point estimates (companions
/// included automatically), influence matrix, covariance, standard errors.
pub fn estimate_all(
    data: &Dataset,
    config: &TypeConfig,
    fit: &NuisanceFit,
    params: &[ParameterId],
) -> Result<EstimateReport> {
    let mut cache = TableCache::new(data, fit);
    let mut estimates = ParamEstimates::new();
    for id in params {
        let needed: Vec<ParameterId> =
            std::iter::once(id.clone()).chain(id.companion()).collect();
        for pid in needed {
            if let std::collections::btree_map::Entry::Vacant(slot) = estimates.entry(pid) {
                let value = point_estimate_cached(data, config, slot.key(), &mut cache)?;
                slot.insert(value);
            }
        }
    }
    let influence = influence_values_cached(data, config, params, &estimates, &mut cache)?;
    let v_hat = covariance(&influence);
    let n = data.n();
    let standard_errors: Vec<f64> =
        (0..params.len()).map(|i| (v_hat[(i, i)] / n as f64).sqrt()).collect();
    let covariance: Vec<Vec<f64>> = (0..params.len())
        .map(|i| (0..params.len()).map(|j| v_hat[(i, j)]).collect())
        .collect();
    let equality_notes =
        config.find_equality_restrictions().iter().map(|r| r.to_string()).collect();
    Ok(EstimateReport {
        parameters: params.to_vec(),
        estimates: params.iter().map(|p| estimates[p]).collect(),
        standard_errors,
        covariance,
        n,
        equality_notes,
        influence,
    })
}

/// The default reporting family: every `beta_{t,k}` with a nonempty type
/// set, plus the own-treatment `gamma_{t,t,k}` for the switching levels
/// `k < N_Z`. For the three-treatment preset this is the nine-parameter
/// structural-function family.
pub fn default_lasf_params(config: &TypeConfig) -> Vec<ParameterId> {
    let n_z = config.n_instruments();
    let mut out = Vec::new();
    for t in config.treatments() {
        let t_idx = config.treatment_index(t).expect("own label");
        let part = config.partition_by_index(t_idx);
        for k in 1..=n_z {
            if !part.sets[k].is_empty() {
                out.push(ParameterId::beta(t, k));
            }
        }
    }
    for t in config.treatments() {
        let t_idx = config.treatment_index(t).expect("own label");
        let part = config.partition_by_index(t_idx);
        for k in 1..n_z {
            if !part.sets[k].is_empty() {
                out.push(ParameterId::gamma(t, t, k));
            }
        }
    }
    out
}

/// Scalar functional of a parameter vector.
pub type DerivedFn = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Gradient of a [`DerivedFn`].
pub type DerivedGradient = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// A continuously differentiable functional of estimated parameters.
/// The gradient is either supplied or taken by central finite differences
/// with step `1e-6 * (1 + |value|)` per coordinate.
pub struct DerivedSpec {
    pub name: String,
    pub inputs: Vec<ParameterId>,
    eval: DerivedFn,
    gradient: Option<DerivedGradient>,
}

impl DerivedSpec {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<ParameterId>,
        eval: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), inputs, eval: Box::new(eval), gradient: None }
    }

    pub fn with_gradient(
        mut self,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.gradient = Some(Box::new(gradient));
        self
    }

    pub fn value(&self, inputs: &[f64]) -> f64 {
        (self.eval)(inputs)
    }

    fn gradient_at(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let grad = match &self.gradient {
            Some(g) => g(inputs),
            None => {
                let mut grad = Vec::with_capacity(inputs.len());
                let mut work = inputs.to_vec();
                for j in 0..inputs.len() {
                    let step = 1e-6 * (1.0 + inputs[j].abs());
                    work[j] = inputs[j] + step;
                    let up = (self.eval)(&work);
                    work[j] = inputs[j] - step;
                    let down = (self.eval)(&work);
                    work[j] = inputs[j];
                    grad.push((up - down) / (2.0 * step));
                }
                grad
            }
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok(grad)
    }

    /// Switcher-average structural function for `t`: the probability-weighted
    /// mean of `beta_{t,k}` over the switching levels `k = 1..N_Z-1` with
    /// nonempty type sets.
    pub fn switcher_lasf(config: &TypeConfig, t: &str) -> Result<Self> {
        let ks = switching_levels(config, t)?;
        let mut inputs = Vec::new();
        for &k in &ks {
            inputs.push(ParameterId::beta(t, k));
            inputs.push(ParameterId::p(t, k));
        }
        Ok(Self::new(format!("beta_t[{t}]"), inputs, weighted_mean_of_pairs))
    }

    /// Treated-switcher counterpart: weights `gamma_{t,t,k}` by `p_{t,k}`.
    pub fn switcher_lasft(config: &TypeConfig, t: &str) -> Result<Self> {
        let ks = switching_levels(config, t)?;
        let mut inputs = Vec::new();
        for &k in &ks {
            inputs.push(ParameterId::gamma(t, t, k));
            inputs.push(ParameterId::p(t, k));
        }
        Ok(Self::new(format!("gamma_t[{t}]"), inputs, weighted_mean_of_pairs))
    }

    /// Treatment-effect contrast of `t` against all other treatments within
    /// the `t`-switchers at level `k = 1`:
    /// `beta_{t,1} - sum_{t' != t} beta_{t',1} p_{t',1} / sum p_{t',1}`.
    /// Requires the type set of `(t,1)` to be the disjoint union of the
    /// others', which is what makes both sides average the same
    /// subpopulation.
    pub fn switcher_effect_contrast(config: &TypeConfig, t: &str) -> Result<Self> {
        let t_idx = config.treatment_index(t)?;
        let own: std::collections::BTreeSet<usize> =
            config.sigma_by_index(t_idx, 1)?.into_iter().collect();
        let mut union = std::collections::BTreeSet::new();
        let mut inputs = vec![ParameterId::beta(t, 1)];
        for (o_idx, other) in config.treatments().iter().enumerate() {
            if o_idx == t_idx {
                continue;
            }
            let sigma = config.sigma_by_index(o_idx, 1)?;
            if sigma.is_empty() {
                continue;
            }
            for j in sigma {
                if !union.insert(j) {
                    return Err(Error::Estimation(
                        "switcher contrast requires disjoint type sets".into(),
                    ));
                }
            }
            inputs.push(ParameterId::beta(other, 1));
            inputs.push(ParameterId::p(other, 1));
        }
        if union != own {
            return Err(Error::Estimation(format!(
                "switcher contrast undefined: type sets of the other treatments do not \
                 partition the ({t},1) set"
            )));
        }
        Ok(Self::new(format!("contrast[{t}]"), inputs, |v| {
            let mut num = 0.0;
            let mut den = 0.0;
            for pair in v[1..].chunks(2) {
                num += pair[0] * pair[1];
                den += pair[1];
            }
            v[0] - num / den
        }))
    }
}

fn switching_levels(config: &TypeConfig, t: &str) -> Result<Vec<usize>> {
    let t_idx = config.treatment_index(t)?;
    let part = config.partition_by_index(t_idx);
    let ks: Vec<usize> =
        (1..config.n_instruments()).filter(|&k| !part.sets[k].is_empty()).collect();
    if ks.is_empty() {
        return Err(Error::Estimation(format!("treatment `{t}` has no switcher types")));
    }
    Ok(ks)
}

/// `sum_k v_k w_k / sum_k w_k` over (value, weight) pairs.
fn weighted_mean_of_pairs(v: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for pair in v.chunks(2) {
        num += pair[0] * pair[1];
        den += pair[1];
    }
    num / den
}

/// A derived estimate with its delta-method standard error.
#[derive(Debug, Clone)]
pub struct DerivedEstimate {
    pub name: String,
    pub estimate: f64,
    pub standard_error: f64,
    pub influence: DVector<f64>,
}

/// Delta-method estimate of `phi` from a fitted report: the influence column
/// is the gradient-weighted combination of the input influence columns, and
/// the standard error is computed from it the same way as for the inputs.
pub fn derived_parameter(report: &EstimateReport, phi: &DerivedSpec) -> Result<DerivedEstimate> {
    let mut cols = Vec::with_capacity(phi.inputs.len());
    let mut values = Vec::with_capacity(phi.inputs.len());
    for id in &phi.inputs {
        let pos = report
            .parameters
            .iter()
            .position(|p| p == id)
            .ok_or_else(|| Error::MissingCompanion(id.to_string()))?;
        values.push(report.estimates[pos]);
        cols.push(pos);
    }
    let estimate = phi.value(&values);
    let grad = phi.gradient_at(&values)?;
    let n = report.n;
    let mut influence = DVector::zeros(n);
    for (g, &col) in grad.iter().zip(&cols) {
        influence += report.influence.column(col) * *g;
    }
    let v = influence.iter().map(|x| x * x).sum::<f64>() / n as f64;
    Ok(DerivedEstimate {
        name: phi.name.clone(),
        estimate,
        standard_error: (v / n as f64).sqrt(),
        influence,
    })
}
