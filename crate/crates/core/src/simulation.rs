//! Built-in data generating processes and the Monte Carlo harness.
//!
//! Both processes share the five-type configuration of
//! [`TypeConfig::main_example`] and differ only in the covariate law:
//! uniform on (0.5, 0.7) or uniform over five equally spaced points. The
//! latent type count is drawn binomially in the covariate, the instrument is
//! a Bernoulli in the covariate, and outcomes are Gaussian location shifts
//! of the covariate.
//!
//! Every random variable consumes exactly one uniform from its own
//! counter-based stream keyed by (master seed, replication, variable), so
//! datasets are reproducible regardless of evaluation order or thread
//! count. Population targets are computed by exact enumeration over the
//! discrete covariate support or adaptive quadrature over the continuous
//! one, including the influence-function variances used as the reference
//! for the plug-in spread estimates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;

use crate::dml::{self, KindLearner};
use crate::error::{Error, Result};
use crate::estimators::{self, ParameterId};
use crate::nuisance::{Dataset, ModelKind, NuisanceFit};
use crate::typeconfig::TypeConfig;

/// Covariate law of the two built-in processes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum XKind {
    /// X ~ Uniform(0.5, 0.7).
    ContinuousUniform,
    /// X uniform over {0.5, 0.55, 0.6, 0.65, 0.7}.
    DiscreteFive,
}

/// A fully specified simulation draw.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DgpSpec {
    pub x_kind: XKind,
    pub n: usize,
    pub seed: u64,
    /// Maps the Bernoulli success of the instrument draw to the first
    /// instrument level instead of the second. Off by default: success on
    /// the second level makes the switcher contrasts positive.
    #[serde(default)]
    pub flip_z: bool,
}

/// A generated dataset plus the latent type of every row. The latent column
/// exists only for oracle computations in tests and diagnostics; estimators
/// never see it.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub latent_types: Vec<usize>,
}

const XS_DISCRETE: [f64; 5] = [0.5, 0.55, 0.6, 0.65, 0.7];
/// Binomial count -> type column of the main-example configuration.
const VALUE_TO_TYPE: [usize; 5] = [0, 1, 3, 4, 2];
/// Treatment index per (type column, instrument index).
const TYPE_TABLE: [[usize; 2]; 5] = [[0, 0], [1, 1], [2, 2], [2, 0], [2, 1]];

/// Mean of the potential outcome for treatment `t_idx` under type `s`.
fn mean_y(s: usize, t_idx: usize, x: f64) -> f64 {
    // Location shifts: xi ~ N(0.1, 1), xi1 ~ N(x, 1), xi2 ~ N(x + 0.2, 1),
    // xi3 ~ N(x + 0.4, 1). The first three types add the shared xi.
    match s {
        0 => [x + 0.5, x + 0.3, x + 0.1][t_idx],
        1 => [x + 0.3, x + 0.5, x + 0.1][t_idx],
        2 => x + 0.1,
        3 => [x + 0.4, x + 0.2, x][t_idx],
        4 => [x + 0.2, x + 0.4, x][t_idx],
        _ => unreachable!(),
    }
}

/// Variance of every potential outcome under type `s` (the shared noise
/// doubles it for the non-switching types).
fn var_y(s: usize) -> f64 {
    if s <= 2 {
        2.0
    } else {
        1.0
    }
}

/// Per-(replication, variable) stream.
fn stream_rng(seed: u64, rep: u64, var: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(rep * 16 + var);
    rng
}

/// Uniform on the open interval (0, 1): safe for inverse-CDF transforms.
fn open_unit(rng: &mut ChaCha12Rng) -> f64 {
    ((rng.random::<u64>() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

fn phi_inv(normal: &statrs::distribution::Normal, u: f64) -> f64 {
    normal.inverse_cdf(u)
}

/// Binomial(4, x) probabilities mapped onto the five type columns.
fn p_types_given_x(x: f64) -> [f64; 5] {
    let q = 1.0 - x;
    let pm = [
        q * q * q * q,
        4.0 * x * q * q * q,
        6.0 * x * x * q * q,
        4.0 * x * x * x * q,
        x * x * x * x,
    ];
    let mut out = [0.0; 5];
    for (count, &p) in pm.iter().enumerate() {
        out[VALUE_TO_TYPE[count]] = p;
    }
    out
}

/// Instrument propensities `(pi_z1, pi_z2)` at `x`.
fn pi_given_x(spec: &DgpSpec, x: f64) -> [f64; 2] {
    if spec.flip_z {
        [x, 1.0 - x]
    } else {
        [1.0 - x, x]
    }
}

/// Draws one dataset for replication `rep` of the master seed.
pub fn generate_rep(spec: &DgpSpec, rep: u64) -> SimulatedData {
    let config = TypeConfig::main_example();
    let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
    let mut rngs: Vec<ChaCha12Rng> =
        (0..7).map(|var| stream_rng(spec.seed, rep, var)).collect();
    let n = spec.n;
    let mut y = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut x_col = Vec::with_capacity(n);
    let mut latent = Vec::with_capacity(n);
    for _ in 0..n {
        let u_x = open_unit(&mut rngs[0]);
        let x = match spec.x_kind {
            XKind::ContinuousUniform => 0.5 + 0.2 * u_x,
            XKind::DiscreteFive => XS_DISCRETE[((u_x * 5.0) as usize).min(4)],
        };
        let u_s = open_unit(&mut rngs[1]);
        let ps = p_types_given_x(x);
        // Inverse CDF over binomial counts in their natural order.
        let mut s = VALUE_TO_TYPE[4];
        let mut acc = 0.0;
        for count in 0..5 {
            acc += ps[VALUE_TO_TYPE[count]];
            if u_s <= acc {
                s = VALUE_TO_TYPE[count];
                break;
            }
        }
        let u_z = open_unit(&mut rngs[2]);
        let success = u_z < x;
        let zi = match (success, spec.flip_z) {
            (true, false) | (false, true) => 1,
            _ => 0,
        };
        let xi = 0.1 + phi_inv(&normal, open_unit(&mut rngs[3]));
        let xi1 = x + phi_inv(&normal, open_unit(&mut rngs[4]));
        let xi2 = x + 0.2 + phi_inv(&normal, open_unit(&mut rngs[5]));
        let xi3 = x + 0.4 + phi_inv(&normal, open_unit(&mut rngs[6]));
        let ti = TYPE_TABLE[s][zi];
        let yi = potential_y(s, ti, xi, xi1, xi2, xi3);
        y.push(yi);
        t.push(ti);
        z.push(zi);
        x_col.push(x);
        latent.push(s);
    }
    let dataset = Dataset::new(y, t, z, x_col, 1, &config).expect("generated data is valid");
    SimulatedData { dataset, latent_types: latent }
}

/// Draws one dataset using replication index zero.
pub fn generate(spec: &DgpSpec) -> SimulatedData {
    generate_rep(spec, 0)
}

fn potential_y(s: usize, t_idx: usize, xi: f64, xi1: f64, xi2: f64, xi3: f64) -> f64 {
    match s {
        0 => [xi3 + xi, xi2 + xi, xi1 + xi][t_idx],
        1 => [xi2 + xi, xi3 + xi, xi1 + xi][t_idx],
        2 => xi1 + xi,
        3 => [xi3, xi2, xi1][t_idx],
        4 => [xi2, xi3, xi1][t_idx],
        _ => unreachable!(),
    }
}

/// Corrupts a generated sample by turning a seeded fraction of rows into
/// defiers: each selected row takes the treatment its type would choose
/// under the other instrument arm, with the outcome re-centered on the new
/// treatment's potential-outcome mean and shifted by `y_shift`. Rows whose
/// type never switches are unaffected. Used to exercise the implication
/// checks; the population contrast becomes negative on low-outcome bins for
/// negative shifts.
pub fn inject_defiers(
    sim: &SimulatedData,
    fraction: f64,
    y_shift: f64,
    seed: u64,
) -> Result<Dataset> {
    let config = TypeConfig::main_example();
    let data = &sim.dataset;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(data.n());
    let mut t = Vec::with_capacity(data.n());
    let mut z = Vec::with_capacity(data.n());
    let mut x = Vec::with_capacity(data.n());
    for i in 0..data.n() {
        let (mut yi, mut ti) = (data.y(i), data.t(i));
        let zi = data.z(i);
        let xi = data.x_row(i)[0];
        if open_unit(&mut rng) < fraction {
            let s = sim.latent_types[i];
            let t_new = TYPE_TABLE[s][1 - zi];
            if t_new != ti {
                yi = yi - mean_y(s, ti, xi) + mean_y(s, t_new, xi) + y_shift;
                ti = t_new;
            }
        }
        y.push(yi);
        t.push(ti);
        z.push(zi);
        x.push(xi);
    }
    Dataset::new(y, t, z, x, 1, &config)
}

/// Expectation over the covariate law.
fn expect_x(spec: &DgpSpec, f: impl Fn(f64) -> f64) -> f64 {
    match spec.x_kind {
        XKind::DiscreteFive => XS_DISCRETE.iter().map(|&x| f(x)).sum::<f64>() / 5.0,
        XKind::ContinuousUniform => integrate(&f, 0.5, 0.7) / 0.2,
    }
}

/// Adaptive Simpson quadrature.
fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = simpson(fa, fm, fb, b - a);
    recurse(f, a, b, fa, fm, fb, whole, 1e-12, 24)
}

/// Population nuisances at the truth for the main-example configuration.
fn population_p(x: f64, t_idx: usize, z: usize) -> f64 {
    let ps = p_types_given_x(x);
    (0..5).filter(|&s| TYPE_TABLE[s][z] == t_idx).map(|s| ps[s]).sum()
}

fn population_i(x: f64, t_idx: usize, z: usize) -> f64 {
    let ps = p_types_given_x(x);
    (0..5)
        .filter(|&s| TYPE_TABLE[s][z] == t_idx)
        .map(|s| ps[s] * mean_y(s, t_idx, x))
        .sum()
}

/// Exact population value of a parameter under the process.
pub fn true_value(spec: &DgpSpec, id: &ParameterId) -> Result<f64> {
    let config = TypeConfig::main_example();
    let param = estimators::resolve(&config, id)?;
    let (t_label, k) = match id {
        ParameterId::P { t, k }
        | ParameterId::Beta { t, k }
        | ParameterId::Q { t, k, .. }
        | ParameterId::Gamma { t, k, .. } => (t.clone(), *k),
    };
    let t_idx = config.treatment_index(&t_label)?;
    let sigma = config.sigma_by_index(t_idx, k)?;
    let weight = |x: f64| -> f64 {
        match &param.w_mask {
            None => 1.0,
            Some(mask) => {
                let pi = pi_given_x(spec, x);
                (0..2).filter(|&z| mask[z]).map(|z| pi[z]).sum()
            }
        }
    };
    let prob = expect_x(spec, |x| {
        let ps = p_types_given_x(x);
        sigma.iter().map(|&s| ps[s]).sum::<f64>() * weight(x)
    });
    if !param.is_ratio {
        return Ok(prob);
    }
    let mean = expect_x(spec, |x| {
        let ps = p_types_given_x(x);
        sigma.iter().map(|&s| ps[s] * mean_y(s, param.t, x)).sum::<f64>() * weight(x)
    });
    Ok(mean / prob)
}

/// Exact standard deviation of the efficient influence function under the
/// process: the square root of the semiparametric variance bound, computed
/// by enumerating types, arms, and outcome moments (quadrature over a
/// continuous covariate).
pub fn true_sigma(spec: &DgpSpec, id: &ParameterId) -> Result<f64> {
    let config = TypeConfig::main_example();
    let param = estimators::resolve(&config, id)?;
    let own = true_value(spec, id)?;
    let denom = match id.companion() {
        Some(cid) => Some(true_value(spec, &cid)?),
        None => None,
    };
    let second_moment = expect_x(spec, |x| {
        let ps = p_types_given_x(x);
        let pi = pi_given_x(spec, x);
        let w_corr = match &param.w_mask {
            None => 1.0,
            Some(mask) => (0..2).filter(|&z| mask[z]).map(|z| pi[z]).sum(),
        };
        let arm_in_w = |z: usize| -> f64 {
            param.w_mask.as_ref().map_or(1.0, |m| if m[z] { 1.0 } else { 0.0 })
        };
        let plug_p: f64 =
            (0..2).map(|z| param.btilde[z] * population_p(x, param.t, z)).sum();
        let plug_i: f64 =
            (0..2).map(|z| param.btilde[z] * population_i(x, param.t, z)).sum();
        let mut acc = 0.0;
        for s in 0..5 {
            for z in 0..2 {
                let tau = TYPE_TABLE[s][z];
                let ind = if tau == param.t { 1.0 } else { 0.0 };
                let corr = param.btilde[z] / pi[z] * w_corr;
                // score_y = a*Y + c_y; score_t is Y-free. The plug-in term
                // is selected by whether the observed arm lies in W.
                let a = corr * ind;
                let c_y = -corr * population_i(x, param.t, z) + plug_i * arm_in_w(z);
                let score_t =
                    corr * (ind - population_p(x, param.t, z)) + plug_p * arm_in_w(z);
                // Influence = A*Y + C.
                let (a_full, c_full) = match denom {
                    None => (0.0, score_t - own),
                    Some(d) => (a / d, (c_y - own * score_t) / d),
                };
                let mu = mean_y(s, tau, x);
                let v = var_y(s);
                let e2 =
                    a_full * a_full * (v + mu * mu) + 2.0 * a_full * c_full * mu + c_full * c_full;
                acc += ps[s] * pi[z] * e2;
            }
        }
        acc
    });
    Ok(second_moment.sqrt())
}

/// A Monte Carlo target: a parameter estimate or the plug-in standard
/// deviation of its influence function.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Param(ParameterId),
    Sigma(ParameterId),
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Param(id) => write!(f, "{id}"),
            Self::Sigma(id) => write!(f, "sigma:{id}"),
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("sigma:") {
            Ok(Self::Sigma(rest.parse()?))
        } else {
            Ok(Self::Param(s.parse()?))
        }
    }
}

impl Target {
    pub fn param(&self) -> &ParameterId {
        match self {
            Self::Param(id) | Self::Sigma(id) => id,
        }
    }

    /// Exact population value under the process.
    pub fn true_value(&self, spec: &DgpSpec) -> Result<f64> {
        match self {
            Self::Param(id) => true_value(spec, id),
            Self::Sigma(id) => true_sigma(spec, id),
        }
    }
}

/// Which estimator the harness runs per replication.
#[derive(Debug, Clone, Copy)]
pub enum EstimatorKind {
    Cep { model: ModelKind, trim_floor: f64 },
    Dml2 { folds: usize, model: ModelKind, trim_floor: f64 },
}

/// Per-target Monte Carlo summary.
#[derive(Debug, Clone, Serialize)]
pub struct McRow {
    pub target: String,
    pub true_value: f64,
    pub mean_bias: f64,
    pub median_bias: f64,
    pub std_dev: f64,
    pub rmse: f64,
    pub reps_used: usize,
}

/// Monte Carlo summary over all targets. Moments use the 1/R convention so
/// that `rmse^2 = mean_bias^2 + std_dev^2` holds exactly on the stored
/// draws.
#[derive(Debug, Clone, Serialize)]
pub struct McSummary {
    pub rows: Vec<McRow>,
    pub reps_requested: usize,
    pub failures: usize,
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
}

fn mix64(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn estimate_one_rep(
    spec: &DgpSpec,
    rep: u64,
    targets: &[Target],
    estimator: &EstimatorKind,
) -> Result<Vec<f64>> {
    let config = TypeConfig::main_example();
    let sim = generate_rep(spec, rep);
    let data = &sim.dataset;
    match estimator {
        EstimatorKind::Cep { model, trim_floor } => {
            let fit = NuisanceFit::fit(data, &config, *model, *trim_floor)?;
            let mut params: Vec<ParameterId> = Vec::new();
            for target in targets {
                if !params.contains(target.param()) {
                    params.push(target.param().clone());
                }
            }
            let report = estimators::estimate_all(data, &config, &fit, &params)?;
            targets
                .iter()
                .map(|target| {
                    let pos = params.iter().position(|p| p == target.param()).unwrap();
                    Ok(match target {
                        Target::Param(_) => report.estimates[pos],
                        Target::Sigma(_) => report.covariance[pos][pos].sqrt(),
                    })
                })
                .collect()
        }
        EstimatorKind::Dml2 { folds, model, trim_floor } => {
            let plan = dml::make_plan(data.n(), *folds, mix64(spec.seed, rep * 16 + 7))?;
            let learner = KindLearner { kind: *model, trim_floor: *trim_floor };
            let mut cache: std::collections::BTreeMap<ParameterId, dml::DmlEstimate> =
                std::collections::BTreeMap::new();
            targets
                .iter()
                .map(|target| {
                    let id = target.param();
                    if !cache.contains_key(id) {
                        let est = dml::dml2_generic(data, &config, id, &plan, &learner)?;
                        cache.insert(id.clone(), est);
                    }
                    let est = &cache[id];
                    Ok(match target {
                        Target::Param(_) => est.estimate,
                        Target::Sigma(_) => est.variance.sqrt(),
                    })
                })
                .collect()
        }
    }
}

/// Runs seeded replications and summarizes. Replication `r` derives its
/// streams from `(spec.seed, r)`, so the output is a pure function of the
/// inputs and is identical for every `threads` value.
pub fn run_monte_carlo(
    spec: &DgpSpec,
    reps: usize,
    targets: &[Target],
    estimator: &EstimatorKind,
    threads: usize,
) -> Result<McSummary> {
    if reps < 2 {
        return Err(Error::InvalidData("need at least 2 replications".into()));
    }
    if targets.is_empty() {
        return Err(Error::InvalidData("no targets requested".into()));
    }
    let threads = threads.max(1).min(reps);
    let mut results: Vec<Option<Vec<f64>>> = vec![None; reps];
    if threads == 1 {
        for (rep, slot) in results.iter_mut().enumerate() {
            *slot = estimate_one_rep(spec, rep as u64, targets, estimator).ok();
        }
    } else {
        let chunk = reps.div_ceil(threads);
        let outputs: Vec<Vec<(usize, Option<Vec<f64>>)>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for w in 0..threads {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(reps);
                handles.push(scope.spawn(move || {
                    (lo..hi)
                        .map(|rep| {
                            (rep, estimate_one_rep(spec, rep as u64, targets, estimator).ok())
                        })
                        .collect::<Vec<_>>()
                }));
            }
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        for batch in outputs {
            for (rep, value) in batch {
                results[rep] = value;
            }
        }
    }

    let draws: Vec<Vec<f64>> = results.iter().filter_map(|r| r.clone()).collect();
    let failures = reps - draws.len();
    if draws.is_empty() {
        return Err(Error::Estimation("every replication failed".into()));
    }
    let mut rows = Vec::with_capacity(targets.len());
    for (idx, target) in targets.iter().enumerate() {
        let truth = target.true_value(spec)?;
        let values: Vec<f64> = draws.iter().map(|d| d[idx]).collect();
        rows.push(summarize_target(&target.to_string(), truth, &values));
    }
    Ok(McSummary { rows, reps_requested: reps, failures, draws })
}

/// Moments of one target's draws against its true value.
pub(crate) fn summarize_target(target: &str, truth: f64, values: &[f64]) -> McRow {
    let r = values.len() as f64;
    let mean = values.iter().sum::<f64>() / r;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
    };
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r;
    let mse = values.iter().map(|v| (v - truth).powi(2)).sum::<f64>() / r;
    McRow {
        target: target.to_string(),
        true_value: truth,
        mean_bias: mean - truth,
        median_bias: median - truth,
        std_dev: variance.sqrt(),
        rmse: mse.sqrt(),
        reps_used: values.len(),
    }
}
