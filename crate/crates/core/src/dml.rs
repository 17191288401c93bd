//! Cross-fitted estimation through the orthogonal moment conditions.
//!
//! For each fold, nuisances are fit on the complement and evaluated on the
//! fold; the estimator solves the pooled orthogonal-score equation across
//! folds (the DML2 variant). The variance plugs each observation's own-fold
//! nuisances into the influence function.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{self, ParameterId};
use crate::nuisance::{Dataset, ModelKind, NuisanceFit, NuisanceModel};
use crate::typeconfig::TypeConfig;

/// A deterministic L-fold partition of `n` observations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    folds: usize,
    seed: u64,
    /// Fold index per observation; fold sizes differ by at most one.
    assignments: Vec<usize>,
}

impl CrossFitPlan {
    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn complement_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

/// Shuffles indices with a seeded generator and deals them round-robin, so
/// the assignment is a pure function of `(n, folds, seed)`.
pub fn make_plan(n: usize, folds: usize, seed: u64) -> Result<CrossFitPlan> {
    if folds < 2 {
        return Err(Error::InvalidData(format!("need at least 2 folds, got {folds}")));
    }
    if n < 2 * folds {
        return Err(Error::InvalidData(format!(
            "n = {n} is too small for {folds} folds (need at least {})",
            2 * folds
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignments = vec![0usize; n];
    for (pos, &obs) in order.iter().enumerate() {
        assignments[obs] = pos % folds;
    }
    Ok(CrossFitPlan { folds, seed, assignments })
}

/// Fits a nuisance model on an arbitrary row subset. Implemented by the
/// shipped model kinds and, in tests, by oracles that return fixed functions.
pub trait Learner: Send + Sync {
    fn fit_rows(
        &self,
        data: &Dataset,
        config: &TypeConfig,
        rows: &[usize],
    ) -> Result<Box<dyn NuisanceModel>>;
}

/// The shipped learners: a model kind plus its trim floor.
#[derive(Debug, Clone, Copy)]
pub struct KindLearner {
    pub kind: ModelKind,
    pub trim_floor: f64,
}

impl Learner for KindLearner {
    fn fit_rows(
        &self,
        data: &Dataset,
        config: &TypeConfig,
        rows: &[usize],
    ) -> Result<Box<dyn NuisanceModel>> {
        let fit = NuisanceFit::fit_rows(data, config, self.kind, self.trim_floor, Some(rows))?;
        Ok(Box::new(fit))
    }
}

/// A cross-fitted estimate with its plug-in influence variance `V_check`;
/// the variance of the estimate itself is `V_check / n`.
#[derive(Debug, Clone, Serialize)]
pub struct DmlEstimate {
    pub target: ParameterId,
    pub estimate: f64,
    /// Influence-function variance; divide by `n` for the estimator variance.
    pub variance: f64,
    pub n: usize,
    pub folds: usize,
}

impl DmlEstimate {
    pub fn std_error(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }

    /// Symmetric normal confidence interval at the given z value.
    pub fn confidence_interval(&self, z: f64) -> (f64, f64) {
        let half = z * self.std_error();
        (self.estimate - half, self.estimate + half)
    }
}

/// DML2 for `beta_{t,k}`: ratio of pooled outcome scores over pooled
/// treatment scores.
pub fn dml2_beta(
    data: &Dataset,
    config: &TypeConfig,
    t: &str,
    k: usize,
    plan: &CrossFitPlan,
    learner: &dyn Learner,
) -> Result<DmlEstimate> {
    dml2_generic(data, config, &ParameterId::beta(t, k), plan, learner)
}

/// DML2 for any of the four parameter families, using the orthogonal score
/// of the corresponding influence function.
pub fn dml2_generic(
    data: &Dataset,
    config: &TypeConfig,
    target: &ParameterId,
    plan: &CrossFitPlan,
    learner: &dyn Learner,
) -> Result<DmlEstimate> {
    let n = data.n();
    if plan.assignments().len() != n {
        return Err(Error::InvalidData("plan was built for a different sample size".into()));
    }
    let param = estimators::resolve(config, target)?;

    // Per-observation orthogonal scores with own-fold nuisances, in
    // observation order so pooling is independent of fold layout.
    let mut score_y = vec![0.0; n];
    let mut score_t = vec![0.0; n];
    for fold in 0..plan.folds() {
        let train = plan.complement_rows(fold);
        let model = learner.fit_rows(data, config, &train).map_err(|e| match e {
            Error::EmptyInstrumentCell(msg) => {
                Error::EmptyInstrumentCell(format!("fold {fold}: {msg}"))
            }
            other => other,
        })?;
        let rows = plan.fold_rows(fold);
        let table = eval_rows(data, model.as_ref(), param.t, &rows)?;
        for (local, &i) in rows.iter().enumerate() {
            let (sy, st) =
                estimators::obs_scores(&param, &table, local, data.y(i), data.t(i), data.z(i));
            score_y[i] = sy;
            score_t[i] = st;
        }
    }

    let mean_t = score_t.iter().sum::<f64>() / n as f64;
    let (estimate, psi): (f64, Vec<f64>) = if param.is_ratio {
        if mean_t.abs() < estimators::DEGENERACY_FLOOR {
            return Err(Error::DegenerateSubpopulation {
                parameter: target.companion().unwrap().to_string(),
                value: mean_t,
            });
        }
        let mean_y = score_y.iter().sum::<f64>() / n as f64;
        let est = mean_y / mean_t;
        let psi = (0..n).map(|i| (score_y[i] - est * score_t[i]) / mean_t).collect();
        (est, psi)
    } else {
        (mean_t, score_t.iter().map(|s| s - mean_t).collect())
    };
    let variance = psi.iter().map(|p| p * p).sum::<f64>() / n as f64;
    Ok(DmlEstimate {
        target: target.clone(),
        estimate,
        variance,
        n,
        folds: plan.folds(),
    })
}

/// Evaluates nuisances for a list of rows, producing a table whose row order
/// matches `rows`.
fn eval_rows(
    data: &Dataset,
    model: &dyn NuisanceModel,
    t: usize,
    rows: &[usize],
) -> Result<estimators::EvalTable> {
    use nalgebra::DMatrix;
    let n_z = model.n_instruments();
    let mut p = DMatrix::zeros(rows.len(), n_z);
    let mut i_m = DMatrix::zeros(rows.len(), n_z);
    let mut pi = DMatrix::zeros(rows.len(), n_z);
    for (local, &row) in rows.iter().enumerate() {
        let ev = model.eval(data.x_row(row), t)?;
        for z in 0..n_z {
            p[(local, z)] = ev.p_tz[z];
            i_m[(local, z)] = ev.i_tz[z];
            pi[(local, z)] = ev.pi[z];
        }
    }
    Ok(estimators::EvalTable { p, i: i_m, pi })
}
