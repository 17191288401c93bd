//! Oracle tests for the cross-fitted estimators: agreement with an
//! independently coded score-sum computation under oracle nuisances,
//! exact reduction to the projection estimator under a degenerate
//! full-sample learner, fold-count robustness, and large-simulation checks
//! of the treated-subpopulation target.

use gliv::dml::{dml2_beta, dml2_generic, make_plan, KindLearner, Learner};
use gliv::estimators::{estimate_all, ParameterId};
use gliv::nuisance::{Dataset, EvalVectors, ModelKind, NuisanceFit, NuisanceModel};
use gliv::simulation::{self, DgpSpec, XKind};
use gliv::typeconfig::TypeConfig;

use approx::assert_abs_diff_eq;

fn discrete_spec(n: usize, seed: u64) -> DgpSpec {
    DgpSpec { x_kind: XKind::DiscreteFive, n, seed, flip_z: false }
}

/// The process's exact nuisance functions, coded independently of the
/// simulation module: binomial type weights over the five-type table.
struct OracleNuisance;

const TYPE_TABLE: [[usize; 2]; 5] = [[0, 0], [1, 1], [2, 2], [2, 0], [2, 1]];

fn type_probs(x: f64) -> [f64; 5] {
    let q = 1.0 - x;
    [
        q * q * q * q,            // always t1
        4.0 * x * q * q * q,      // always t2
        x * x * x * x,            // never switches from t3
        6.0 * x * x * q * q,      // (t3, t1) switcher
        4.0 * x * x * x * q,      // (t3, t2) switcher
    ]
}

fn mean_y(s: usize, t_idx: usize, x: f64) -> f64 {
    match s {
        0 => [x + 0.5, x + 0.3, x + 0.1][t_idx],
        1 => [x + 0.3, x + 0.5, x + 0.1][t_idx],
        2 => x + 0.1,
        3 => [x + 0.4, x + 0.2, x][t_idx],
        4 => [x + 0.2, x + 0.4, x][t_idx],
        _ => unreachable!(),
    }
}

impl NuisanceModel for OracleNuisance {
    fn eval(&self, x: &[f64], t_idx: usize) -> gliv::Result<EvalVectors> {
        let x = x[0];
        let ps = type_probs(x);
        let pi = vec![1.0 - x, x];
        let mut p_tz = vec![0.0; 2];
        let mut i_tz = vec![0.0; 2];
        for z in 0..2 {
            for s in 0..5 {
                if TYPE_TABLE[s][z] == t_idx {
                    p_tz[z] += ps[s];
                    i_tz[z] += ps[s] * mean_y(s, t_idx, x);
                }
            }
        }
        Ok(EvalVectors { p_tz, i_tz, pi })
    }

    fn n_instruments(&self) -> usize {
        2
    }
}

struct OracleLearner;

impl Learner for OracleLearner {
    fn fit_rows(
        &self,
        _data: &Dataset,
        _config: &TypeConfig,
        _rows: &[usize],
    ) -> gliv::Result<Box<dyn NuisanceModel>> {
        Ok(Box::new(OracleNuisance))
    }
}

/// Learner that ignores the training rows and always returns the full-sample
/// cell fit (testing only: collapses cross-fitting onto the plain
/// projection estimator).
struct FullSampleLearner {
    fit: NuisanceFit,
}

impl Learner for FullSampleLearner {
    fn fit_rows(
        &self,
        _data: &Dataset,
        _config: &TypeConfig,
        _rows: &[usize],
    ) -> gliv::Result<Box<dyn NuisanceModel>> {
        Ok(Box::new(self.fit.clone()))
    }
}

#[test]
fn oracle_nuisances_match_single_pass_score_sums() {
    let cfg = TypeConfig::main_example();
    let spec = discrete_spec(2000, 50);
    let sim = simulation::generate(&spec);
    let data = &sim.dataset;
    let plan = make_plan(data.n(), 4, 9).unwrap();
    let est = dml2_beta(data, &cfg, "t1", 1, &plan, &OracleLearner).unwrap();

    // Independently coded single pass over all observations with the true
    // nuisance functions.
    let oracle = OracleNuisance;
    let btilde = cfg.btilde("t1", 1).unwrap();
    let t1 = cfg.treatment_index("t1").unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..data.n() {
        let ev = oracle.eval(data.x_row(i), t1).unwrap();
        let ind = if data.t(i) == t1 { 1.0 } else { 0.0 };
        let z = data.z(i);
        let mut sy = btilde[z] / ev.pi[z] * (data.y(i) * ind - ev.i_tz[z]);
        let mut st = btilde[z] / ev.pi[z] * (ind - ev.p_tz[z]);
        for zz in 0..2 {
            sy += btilde[zz] * ev.i_tz[zz];
            st += btilde[zz] * ev.p_tz[zz];
        }
        num += sy;
        den += st;
    }
    assert_abs_diff_eq!(est.estimate, num / den, epsilon = 1e-12);
}

#[test]
fn degenerate_full_sample_learner_reduces_to_projection_estimator() {
    let cfg = TypeConfig::main_example();
    let sim = simulation::generate(&discrete_spec(3000, 51));
    let data = &sim.dataset;
    let full = NuisanceFit::fit(data, &cfg, ModelKind::DiscreteCells, 0.01).unwrap();
    let learner = FullSampleLearner { fit: full.clone() };
    let plan = make_plan(data.n(), 5, 3).unwrap();
    let report = estimate_all(data, &cfg, &full, &[ParameterId::beta("t1", 1)]).unwrap();
    let est = dml2_beta(data, &cfg, "t1", 1, &plan, &learner).unwrap();
    assert_abs_diff_eq!(est.estimate, report.estimates[0], epsilon = 1e-12);
}

#[test]
fn cross_fitted_beta_is_close_to_projection_estimate() {
    let cfg = TypeConfig::main_example();
    let spec = discrete_spec(3000, 52);
    let sim = simulation::generate(&spec);
    let data = &sim.dataset;
    let fit = NuisanceFit::fit(data, &cfg, ModelKind::DiscreteCells, 0.01).unwrap();
    let report = estimate_all(data, &cfg, &fit, &[ParameterId::beta("t1", 1)]).unwrap();
    let plan = make_plan(data.n(), 5, 12).unwrap();
    let learner = KindLearner { kind: ModelKind::DiscreteCells, trim_floor: 0.01 };
    let est = dml2_beta(data, &cfg, "t1", 1, &plan, &learner).unwrap();
    assert_abs_diff_eq!(est.estimate, report.estimates[0], epsilon = 0.01);
    let truth = simulation::true_value(&spec, &ParameterId::beta("t1", 1)).unwrap();
    assert_abs_diff_eq!(est.estimate, truth, epsilon = 3.0 * 0.0502);
}

#[test]
fn fold_count_robustness_over_replications() {
    let cfg = TypeConfig::main_example();
    let learner = KindLearner { kind: ModelKind::DiscreteCells, trim_floor: 0.01 };
    let spec = discrete_spec(3000, 53);
    for rep in 0..200u64 {
        let sim = simulation::generate_rep(&spec, rep);
        let data = &sim.dataset;
        let plan2 = make_plan(data.n(), 2, rep).unwrap();
        let plan5 = make_plan(data.n(), 5, rep).unwrap();
        let a = dml2_beta(data, &cfg, "t1", 1, &plan2, &learner).unwrap();
        let b = dml2_beta(data, &cfg, "t1", 1, &plan5, &learner).unwrap();
        let pooled_se = a.std_error().max(b.std_error());
        assert!(
            (a.estimate - b.estimate).abs() <= 4.0 * pooled_se,
            "rep {rep}: |{} - {}| > 4 x {pooled_se}",
            a.estimate,
            b.estimate
        );
    }
}

#[test]
fn observation_permutation_with_attached_folds_is_invariant() {
    let cfg = TypeConfig::main_example();
    let sim = simulation::generate(&discrete_spec(1000, 54));
    let data = &sim.dataset;
    let plan = make_plan(data.n(), 4, 7).unwrap();
    let learner = KindLearner { kind: ModelKind::DiscreteCells, trim_floor: 0.01 };
    let base = dml2_beta(data, &cfg, "t1", 1, &plan, &learner).unwrap();

    // Reverse the observation order, carrying fold memberships along.
    let n = data.n();
    let rows: Vec<(f64, String, String, Vec<f64>)> = (0..n)
        .rev()
        .map(|i| {
            (
                data.y(i),
                cfg.treatments()[data.t(i)].clone(),
                cfg.instruments()[data.z(i)].clone(),
                data.x_row(i).to_vec(),
            )
        })
        .collect();
    let reversed = Dataset::from_labeled(&rows, &cfg).unwrap();
    let reversed_assignments: Vec<usize> =
        (0..n).rev().map(|i| plan.assignments()[i]).collect();
    // Rebuild a plan with the permuted assignments via serde round-trip.
    let json = serde_json::to_value(&plan).unwrap();
    let mut obj = json.as_object().unwrap().clone();
    obj.insert("assignments".into(), serde_json::to_value(&reversed_assignments).unwrap());
    let perm_plan: gliv::dml::CrossFitPlan =
        serde_json::from_value(serde_json::Value::Object(obj)).unwrap();
    let perm = dml2_beta(&reversed, &cfg, "t1", 1, &perm_plan, &learner).unwrap();
    assert_abs_diff_eq!(perm.estimate, base.estimate, epsilon = 1e-12);
}

#[test]
fn generic_target_p_is_unbiased_with_oracle_nuisances() {
    let cfg = TypeConfig::main_example();
    let target = ParameterId::p("t1", 1);
    let spec = discrete_spec(600, 55);
    let truth = simulation::true_value(&spec, &target).unwrap();
    let reps = 500usize;
    let mut values = Vec::with_capacity(reps);
    for rep in 0..reps {
        let sim = simulation::generate_rep(&spec, rep as u64);
        let plan = make_plan(sim.dataset.n(), 3, rep as u64).unwrap();
        let est = dml2_generic(&sim.dataset, &cfg, &target, &plan, &OracleLearner).unwrap();
        values.push(est.estimate);
    }
    let mean = values.iter().sum::<f64>() / reps as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (reps - 1) as f64)
        .sqrt();
    let se_of_mean = sd / (reps as f64).sqrt();
    assert_abs_diff_eq!(mean, truth, epsilon = 2.0 * se_of_mean);
}

#[test]
fn generic_target_q_with_empty_w_is_zero() {
    let cfg = TypeConfig::main_example();
    let sim = simulation::generate(&discrete_spec(800, 56));
    let plan = make_plan(sim.dataset.n(), 2, 1).unwrap();
    let learner = KindLearner { kind: ModelKind::DiscreteCells, trim_floor: 0.01 };
    // No type in Sigma_{t1,1} ever takes t2.
    let target = ParameterId::q("t2", "t1", 1);
    let est = dml2_generic(&sim.dataset, &cfg, &target, &plan, &learner).unwrap();
    assert_abs_diff_eq!(est.estimate, 0.0, epsilon = 1e-12);
}

#[test]
fn gamma_target_matches_large_simulation_oracle() {
    let cfg = TypeConfig::main_example();
    let target = ParameterId::gamma("t3", "t3", 1);
    let spec = discrete_spec(3000, 57);

    // Brute-force oracle: the conditional outcome mean among rows whose
    // latent type switches on t3 and whose realized treatment is t3, over a
    // very large draw.
    let big = simulation::generate(&discrete_spec(10_000_000, 58));
    let t3 = cfg.treatment_index("t3").unwrap();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..big.dataset.n() {
        let s = big.latent_types[i];
        if (s == 3 || s == 4) && big.dataset.t(i) == t3 {
            sum += big.dataset.y(i);
            count += 1;
        }
    }
    let oracle = sum / count as f64;
    let enumerated = simulation::true_value(&spec, &target).unwrap();
    assert_abs_diff_eq!(oracle, enumerated, epsilon = 0.002);

    let sim = simulation::generate(&spec);
    let plan = make_plan(sim.dataset.n(), 5, 2).unwrap();
    let learner = KindLearner { kind: ModelKind::DiscreteCells, trim_floor: 0.01 };
    let est = dml2_generic(&sim.dataset, &cfg, &target, &plan, &learner).unwrap();
    assert_abs_diff_eq!(est.estimate, enumerated, epsilon = 3.0 * est.std_error());
}

#[test]
fn constant_outcome_is_fold_invariant() {
    let cfg = TypeConfig::main_example();
    let sim = simulation::generate(&discrete_spec(900, 59));
    let constant = sim.dataset.map_y(|_| 4.0);
    let learner = KindLearner { kind: ModelKind::DiscreteCells, trim_floor: 0.01 };
    for folds in [2, 3, 5] {
        let plan = make_plan(constant.n(), folds, 31).unwrap();
        let est = dml2_beta(&constant, &cfg, "t3", 1, &plan, &learner).unwrap();
        assert_abs_diff_eq!(est.estimate, 4.0, epsilon = 1e-10);
    }
}
