//! Oracle tests for the projection estimators and influence machinery.
//!
//! Expected values come from three independent routes: exact enumeration of
//! the simulation process's binomial type law, closed-form cell-mean
//! computations coded directly in this file, and the process's own
//! population quantities evaluated by the enumeration/quadrature oracles in
//! the simulation module (which are themselves anchored against rational
//! arithmetic in their unit tests).

use gliv::estimators::{
    self, covariance, derived_parameter, estimate_all, estimate_beta, estimate_gamma,
    estimate_p, estimate_q, influence_values, DerivedSpec, ParamEstimates, ParameterId,
};
use gliv::nuisance::{Dataset, ModelKind, NuisanceFit};
use gliv::simulation::{self, DgpSpec, XKind};
use gliv::typeconfig::TypeConfig;

use approx::assert_abs_diff_eq;

fn main_cfg() -> TypeConfig {
    TypeConfig::main_example()
}

fn discrete_spec(n: usize, seed: u64) -> DgpSpec {
    DgpSpec { x_kind: XKind::DiscreteFive, n, seed, flip_z: false }
}

fn fit_cells(data: &Dataset, cfg: &TypeConfig) -> NuisanceFit {
    NuisanceFit::fit(data, cfg, ModelKind::DiscreteCells, 0.01).unwrap()
}

const XS: [f64; 5] = [0.5, 0.55, 0.6, 0.65, 0.7];

#[test]
fn fitted_propensity_tracks_the_bernoulli_design() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(100_000, 21));
    let fit = fit_cells(&sim.dataset, &cfg);
    for &x in &XS {
        let pi = fit.pi_raw(&[x]).unwrap();
        // Success of the instrument draw maps to the second level.
        assert_abs_diff_eq!(pi[1], x, epsilon = 0.02);
        assert_abs_diff_eq!(pi[0], 1.0 - x, epsilon = 0.02);
    }
}

#[test]
fn fitted_treatment_probabilities_match_binomial_enumeration() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(100_000, 22));
    let fit = fit_cells(&sim.dataset, &cfg);
    let t1 = cfg.treatment_index("t1").unwrap();
    for &x in &XS {
        let ev = fit.eval_vectors(&[x], t1).unwrap();
        let q = 1.0 - x;
        let p_s1 = q * q * q * q;
        let p_s4 = 6.0 * x * x * q * q;
        // t1 is taken at z1 only by the always-taker type, and at z2 also by
        // the (t3, t1) switcher.
        assert_abs_diff_eq!(ev.p_tz[0], p_s1, epsilon = 0.02);
        assert_abs_diff_eq!(ev.p_tz[1], p_s1 + p_s4, epsilon = 0.02);
    }
}

#[test]
fn p_estimate_is_within_three_standard_errors_of_the_binomial_truth() {
    let cfg = main_cfg();
    let spec = discrete_spec(3000, 23);
    let sim = simulation::generate(&spec);
    let fit = fit_cells(&sim.dataset, &cfg);
    let id = ParameterId::p("t1", 1);
    let p_hat = estimate_p(&sim.dataset, &cfg, &fit, "t1", 1).unwrap();
    let truth = simulation::true_value(&spec, &id).unwrap();
    let sigma = simulation::true_sigma(&spec, &id).unwrap();
    assert_abs_diff_eq!(p_hat, truth, epsilon = 3.0 * sigma / (3000f64).sqrt());
}

#[test]
fn overidentified_cell_identity_is_exact_under_cells() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(3000, 24));
    let fit = fit_cells(&sim.dataset, &cfg);
    let p11 = estimate_p(&sim.dataset, &cfg, &fit, "t1", 1).unwrap();
    let p21 = estimate_p(&sim.dataset, &cfg, &fit, "t2", 1).unwrap();
    let p31 = estimate_p(&sim.dataset, &cfg, &fit, "t3", 1).unwrap();
    assert_abs_diff_eq!(p11 + p21, p31, epsilon = 1e-12);
}

#[test]
fn q_factorizes_under_balanced_instrument_arms() {
    // Equal arm counts per cell make pi_hat identically 1/2, so
    // q = p * |W| / 2 exactly.
    let cfg = main_cfg();
    let mut rows: Vec<(f64, String, String, Vec<f64>)> = Vec::new();
    let mut v = 0.0f64;
    for x in [0.0, 1.0] {
        for (t, n_z1, n_z2) in [("t1", 2, 6), ("t2", 3, 5), ("t3", 9, 3)] {
            for (z, count) in [("z1", n_z1), ("z2", n_z2)] {
                for _ in 0..count {
                    v += 0.9 + x;
                    rows.push((v.sin(), t.to_string(), z.to_string(), vec![x]));
                }
            }
        }
    }
    let data = Dataset::from_labeled(&rows, &cfg).unwrap();
    let fit = fit_cells(&data, &cfg);
    // Both cells have 14 rows per arm.
    let p = estimate_p(&data, &cfg, &fit, "t3", 1).unwrap();
    let q = estimate_q(&data, &cfg, &fit, "t3", "t3", 1).unwrap();
    // W_{t3,t3,1} = {z1}, so |W|/N_Z = 1/2.
    assert_abs_diff_eq!(q, p * 0.5, epsilon = 1e-12);
}

#[test]
fn q_estimate_matches_weighted_binomial_truth() {
    let cfg = main_cfg();
    let spec = discrete_spec(3000, 25);
    let sim = simulation::generate(&spec);
    let fit = fit_cells(&sim.dataset, &cfg);
    let id = ParameterId::q("t1", "t1", 1);
    let q_hat = estimate_q(&sim.dataset, &cfg, &fit, "t1", "t1", 1).unwrap();
    // E[C(4,2) X^2 (1-X)^2 * X]: the switcher probability times the
    // propensity of its treated arm.
    let truth: f64 =
        XS.iter().map(|&x| 6.0 * x.powi(2) * (1.0 - x).powi(2) * x).sum::<f64>() / 5.0;
    assert_abs_diff_eq!(truth, simulation::true_value(&spec, &id).unwrap(), epsilon = 1e-12);
    let sigma = simulation::true_sigma(&spec, &id).unwrap();
    assert_abs_diff_eq!(q_hat, truth, epsilon = 3.0 * sigma / (3000f64).sqrt());
}

#[test]
fn beta_estimate_near_table_anchor() {
    let cfg = main_cfg();
    let spec = discrete_spec(3000, 26);
    let sim = simulation::generate(&spec);
    let fit = fit_cells(&sim.dataset, &cfg);
    let beta = estimate_beta(&sim.dataset, &cfg, &fit, "t1", 1).unwrap();
    // Reference spread for this design is about 0.05 at n = 3000.
    let truth = simulation::true_value(&spec, &ParameterId::beta("t1", 1)).unwrap();
    assert_abs_diff_eq!(beta, truth, epsilon = 3.0 * 0.0502);
    assert_abs_diff_eq!(beta, 1.0, epsilon = 4.0 * 0.0502);
}

/// Closed-form plug-in oracle: the identification formula computed directly
/// from cell means, coded independently of the estimator internals.
fn direct_beta(data: &Dataset, cfg: &TypeConfig, t: &str, k: usize) -> f64 {
    let t_idx = cfg.treatment_index(t).unwrap();
    let btilde = cfg.btilde(t, k).unwrap();
    let n_z = cfg.n_instruments();
    // Group rows by exact covariate value.
    let mut cells: std::collections::BTreeMap<Vec<u64>, Vec<usize>> = Default::default();
    for i in 0..data.n() {
        let key: Vec<u64> = data.x_row(i).iter().map(|v| v.to_bits()).collect();
        cells.entry(key).or_default().push(i);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for rows in cells.values() {
        let n_c = rows.len() as f64;
        for z in 0..n_z {
            let arm: Vec<&usize> = rows.iter().filter(|&&i| data.z(i) == z).collect();
            let pi = arm.len() as f64 / n_c;
            let h_y: f64 = arm
                .iter()
                .map(|&&i| if data.t(i) == t_idx { data.y(i) } else { 0.0 })
                .sum::<f64>()
                / n_c;
            let h_t: f64 =
                arm.iter().filter(|&&&i| data.t(i) == t_idx).count() as f64 / n_c;
            num += btilde[z] * h_y / pi * n_c;
            den += btilde[z] * h_t / pi * n_c;
        }
    }
    num / den
}

#[test]
fn beta_matches_direct_plug_in_oracle_on_synthetic_population() {
    let cfg = main_cfg();
    let mut rows: Vec<(f64, String, String, Vec<f64>)> = Vec::new();
    let mut v = 0.0f64;
    // Three covariate cells with uneven arms and treatment mixes.
    for (x, z1_counts, z2_counts) in [
        (0.1, [3usize, 2, 7], [5usize, 2, 2]),
        (0.2, [2, 2, 8], [6, 3, 4]),
        (0.35, [1, 3, 5], [4, 4, 3]),
    ] {
        for (t_idx, &count) in z1_counts.iter().enumerate() {
            for _ in 0..count {
                v += 1.3;
                rows.push((v.cos() + x, format!("t{}", t_idx + 1), "z1".into(), vec![x]));
            }
        }
        for (t_idx, &count) in z2_counts.iter().enumerate() {
            for _ in 0..count {
                v += 0.7;
                rows.push((v.cos() - x, format!("t{}", t_idx + 1), "z2".into(), vec![x]));
            }
        }
    }
    let data = Dataset::from_labeled(&rows, &cfg).unwrap();
    let fit = fit_cells(&data, &cfg);
    for (t, k) in [("t1", 1), ("t3", 1), ("t1", 2), ("t3", 2)] {
        let direct = direct_beta(&data, &cfg, t, k);
        let beta = estimate_beta(&data, &cfg, &fit, t, k).unwrap();
        assert_abs_diff_eq!(beta, direct, epsilon = 1e-10);
    }
}

#[test]
fn gamma_equals_beta_when_w_covers_all_instruments() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(2000, 27));
    let fit = fit_cells(&sim.dataset, &cfg);
    // k = N_Z: always-takers, W is the full instrument set, pi_W = 1.
    let beta = estimate_beta(&sim.dataset, &cfg, &fit, "t1", 2).unwrap();
    let gamma = estimate_gamma(&sim.dataset, &cfg, &fit, "t1", "t1", 2).unwrap();
    assert_abs_diff_eq!(gamma, beta, epsilon = 1e-12);
}

/// Deterministic synthetic sample from the binary configuration with three
/// discrete covariate cells.
fn binary_sample(n: usize, seed: u64) -> (TypeConfig, Dataset) {
    use rand::Rng;
    use rand::SeedableRng;
    let cfg = TypeConfig::binary_late();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut rows: Vec<(f64, String, String, Vec<f64>)> = Vec::new();
    for _ in 0..n {
        let x = [0.0, 1.0, 2.0][rng.random_range(0..3)];
        let pz1 = 0.35 + 0.1 * x;
        let z1 = rng.random::<f64>() < pz1;
        // Types: always-taker 20%, complier 50%, never-taker 30%.
        let u = rng.random::<f64>();
        let treated = if u < 0.2 {
            true
        } else if u < 0.7 {
            z1
        } else {
            false
        };
        let base = if treated { 2.0 + 0.5 * x } else { 1.0 + 0.2 * x };
        let y = base + rng.random::<f64>() - 0.5;
        rows.push((
            y,
            if treated { "t1" } else { "t0" }.to_string(),
            if z1 { "z1" } else { "z0" }.to_string(),
            vec![x],
        ));
    }
    let data = Dataset::from_labeled(&rows, &cfg).unwrap();
    (cfg, data)
}

/// Covariate-conditional Wald contrast computed purely from cell means.
fn wald_oracle(data: &Dataset, t1: usize, z1: usize) -> f64 {
    let mut cells: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
    for i in 0..data.n() {
        cells.entry(data.x_row(i)[0].to_bits()).or_default().push(i);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut total = 0usize;
    for rows in cells.values() {
        let n_c = rows.len() as f64;
        total += rows.len();
        let arm = |z: usize| -> Vec<usize> {
            rows.iter().cloned().filter(|&i| data.z(i) == z).collect()
        };
        let mean_y = |arm_rows: &[usize]| -> f64 {
            arm_rows.iter().map(|&i| data.y(i)).sum::<f64>() / arm_rows.len() as f64
        };
        let share_t1 = |arm_rows: &[usize]| -> f64 {
            arm_rows.iter().filter(|&&i| data.t(i) == t1).count() as f64
                / arm_rows.len() as f64
        };
        let (a1, a0) = (arm(z1), arm(1 - z1));
        num += n_c * (mean_y(&a1) - mean_y(&a0));
        den += n_c * (share_t1(&a1) - share_t1(&a0));
    }
    let _ = total;
    num / den
}

/// Treated-complier contrast from cell means, weighting by the propensity
/// of the complier-treated arm.
fn wald_treated_oracle(data: &Dataset, t1: usize, z1: usize) -> f64 {
    let mut cells: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
    for i in 0..data.n() {
        cells.entry(data.x_row(i)[0].to_bits()).or_default().push(i);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for rows in cells.values() {
        let n_c = rows.len() as f64;
        let arm = |z: usize| -> Vec<usize> {
            rows.iter().cloned().filter(|&i| data.z(i) == z).collect()
        };
        let (a1, a0) = (arm(z1), arm(1 - z1));
        let pi1 = a1.len() as f64 / n_c;
        let mean_y = |arm_rows: &[usize]| -> f64 {
            arm_rows.iter().map(|&i| data.y(i)).sum::<f64>() / arm_rows.len() as f64
        };
        let share_t1 = |arm_rows: &[usize]| -> f64 {
            arm_rows.iter().filter(|&&i| data.t(i) == t1).count() as f64
                / arm_rows.len() as f64
        };
        num += n_c * (mean_y(&a1) - mean_y(&a0)) * pi1;
        den += n_c * (share_t1(&a1) - share_t1(&a0)) * pi1;
    }
    num / den
}

#[test]
fn binary_wald_equivalence_holds_to_machine_precision() {
    let (cfg, data) = binary_sample(4000, 31);
    let fit = fit_cells(&data, &cfg);
    let beta1 = estimate_beta(&data, &cfg, &fit, "t1", 1).unwrap();
    let beta0 = estimate_beta(&data, &cfg, &fit, "t0", 1).unwrap();
    let t1 = cfg.treatment_index("t1").unwrap();
    let z1 = cfg.instrument_index("z1").unwrap();
    let wald = wald_oracle(&data, t1, z1);
    assert_abs_diff_eq!(beta1 - beta0, wald, epsilon = 1e-10);
}

#[test]
fn binary_treated_contrast_matches_weighted_oracle() {
    let (cfg, data) = binary_sample(4000, 32);
    let fit = fit_cells(&data, &cfg);
    // E[Y1 - Y0 | T = t1, S = complier]: own-treatment level for t1 and the
    // cross level for t0, both weighted by the z1 propensity.
    let g11 = estimate_gamma(&data, &cfg, &fit, "t1", "t1", 1).unwrap();
    let g10 = estimate_gamma(&data, &cfg, &fit, "t1", "t0", 1).unwrap();
    let t1 = cfg.treatment_index("t1").unwrap();
    let z1 = cfg.instrument_index("z1").unwrap();
    let oracle = wald_treated_oracle(&data, t1, z1);
    assert_abs_diff_eq!(g11 - g10, oracle, epsilon = 1e-10);
}

#[test]
fn influence_columns_have_zero_mean_at_the_estimates() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(3000, 33));
    let fit = fit_cells(&sim.dataset, &cfg);
    let params = vec![
        ParameterId::p("t1", 1),
        ParameterId::p("t3", 1),
        ParameterId::q("t3", "t3", 1),
        ParameterId::beta("t1", 1),
        ParameterId::beta("t2", 1),
        ParameterId::beta("t3", 1),
        ParameterId::gamma("t3", "t3", 1),
    ];
    let report = estimate_all(&sim.dataset, &cfg, &fit, &params).unwrap();
    for col in 0..params.len() {
        let mean = report.influence.column(col).sum() / sim.dataset.n() as f64;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-10);
    }
}

#[test]
fn binary_influence_matches_four_term_expansion() {
    // The efficient influence function for the complier-level structural
    // function in the binary configuration, written out term by term with
    // the contraction signs (-1 on the first arm, +1 on the second).
    let (cfg, data) = binary_sample(2000, 34);
    let fit = fit_cells(&data, &cfg);
    let id = ParameterId::beta("t1", 1);
    let p_id = ParameterId::p("t1", 1);
    let beta = estimate_beta(&data, &cfg, &fit, "t1", 1).unwrap();
    let p = estimate_p(&data, &cfg, &fit, "t1", 1).unwrap();
    let mut estimates = ParamEstimates::new();
    estimates.insert(id.clone(), beta);
    estimates.insert(p_id, p);
    let infl = influence_values(&data, &cfg, &fit, &[id], &estimates).unwrap();

    let t1 = cfg.treatment_index("t1").unwrap();
    for i in 0..data.n() {
        let ev = fit.eval_vectors(data.x_row(i), t1).unwrap();
        let ind = if data.t(i) == t1 { 1.0 } else { 0.0 };
        let z = data.z(i);
        let line = |z_target: usize, numer: f64, plug: f64| -> f64 {
            let zeta = if z == z_target { 1.0 / ev.pi[z_target] } else { 0.0 };
            zeta * (numer - plug) + plug
        };
        let y_ind = data.y(i) * ind;
        let psi = -(1.0 / p) * line(0, y_ind, ev.i_tz[0])
            + (1.0 / p) * line(1, y_ind, ev.i_tz[1])
            + (beta / p) * line(0, ind, ev.p_tz[0])
            - (beta / p) * line(1, ind, ev.p_tz[1]);
        assert_abs_diff_eq!(infl[(i, 0)], psi, epsilon = 1e-12);
    }
}

#[test]
fn p_influence_variance_matches_cell_enumeration() {
    // Single covariate cell: the influence value is a function of (T, Z)
    // only, so its sample variance equals the variance of that function
    // under the empirical (T, Z) distribution.
    let cfg = main_cfg();
    let mut rows: Vec<(f64, String, String, Vec<f64>)> = Vec::new();
    let counts = [("t1", 4usize, 9), ("t2", 5, 6), ("t3", 11, 5)];
    for (t, n_z1, n_z2) in counts {
        for (z, c) in [("z1", n_z1), ("z2", n_z2)] {
            for j in 0..c {
                rows.push((j as f64, t.to_string(), z.to_string(), vec![0.0]));
            }
        }
    }
    let data = Dataset::from_labeled(&rows, &cfg).unwrap();
    let fit = fit_cells(&data, &cfg);
    let id = ParameterId::p("t3", 1);
    let p = estimate_p(&data, &cfg, &fit, "t3", 1).unwrap();
    let mut estimates = ParamEstimates::new();
    estimates.insert(id.clone(), p);
    let infl = influence_values(&data, &cfg, &fit, &[id], &estimates).unwrap();
    let v_hat = covariance(&infl)[(0, 0)];

    // Enumerate the empirical (T, Z) law and the influence value on it.
    let n = data.n() as f64;
    let t3 = cfg.treatment_index("t3").unwrap();
    let ev = fit.eval_vectors(&[0.0], t3).unwrap();
    let btilde = cfg.btilde("t3", 1).unwrap();
    let mut mean = 0.0;
    let mut second = 0.0;
    for (t_label, n_z1, n_z2) in counts {
        let t_idx = cfg.treatment_index(t_label).unwrap();
        for (z, c) in [(0usize, n_z1), (1usize, n_z2)] {
            let freq = c as f64 / n;
            let ind = if t_idx == t3 { 1.0 } else { 0.0 };
            let plug: f64 = (0..2).map(|zz| btilde[zz] * ev.p_tz[zz]).sum();
            let psi = btilde[z] / ev.pi[z] * (ind - ev.p_tz[z]) + plug - p;
            mean += freq * psi;
            second += freq * psi * psi;
        }
    }
    assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(v_hat, second, epsilon = 1e-10);
}

#[test]
fn plug_in_sigma_is_near_its_population_anchor() {
    let cfg = main_cfg();
    let spec = discrete_spec(3000, 35);
    let sim = simulation::generate(&spec);
    let fit = fit_cells(&sim.dataset, &cfg);
    let params = vec![ParameterId::beta("t1", 1)];
    let report = estimate_all(&sim.dataset, &cfg, &fit, &params).unwrap();
    let sigma_hat = report.covariance[0][0].sqrt();
    // Population value is 2.729; the reference table rounds to 2.75 with a
    // single-sample spread of about 0.13.
    assert_abs_diff_eq!(sigma_hat, 2.75, epsilon = 0.55);
    let truth = simulation::true_sigma(&spec, &params[0]).unwrap();
    assert_abs_diff_eq!(sigma_hat, truth, epsilon = 4.0 * 0.14);
}

#[test]
fn plug_in_variance_tracks_monte_carlo_variance() {
    // Desk-scale efficiency check: the mean plug-in variance over
    // replications against the across-replication variance of the estimate.
    let cfg = main_cfg();
    let spec = discrete_spec(3000, 36);
    let reps = 300usize;
    let mut estimates = Vec::with_capacity(reps);
    let mut plug_vars = Vec::with_capacity(reps);
    for rep in 0..reps {
        let sim = simulation::generate_rep(&spec, rep as u64);
        let fit = fit_cells(&sim.dataset, &cfg);
        let report =
            estimate_all(&sim.dataset, &cfg, &fit, &[ParameterId::beta("t1", 1)]).unwrap();
        estimates.push(report.estimates[0]);
        plug_vars.push(report.covariance[0][0] / 3000.0);
    }
    let mean = estimates.iter().sum::<f64>() / reps as f64;
    let mc_var =
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let mean_plug = plug_vars.iter().sum::<f64>() / reps as f64;
    let ratio = mc_var / mean_plug;
    assert!((0.8..1.2).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn scale_equivariance_of_the_estimators() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(1500, 37));
    let fit = fit_cells(&sim.dataset, &cfg);
    let (a, b) = (2.5, -1.75);
    let scaled = sim.dataset.map_y(|y| a * y + b);
    let fit_scaled = fit_cells(&scaled, &cfg);
    for (t, k) in [("t1", 1), ("t2", 1), ("t3", 1), ("t3", 2)] {
        let beta = estimate_beta(&sim.dataset, &cfg, &fit, t, k).unwrap();
        let beta_s = estimate_beta(&scaled, &cfg, &fit_scaled, t, k).unwrap();
        assert_abs_diff_eq!(beta_s, a * beta + b, epsilon = 1e-9);
        let p = estimate_p(&sim.dataset, &cfg, &fit, t, k).unwrap();
        let p_s = estimate_p(&scaled, &cfg, &fit_scaled, t, k).unwrap();
        assert_abs_diff_eq!(p_s, p, epsilon = 1e-12);
    }
    let g = estimate_gamma(&sim.dataset, &cfg, &fit, "t3", "t3", 1).unwrap();
    let g_s = estimate_gamma(&scaled, &cfg, &fit_scaled, "t3", "t3", 1).unwrap();
    assert_abs_diff_eq!(g_s, a * g + b, epsilon = 1e-9);
}

#[test]
fn label_permutation_leaves_estimates_unchanged() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(1500, 38));
    let data = &sim.dataset;
    // Permuted configuration: treatments (t3, t1, t2), instruments (z2, z1).
    let perm_cfg = TypeConfig::new(
        vec!["t3".into(), "t1".into(), "t2".into()],
        vec!["z2".into(), "z1".into()],
        vec![
            vec!["t1".into(), "t1".into()],
            vec!["t2".into(), "t2".into()],
            vec!["t3".into(), "t3".into()],
            vec!["t1".into(), "t3".into()],
            vec!["t2".into(), "t3".into()],
        ],
    )
    .unwrap();
    // Re-encode the same rows under the permuted label order.
    let rows: Vec<(f64, String, String, Vec<f64>)> = (0..data.n())
        .map(|i| {
            (
                data.y(i),
                cfg.treatments()[data.t(i)].clone(),
                cfg.instruments()[data.z(i)].clone(),
                data.x_row(i).to_vec(),
            )
        })
        .collect();
    let perm_data = Dataset::from_labeled(&rows, &perm_cfg).unwrap();
    let fit = fit_cells(data, &cfg);
    let perm_fit = fit_cells(&perm_data, &perm_cfg);
    for (t, k) in [("t1", 1), ("t2", 1), ("t3", 1), ("t1", 2)] {
        let a = estimate_beta(data, &cfg, &fit, t, k).unwrap();
        let b = estimate_beta(&perm_data, &perm_cfg, &perm_fit, t, k).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        let pa = estimate_p(data, &cfg, &fit, t, k).unwrap();
        let pb = estimate_p(&perm_data, &perm_cfg, &perm_fit, t, k).unwrap();
        assert_abs_diff_eq!(pa, pb, epsilon = 1e-12);
    }
}

#[test]
fn switcher_lasf_matches_population_composition() {
    let cfg = main_cfg();
    let spec = discrete_spec(100_000, 39);
    let sim = simulation::generate(&spec);
    let fit = fit_cells(&sim.dataset, &cfg);
    let phi = DerivedSpec::switcher_lasf(&cfg, "t3").unwrap();
    let report = estimate_all(&sim.dataset, &cfg, &fit, &phi.inputs).unwrap();
    let derived = derived_parameter(&report, &phi).unwrap();
    // With two instruments there is a single switching level, so the pooled
    // value must equal the plain estimate exactly.
    assert_abs_diff_eq!(derived.estimate, report.estimates[0], epsilon = 1e-12);
    // And it must sit near the enumerated population value.
    let truth = simulation::true_value(&spec, &ParameterId::beta("t3", 1)).unwrap();
    assert_abs_diff_eq!(derived.estimate, truth, epsilon = 4.0 * derived.standard_error);
}

#[test]
fn switcher_contrast_matches_quadrature_oracle() {
    let cfg = main_cfg();
    // Continuous covariate: population value via adaptive quadrature.
    let spec = DgpSpec { x_kind: XKind::ContinuousUniform, n: 100_000, seed: 40, flip_z: false };
    let sim = simulation::generate(&spec);
    let fit = NuisanceFit::fit(
        &sim.dataset,
        &cfg,
        ModelKind::PolynomialSeries { degree: 3 },
        0.01,
    )
    .unwrap();
    let phi = DerivedSpec::switcher_effect_contrast(&cfg, "t3").unwrap();
    let report = estimate_all(&sim.dataset, &cfg, &fit, &phi.inputs).unwrap();
    let derived = derived_parameter(&report, &phi).unwrap();

    // Population contrast from the quadrature oracle.
    let b31 = simulation::true_value(&spec, &ParameterId::beta("t3", 1)).unwrap();
    let b11 = simulation::true_value(&spec, &ParameterId::beta("t1", 1)).unwrap();
    let b21 = simulation::true_value(&spec, &ParameterId::beta("t2", 1)).unwrap();
    let p11 = simulation::true_value(&spec, &ParameterId::p("t1", 1)).unwrap();
    let p21 = simulation::true_value(&spec, &ParameterId::p("t2", 1)).unwrap();
    let truth = b31 - (b11 * p11 + b21 * p21) / (p11 + p21);
    // The series first stage carries smoothing bias on top of the sampling
    // spread at this sample size.
    assert_abs_diff_eq!(derived.estimate, truth, epsilon = 0.05);
    // Exactness of the composition itself.
    let manual = report.estimates[0]
        - (report.estimates[1] * report.estimates[2]
            + report.estimates[3] * report.estimates[4])
            / (report.estimates[2] + report.estimates[4]);
    assert_abs_diff_eq!(derived.estimate, manual, epsilon = 1e-12);
}

#[test]
fn report_shapes_and_conventions() {
    let cfg = main_cfg();
    let sim = simulation::generate(&discrete_spec(800, 41));
    let fit = fit_cells(&sim.dataset, &cfg);
    let params = estimators::default_lasf_params(&cfg);
    assert_eq!(params.len(), 9);
    let report = estimate_all(&sim.dataset, &cfg, &fit, &params).unwrap();
    assert_eq!(report.estimates.len(), 9);
    assert_eq!(report.influence.ncols(), 9);
    assert_eq!(report.influence.nrows(), 800);
    // Symmetric PSD covariance and the documented standard-error scaling.
    for i in 0..9 {
        assert_abs_diff_eq!(
            report.standard_errors[i],
            (report.covariance[i][i] / 800.0).sqrt(),
            epsilon = 1e-13
        );
        for j in 0..9 {
            assert_abs_diff_eq!(
                report.covariance[i][j],
                report.covariance[j][i],
                epsilon = 1e-9
            );
        }
    }
    let m = nalgebra::DMatrix::from_fn(9, 9, |i, j| report.covariance[i][j]);
    let eig = m.symmetric_eigenvalues();
    assert!(eig.iter().all(|&e| e > -1e-9), "covariance must be PSD: {eig:?}");
    // The main example carries exactly one equality relation note.
    assert_eq!(report.equality_notes.len(), 1);
}
