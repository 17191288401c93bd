//! Fixed-width plain-text tables for eyeball comparison of reports.

use gliv::diagnostics::ImplicationReport;

use crate::{DmlReportJson, EstimateReportJson, GmmReportJson, SimulateReportJson};

fn rule(width: usize) -> String {
    "-".repeat(width)
}

pub fn estimate_table(report: &EstimateReportJson) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>26}\n",
        "Parameter", "Estimate", "Std Error", "95% CI"
    ));
    out.push_str(&format!("{}\n", rule(70)));
    for row in &report.parameters {
        let half = 1.96 * row.std_error;
        out.push_str(&format!(
            "{:<16} {:>12.4} {:>12.4} {:>26}\n",
            row.id.to_string(),
            row.estimate,
            row.std_error,
            format!("[{:.4}, {:.4}]", row.estimate - half, row.estimate + half)
        ));
    }
    for residual in &report.residual_p0 {
        out.push_str(&format!(
            "{:<16} {:>12.4} {:>12} {:>26}\n",
            format!("p:{}:0 (resid)", residual.t),
            residual.value,
            "-",
            "-"
        ));
    }
    if !report.equality_notes.is_empty() {
        out.push_str("note: configuration implies equality relations ");
        out.push_str("(not imposed in estimation):\n");
        for note in &report.equality_notes {
            out.push_str(&format!("  {note}\n"));
        }
    }
    out.push_str(&format!("n = {}\n", report.n));
    out
}

pub fn dml_table(report: &DmlReportJson) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>26}\n",
        "Target", "Estimate", "Std Error", "95% CI"
    ));
    out.push_str(&format!("{}\n", rule(70)));
    out.push_str(&format!(
        "{:<16} {:>12.4} {:>12.4} {:>26}\n",
        report.target.to_string(),
        report.estimate,
        report.std_error,
        format!("[{:.4}, {:.4}]", report.ci95.0, report.ci95.1)
    ));
    out.push_str(&format!("folds = {}, n = {}\n", report.folds, report.n));
    out
}

pub fn gmm_table(report: &GmmReportJson) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>14} {:>14} {:>12}\n",
        "Coordinate", "First stage", "Estimate", "Std Error"
    ));
    out.push_str(&format!("{}\n", rule(56)));
    for l in 0..report.eta_hat.len() {
        out.push_str(&format!(
            "{:<12} {:>14.6} {:>14.6} {:>12.6}\n",
            format!("eta[{l}]"),
            report.eta_tilde[l],
            report.eta_hat[l],
            report.std_errors[l]
        ));
    }
    out.push_str(&format!(
        "objective = {:.3e}, epsilon = {:.4}, n = {}\n",
        report.objective_value, report.epsilon, report.n
    ));
    if report.pseudoinverse_weighting {
        out.push_str("warning: singular weighting matrix, pseudoinverse used\n");
    }
    if report.near_flat_objective {
        out.push_str("warning: near-flat criterion; check moment identification\n");
    }
    out
}

pub fn implication_table(report: &ImplicationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "checks: {}  max violation: {:.5}  flagged: {}\n",
        report.n_checks,
        report.max_violation,
        report.flagged.len()
    ));
    out.push_str("reduced range system (attainable bounds only):\n");
    for active in &report.raw.active {
        if active.lower_attainable || active.upper_attainable {
            let mut bounds = Vec::new();
            if active.lower_attainable {
                bounds.push("Q >= 0");
            }
            if active.upper_attainable {
                bounds.push("Q <= 1");
            }
            out.push_str(&format!(
                "  ({}, {}): {}\n",
                active.t,
                active.k,
                bounds.join(" and ")
            ));
        }
    }
    for f in &report.flagged {
        out.push_str(&format!(
            "  VIOLATION {:.5} > tol {:.5}: {}\n",
            f.value, f.tolerance, f.description
        ));
    }
    out.push_str(&format!(
        "result: {}\n{}\n",
        if report.passed { "PASS" } else { "FAIL" },
        report.note
    ));
    out
}

pub fn simulate_table(report: &SimulateReportJson) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>8} {:>11} {:>12} {:>14} {:>10}\n",
        "Parameter", "Value", "Mean Bias", "Median Bias", "Std Deviation", "Root MSE"
    ));
    out.push_str(&format!("{}\n", rule(78)));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<18} {:>8.2} {:>11.4} {:>12.4} {:>14.4} {:>10.4}\n",
            row.target, row.true_value, row.mean_bias, row.median_bias, row.std_dev, row.rmse
        ));
    }
    out.push_str(&format!(
        "dgp = {}, n = {}, reps = {} ({} failed)\n",
        report.dgp, report.n, report.reps_requested, report.failures
    ));
    out
}
