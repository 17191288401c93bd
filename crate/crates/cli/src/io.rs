//! File formats: config JSON (or preset lookup), dataset CSV with header
//! `y,t,z,x1,...,xd`, and JSON report writing.

use std::fs;
use std::path::Path;

use gliv::nuisance::Dataset;
use gliv::simulation::SimulatedData;
use gliv::TypeConfig;

use crate::CliError;

/// Loads a preset by name or a JSON config from a path, and rejects
/// configurations that violate unordered monotonicity.
pub fn load_config(spec: &str) -> Result<TypeConfig, CliError> {
    let config = if let Some(preset) = TypeConfig::preset(spec) {
        preset
    } else {
        let text = fs::read_to_string(spec)
            .map_err(|e| CliError::Validation(format!("cannot read config `{spec}`: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Validation(format!("invalid config `{spec}`: {e}")))?
    };
    if let Some(violation) = config.monotonicity_violation() {
        return Err(CliError::Validation(gliv::Error::from(violation).to_string()));
    }
    Ok(config)
}

/// Reads a dataset CSV (`y,t,z,x1,...,xd`) and resolves labels against the
/// configuration.
pub fn read_dataset(path: &str, config: &TypeConfig) -> Result<Dataset, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Validation(format!("cannot read dataset `{path}`: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Validation(format!("bad CSV header: {e}")))?
        .clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.len() < 4 || cols[0] != "y" || cols[1] != "t" || cols[2] != "z" {
        return Err(CliError::Validation(format!(
            "expected header `y,t,z,x1,...`, found `{}`",
            cols.join(",")
        )));
    }
    for (i, col) in cols[3..].iter().enumerate() {
        if *col != format!("x{}", i + 1) {
            return Err(CliError::Validation(format!(
                "expected covariate column `x{}`, found `{col}`",
                i + 1
            )));
        }
    }
    let d_x = cols.len() - 3;
    let mut rows: Vec<(f64, String, String, Vec<f64>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| CliError::Validation(format!("row {}: {e}", line + 2)))?;
        let parse = |s: &str, what: &str| -> Result<f64, CliError> {
            s.trim().parse::<f64>().map_err(|_| {
                CliError::Validation(format!("row {}: bad {what} value `{s}`", line + 2))
            })
        };
        let y = parse(&record[0], "outcome")?;
        let mut x = Vec::with_capacity(d_x);
        for j in 0..d_x {
            x.push(parse(&record[3 + j], "covariate")?);
        }
        rows.push((y, record[1].to_string(), record[2].to_string(), x));
    }
    Dataset::from_labeled(&rows, config).map_err(CliError::from)
}

/// Writes a dataset as CSV in the canonical format.
pub fn write_dataset_csv(
    path: &str,
    sim: &SimulatedData,
    config: &TypeConfig,
) -> Result<(), CliError> {
    let data = &sim.dataset;
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| CliError::Other(format!("cannot write `{path}`: {e}")))?;
    let mut header = vec!["y".to_string(), "t".to_string(), "z".to_string()];
    for j in 1..=data.d_x() {
        header.push(format!("x{j}"));
    }
    writer.write_record(&header).map_err(|e| CliError::Other(e.to_string()))?;
    for i in 0..data.n() {
        let mut record = vec![
            format!("{}", data.y(i)),
            config.treatments()[data.t(i)].clone(),
            config.instruments()[data.z(i)].clone(),
        ];
        for v in data.x_row(i) {
            record.push(format!("{v}"));
        }
        writer.write_record(&record).map_err(|e| CliError::Other(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::Other(e.to_string()))?;
    Ok(())
}

/// Serializes a report as pretty JSON, writing to the path when given and
/// always returning the bytes.
pub fn emit_json<T: serde::Serialize>(
    report: &T,
    out: Option<&str>,
) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(report)
        .map_err(|e| CliError::Other(format!("serialization failed: {e}")))?;
    text.push('\n');
    if let Some(path) = out {
        if let Some(parent) = Path::new(path).parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| CliError::Other(format!("cannot create `{path}`: {e}")))?;
            }
        }
        fs::write(path, &text)
            .map_err(|e| CliError::Other(format!("cannot write `{path}`: {e}")))?;
    }
    Ok(text)
}
