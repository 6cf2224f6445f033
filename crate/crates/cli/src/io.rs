//! CSV input parsing and report writers.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use cfl_core::simbench::McSummary;
use cfl_core::{Dataset, EstimateReport, LambdaPath};

use crate::CliError;

/// Floats are written with 17 significant digits so they parse back bit-exact.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// A parsed input table: the dataset plus the covariate column names.
#[derive(Debug, Clone)]
pub struct InputTable {
    pub data: Dataset,
    pub covariate_names: Vec<String>,
}

/// Reads a headed CSV. `z_col` and `y_col` name the treatment and outcome;
/// every other column is a covariate, in file order.
pub fn read_input(path: &Path, z_col: &str, y_col: &str) -> Result<InputTable, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Usage(format!("cannot read header of {}: {e}", path.display())))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| {
                CliError::Usage(format!("column '{name}' not found in {}", path.display()))
            })
    };
    let z_idx = find(z_col)?;
    let y_idx = find(y_col)?;
    if z_idx == y_idx {
        return Err(CliError::Usage(
            "treatment and outcome columns must differ".into(),
        ));
    }
    let x_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != z_idx && i != y_idx)
        .collect();
    if x_idx.is_empty() {
        return Err(CliError::Usage("input has no covariate columns".into()));
    }
    let covariate_names = x_idx
        .iter()
        .map(|&i| headers[i].trim().to_string())
        .collect();

    let mut rows = Vec::new();
    let mut z = Vec::new();
    let mut y = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Usage(format!("malformed CSV: {e}")))?;
        let row_no = line + 2;
        let number = |i: usize| -> Result<f64, CliError> {
            let raw = record.get(i).unwrap_or("").trim();
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    CliError::Usage(format!(
                        "row {row_no}, column '{}': '{raw}' is not a finite number",
                        headers[i].trim()
                    ))
                })
        };
        let t = number(z_idx)?;
        if t != 0.0 && t != 1.0 {
            return Err(CliError::Usage(format!(
                "row {row_no}: treatment column '{z_col}' must be 0 or 1, got {t}"
            )));
        }
        z.push(t as u8);
        y.push(number(y_idx)?);
        rows.push(
            x_idx
                .iter()
                .map(|&i| number(i))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    let data = Dataset::from_rows(&rows, z, y).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(InputTable {
        data,
        covariate_names,
    })
}

fn create(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))
}

fn io_err(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("write failed: {e}"))
}

/// `<stem>.<suffix>.csv` next to `output`.
pub fn sidecar_path(output: &Path, suffix: &str) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    output.with_file_name(format!("{stem}.{suffix}.csv"))
}

/// One row per covered unit: `unit,score,z,y,tau_hat,block_id`.
pub fn write_estimate(
    path: &Path,
    report: &EstimateReport,
    data: &Dataset,
) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_record(["unit", "score", "z", "y", "tau_hat", "block_id"])
        .map_err(io_err)?;
    for (k, &unit) in report.units.iter().enumerate() {
        w.write_record([
            unit.to_string(),
            fmt_f64(report.scores[k]),
            data.z[unit].to_string(),
            fmt_f64(data.y[unit]),
            fmt_f64(report.tau_hat[k]),
            report.block_ids[k].to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Key/value summary of an estimate.
pub fn write_summary(
    path: &Path,
    report: &EstimateReport,
    treated_only: bool,
) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_record(["key", "value"]).map_err(io_err)?;
    let mut put = |k: &str, v: String| w.write_record([k, v.as_str()]).map_err(io_err);
    put("kind", report.kind.as_str().into())?;
    put("treated_only", treated_only.to_string())?;
    put("intercept", report.intercept.to_string())?;
    put("seed", report.split.seed.to_string())?;
    put(
        "estimation_rows",
        report.split.estimation_rows.len().to_string(),
    )?;
    put("score_rows", report.split.score_rows.len().to_string())?;
    put("lambda", fmt_f64(report.lambda))?;
    put("df", report.df.to_string())?;
    put("score_converged", report.score_fit.converged.to_string())?;
    for (j, t) in report.score_fit.theta.iter().enumerate() {
        put(&format!("theta_{}", j + 1), fmt_f64(*t))?;
    }
    for (j, b) in report.subgroup_boundaries.iter().enumerate() {
        put(&format!("boundary_{}", j + 1), fmt_f64(*b))?;
    }
    w.flush().map_err(io_err)
}

/// λ path in grid order: `lambda,df,rss,bic,selected`.
pub fn write_path(path: &Path, lambda_path: &LambdaPath) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_record(["lambda", "df", "rss", "bic", "selected"])
        .map_err(io_err)?;
    for (i, e) in lambda_path.entries.iter().enumerate() {
        w.write_record([
            fmt_f64(e.lambda),
            e.df.to_string(),
            fmt_f64(e.rss),
            fmt_f64(e.bic),
            u8::from(i == lambda_path.selected).to_string(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Per-replication results: `scenario,n,d,estimator,rep,seed,mse,lambda,df,status`.
pub fn write_simulation(path: &Path, summary: &McSummary) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_record([
        "scenario",
        "n",
        "d",
        "estimator",
        "rep",
        "seed",
        "mse",
        "lambda",
        "df",
        "status",
    ])
    .map_err(io_err)?;
    let spec = &summary.scenario;
    for r in &summary.records {
        w.write_record([
            spec.id.to_string(),
            spec.n.to_string(),
            spec.d.to_string(),
            summary.estimator.to_string(),
            r.rep.to_string(),
            r.seed.to_string(),
            r.mse.map(fmt_f64).unwrap_or_default(),
            r.lambda.map(fmt_f64).unwrap_or_default(),
            r.df.map(|d| d.to_string()).unwrap_or_default(),
            r.status.clone(),
        ])
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn summary_line(summary: &McSummary) -> String {
    let spec = &summary.scenario;
    format!(
        "scenario={} n={} d={} estimator={} reps={} failures={} median_mse={} q1={} q3={}",
        spec.id,
        spec.n,
        spec.d,
        summary.estimator,
        summary.records.len(),
        summary.failures,
        fmt_f64(summary.median),
        fmt_f64(summary.q1),
        fmt_f64(summary.q3)
    )
}

/// A row of an estimate output file.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub unit: usize,
    pub score: f64,
    pub z: u8,
    pub y: f64,
    pub tau_hat: f64,
    pub block_id: usize,
}

/// Reads back a file written by [`write_estimate`].
pub fn read_estimate(path: &Path) -> Result<Vec<EstimateRow>, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Usage(format!("cannot open {}: {e}", path.display())))?;
    let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("bad estimate file: {e}"));
    let mut out = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| bad(&e))?;
        let field = |i: usize| r.get(i).unwrap_or("");
        out.push(EstimateRow {
            unit: field(0).parse().map_err(|e| bad(&e))?,
            score: field(1).parse().map_err(|e| bad(&e))?,
            z: field(2).parse().map_err(|e| bad(&e))?,
            y: field(3).parse().map_err(|e| bad(&e))?,
            tau_hat: field(4).parse().map_err(|e| bad(&e))?,
            block_id: field(5).parse().map_err(|e| bad(&e))?,
        });
    }
    Ok(out)
}

/// Writes a dataset as a headed CSV with covariates `x1..xd`, then `z`, `y`.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let mut file = File::create(path)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", path.display())))?;
    let mut header: Vec<String> = (1..=data.d()).map(|j| format!("x{j}")).collect();
    header.push("z".into());
    header.push("y".into());
    writeln!(file, "{}", header.join(",")).map_err(io_err)?;
    for i in 0..data.n() {
        let mut fields: Vec<String> = data.x.row(i).iter().map(|v| fmt_f64(*v)).collect();
        fields.push(data.z[i].to_string());
        fields.push(fmt_f64(data.y[i]));
        writeln!(file, "{}", fields.join(",")).map_err(io_err)?;
    }
    Ok(())
}
