//! CSV artifacts written into a run's output directory.

use std::fs;
use std::path::Path;

use super::train::{EpochMetrics, RunOutcome};
use super::RunError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const ALPHA_FILE: &str = "alpha.csv";
pub const LEDGER_FILE: &str = "ledger.csv";
pub const BOUND_FILE: &str = "bound.csv";

fn io(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> RunError + '_ {
    move |e| RunError::Io { path: path.display().to_string(), source: std::io::Error::other(e.to_string()) }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_header(n: usize) -> Vec<String> {
    let mut h = vec!["epoch".to_string()];
    h.extend((1..=n).map(|i| format!("acc_source_{i}")));
    h.extend(["acc_target_test", "acc_target_labeled", "target_risk"].map(String::from));
    h.extend((1..=n).map(|i| format!("risk_source_{i}")));
    h.extend(
        ["combined_source_risk", "w1_supervised", "w1_pseudo", "combined", "epsilon", "tau", "w1_sup_coef"].map(String::from),
    );
    h.extend((1..=n).map(|i| format!("alpha_{i}")));
    h.extend(["lambda_r", "delta_u", "delta_v", "bound_total"].map(String::from));
    h
}

fn metrics_record(m: &EpochMetrics) -> Vec<String> {
    let b = &m.breakdown;
    let mut r = vec![m.epoch.to_string()];
    r.extend(m.source_accuracy.iter().map(f64::to_string));
    r.push(m.target_test_accuracy.to_string());
    r.push(cell(m.target_labeled_accuracy));
    r.push(cell(b.target_risk));
    r.extend(b.per_source_risks.iter().map(f64::to_string));
    r.push(b.combined_source_risk.to_string());
    r.push(cell(b.w1_supervised));
    r.push(cell(b.w1_pseudo));
    r.push(b.combined.to_string());
    r.push(b.weights.epsilon.to_string());
    r.push(b.weights.tau.to_string());
    r.push(b.weights.w1_sup_coef.to_string());
    r.extend(m.alpha.iter().map(f64::to_string));
    r.push(cell(m.lambda_r));
    r.push(cell(m.delta_u));
    r.push(cell(m.delta_v));
    r.push(cell(m.bound_total));
    r
}

/// Writes `metrics.csv` and `alpha.csv`, plus `ledger.csv` and `bound.csv`
/// unless the run was noiseless.
pub fn write_outputs(dir: &Path, outcome: &RunOutcome) -> Result<(), RunError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let n = outcome.alpha.alpha.len();

    let path = dir.join(METRICS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(metrics_header(n)).map_err(csv_err(&path))?;
    for m in &outcome.metrics {
        w.write_record(metrics_record(m)).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io(&path))?;

    let path = dir.join(ALPHA_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec!["epoch".to_string()];
    header.extend((1..=n).map(|i| format!("alpha_{i}")));
    header.push("lambda_r".into());
    w.write_record(&header).map_err(csv_err(&path))?;
    for m in &outcome.metrics {
        let mut r = vec![m.epoch.to_string()];
        r.extend(m.alpha.iter().map(f64::to_string));
        r.push(cell(m.lambda_r));
        w.write_record(&r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io(&path))?;

    if let Some(l) = &outcome.ledger {
        l.write_csv(&dir.join(LEDGER_FILE))?;
    }
    if let Some(b) = &outcome.bound {
        b.write_csv(&dir.join(BOUND_FILE))?;
    }
    Ok(())
}

/// One parsed row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub target_risk: Option<f64>,
    pub combined_source_risk: f64,
    pub w1_supervised: Option<f64>,
    pub w1_pseudo: Option<f64>,
    pub combined: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub w1_sup_coef: f64,
    pub acc_target_test: f64,
    pub alpha: Vec<f64>,
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>, RunError> {
    let err = csv_err(path);
    let mut r = csv::Reader::from_path(path).map_err(&err)?;
    let header = r.headers().map_err(&err)?.clone();
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| RunError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(format!("missing column {name}")),
        })
    };
    let bad = |what: &str| RunError::Io {
        path: path.display().to_string(),
        source: std::io::Error::other(format!("cannot parse {what}")),
    };
    let alpha_cols: Vec<usize> = header.iter().enumerate().filter(|(_, h)| h.starts_with("alpha_")).map(|(i, _)| i).collect();
    let idx = [
        "epoch",
        "target_risk",
        "combined_source_risk",
        "w1_supervised",
        "w1_pseudo",
        "combined",
        "epsilon",
        "tau",
        "w1_sup_coef",
        "acc_target_test",
    ]
    .map(col);
    let mut cols = [0usize; 10];
    for (c, i) in cols.iter_mut().zip(idx) {
        *c = i?;
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(&err)?;
        let opt = |i: usize| -> Result<Option<f64>, RunError> {
            let s = &rec[i];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(&header[i]))
            }
        };
        let req = |i: usize| opt(i)?.ok_or_else(|| bad(&header[i]));
        rows.push(MetricsRow {
            epoch: rec[cols[0]].parse().map_err(|_| bad("epoch"))?,
            target_risk: opt(cols[1])?,
            combined_source_risk: req(cols[2])?,
            w1_supervised: opt(cols[3])?,
            w1_pseudo: opt(cols[4])?,
            combined: req(cols[5])?,
            epsilon: req(cols[6])?,
            tau: req(cols[7])?,
            w1_sup_coef: req(cols[8])?,
            acc_target_test: req(cols[9])?,
            alpha: alpha_cols.iter().map(|&i| req(i)).collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}
