//! CSV rows written by the experiment commands.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// One trained-and-evaluated configuration at one seed.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub scenario: String,
    pub funnel_layer: usize,
    pub recovery_op: String,
    pub task: String,
    pub seed: u64,
    pub steps: usize,
    pub metric_name: String,
    pub metric_value: f64,
    pub flops_savings: f64,
    /// Left empty by the sweeps so their output stays reproducible.
    pub latency_median_ms: Option<f64>,
}

pub const RUN_COLUMNS: [&str; 10] = [
    "scenario",
    "funnel_layer",
    "recovery_op",
    "task",
    "seed",
    "steps",
    "metric_name",
    "metric_value",
    "flops_savings",
    "latency_median_ms",
];

/// Analytic and measured cost of one funnel placement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRecord {
    pub funnel_layer: usize,
    pub recovery_op: String,
    pub seq_len: usize,
    pub flops_total: u64,
    pub flops_savings: f64,
    pub latency_median_ms: Option<f64>,
    pub latency_savings: Option<f64>,
}

pub const COST_COLUMNS: [&str; 7] = [
    "funnel_layer",
    "recovery_op",
    "seq_len",
    "flops_total",
    "flops_savings",
    "latency_median_ms",
    "latency_savings",
];

/// Aggregated point of a plot series: mean with a ±std band.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlotPoint {
    pub series: String,
    pub x: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by (recovery op, layer) in first-seen order.
pub fn aggregate(runs: &[RunRecord]) -> Vec<PlotPoint> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in runs {
        let k = (r.recovery_op.clone(), r.funnel_layer);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(series, x)| {
            let vals: Vec<f64> = runs
                .iter()
                .filter(|r| r.recovery_op == series && r.funnel_layer == x)
                .map(|r| r.metric_value)
                .collect();
            let (mean, std) = mean_std(&vals);
            PlotPoint {
                series,
                x,
                mean,
                std,
                n: vals.len(),
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
    }

    #[test]
    fn csv_header_and_empty_latency() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let r = RunRecord {
            scenario: "funnel_finetune".into(),
            funnel_layer: 2,
            recovery_op: "avg_last".into(),
            task: "token".into(),
            seed: 0,
            steps: 10,
            metric_name: "f1".into(),
            metric_value: 0.5,
            flops_savings: 0.25,
            latency_median_ms: None,
        };
        write_csv(&path, &[r], &RUN_COLUMNS).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), RUN_COLUMNS.join(","));
        assert_eq!(lines.next().unwrap(), "funnel_finetune,2,avg_last,token,0,10,f1,0.5,0.25,");
    }
}
