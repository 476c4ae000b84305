use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{AgentKind, ExperimentConfig};
use super::run::{MetricsRecord, SplitMetrics};
use crate::error::{Error, Result};

/// How the confidence intervals are computed.
pub const CI_METHOD: &str = "normal approximation over seeds: 1.96 * sample standard deviation / sqrt(n_seeds)";

pub const CSV_FILE: &str = "metrics.csv";
pub const JSON_FILE: &str = "metrics.json";

/// Metric names in CSV order.
pub const METRICS: [&str; 4] = ["success_rate", "delusion_frequency", "delusion_l1", "target_optimality"];

fn metric(s: &SplitMetrics, name: &str) -> Option<f64> {
    match name {
        "success_rate" => Some(s.success_rate),
        "delusion_frequency" => s.delusion_frequency,
        "delusion_l1" => s.delusion_l1,
        "target_optimality" => s.target_optimality,
        _ => None,
    }
}

/// One CSV row: a metric at one evaluation point, aggregated over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub agent: AgentKind,
    pub metric: String,
    pub split: String,
    pub interactions: u64,
    pub mean: f64,
    pub ci95: f64,
    pub n_seeds: usize,
}

/// Mean and 95% half-width of `values`. A single value has zero width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Groups records by agent, metric, split and interaction count.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut split_order: Vec<String> = Vec::new();
    for r in records {
        for s in &r.splits {
            if !split_order.contains(&s.split) {
                split_order.push(s.split.clone());
            }
        }
    }
    let mut groups: BTreeMap<(AgentKind, usize, usize, u64), Vec<f64>> = BTreeMap::new();
    for r in records {
        for s in &r.splits {
            let split = split_order.iter().position(|x| *x == s.split).expect("known split");
            for (m, name) in METRICS.iter().enumerate() {
                if let Some(v) = metric(s, name) {
                    groups.entry((r.agent, m, split, r.interactions)).or_default().push(v);
                }
            }
        }
    }
    groups
        .into_iter()
        .map(|((agent, m, split, interactions), values)| {
            let (mean, ci95) = mean_ci95(&values);
            SummaryRow {
                agent,
                metric: METRICS[m].into(),
                split: split_order[split].clone(),
                interactions,
                mean,
                ci95,
                n_seeds: values.len(),
            }
        })
        .collect()
}

/// The full JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub ci_method: String,
    pub config: Option<ExperimentConfig>,
    pub records: Vec<MetricsRecord>,
}

impl MetricsFile {
    pub fn new(config: Option<&ExperimentConfig>, records: Vec<MetricsRecord>) -> Self {
        MetricsFile {
            ci_method: CI_METHOD.into(),
            config: config.cloned(),
            records,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Writes the summary rows as CSV.
pub fn write_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(["agent", "metric", "split", "interactions", "mean", "ci95", "n_seeds"])
            .map_err(csv_err)?;
    }
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `metrics.csv` and `metrics.json` into `dir`, creating it if needed.
pub fn export_metrics(records: &[MetricsRecord], config: Option<&ExperimentConfig>, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(CSV_FILE);
    write_csv(&summarize(records), &csv_path)?;
    let json_path = dir.join(JSON_FILE);
    let file = MetricsFile::new(config, records.to_vec());
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(name: &str, success: f64, l1: Option<f64>) -> SplitMetrics {
        SplitMetrics {
            split: name.into(),
            success_rate: success,
            episodes: 20,
            plans: 3,
            delusion_frequency: Some(0.0),
            delusion_l1: l1,
            target_optimality: Some(1.0),
        }
    }

    fn record(seed: u64, interactions: u64, success: f64) -> MetricsRecord {
        MetricsRecord {
            agent: AgentKind::SkipperOnce,
            seed,
            interactions,
            splits: vec![split("train", success, None), split("0.25", success / 2.0, Some(4.0))],
        }
    }

    #[test]
    fn ci_is_196_standard_errors() {
        let values = [0.2, 0.4, 0.9, 0.5];
        let (mean, ci) = mean_ci95(&values);
        let m: f64 = 2.0 / 4.0;
        let sd = (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 3.0).sqrt();
        assert!((mean - m).abs() < 1e-12);
        assert!((ci - 1.96 * sd / 2.0).abs() < 1e-12);
        assert_eq!(mean_ci95(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn summary_skips_missing_values() {
        let rows = summarize(&[record(0, 10, 0.5), record(1, 10, 1.0)]);
        let find = |m: &str, s: &str| rows.iter().find(|r| r.metric == m && r.split == s);
        assert_eq!(find("success_rate", "train").unwrap().n_seeds, 2);
        assert!((find("success_rate", "train").unwrap().mean - 0.75).abs() < 1e-12);
        assert!(find("delusion_l1", "train").is_none());
        assert_eq!(find("delusion_l1", "0.25").unwrap().n_seeds, 2);
    }

    #[test]
    fn empty_stream_writes_a_header() {
        let dir = tempfile::tempdir().unwrap();
        let (csv, _) = export_metrics(&[], None, dir.path()).unwrap();
        let text = fs::read_to_string(csv).unwrap();
        assert_eq!(text.trim(), "agent,metric,split,interactions,mean,ci95,n_seeds");
    }

    #[test]
    fn json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![record(0, 10, 0.5), record(0, 20, 0.55)];
        let cfg = ExperimentConfig::default();
        let (_, json) = export_metrics(&records, Some(&cfg), dir.path()).unwrap();
        let back = MetricsFile::load(&json).unwrap();
        assert_eq!(back.records, records);
        assert_eq!(back.config, Some(cfg));
        assert_eq!(back.ci_method, CI_METHOD);
    }

    #[test]
    fn io_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = export_metrics(&[], None, &blocker.join("sub")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }
}
