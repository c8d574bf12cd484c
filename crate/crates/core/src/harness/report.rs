use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::error::{Error, Result};

pub const METRICS_FILE: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

/// Column order of [`MetricsReport::csv_row`]; per-seed accuracies are
/// `;`-separated inside one column.
pub const CSV_HEADER: &str =
    "name,shots,template,knowledge_strategy,k,recall_at_k,mean_accuracy,seeds,accuracies,wall_clock_secs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_accuracy: f64,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub dev_accuracies: Vec<f64>,
    pub train_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    /// Stage-1 recall on the test split.
    pub recall_at_k: f64,
    pub k: usize,
    pub wall_clock_secs: f64,
    pub per_seed: Vec<SeedResult>,
    pub config: ExperimentConfig,
}

impl MetricsReport {
    pub fn new(
        config: &ExperimentConfig,
        recall_at_k: f64,
        per_seed: Vec<SeedResult>,
        wall_clock_secs: f64,
    ) -> Self {
        let accuracies: Vec<f64> = per_seed.iter().map(|s| s.test_accuracy).collect();
        let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len().max(1) as f64;
        MetricsReport {
            name: config.name.clone(),
            seeds: per_seed.iter().map(|s| s.seed).collect(),
            accuracies,
            mean_accuracy,
            recall_at_k,
            k: config.k_candidates,
            wall_clock_secs,
            per_seed,
            config: config.clone(),
        }
    }

    pub fn csv_row(&self) -> String {
        let join = |v: Vec<String>| v.join(";");
        format!(
            "{},{},{},{},{},{:.6},{:.6},{},{},{:.3}",
            csv_field(&self.name),
            self.config.shots,
            csv_field(&self.config.template),
            self.config.knowledge_strategy,
            self.k,
            self.recall_at_k,
            self.mean_accuracy,
            join(self.seeds.iter().map(u64::to_string).collect()),
            join(self.accuracies.iter().map(|a| format!("{a:.6}")).collect()),
            self.wall_clock_secs
        )
    }

    /// `metrics.json` and `metrics.csv` in `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(dir.join(METRICS_FILE), self)?;
        let csv = dir.join(METRICS_CSV);
        std::fs::write(&csv, format!("{CSV_HEADER}\n{}\n", self.csv_row())).map_err(|e| Error::io(&csv, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub report: MetricsReport,
}

/// Paired runs that differ in one factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub factor: String,
    pub arms: Vec<ArmReport>,
}

impl ComparisonReport {
    pub fn arm(&self, name: &str) -> Option<&MetricsReport> {
        self.arms.iter().find(|a| a.arm == name).map(|a| &a.report)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }
}

/// CSV table over every `<root>/<name>/metrics.json`, sorted by run name.
pub fn collect_reports(root: impl AsRef<Path>) -> Result<String> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut paths = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let p = entry.path().join(METRICS_FILE);
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for p in paths {
        out.push_str(&MetricsReport::load(&p)?.csv_row());
        out.push('\n');
    }
    Ok(out)
}
