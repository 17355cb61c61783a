//! Experiment configuration, metric files and the comparison table.
//!
//! Config files are flat `key = value` lines; `#` starts a comment. Unknown
//! keys are rejected so that typos in sweep scripts fail loudly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::aggregate::Method;
use crate::data::{load_idx, Dataset};
use crate::error::{Error, Result};
use crate::federation::{rolling_average, Participation, RoundConfig, RoundMetrics, Summary, SMOOTHING_WINDOW};

/// Directory holding `<dataset>/{train,t10k}-*-ubyte` when explicit paths
/// are not given.
pub const DATA_DIR_ENV: &str = "RBLA_DATA_DIR";

pub const CSV_HEADER: &str = "round,test_accuracy,test_loss,smoothed_accuracy,selected_clients,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Fmnist,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fmnist => "fmnist",
        }
    }

    pub fn default_targets(self) -> Vec<f64> {
        match self {
            DatasetKind::Mnist => vec![0.95],
            DatasetKind::Fmnist => vec![0.83],
        }
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetKind::Mnist),
            "fmnist" => Ok(DatasetKind::Fmnist),
            other => Err(Error::config("dataset", format!("unknown dataset `{other}`; expected mnist or fmnist"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl DataPaths {
    /// Standard IDX file names under `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            load_idx(&self.train_images, &self.train_labels)?,
            load_idx(&self.test_images, &self.test_labels)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub paths: DataPaths,
    pub round: RoundConfig,
    pub target_accuracies: Vec<f64>,
    pub out: PathBuf,
}

const KEYS: &[&str] = &[
    "dataset",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "method",
    "rounds",
    "participation",
    "participation_fraction",
    "seed",
    "learning_rate",
    "batch_size",
    "local_epochs",
    "target_accuracies",
    "out",
    "n_clients",
    "lora_scale",
    "record_timing",
];

/// Reads `key = value` pairs. Later lines override earlier ones.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let key = key.trim().to_string();
        if !KEYS.contains(&key.as_str()) {
            return Err(Error::config(key, "unknown key"));
        }
        map.insert(key, value.trim().to_string());
    }
    Ok(map)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

/// Builds a config from file text and `key -> value` overrides (flags win).
/// `data_dir` is the fallback root for paths the file does not set.
pub fn build_config(
    file_text: &str,
    overrides: &BTreeMap<String, String>,
    data_dir: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut kv = parse_kv(file_text)?;
    for (k, v) in overrides {
        if !KEYS.contains(&k.as_str()) {
            return Err(Error::config(k.clone(), "unknown key"));
        }
        kv.insert(k.clone(), v.clone());
    }
    let get = |k: &str| kv.get(k).map(String::as_str);

    let dataset: DatasetKind = get("dataset").unwrap_or("mnist").parse()?;
    let mut round = RoundConfig::default();
    if let Some(v) = get("method") {
        round.method = v
            .parse()
            .map_err(|e: String| Error::config("method", e))?;
    }
    if let Some(v) = get("rounds") {
        round.rounds = parse_value("rounds", v)?;
    }
    if let Some(v) = get("seed") {
        round.seed = parse_value("seed", v)?;
    }
    if let Some(v) = get("learning_rate") {
        round.learning_rate = parse_value("learning_rate", v)?;
    }
    if let Some(v) = get("batch_size") {
        round.batch_size = parse_value("batch_size", v)?;
    }
    if let Some(v) = get("local_epochs") {
        round.local_epochs = parse_value("local_epochs", v)?;
    }
    if let Some(v) = get("n_clients") {
        round.n_clients = parse_value("n_clients", v)?;
    }
    if let Some(v) = get("lora_scale") {
        round.lora_scale = parse_value("lora_scale", v)?;
    }
    if let Some(v) = get("record_timing") {
        round.record_timing = parse_bool("record_timing", v)?;
    }
    let fraction: f64 = match get("participation_fraction") {
        Some(v) => parse_value("participation_fraction", v)?,
        None => 0.2,
    };
    round.participation = match get("participation").unwrap_or("full") {
        "full" => Participation::Full,
        "random" => Participation::Random(fraction),
        other => {
            return Err(Error::config(
                "participation",
                format!("unknown mode `{other}`; expected full or random"),
            ))
        }
    };
    round.validate()?;

    let target_accuracies = match get("target_accuracies") {
        Some(v) => v
            .split(',')
            .map(|t| parse_value::<f64>("target_accuracies", t.trim()))
            .collect::<Result<Vec<_>>>()?,
        None => dataset.default_targets(),
    };
    if target_accuracies.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::config("target_accuracies", "each target must lie in (0, 1]"));
    }

    let fallback = data_dir.map(|d| DataPaths::in_dir(&d.join(dataset.name())));
    let path = |key: &str, pick: fn(&DataPaths) -> &PathBuf| -> Result<PathBuf> {
        match (get(key), &fallback) {
            (Some(v), _) => Ok(PathBuf::from(v)),
            (None, Some(f)) => Ok(pick(f).clone()),
            (None, None) => Err(Error::config(
                key,
                format!("missing; set it in the config or point {DATA_DIR_ENV} at a data directory"),
            )),
        }
    };
    let paths = DataPaths {
        train_images: path("train_images", |p| &p.train_images)?,
        train_labels: path("train_labels", |p| &p.train_labels)?,
        test_images: path("test_images", |p| &p.test_images)?,
        test_labels: path("test_labels", |p| &p.test_labels)?,
    };

    Ok(ExperimentConfig {
        dataset,
        paths,
        round,
        target_accuracies,
        out: PathBuf::from(get("out").unwrap_or("out")),
    })
}

/// Reads the config file (if any) and applies overrides; the data-dir
/// fallback comes from the environment.
pub fn parse_config(path: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::config(p.display().to_string(), e.to_string()))?,
        None => String::new(),
    };
    let data_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    build_config(&text, overrides, data_dir.as_deref())
}

/// Metrics as CSV text. Floats use Rust's shortest round-trip formatting so
/// the output is stable across runs.
pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let acc: Vec<f64> = metrics.iter().map(|m| m.test_accuracy).collect();
    let smoothed = rolling_average(&acc, SMOOTHING_WINDOW);
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (m, s) in metrics.iter().zip(smoothed) {
        let clients: Vec<String> = m.selected_clients.iter().map(usize::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.round_index,
            m.test_accuracy,
            m.test_loss,
            s,
            clients.join(";"),
            m.wall_millis
        );
    }
    out
}

/// What `summary.json` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub dataset: DatasetKind,
    pub method: Method,
    pub participation: String,
    pub seed: u64,
    #[serde(flatten)]
    pub summary: Summary,
}

impl RunSummary {
    pub fn new(cfg: &ExperimentConfig, summary: Summary) -> Self {
        let participation = match cfg.round.participation {
            Participation::Full => "full".to_string(),
            Participation::Random(f) => format!("random({f})"),
        };
        Self {
            dataset: cfg.dataset,
            method: cfg.round.method,
            participation,
            seed: cfg.round.seed,
            summary,
        }
    }
}

/// Writes `metrics.csv` and `summary.json` into `dir`, creating it.
pub fn emit_metrics(dir: &Path, metrics: &[RoundMetrics], summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, metrics_csv(metrics)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("summary.json");
    let text = serde_json::to_string_pretty(summary).map_err(|e| Error::Defect(e.to_string()))?;
    fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(path.display().to_string(), format!("not a run summary: {e}")))
}

/// One row per run, one column per target: `round (acc%)` or `N/A (best%)`.
pub fn compare_table(runs: &[(String, RunSummary)]) -> Result<String> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::Empty("summaries"));
    };
    let targets: Vec<f64> = first.summary.targets.iter().map(|t| t.target).collect();
    for (name, run) in runs {
        let these: Vec<f64> = run.summary.targets.iter().map(|t| t.target).collect();
        if these != targets {
            return Err(Error::config(
                name.clone(),
                format!("targets {these:?} differ from {targets:?}"),
            ));
        }
    }
    let pct = |v: f64| format!("{:.2}%", v * 100.0);
    let mut header = vec!["run".to_string(), "method".to_string()];
    header.extend(targets.iter().map(|t| pct(*t)));
    header.push("best".to_string());
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|(name, run)| {
            let mut row = vec![name.clone(), run.method.to_string()];
            for t in &run.summary.targets {
                row.push(match (t.first_round, t.accuracy) {
                    (Some(r), Some(a)) => format!("{r} ({})", pct(a)),
                    _ => format!("N/A ({})", pct(run.summary.best_accuracy)),
                });
            }
            row.push(format!("{} @ {}", pct(run.summary.best_accuracy), run.summary.best_round));
            row
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain([header[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    Ok(out)
}
