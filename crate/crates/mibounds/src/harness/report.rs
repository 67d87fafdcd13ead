//! Machine-readable outputs. All values are in nats.

use std::path::Path;

use serde::Serialize;

use super::config::ExperimentConfig;
use crate::ais::ChainStats;
use crate::bounds::{BoundEstimate, Direction};
use crate::Result;

/// Bumped whenever a CSV column is added, removed or changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RowStatus {
    Ok,
    Skipped,
    Failed,
}

/// One CSV row. Column names carry their units.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub schema_version: u32,
    pub estimator: String,
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// Annealing steps; 0 for estimators without annealing.
    #[serde(rename = "T")]
    pub t: usize,
    pub n: usize,
    pub seed: u64,
    pub status: RowStatus,
    pub reason: String,
    pub direction: Option<Direction>,
    pub stochastic: Option<bool>,
    pub approximate: Option<bool>,
    pub value_nats: Option<f64>,
    pub std_error_nats: Option<f64>,
    pub ci95_low_nats: Option<f64>,
    pub ci95_high_nats: Option<f64>,
    pub reference_mi_nats: Option<f64>,
    pub tight: Option<bool>,
    pub acceptance: Option<f64>,
    pub divergences: Option<u64>,
}

impl ReportRow {
    fn base(estimator: &str, model: &str, k: usize, t: usize, n: usize, seed: u64, status: RowStatus, reason: String) -> Self {
        ReportRow {
            schema_version: SCHEMA_VERSION,
            estimator: estimator.to_string(),
            model: model.to_string(),
            k,
            t,
            n,
            seed,
            status,
            reason,
            direction: None,
            stochastic: None,
            approximate: None,
            value_nats: None,
            std_error_nats: None,
            ci95_low_nats: None,
            ci95_high_nats: None,
            reference_mi_nats: None,
            tight: None,
            acceptance: None,
            divergences: None,
        }
    }

    pub fn estimate(b: &BoundEstimate, model: &str, stats: Option<&ChainStats>, reference: Option<f64>, threshold: f64) -> Self {
        let mut r = ReportRow::base(&b.estimator, model, b.k, b.t, b.n_outer, b.seed, RowStatus::Ok, String::new());
        let (lo, hi) = b.ci95();
        r.direction = Some(b.direction);
        r.stochastic = Some(b.stochastic);
        r.approximate = Some(b.approximate);
        r.value_nats = Some(b.value);
        r.std_error_nats = Some(b.std_error);
        r.ci95_low_nats = Some(lo);
        r.ci95_high_nats = Some(hi);
        r.reference_mi_nats = reference;
        r.tight = reference.map(|m| (b.value - m).abs() < threshold);
        if let Some(s) = stats {
            r.acceptance = Some(s.acceptance_rate());
            r.divergences = Some(s.divergences);
        }
        r
    }

    pub fn skipped(estimator: &str, model: &str, k: usize, t: usize, n: usize, seed: u64, reason: String) -> Self {
        ReportRow::base(estimator, model, k, t, n, seed, RowStatus::Skipped, reason)
    }

    pub fn failed(estimator: &str, model: &str, k: usize, t: usize, n: usize, seed: u64, reason: String) -> Self {
        ReportRow::base(estimator, model, k, t, n, seed, RowStatus::Failed, reason)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Environment {
    pub package_version: String,
    pub os: String,
    pub arch: String,
    pub workers: usize,
}

impl Environment {
    pub fn current() -> Self {
        Environment {
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            workers: rayon::current_num_threads(),
        }
    }
}

/// Everything a run produced. The CSV holds only the rows, so it is
/// byte-identical across reruns; timing lives in the JSON.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub units: &'static str,
    pub config: ExperimentConfig,
    pub rows: Vec<ReportRow>,
    pub wall_time_s: f64,
    pub environment: Environment,
}

impl RunReport {
    pub fn new(config: ExperimentConfig, rows: Vec<ReportRow>, wall_time_s: f64) -> Self {
        RunReport { schema_version: SCHEMA_VERSION, units: "nats", config, rows, wall_time_s, environment: Environment::current() }
    }

    pub fn csv_string(&self) -> Result<String> {
        rows_csv(&self.rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write(path, &self.csv_string()?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status == RowStatus::Failed).count()
    }
}

/// Any serializable rows as CSV, header included even when empty.
pub fn rows_csv<R: Serialize + Columns>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.serialize(Header::<R>::default())?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Column names of a row type, so empty reports still get a header.
pub trait Columns {
    const COLUMNS: &'static [&'static str];
}

struct Header<R>(std::marker::PhantomData<R>);

impl<R> Default for Header<R> {
    fn default() -> Self {
        Header(std::marker::PhantomData)
    }
}

impl<R: Columns> Serialize for Header<R> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(R::COLUMNS.len()))?;
        for c in R::COLUMNS {
            seq.serialize_element(c)?;
        }
        seq.end()
    }
}

impl Columns for ReportRow {
    const COLUMNS: &'static [&'static str] = &[
        "schema_version",
        "estimator",
        "model",
        "K",
        "T",
        "n",
        "seed",
        "status",
        "reason",
        "direction",
        "stochastic",
        "approximate",
        "value_nats",
        "std_error_nats",
        "ci95_low_nats",
        "ci95_high_nats",
        "reference_mi_nats",
        "tight",
        "acceptance",
        "divergences",
    ];
}
