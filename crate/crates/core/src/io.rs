//! On-disk formats: trajectory JSON Lines, metrics and analysis CSVs, and
//! the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::data::{HindsightReport, Source, Trajectory};
use crate::error::{Error, Result};
use crate::evaluation::{AblationRow, PlacementResult, TurnHistogram, REGION_LABELS, TURN_BINS};
use crate::training::EpochMetrics;

pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub const METRICS_HEADER: [&str; 10] = [
    "schema_version",
    "epoch",
    "method",
    "avg_at_k",
    "best_at_k",
    "loss",
    "supervised_tokens",
    "spans",
    "grad_norm",
    "wall_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub method: Method,
    /// Feedback source of the run, for methods that analyze failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(flatten)]
    pub trajectory: Trajectory,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hindsight: Option<HindsightReport>,
}

impl TrajectoryRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let r: TrajectoryRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse(e.to_string()))?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Parse(format!(
                "unsupported schema_version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

/// Single-owner appender for a trajectory log.
pub struct JsonlWriter {
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(JsonlWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn append(&mut self, records: &[TrajectoryRecord]) -> Result<()> {
        for r in records {
            writeln!(self.out, "{}", r.to_line())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_trajectory_log(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            TrajectoryRecord::from_line(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Per-epoch metrics table; the header is written up front so a run with
/// no epochs still leaves a valid file.
pub struct MetricsWriter {
    out: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(csv_err)?;
        out.write_record(METRICS_HEADER).map_err(csv_err)?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        self.out
            .write_record([
                SCHEMA_VERSION.to_string(),
                m.epoch.to_string(),
                m.method.name().to_string(),
                m.avg_at_k.to_string(),
                m.best_at_k.to_string(),
                m.loss.to_string(),
                m.supervised_tokens.to_string(),
                m.spans.to_string(),
                m.grad_norm.to_string(),
                m.wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::Parse(format!("bad number {:?} in metrics", field(i))))
        };
        let method = crate::config::Method::ALL
            .into_iter()
            .find(|m| m.name() == field(2))
            .ok_or_else(|| Error::Parse(format!("unknown method {:?}", field(2))))?;
        out.push(EpochMetrics {
            epoch: num(1)? as usize,
            method,
            avg_at_k: num(3)?,
            best_at_k: num(4)?,
            loss: num(5)?,
            supervised_tokens: num(6)? as usize,
            spans: num(7)? as usize,
            grad_norm: num(8)?,
            wall_ms: num(9)? as u64,
        });
    }
    Ok(out)
}

fn write_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `(epoch, avg_at_k)` series.
pub fn write_curve(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let rows: Vec<Vec<String>> = metrics
        .iter()
        .map(|m| vec![m.epoch.to_string(), m.avg_at_k.to_string()])
        .collect();
    write_rows(path, &["epoch", "avg_at_k"], &rows)
}

/// Columns `kind,bin,count,fraction`: three `region` rows, then eleven
/// `turn` rows (the last is `11+`), then a `mean` row whose count is the
/// total and whose fraction column holds the mean turn (empty when there
/// are no targets).
pub fn write_histogram(path: &Path, h: &TurnHistogram) -> Result<()> {
    let mut rows = Vec::new();
    for (i, label) in REGION_LABELS.iter().enumerate() {
        rows.push(vec![
            "region".into(),
            label.to_string(),
            h.regions[i].to_string(),
            h.region_fractions[i].to_string(),
        ]);
    }
    for b in 0..TURN_BINS {
        rows.push(vec![
            "turn".into(),
            TurnHistogram::per_turn_label(b),
            h.per_turn[b].to_string(),
            h.per_turn_fractions[b].to_string(),
        ]);
    }
    rows.push(vec![
        "mean".into(),
        String::new(),
        h.total.to_string(),
        h.mean_turn.map(|m| m.to_string()).unwrap_or_default(),
    ]);
    write_rows(path, &["kind", "bin", "count", "fraction"], &rows)
}

fn pp(x: f64) -> String {
    format!("{x:+.2}")
}

/// One row per seed plus a `mean` row. Rates are fractions, gains are
/// percentage points.
pub fn write_placement(path: &Path, rows: &[(u64, PlacementResult)]) -> Result<()> {
    let mut out: Vec<Vec<String>> = rows
        .iter()
        .map(|(seed, r)| {
            vec![
                seed.to_string(),
                r.failed.to_string(),
                format!("{:.4}", r.start_base),
                format!("{:.4}", r.start_rate),
                format!("{:.4}", r.target_base),
                format!("{:.4}", r.target_rate),
                pp(r.start_gain),
                pp(r.target_gain),
                pp(r.target_minus_start),
            ]
        })
        .collect();
    if !rows.is_empty() {
        let (s, t, d) = placement_means(rows);
        out.push(vec![
            "mean".into(),
            rows.iter().map(|(_, r)| r.failed).sum::<usize>().to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            pp(s),
            pp(t),
            pp(d),
        ]);
    }
    write_rows(
        path,
        &[
            "seed",
            "failed",
            "start_base",
            "start_rate",
            "target_base",
            "target_rate",
            "start_gain",
            "target_gain",
            "target_minus_start",
        ],
        &out,
    )
}

/// Mean start gain, target gain and their difference across seeds.
pub fn placement_means(rows: &[(u64, PlacementResult)]) -> (f64, f64, f64) {
    let n = rows.len().max(1) as f64;
    let mean = |f: fn(&PlacementResult) -> f64| rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n;
    (
        mean(|r| r.start_gain),
        mean(|r| r.target_gain),
        mean(|r| r.target_minus_start),
    )
}

pub fn write_ablation(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let out: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                serde_json::to_value(r.source).expect("enum").as_str().unwrap_or("").to_string(),
                serde_json::to_value(r.teacher).expect("enum").as_str().unwrap_or("").to_string(),
                r.best_epoch.to_string(),
                r.eval.avg_at_k.to_string(),
                r.eval.best_at_k.to_string(),
            ]
        })
        .collect();
    write_rows(
        path,
        &["setting", "source", "teacher", "best_epoch", "avg_at_k", "best_at_k"],
        &out,
    )
}

pub fn write_eval(path: &Path, k: usize, avg: f64, best: f64) -> Result<()> {
    write_rows(
        path,
        &["k", "avg_at_k", "best_at_k"],
        &[vec![k.to_string(), avg.to_string(), best.to_string()]],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub base_seed: u64,
    /// Seconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: u64,
    /// Role -> path relative to the output directory.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, base_seed: u64) -> Self {
        RunManifest {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            base_seed,
            started_at: unix_now(),
            finished_at: 0,
            files: BTreeMap::new(),
        }
    }

    pub fn add_file(&mut self, role: &str, name: &str) {
        self.files.insert(role.to_string(), name.to_string());
    }

    pub fn write(&mut self, dir: &Path, name: &str) -> Result<PathBuf> {
        self.finished_at = unix_now();
        let path = dir.join(name);
        fs::write(&path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}
