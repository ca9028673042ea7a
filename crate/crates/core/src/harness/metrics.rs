use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 7] = [
    "env_step",
    "train_loss",
    "mean_q_tot",
    "eval_win_rate",
    "eval_return",
    "eval_length",
    "epsilon",
];

/// One evaluation point. Loss and `Q_tot` are averaged over the gradient
/// steps since the previous row and are empty when there were none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_step: u64,
    pub train_loss: Option<f64>,
    pub mean_q_tot: Option<f64>,
    pub eval_win_rate: f64,
    pub eval_return: f64,
    pub eval_length: f64,
    pub epsilon: f64,
}

/// Zero-shot evaluation on a transfer arena at one evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub env_step: u64,
    pub arena: usize,
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_length: f64,
}

/// Append-only CSV writer that flushes after every row.
pub struct CsvLog {
    writer: csv::Writer<File>,
    last_step: Option<u64>,
}

impl CsvLog {
    pub fn create(path: &Path) -> Result<Self> {
        let writer = csv::WriterBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(csv_err)?;
        Ok(CsvLog {
            writer,
            last_step: None,
        })
    }

    /// Writes a row; env steps must increase strictly for metrics rows.
    pub fn metrics(&mut self, row: &MetricsRow) -> Result<()> {
        if self.last_step.is_some_and(|s| row.env_step <= s) {
            return Err(Error::Contract(format!(
                "metrics rows must increase in env step ({} after {:?})",
                row.env_step, self.last_step
            )));
        }
        self.last_step = Some(row.env_step);
        self.write(row)
    }

    pub fn write<T: Serialize>(&mut self, row: &T) -> Result<()> {
        self.writer.serialize(row).map_err(csv_err)?;
        self.writer.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Corrupt(format!("csv: {other:?}")),
    }
}

/// Reads a metrics CSV back.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Mean and the 25th/75th percentiles (linear interpolation) of `xs`.
pub fn mean_and_quartiles(xs: &[f64]) -> (f64, f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (mean, q(0.25), q(0.75))
}

/// Writes `text` to `path` in one go.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
