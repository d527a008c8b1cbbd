//! Report emission: training-curve series for external plotting and the
//! model comparison table (Model, TA, TF1, TR, TP at four decimals).
//!
//! Every emitted file is UTF-8 with LF line endings and byte-deterministic
//! for identical inputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsReport;
use crate::train::{TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Log(#[from] TrainError),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("comparison needs at least one run record")]
    NoRecords,
    #[error("run record json: {0}")]
    Json(String),
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One completed run: identity, config snapshot, and test-split metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub model: String,
    pub config: serde_json::Value,
    pub metrics: MetricsReport,
    pub log_path: String,
}

/// Splits a training log into two epoch-indexed series files:
/// `loss.csv` (train/validation loss) and `accuracy.csv` (train/validation
/// accuracy). Returns the written paths.
pub fn emit_curves(log_path: &Path, out_dir: &Path) -> Result<(PathBuf, PathBuf), ReportError> {
    let text = std::fs::read_to_string(log_path).map_err(io_err(log_path))?;
    let log = TrainLog::from_csv(&text)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut loss = String::from("epoch,train_loss,val_loss\n");
    let mut acc = String::from("epoch,train_acc,val_acc\n");
    for r in &log.records {
        loss.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
        acc.push_str(&format!("{},{},{}\n", r.epoch, r.train_acc, r.val_acc));
    }
    let loss_path = out_dir.join("loss.csv");
    let acc_path = out_dir.join("accuracy.csv");
    std::fs::write(&loss_path, loss).map_err(io_err(&loss_path))?;
    std::fs::write(&acc_path, acc).map_err(io_err(&acc_path))?;
    Ok((loss_path, acc_path))
}

/// The comparison table in both renderings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Comparison {
    pub text: String,
    pub csv: String,
}

/// Renders the comparison sorted by test accuracy descending (stable for
/// ties). Text rows are `model ta tf1 tr tp` at four decimals; the best run
/// is flagged on a trailing line so row bytes stay exact. The CSV carries a
/// `best` column.
pub fn emit_comparison(records: &[RunRecord]) -> Result<Comparison, ReportError> {
    if records.is_empty() {
        return Err(ReportError::NoRecords);
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| {
        records[b]
            .metrics
            .accuracy
            .partial_cmp(&records[a].metrics.accuracy)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let best = order[0];

    let mut text = String::from("Model TA TF1 TR TP\n");
    let mut csv = String::from("model,ta,tf1,tr,tp,best\n");
    for &i in &order {
        let r = &records[i];
        let m = &r.metrics;
        text.push_str(&format!(
            "{} {:.4} {:.4} {:.4} {:.4}\n",
            r.model, m.accuracy, m.f1, m.recall, m.precision
        ));
        csv.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{}\n",
            r.model,
            m.accuracy,
            m.f1,
            m.recall,
            m.precision,
            if i == best { 1 } else { 0 }
        ));
    }
    text.push_str(&format!("best: {}\n", records[best].model));
    Ok(Comparison { text, csv })
}

/// Writes `comparison.txt` and `comparison.csv` under `out_dir`.
pub fn write_comparison(records: &[RunRecord], out_dir: &Path) -> Result<Comparison, ReportError> {
    let comparison = emit_comparison(records)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let text_path = out_dir.join("comparison.txt");
    let csv_path = out_dir.join("comparison.csv");
    std::fs::write(&text_path, &comparison.text).map_err(io_err(&text_path))?;
    std::fs::write(&csv_path, &comparison.csv).map_err(io_err(&csv_path))?;
    Ok(comparison)
}
