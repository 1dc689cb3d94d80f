use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::task::Task;

pub const HISTORY_FILE: &str = "history.csv";

/// Batch-mean losses of one iteration, recorded before the update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub task_losses: Vec<f64>,
}

impl HistoryRow {
    pub fn bit_eq(&self, other: &HistoryRow) -> bool {
        self.iteration == other.iteration
            && self.lr.to_bits() == other.lr.to_bits()
            && self.total_loss.to_bits() == other.total_loss.to_bits()
            && self.task_losses.len() == other.task_losses.len()
            && self
                .task_losses
                .iter()
                .zip(&other.task_losses)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn write_history(path: &Path, tasks: &[Task], rows: &[HistoryRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["iteration".to_string(), "lr".into(), "total_loss".into()];
    header.extend(tasks.iter().map(|t| format!("{t}_loss")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.iteration.to_string(), format!("{:e}", r.lr), r.total_loss.to_string()];
        rec.extend(r.task_losses.iter().map(|l| l.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
