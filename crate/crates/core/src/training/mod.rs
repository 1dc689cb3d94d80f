//! Optimization: Adam, the polynomial schedule and the training loop.

mod adam;
mod checkpoint;
mod history;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_META, MODEL_FILE};
pub use history::{write_history, HistoryRow, HISTORY_FILE};
pub use trainer::{train, train_with, TrainRun};

use crate::config::TrainConfig;

/// `lr0 · (1 − iter/iterations)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> f64 {
    let frac = (iter.min(cfg.iterations) as f64) / cfg.iterations as f64;
    cfg.lr * (1.0 - frac).powf(cfg.poly_power)
}
