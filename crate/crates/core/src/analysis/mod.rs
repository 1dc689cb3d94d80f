//! Interpretability and ablation procedures on trained models.

mod ablation;
mod attention;
mod correlation;
mod swap;

pub use ablation::{median, parse_axis_values, run_ablation_grid, write_grid_csv, Axis, GridRow, Setting};
pub use attention::{prompt_attention_map, write_pgm, AttentionMap};
pub use correlation::{cosine, task_feature_correlation, CorrelationTable};
pub use swap::{prompt_swap_eval, SwapTable};

use crate::model::Model;
use crate::numerics::Scalar;

/// Trainable parameter counts grouped by the first component of the
/// parameter name, in first-seen order, followed by the total.
pub fn parameter_counts<F: Scalar>(model: &Model<F>) -> Vec<(String, usize)> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    let mut total = 0;
    for (id, name, t) in model.store.iter() {
        if !model.store.is_trainable(id) {
            continue;
        }
        let key = name.split('.').next().unwrap_or(name);
        match groups.iter_mut().find(|(k, _)| k == key) {
            Some((_, n)) => *n += t.numel(),
            None => groups.push((key.to_string(), t.numel())),
        }
        total += t.numel();
    }
    groups.push(("total".into(), total));
    groups
}
