use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::numerics::Scalar;
use crate::par::Parallelism;

/// Metrics with every branch using `source`'s prompts, next to the
/// unmodified baseline.
#[derive(Clone, Debug)]
pub struct SwapTable {
    pub source: usize,
    pub baseline: EvalReport,
    pub swapped: EvalReport,
}

/// Substitute the prompts of task `source` into every branch at every
/// prompt layer and evaluate.
pub fn prompt_swap_eval<F: Scalar>(
    model: &Model<F>,
    samples: &[Sample],
    source: usize,
    mode: Parallelism,
) -> Result<SwapTable> {
    let t = model.tasks().len();
    if source >= t {
        return Err(Error::config(format!("source task {source} out of range 0..{t}")));
    }
    let baseline = evaluate(model, samples, &model.own_prompts(), mode)?;
    let swapped = evaluate(model, samples, &vec![source; t], mode)?;
    Ok(SwapTable {
        source,
        baseline,
        swapped,
    })
}
