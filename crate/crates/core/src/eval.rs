//! Validation: mean losses and the metric suite over a set of samples.

use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::{self, sigmoid};
use crate::metrics::{Confusion, MeanAcc, ThresholdCounts, MAXF_BETA2};
use crate::model::Model;
use crate::numerics::{Graph, Scalar, Tensor};
use crate::par::{self, Parallelism};
use crate::task::Task;

/// Dataset-level metric accumulator for one task.
#[derive(Clone, Debug)]
pub enum TaskAcc {
    Semseg(Confusion),
    Depth(MeanAcc),
    Normal(MeanAcc),
    Edge(ThresholdCounts),
    Saliency(ThresholdCounts),
}

impl TaskAcc {
    pub fn new(task: Task, num_classes: usize) -> Self {
        match task {
            Task::Semseg => TaskAcc::Semseg(Confusion::new(num_classes)),
            Task::Depth => TaskAcc::Depth(MeanAcc::default()),
            Task::Normal => TaskAcc::Normal(MeanAcc::default()),
            Task::Edge => TaskAcc::Edge(ThresholdCounts::edge()),
            Task::Saliency => TaskAcc::Saliency(ThresholdCounts::saliency()),
        }
    }

    /// Add one prediction `[H × W × C]` against its ground truth.
    pub fn add<F: Scalar>(&mut self, pred: &Tensor<F>, gt: &Sample, ignore: u32) -> Result<()> {
        let c = pred.last_dim();
        let p = pred.to_f64_vec();
        match self {
            TaskAcc::Semseg(conf) => {
                let labels: Vec<u32> = p
                    .chunks(c)
                    .map(|row| {
                        let mut best = 0;
                        for (k, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = k;
                            }
                        }
                        best as u32
                    })
                    .collect();
                let gt: Vec<u32> = gt.semseg.iter().map(|&l| l as u32).collect();
                conf.add(&labels, &gt, ignore)
            }
            TaskAcc::Depth(acc) => {
                let gt: Vec<f64> = gt.depth.to_f64_vec();
                acc.merge(&crate::metrics::squared_error(&p, &gt, None)?);
                Ok(())
            }
            TaskAcc::Normal(acc) => {
                let mask: Vec<bool> = gt.normal_mask.iter().map(|&m| m != 0).collect();
                let gtn = gt.normal.to_f64_vec();
                acc.merge(&crate::metrics::angular_error(&p, &gtn, Some(&mask))?);
                Ok(())
            }
            TaskAcc::Edge(counts) => {
                let s: Vec<f64> = p.iter().map(|&z| sigmoid(z)).collect();
                let t: Vec<bool> = gt.edge.iter().map(|&e| e != 0).collect();
                counts.add(&s, &t)
            }
            TaskAcc::Saliency(counts) => {
                let sal = gt
                    .saliency
                    .as_ref()
                    .ok_or_else(|| Error::Data("saliency metric without saliency ground truth".into()))?;
                let s: Vec<f64> = p.iter().map(|&z| sigmoid(z)).collect();
                let t: Vec<bool> = sal.iter().map(|&e| e != 0).collect();
                counts.add(&s, &t)
            }
        }
    }

    pub fn merge(&mut self, other: &TaskAcc) {
        match (self, other) {
            (TaskAcc::Semseg(a), TaskAcc::Semseg(b)) => a.merge(b),
            (TaskAcc::Depth(a), TaskAcc::Depth(b)) | (TaskAcc::Normal(a), TaskAcc::Normal(b)) => a.merge(b),
            (TaskAcc::Edge(a), TaskAcc::Edge(b)) | (TaskAcc::Saliency(a), TaskAcc::Saliency(b)) => a.merge(b),
            _ => panic!("merging accumulators of different tasks"),
        }
    }

    pub fn value(&self) -> Result<f64> {
        Ok(match self {
            TaskAcc::Semseg(c) => c.miou(),
            TaskAcc::Depth(a) => a.mean()?.sqrt(),
            TaskAcc::Normal(a) => a.mean()?,
            TaskAcc::Edge(c) => c.max_f(1.0).value,
            TaskAcc::Saliency(c) => c.max_f(MAXF_BETA2).value,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Mean weighted total loss.
    pub total_loss: f64,
    /// Mean unweighted loss per task, in task order.
    pub task_losses: Vec<(Task, f64)>,
    /// Dataset-level metric per task, in task order.
    pub metrics: Vec<(Task, f64)>,
}

impl EvalReport {
    pub fn metric(&self, task: Task) -> Option<f64> {
        self.metrics.iter().find(|(t, _)| *t == task).map(|&(_, v)| v)
    }

    pub fn task_loss(&self, task: Task) -> Option<f64> {
        self.task_losses.iter().find(|(t, _)| *t == task).map(|&(_, v)| v)
    }

    /// Whether `self` beats `other` on the metric of `task`.
    pub fn better_on(&self, other: &EvalReport, task: Task) -> bool {
        match (self.metric(task), other.metric(task)) {
            (Some(a), Some(b)) if task.higher_is_better() => a > b,
            (Some(a), Some(b)) => a < b,
            _ => false,
        }
    }
}

struct SampleEval {
    task_losses: Vec<f64>,
    accs: Vec<TaskAcc>,
}

fn eval_one<F: Scalar>(model: &Model<F>, sample: &Sample, owners: &[usize]) -> Result<SampleEval> {
    let mut g = Graph::new();
    let (fwd, total) = model.loss(&mut g, sample, owners)?;
    let ignore = model.cfg.loss.ignore_index;
    let mut accs = Vec::with_capacity(fwd.preds.len());
    for (&task, &p) in model.tasks().iter().zip(&fwd.preds) {
        let mut acc = TaskAcc::new(task, model.cfg.decoder.num_classes);
        acc.add(g.value(p), sample, ignore)?;
        accs.push(acc);
    }
    Ok(SampleEval {
        task_losses: total.per_task.iter().map(|&(_, l)| l).collect(),
        accs,
    })
}

/// Evaluate `model` with branch `t` using the prompts of `owners[t]`.
/// Per-sample results are merged in input order.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    samples: &[Sample],
    owners: &[usize],
    mode: Parallelism,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let tasks = model.tasks().to_vec();
    let per = par::map(samples, mode, |s| eval_one(model, s, owners));
    let mut sums = vec![0.0; tasks.len()];
    let mut accs: Vec<TaskAcc> = tasks
        .iter()
        .map(|&t| TaskAcc::new(t, model.cfg.decoder.num_classes))
        .collect();
    for r in per {
        let r = r?;
        for (s, l) in sums.iter_mut().zip(&r.task_losses) {
            *s += l;
        }
        for (a, b) in accs.iter_mut().zip(&r.accs) {
            a.merge(b);
        }
    }
    let n = samples.len() as f64;
    let task_losses: Vec<(Task, f64)> = tasks.iter().copied().zip(sums.iter().map(|s| s / n)).collect();
    let metrics = tasks
        .iter()
        .zip(&accs)
        .map(|(&t, a)| Ok((t, a.value()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        samples: samples.len(),
        total_loss: losses::combine(&task_losses, &model.cfg.loss),
        task_losses,
        metrics,
    })
}
