use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::numerics::Graph;
use crate::params::Gradients;
use crate::par;
use crate::rng;

use super::adam::Adam;
use super::checkpoint::save_checkpoint;
use super::history::{write_history, HistoryRow, HISTORY_FILE};
use super::poly_lr;

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub history: Vec<HistoryRow>,
    /// `(iteration, report)` for each periodic and the final evaluation.
    pub evals: Vec<(usize, EvalReport)>,
}

impl TrainRun {
    pub fn final_eval(&self) -> Option<&EvalReport> {
        self.evals.last().map(|(_, r)| r)
    }
}

/// Epoch-wise shuffled indices with a flip decision per draw.
struct BatchSampler {
    rng: rand_chacha::ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    hflip: bool,
}

impl BatchSampler {
    fn new(n: usize, seed: u64, hflip: bool) -> Self {
        BatchSampler {
            rng: rng::stream(seed, "batches"),
            order: (0..n).collect(),
            pos: n,
            hflip,
        }
    }

    fn next(&mut self) -> (usize, bool) {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        let flip = self.hflip && self.rng.gen_bool(0.5);
        (i, flip)
    }
}

struct SampleStep {
    grads: Gradients<f32>,
    total: f64,
    task_losses: Vec<f64>,
}

fn sample_step(model: &Model<f32>, sample: &Sample, owners: &[usize]) -> Result<SampleStep> {
    let mut g = Graph::new();
    let (_, total) = model.loss(&mut g, sample, owners)?;
    let value = g.value(total.loss).item() as f64;
    let task_losses = total.per_task.iter().map(|&(_, l)| l).collect();
    let mut grads = Gradients::new(&model.store);
    if value.is_finite() {
        g.backward(total.loss)?;
        grads.accumulate_graph(&g);
    }
    Ok(SampleStep {
        grads,
        total: value,
        task_losses,
    })
}

/// Train with the model's own configuration, evaluating on `val` every
/// `eval_every` iterations and at the end.
pub fn train(model: &mut Model<f32>, train_set: &[Sample], val: Option<&[Sample]>) -> Result<TrainRun> {
    train_with(model, train_set, val, None, |_| {})
}

/// [`train`] with an optional output directory (checkpoint and history
/// are written there at the end) and a per-iteration callback.
pub fn train_with(
    model: &mut Model<f32>,
    train_set: &[Sample],
    val: Option<&[Sample]>,
    out_dir: Option<&Path>,
    mut on_iteration: impl FnMut(&HistoryRow),
) -> Result<TrainRun> {
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let cfg = model.cfg.train.clone();
    let mode = cfg.parallelism;
    let owners = model.own_prompts();
    let mut adam = Adam::from_config(&model.store, &cfg);
    let mut sampler = BatchSampler::new(train_set.len(), cfg.seed, cfg.hflip);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut evals = Vec::new();

    for it in 0..cfg.iterations {
        let lr = poly_lr(it, &cfg);
        let draws: Vec<(usize, bool)> = (0..cfg.batch_size).map(|_| sampler.next()).collect();
        let m: &Model<f32> = model;
        let steps = par::map(&draws, mode, |&(i, flip)| {
            if flip {
                sample_step(m, &train_set[i].hflip(), &owners)
            } else {
                sample_step(m, &train_set[i], &owners)
            }
        });

        let mut grads = Gradients::new(&model.store);
        let mut total = 0.0;
        let mut task_losses = vec![0.0; model.tasks().len()];
        for s in steps {
            let s = s?;
            if !s.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at iteration {it}")));
            }
            total += s.total;
            for (a, b) in task_losses.iter_mut().zip(&s.task_losses) {
                *a += b;
            }
            grads.merge(&s.grads);
        }
        let b = cfg.batch_size as f64;
        grads.scale(1.0 / b);
        adam.step(&mut model.store, &grads, lr, cfg.weight_decay)
            .map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;

        let row = HistoryRow {
            iteration: it,
            lr,
            total_loss: total / b,
            task_losses: task_losses.iter().map(|l| l / b).collect(),
        };
        on_iteration(&row);
        history.push(row);

        let done = it + 1;
        if let Some(val) = val {
            if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done != cfg.iterations {
                evals.push((done, evaluate(model, val, &owners, mode)?));
            }
        }
    }
    if let Some(val) = val {
        evals.push((cfg.iterations, evaluate(model, val, &owners, mode)?));
    }
    if let Some(dir) = out_dir {
        save_checkpoint(dir, model, cfg.iterations)?;
        write_history(&dir.join(HISTORY_FILE), model.tasks(), &history)?;
    }
    Ok(TrainRun { history, evals })
}
