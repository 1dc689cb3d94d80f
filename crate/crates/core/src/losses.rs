//! Per-task dense losses and their weighted sum.

use crate::config::LossWeights;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Scalar, Tensor, Var};
use crate::task::Task;

/// Neumaier-compensated running sum, so that a loss over many pixels is
/// accurate to a few ulps regardless of the pixel count.
#[derive(Default)]
struct Sum {
    hi: f64,
    lo: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.hi + x;
        if self.hi.abs() >= x.abs() {
            self.lo += (self.hi - t) + x;
        } else {
            self.lo += (x - t) + self.hi;
        }
        self.hi = t;
    }

    fn value(&self) -> f64 {
        self.hi + self.lo
    }
}

struct CrossEntropy<F> {
    probs: Vec<F>,
    labels: Vec<Option<usize>>,
    classes: usize,
    count: usize,
}

impl<F: Scalar> CustomOp<F> for CrossEntropy<F> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let k = self.classes;
        let c = grad.item() / F::of(self.count as f64);
        let mut g = vec![F::zero(); self.probs.len()];
        for (p, label) in self.labels.iter().enumerate() {
            if let Some(label) = *label {
                for j in 0..k {
                    let onehot = if j == label { F::one() } else { F::zero() };
                    g[p * k + j] = (self.probs[p * k + j] - onehot) * c;
                }
            }
        }
        vec![Some(Tensor::new(&[self.probs.len()], g).expect("sized"))]
    }
}

/// Mean softmax cross-entropy over pixels whose label is not `ignore`.
/// `logits` is `[… × K]`, one label per row.
pub fn cross_entropy_map<F: Scalar>(g: &mut Graph<F>, logits: Var, labels: &[u8], ignore: u32) -> Result<Var> {
    let x = g.value(logits);
    let k = x.last_dim();
    let rows = x.numel() / k;
    if labels.len() != rows {
        return Err(Error::shape(format!("{} labels for {rows} pixels", labels.len())));
    }
    let mut probs = vec![F::zero(); rows * k];
    let mut targets = Vec::with_capacity(rows);
    let mut total = Sum::default();
    let mut count = 0usize;
    for (p, &l) in labels.iter().enumerate() {
        let row = &x.data()[p * k..(p + 1) * k];
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let z: F = row.iter().map(|&v| (v - m).exp()).fold(F::zero(), |a, b| a + b);
        for j in 0..k {
            probs[p * k + j] = (row[j] - m).exp() / z;
        }
        if l as u32 == ignore {
            targets.push(None);
            continue;
        }
        let l = l as usize;
        if l >= k {
            return Err(Error::Data(format!("label {l} outside 0..{k}")));
        }
        total.add((z.ln() + m - row[l]).f64());
        count += 1;
        targets.push(Some(l));
    }
    if count == 0 {
        return Err(Error::Data("every pixel carries the ignore label".into()));
    }
    let out = Tensor::scalar(F::of(total.value() / count as f64));
    let flat = g.reshape(logits, &[rows * k])?;
    Ok(g.custom(
        &[flat],
        out,
        Box::new(CrossEntropy {
            probs,
            labels: targets,
            classes: k,
            count,
        }),
    ))
}

struct MaskedL1<F> {
    sign: Vec<F>,
    count: usize,
}

impl<F: Scalar> CustomOp<F> for MaskedL1<F> {
    fn name(&self) -> &'static str {
        "l1"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let c = grad.item() / F::of(self.count as f64);
        let g = self.sign.iter().map(|&s| s * c).collect();
        vec![Some(Tensor::new(&[self.sign.len()], g).expect("sized"))]
    }
}

/// Mean absolute error. `mask` may give one flag per element or one per
/// row of the trailing channel axis.
pub fn l1_map<F: Scalar>(g: &mut Graph<F>, pred: Var, gt: &[f32], mask: Option<&[u8]>) -> Result<Var> {
    let x = g.value(pred);
    let n = x.numel();
    if gt.len() != n {
        return Err(Error::shape(format!("prediction has {n} elements, target {}", gt.len())));
    }
    let c = x.last_dim();
    let per = match mask {
        None => 0,
        Some(m) if m.len() == n => 1,
        Some(m) if m.len() * c == n => c,
        Some(m) => return Err(Error::shape(format!("mask of {} for {n} elements", m.len()))),
    };
    let keep = |i: usize| match mask {
        None => true,
        Some(m) => m[i / per] != 0,
    };
    let mut sign = vec![F::zero(); n];
    let mut total = Sum::default();
    let mut count = 0usize;
    for (i, (&p, &t)) in x.data().iter().zip(gt).enumerate() {
        if !keep(i) {
            continue;
        }
        let d = p - F::of(t as f64);
        total.add(d.abs().f64());
        count += 1;
        sign[i] = if d > F::zero() {
            F::one()
        } else if d < F::zero() {
            -F::one()
        } else {
            F::zero()
        };
    }
    if count == 0 {
        return Err(Error::Data("l1 mask selects no element".into()));
    }
    let flat = g.reshape(pred, &[n])?;
    Ok(g.custom(&[flat], Tensor::scalar(F::of(total.value() / count as f64)), Box::new(MaskedL1 { sign, count })))
}

struct BceLogits<F> {
    residual: Vec<F>,
}

impl<F: Scalar> CustomOp<F> for BceLogits<F> {
    fn name(&self) -> &'static str {
        "bce_logits"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
        let c = grad.item() / F::of(self.residual.len() as f64);
        let g = self.residual.iter().map(|&r| r * c).collect();
        vec![Some(Tensor::new(&[self.residual.len()], g).expect("sized"))]
    }
}

/// Mean binary cross-entropy on logits against 0/1 targets.
pub fn bce_logits<F: Scalar>(g: &mut Graph<F>, logits: Var, targets: &[u8]) -> Result<Var> {
    let x = g.value(logits);
    let n = x.numel();
    if targets.len() != n {
        return Err(Error::shape(format!("{n} logits for {} targets", targets.len())));
    }
    let mut residual = Vec::with_capacity(n);
    let mut total = Sum::default();
    for (&z, &y) in x.data().iter().zip(targets) {
        let y = if y != 0 { F::one() } else { F::zero() };
        // max(z, 0) − z·y + ln(1 + e^{−|z|})
        let l = z.max(F::zero()) - z * y + (-z.abs()).exp().ln_1p();
        total.add(l.f64());
        residual.push(sigmoid(z) - y);
    }
    let flat = g.reshape(logits, &[n])?;
    Ok(g.custom(&[flat], Tensor::scalar(F::of(total.value() / n as f64)), Box::new(BceLogits { residual })))
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// The loss of one task's prediction against its ground truth.
pub fn task_loss<F: Scalar>(g: &mut Graph<F>, task: Task, pred: Var, gt: &Sample, ignore: u32) -> Result<Var> {
    match task {
        Task::Semseg => cross_entropy_map(g, pred, &gt.semseg, ignore),
        Task::Depth => l1_map(g, pred, gt.depth.data(), None),
        Task::Normal => l1_map(g, pred, gt.normal.data(), Some(&gt.normal_mask)),
        Task::Edge => bce_logits(g, pred, &gt.edge),
        Task::Saliency => {
            let s = gt
                .saliency
                .as_ref()
                .ok_or_else(|| Error::Data("saliency prediction without saliency ground truth".into()))?;
            bce_logits(g, pred, s)
        }
    }
}

/// Weighted sum of per-task losses plus the unweighted breakdown.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub loss: Var,
    pub per_task: Vec<(Task, f64)>,
}

pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    preds: &[(Task, Var)],
    gt: &Sample,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    let mut terms = Vec::with_capacity(preds.len());
    let mut per_task = Vec::with_capacity(preds.len());
    for &(task, pred) in preds {
        let l = task_loss(g, task, pred, gt, weights.ignore_index)?;
        per_task.push((task, g.value(l).item().f64()));
        terms.push(g.scale(l, weights.weight(task)));
    }
    let loss = match terms.split_first() {
        None => g.constant(Tensor::scalar(F::zero())),
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &t| g.add(acc, t))?,
    };
    Ok(TotalLoss { loss, per_task })
}

/// Weighted sum of already-evaluated per-task losses.
pub fn combine(per_task: &[(Task, f64)], weights: &LossWeights) -> f64 {
    per_task.iter().map(|&(t, l)| weights.weight(t) * l).sum()
}
