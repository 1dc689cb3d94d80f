//! Dense-prediction evaluation metrics, each with a dataset-level accumulator.
//!
//! Accumulators merge associatively, so per-sample partial results can be
//! computed in parallel and reduced in order.

use crate::error::{Error, Result};

pub const MAXF_THRESHOLDS: usize = 255;
pub const ODSF_THRESHOLDS: usize = 99;
pub const MAXF_BETA2: f64 = 0.3;
const NORMAL_EPS: f64 = 1e-8;

/// Confusion matrix over `k` classes, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Self {
        Confusion {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn add(&mut self, pred: &[u32], gt: &[u32], ignore: u32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        for (&p, &t) in pred.iter().zip(gt) {
            if t == ignore {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= self.k || t >= self.k {
                return Err(Error::Data(format!("label {} outside 0..{}", p.max(t), self.k)));
            }
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    /// Mean IoU over classes that occur in the ground truth; 0 when none do.
    pub fn miou(&self) -> f64 {
        let k = self.k;
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..k {
            let gt: u64 = (0..k).map(|p| self.counts[c * k + p]).sum();
            if gt == 0 {
                continue;
            }
            let pred: u64 = (0..k).map(|t| self.counts[t * k + c]).sum();
            let inter = self.counts[c * k + c];
            sum += inter as f64 / (gt + pred - inter) as f64;
            present += 1;
        }
        if present == 0 {
            0.0
        } else {
            sum / present as f64
        }
    }
}

pub fn miou(pred: &[u32], gt: &[u32], k: usize, ignore: u32) -> Result<f64> {
    let mut c = Confusion::new(k);
    c.add(pred, gt, ignore)?;
    Ok(c.miou())
}

/// Running sum for a mean over valid elements.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanAcc {
    pub sum: f64,
    pub count: u64,
}

impl MeanAcc {
    pub fn merge(&mut self, other: &MeanAcc) {
        self.sum += other.sum;
        self.count += other.count;
    }

    pub fn mean(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::Data("metric over an empty mask".into()));
        }
        Ok(self.sum / self.count as f64)
    }
}

fn check_mask(n: usize, mask: Option<&[bool]>) -> Result<()> {
    match mask {
        Some(m) if m.len() != n => Err(Error::shape(format!("mask of {} for {n} pixels", m.len()))),
        _ => Ok(()),
    }
}

/// Squared-error accumulator for RMSE.
pub fn squared_error(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<MeanAcc> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    check_mask(pred.len(), mask)?;
    let mut acc = MeanAcc::default();
    for i in 0..pred.len() {
        if mask.map_or(true, |m| m[i]) {
            let d = pred[i] - gt[i];
            acc.sum += d * d;
            acc.count += 1;
        }
    }
    Ok(acc)
}

pub fn rmse(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    Ok(squared_error(pred, gt, mask)?.mean()?.sqrt())
}

/// Angle in degrees between a raw prediction and a unit ground-truth vector.
pub fn angle_deg(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let norm = (pred[0] * pred[0] + pred[1] * pred[1] + pred[2] * pred[2]).sqrt().max(NORMAL_EPS);
    let dot = (pred[0] * gt[0] + pred[1] * gt[1] + pred[2] * gt[2]) / norm;
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Angular-error accumulator over `[N × 3]` vectors and a per-pixel mask.
pub fn angular_error(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<MeanAcc> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 {
        return Err(Error::shape(format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    let n = pred.len() / 3;
    check_mask(n, mask)?;
    let mut acc = MeanAcc::default();
    for i in 0..n {
        if mask.map_or(true, |m| m[i]) {
            let p = [pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]];
            let t = [gt[3 * i], gt[3 * i + 1], gt[3 * i + 2]];
            acc.sum += angle_deg(p, t);
            acc.count += 1;
        }
    }
    Ok(acc)
}

pub fn mean_angular_error(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    angular_error(pred, gt, mask)?.mean()
}

/// Counts of positives and negatives predicted at each of a fixed set of
/// thresholds `i / denom`, `i = 1..=n` (a score `p` is positive at `θ` iff
/// `p ≥ θ`).
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdCounts {
    thresholds: Vec<f64>,
    /// `pos[k]` counts positive-gt pixels whose score clears exactly `k` thresholds.
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl ThresholdCounts {
    pub fn new(n: usize, denom: usize) -> Self {
        ThresholdCounts {
            thresholds: (1..=n).map(|i| i as f64 / denom as f64).collect(),
            pos: vec![0; n + 1],
            neg: vec![0; n + 1],
        }
    }

    pub fn saliency() -> Self {
        Self::new(MAXF_THRESHOLDS, MAXF_THRESHOLDS + 1)
    }

    pub fn edge() -> Self {
        Self::new(ODSF_THRESHOLDS, ODSF_THRESHOLDS + 1)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn add(&mut self, scores: &[f64], gt: &[bool]) -> Result<()> {
        if scores.len() != gt.len() {
            return Err(Error::shape(format!("{} scores vs {} labels", scores.len(), gt.len())));
        }
        for (&p, &t) in scores.iter().zip(gt) {
            let k = self.thresholds.partition_point(|&th| th <= p);
            if t {
                self.pos[k] += 1;
            } else {
                self.neg[k] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ThresholdCounts) {
        self.pos.iter_mut().zip(&other.pos).for_each(|(a, b)| *a += b);
        self.neg.iter_mut().zip(&other.neg).for_each(|(a, b)| *a += b);
    }

    /// `(tp, fp, fn)` at every threshold, in threshold order.
    pub fn confusion(&self) -> Vec<(u64, u64, u64)> {
        let n = self.thresholds.len();
        let total_pos: u64 = self.pos.iter().sum();
        let mut tp = 0;
        let mut fp = 0;
        let mut out = vec![(0, 0, 0); n];
        // threshold i (0-based) is cleared by every score with k ≥ i + 1
        for i in (0..n).rev() {
            tp += self.pos[i + 1];
            fp += self.neg[i + 1];
            out[i] = (tp, fp, total_pos - tp);
        }
        out
    }

    pub fn max_f(&self, beta2: f64) -> FScore {
        let total_pos: u64 = self.pos.iter().sum();
        let best = self
            .confusion()
            .into_iter()
            .map(|(tp, fp, fneg)| f_beta(tp, fp, fneg, beta2))
            .fold(0.0, f64::max);
        FScore {
            value: best,
            undefined: total_pos == 0,
        }
    }
}

/// F-measure; precision is taken as 0 when nothing is predicted positive.
pub fn f_beta(tp: u64, fp: u64, fneg: u64, beta2: f64) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let denom = beta2 * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * precision * recall / denom
    }
}

/// A maximised F-score; `undefined` flags a ground truth with no positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FScore {
    pub value: f64,
    pub undefined: bool,
}

pub fn max_f(scores: &[f64], gt: &[bool]) -> Result<FScore> {
    let mut c = ThresholdCounts::saliency();
    c.add(scores, gt)?;
    let f = c.max_f(MAXF_BETA2);
    Ok(if f.undefined { FScore { value: 0.0, undefined: true } } else { f })
}

/// Simplified optimal-dataset-scale F: pixel-exact matching, one threshold
/// shared across all maps.
pub fn ods_f(maps: &[(&[f64], &[bool])]) -> Result<f64> {
    let mut c = ThresholdCounts::edge();
    for (scores, gt) in maps {
        c.add(scores, gt)?;
    }
    Ok(c.max_f(1.0).value)
}
