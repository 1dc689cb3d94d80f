use serde::Serialize;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Scalar};
use crate::par::{self, Parallelism};

/// Mean cross-task cosine similarity per layer and task pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationTable {
    /// 1-based layers, one row each.
    pub layers: Vec<usize>,
    /// Task index pairs `(a, b)` with `a < b`, one column each.
    pub pairs: Vec<(usize, usize)>,
    pub values: Vec<Vec<f64>>,
}

impl CorrelationTable {
    pub fn get(&self, layer: usize, a: usize, b: usize) -> Option<f64> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        if a == b {
            return Some(1.0);
        }
        let r = self.layers.iter().position(|&l| l == layer)?;
        let c = self.pairs.iter().position(|&p| p == (a, b))?;
        Some(self.values[r][c])
    }

    /// Average over all task pairs at `layer`.
    pub fn layer_mean(&self, layer: usize) -> Option<f64> {
        let r = self.layers.iter().position(|&l| l == layer)?;
        let row = &self.values[r];
        if row.is_empty() {
            return None;
        }
        Some(row.iter().sum::<f64>() / row.len() as f64)
    }
}

/// Cosine similarity of two flattened feature maps; identical inputs give
/// exactly 1, and a zero vector gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Per image and layer, the cosine similarity of every pair of task
/// branches' patch features, averaged over images.
pub fn task_feature_correlation<F: Scalar>(
    model: &Model<F>,
    samples: &[Sample],
    layers: &[usize],
    mode: Parallelism,
) -> Result<CorrelationTable> {
    if samples.is_empty() {
        return Err(Error::Data("correlation needs at least one image".into()));
    }
    let total = model.cfg.encoder.layers;
    if let Some(&bad) = layers.iter().find(|&&l| l < 1 || l > total) {
        return Err(Error::config(format!("layer {bad} outside 1..={total}")));
    }
    let t = model.tasks().len();
    let pairs: Vec<(usize, usize)> = (0..t).flat_map(|a| (a + 1..t).map(move |b| (a, b))).collect();
    let owners = model.own_prompts();
    let per_image = par::map(samples, mode, |s| -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let image = model.image_tensor(s);
        let outs = model.encoder.encode_all(&mut g, &model.store, &image, &owners)?;
        Ok(layers
            .iter()
            .map(|&l| {
                let feats: Vec<Vec<f64>> = outs.iter().map(|o| g.value(o.layer_patches[l - 1]).to_f64_vec()).collect();
                pairs.iter().map(|&(a, b)| cosine(&feats[a], &feats[b])).collect()
            })
            .collect())
    });
    let mut values = vec![vec![0.0; pairs.len()]; layers.len()];
    for img in per_image {
        for (acc, row) in values.iter_mut().zip(img?) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
    }
    let n = samples.len() as f64;
    values.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(CorrelationTable {
        layers: layers.to_vec(),
        pairs,
        values,
    })
}
