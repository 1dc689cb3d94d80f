use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Graph, Scalar, Tensor};

/// Prompt-to-patch attention of one task branch at one layer.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub layer: usize,
    pub task: usize,
    /// Patch grid `(h, w)`.
    pub grid: (usize, usize),
    /// Head-averaged maps `[n × h × w]`, each renormalized over patch keys.
    pub mean: Tensor<f64>,
    /// One `[n × h × w]` map per head, each renormalized over patch keys.
    pub per_head: Vec<Tensor<f64>>,
}

fn renormalize(rows: &mut [f64], m: usize) {
    for row in rows.chunks_mut(m) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
}

/// Attention from each prompt query of branch `task` to the patch keys at
/// 1-based `layer`, from a single forward pass with every branch using its
/// own prompts.
pub fn prompt_attention_map<F: Scalar>(
    model: &Model<F>,
    image: &Tensor<F>,
    task: usize,
    layer: usize,
) -> Result<AttentionMap> {
    let enc = &model.cfg.encoder;
    if !enc.is_prompt_layer(layer) {
        return Err(Error::config(format!(
            "layer {layer} is outside the prompt range {}..={}",
            enc.prompt_start, enc.prompt_end
        )));
    }
    if task >= model.tasks().len() {
        return Err(Error::config(format!("task {task} out of range 0..{}", model.tasks().len())));
    }
    let n = enc.prompt_tokens();
    if n == 0 {
        return Err(Error::config("the model has no prompt tokens"));
    }
    let mut g = Graph::new();
    let out = model
        .encoder
        .encode(&mut g, &model.store, image, task)?;
    let attn = &out.attention[layer - 1];
    let m = enc.num_patches();
    let grid = enc.grid();
    let mut per_head = Vec::with_capacity(enc.heads);
    let mut mean = vec![0.0; n * m];
    for h in 0..enc.heads {
        let p = attn.head(&g, h);
        let s = p.shape()[1];
        if s != 1 + m + n {
            return Err(Error::shape(format!("attention over {s} tokens, expected {}", 1 + m + n)));
        }
        let mut rows = Vec::with_capacity(n * m);
        for q in 0..n {
            let r = p.row(1 + m + q);
            rows.extend(r[1..1 + m].iter().map(|v| v.f64()));
        }
        mean.iter_mut().zip(&rows).for_each(|(a, b)| *a += b);
        renormalize(&mut rows, m);
        per_head.push(Tensor::new(&[n, grid.0, grid.1], rows)?);
    }
    mean.iter_mut().for_each(|v| *v /= enc.heads as f64);
    renormalize(&mut mean, m);
    Ok(AttentionMap {
        layer,
        task,
        grid,
        mean: Tensor::new(&[n, grid.0, grid.1], mean)?,
        per_head,
    })
}

/// Write an 8-bit binary PGM, min-max normalized (a constant map is black).
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    if values.len() != height * width {
        return Err(Error::shape(format!("{} values for a {height}x{width} image", values.len())));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let bytes: Vec<u8> = values
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}
