//! Multi-scale, multi-task encoder feature fusion.
//!
//! Each task's tap features are unfolded onto the patch grid and brought to
//! the decoder width; earlier taps are upsampled with a transposed
//! convolution whose kernel equals its stride. Per scale, the task features
//! are then combined as `F_i = Σ_t W[i,t] · F_i^t`.

use std::collections::HashMap;

use crate::config::{FusionConfig, FusionMode};
use crate::encoder::EncoderOutput;
use crate::error::{Error, Result};
use crate::init;
use crate::layers::Linear;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// Per-task, per-scale features `[h_s × w_s × D']`.
#[derive(Clone, Debug)]
pub struct TaskFeatureSet {
    /// `features[task][scale]`.
    pub features: Vec<Vec<Var>>,
    pub spatial: Vec<(usize, usize)>,
}

impl TaskFeatureSet {
    pub fn tasks(&self) -> usize {
        self.features.len()
    }

    pub fn scales(&self) -> usize {
        self.spatial.len()
    }
}

/// Channel projection plus optional `k × k`, stride-`k` transposed convolution.
#[derive(Clone, Copy, Debug)]
pub struct UpProjection {
    pub linear: Linear,
    pub factor: usize,
    pub out_dim: usize,
}

impl UpProjection {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        seed: u64,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        factor: usize,
    ) -> Result<Self> {
        let kk = factor * factor;
        let wn = format!("{name}.w");
        let w = init::xavier(seed, &wn, in_dim, out_dim);
        // every kernel tap starts from the same channel map
        let w = Tensor::from_fn(&[in_dim, kk * out_dim], |i| {
            let (r, c) = (i / (kk * out_dim), i % out_dim);
            w.data()[r * out_dim + c]
        });
        let linear = Linear::with_values(store, name, w, Tensor::zeros(&[out_dim]))?;
        Ok(UpProjection { linear, factor, out_dim })
    }

    /// `tokens[h·w × D] → [h·k × w·k × D']`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        tokens: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let (h, w) = grid;
        if g.value(tokens).rows() != h * w {
            return Err(Error::shape(format!(
                "{} tokens cannot unfold onto a {h}x{w} grid",
                g.value(tokens).rows()
            )));
        }
        let wv = g.param(store, self.linear.w);
        let bv = g.param(store, self.linear.b);
        let y = g.matmul(tokens, wv)?;
        let y = if self.factor == 1 {
            g.reshape(y, &[h, w, self.out_dim])?
        } else {
            g.depth_to_space(y, h, w, self.factor)?
        };
        g.add_row(y, bv)
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub cfg: FusionConfig,
    pub tasks: usize,
    pub grid: (usize, usize),
    pub scales: Vec<UpProjection>,
    /// Learnable `S × T` weight matrix.
    pub weights: Option<ParamId>,
    /// Query vector for cross-task attention.
    pub query: Option<ParamId>,
}

impl Fusion {
    #[allow(clippy::too_many_arguments)]
    pub fn build<F: Scalar>(
        cfg: &FusionConfig,
        tasks: usize,
        grid: (usize, usize),
        factors: &[usize],
        enc_dim: usize,
        dec_dim: usize,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self> {
        let scales = factors
            .iter()
            .enumerate()
            .map(|(s, &k)| UpProjection::new(store, seed, &format!("fusion.scale{s}"), enc_dim, dec_dim, k))
            .collect::<Result<Vec<_>>>()?;
        let weights = match cfg.mode {
            FusionMode::Learnable => Some(store.add(
                "fusion.weights",
                Tensor::full(&[factors.len(), tasks], F::of(1.0 / tasks as f64)),
            )?),
            _ => None,
        };
        let query = match cfg.mode {
            FusionMode::CrossTaskAttention => Some(store.add("fusion.query", Tensor::zeros(&[dec_dim, 1]))?),
            _ => None,
        };
        Ok(Fusion {
            cfg: cfg.clone(),
            tasks,
            grid,
            scales,
            weights,
            query,
        })
    }

    pub fn spatial(&self) -> Vec<(usize, usize)> {
        self.scales
            .iter()
            .map(|s| (self.grid.0 * s.factor, self.grid.1 * s.factor))
            .collect()
    }

    /// Unfold and upsample every scale of every task. Tap nodes shared
    /// between task branches are processed once.
    pub fn unfold_and_upsample<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        encoded: &[EncoderOutput],
    ) -> Result<TaskFeatureSet> {
        let mut memo: HashMap<(usize, Var), Var> = HashMap::new();
        let mut features = Vec::with_capacity(encoded.len());
        for out in encoded {
            let final_patches = out.final_state.patch_tokens(g)?;
            let mut inputs = out.taps.clone();
            inputs.push(final_patches);
            if inputs.len() != self.scales.len() {
                return Err(Error::shape(format!(
                    "{} encoder scales for {} fusion scales",
                    inputs.len(),
                    self.scales.len()
                )));
            }
            let mut per_scale = Vec::with_capacity(inputs.len());
            for (s, &tokens) in inputs.iter().enumerate() {
                // final patch tokens are re-sliced per call, so key on the
                // underlying token sequence instead
                let key = if s + 1 == inputs.len() { out.final_state.tokens } else { tokens };
                let v = match memo.get(&(s, key)) {
                    Some(&v) => v,
                    None => {
                        let v = self.scales[s].forward(g, store, tokens, self.grid)?;
                        memo.insert((s, key), v);
                        v
                    }
                };
                per_scale.push(v);
            }
            features.push(per_scale);
        }
        Ok(TaskFeatureSet {
            features,
            spatial: self.spatial(),
        })
    }

    /// Fuse per scale according to the configured mode.
    pub fn fuse<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, fs: &TaskFeatureSet) -> Result<Vec<Var>> {
        match self.cfg.mode {
            FusionMode::CrossTaskAttention => self.fuse_cross_task_attention(g, store, fs),
            FusionMode::None => (0..fs.scales())
                .map(|s| {
                    let shape = g.shape(fs.features[0][s]).to_vec();
                    Ok(g.constant(Tensor::zeros(&shape)))
                })
                .collect(),
            FusionMode::Fixed => {
                let w = self.cfg.weight_matrix(fs.scales(), fs.tasks());
                fuse_fixed(g, fs, &w)
            }
            FusionMode::Learnable => {
                let w = g.param(store, self.weights.expect("learnable weights registered"));
                fuse_learnable(g, fs, w)
            }
        }
    }

    /// Per scale: `α = softmax_t(q · GAP(F^t))`, fused `= Σ_t α_t F^t`.
    pub fn fuse_cross_task_attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        fs: &TaskFeatureSet,
    ) -> Result<Vec<Var>> {
        let q = g.param(store, self.query.expect("query registered"));
        Ok(cross_task_attention(g, fs, q)?.0)
    }
}

fn check_set<F: Scalar>(g: &Graph<F>, fs: &TaskFeatureSet) -> Result<()> {
    for s in 0..fs.scales() {
        let shape = g.shape(fs.features[0][s]);
        for t in 1..fs.tasks() {
            if g.shape(fs.features[t][s]) != shape {
                return Err(Error::shape(format!(
                    "task {t} scale {s}: {:?} vs {shape:?}",
                    g.shape(fs.features[t][s])
                )));
            }
        }
    }
    Ok(())
}

/// Weighted sum with constant `weights[scale][task]`.
pub fn fuse_fixed<F: Scalar>(g: &mut Graph<F>, fs: &TaskFeatureSet, weights: &[Vec<f64>]) -> Result<Vec<Var>> {
    check_set(g, fs)?;
    if weights.len() != fs.scales() || weights.iter().any(|r| r.len() != fs.tasks()) {
        return Err(Error::shape(format!(
            "fixed weights must be {}x{}",
            fs.scales(),
            fs.tasks()
        )));
    }
    (0..fs.scales())
        .map(|s| {
            let mut acc = g.scale(fs.features[0][s], weights[s][0]);
            for t in 1..fs.tasks() {
                let term = g.scale(fs.features[t][s], weights[s][t]);
                acc = g.add(acc, term)?;
            }
            Ok(acc)
        })
        .collect()
}

/// Weighted sum with a differentiable `S × T` weight tensor.
pub fn fuse_learnable<F: Scalar>(g: &mut Graph<F>, fs: &TaskFeatureSet, weights: Var) -> Result<Vec<Var>> {
    check_set(g, fs)?;
    let (s_n, t_n) = (fs.scales(), fs.tasks());
    if g.value(weights).numel() != s_n * t_n {
        return Err(Error::shape(format!("learnable weights {:?} for {s_n}x{t_n}", g.shape(weights))));
    }
    (0..s_n)
        .map(|s| {
            let mut acc = None;
            for t in 0..t_n {
                let w = g.index(weights, s * t_n + t)?;
                let term = g.scale_by(fs.features[t][s], w)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => g.add(a, term)?,
                });
            }
            Ok(acc.expect("at least one task"))
        })
        .collect()
}

/// Returns fused maps and the per-scale weights `α` (`[1 × T]`).
pub fn cross_task_attention<F: Scalar>(g: &mut Graph<F>, fs: &TaskFeatureSet, query: Var) -> Result<(Vec<Var>, Vec<Var>)> {
    check_set(g, fs)?;
    let mut fused = Vec::with_capacity(fs.scales());
    let mut alphas = Vec::with_capacity(fs.scales());
    for s in 0..fs.scales() {
        let logits = (0..fs.tasks())
            .map(|t| {
                let pooled = g.mean_rows(fs.features[t][s]);
                g.matmul(pooled, query)
            })
            .collect::<Result<Vec<_>>>()?;
        let logits = g.concat_cols(&logits)?;
        let alpha = g.softmax_rows(logits);
        let mut acc = None;
        for t in 0..fs.tasks() {
            let a = g.index(alpha, t)?;
            let term = g.scale_by(fs.features[t][s], a)?;
            acc = Some(match acc {
                None => term,
                Some(x) => g.add(x, term)?,
            });
        }
        fused.push(acc.expect("at least one task"));
        alphas.push(alpha);
    }
    Ok((fused, alphas))
}
