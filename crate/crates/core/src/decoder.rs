//! Simplified multi-head up-sampling decoder.
//!
//! Each task keeps its own feature stream. A stage adds the fused features
//! of the matching scale, doubles resolution with a stride-2 transposed
//! convolution, lets the tasks attend to each other at every pixel, and
//! refines with an MLP. Per-task 1×1 heads produce the final maps.

use crate::config::{DecoderConfig, HeadInit};
use crate::error::{Error, Result};
use crate::fusion::UpProjection;
use crate::layers::{BlockParams, Linear};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::ParamStore;
use crate::task::Task;

#[derive(Clone, Debug)]
pub struct Stage {
    pub up: UpProjection,
    pub block: BlockParams,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub tasks: Vec<Task>,
    pub input: Linear,
    pub stages: Vec<Stage>,
    pub heads: Vec<Linear>,
    pub aux_heads: Vec<Linear>,
}

fn head<F: Scalar>(
    store: &mut ParamStore<F>,
    seed: u64,
    name: &str,
    cfg: &DecoderConfig,
    task: Task,
) -> Result<Linear> {
    let out = task.out_channels(cfg.num_classes);
    let w = match cfg.head_init {
        HeadInit::Zeros => Tensor::zeros(&[cfg.dim, out]),
        HeadInit::Random => crate::init::xavier(seed, &format!("{name}.w"), cfg.dim, out),
    };
    let bias = if task == Task::Depth { cfg.depth_bias_init } else { 0.0 };
    Linear::with_values(store, name, w, Tensor::full(&[out], F::of(bias)))
}

impl Decoder {
    pub fn build<F: Scalar>(
        cfg: &DecoderConfig,
        tasks: &[Task],
        enc_dim: usize,
        store: &mut ParamStore<F>,
        seed: u64,
    ) -> Result<Self> {
        let input = Linear::new(store, seed, "decoder.input", enc_dim, cfg.dim)?;
        let stages = (0..cfg.stages)
            .map(|k| {
                let p = format!("decoder.stage{k}");
                Ok(Stage {
                    up: UpProjection::new(store, seed, &format!("{p}.up"), cfg.dim, cfg.dim, 2)?,
                    block: BlockParams::new(store, seed, &p, cfg.dim, cfg.mlp_hidden())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = tasks
            .iter()
            .map(|&t| head(store, seed, &format!("head.{t}"), cfg, t))
            .collect::<Result<Vec<_>>>()?;
        let aux_heads = if cfg.aux_heads {
            tasks
                .iter()
                .map(|&t| head(store, seed, &format!("aux_head.{t}"), cfg, t))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Decoder {
            cfg: cfg.clone(),
            tasks: tasks.to_vec(),
            input,
            stages,
            heads,
            aux_heads,
        })
    }

    /// One up-sampling stage over per-task maps `[h × w × C]` plus the fused
    /// map of the same resolution. Returns per-task `[2h × 2w × C]` maps.
    pub fn up_block<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        stage: &Stage,
        task_feats: &[Var],
        fused: Var,
    ) -> Result<Vec<Var>> {
        let fshape = g.shape(fused).to_vec();
        if fshape.len() != 3 {
            return Err(Error::shape(format!("fused map must be h×w×C, got {fshape:?}")));
        }
        let (h, w, c) = (fshape[0], fshape[1], fshape[2]);
        let tn = task_feats.len();
        let mut ups = Vec::with_capacity(tn);
        for &tf in task_feats {
            if g.shape(tf) != fshape.as_slice() {
                return Err(Error::shape(format!(
                    "task feature {:?} not aligned with fused {fshape:?}",
                    g.shape(tf)
                )));
            }
            let x = g.add(tf, fused)?;
            let x = g.reshape(x, &[h * w, c])?;
            ups.push(stage.up.forward(g, store, x, (h, w))?);
        }
        let (oh, ow) = (2 * h, 2 * w);
        let p = oh * ow;

        let refined: Vec<Var> = if self.cfg.cross_task {
            let flat = ups
                .iter()
                .map(|&u| g.reshape(u, &[p, c]))
                .collect::<Result<Vec<_>>>()?;
            let x = g.concat_rows(&flat)?;
            let x = self.site_attention(g, store, &stage.block, x, tn, p)?;
            let x = stage.block.mlp_residual(g, store, x)?;
            (0..tn)
                .map(|t| {
                    let part = g.slice_rows(x, t * p, p)?;
                    g.reshape(part, &[oh, ow, c])
                })
                .collect::<Result<_>>()?
        } else {
            ups.iter()
                .map(|&u| stage.block.mlp_residual(g, store, u))
                .collect::<Result<_>>()?
        };
        Ok(refined)
    }

    /// `x + Attn(LN(x))` where attention runs over the `T` task tokens at
    /// each of the `p` pixels. `x` is `[T·p × C]`, task-major.
    fn site_attention<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        block: &BlockParams,
        x: Var,
        tasks: usize,
        p: usize,
    ) -> Result<Var> {
        let c = g.value(x).last_dim();
        let heads = self.cfg.heads;
        let d = c / heads;
        let h = block.ln1.forward(g, store, x)?;
        let qkv = block.qkv.forward(g, store, h)?;
        let qkv = g.reshape(qkv, &[tasks, p, 3 * c])?;
        let qkv = g.swap01(qkv)?; // [p × T × 3C]
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = g.slice_cols(qkv, hd * d, d)?;
            let k = g.slice_cols(qkv, c + hd * d, d)?;
            let v = g.slice_cols(qkv, 2 * c + hd * d, d)?;
            let s = g.batch_matmul(q, k, true)?;
            let s = g.scale(s, 1.0 / (d as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.batch_matmul(a, v, false)?);
        }
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let cat = g.swap01(cat)?; // [T × p × C]
        let cat = g.reshape(cat, &[tasks * p, c])?;
        let attn = block.proj.forward(g, store, cat)?;
        g.add(x, attn)
    }

    /// Run all stages. `final_tokens[t]` are task `t`'s last-layer patch
    /// tokens; `fused` lists fused maps finest first, as produced by fusion.
    /// Returns per-task feature maps at `out_hw`.
    pub fn decode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        final_tokens: &[Var],
        grid: (usize, usize),
        fused: &[Var],
        out_hw: (usize, usize),
    ) -> Result<Vec<Var>> {
        let streams = self.decode_native(g, store, final_tokens, grid, fused)?;
        streams.into_iter().map(|s| resize(g, s, out_hw)).collect()
    }

    /// As [`Decoder::decode`] but stops before the final resize, returning
    /// maps at the last stage's resolution.
    pub fn decode_native<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        final_tokens: &[Var],
        grid: (usize, usize),
        fused: &[Var],
    ) -> Result<Vec<Var>> {
        if fused.len() != self.stages.len() + 2 {
            return Err(Error::shape(format!(
                "decoder with {} stages needs {} fused scales, got {}",
                self.stages.len(),
                self.stages.len() + 2,
                fused.len()
            )));
        }
        let c = self.cfg.dim;
        let coarsest = fused[fused.len() - 1];
        let mut streams = final_tokens
            .iter()
            .map(|&tok| {
                let x = self.input.forward(g, store, tok)?;
                let x = g.reshape(x, &[grid.0, grid.1, c])?;
                g.add(x, coarsest)
            })
            .collect::<Result<Vec<_>>>()?;
        for (k, stage) in self.stages.iter().enumerate() {
            let f = fused[fused.len() - 2 - k];
            streams = self.up_block(g, store, stage, &streams, f)?;
        }
        streams.into_iter().map(|s| g.add(s, fused[0])).collect()
    }

    /// Head applied before the final resize. Equal to resizing first and
    /// then applying the head, because the head is affine per pixel and
    /// bilinear weights sum to one, but much cheaper.
    pub fn predict_resized<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        feat: Var,
        task: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let y = self.task_head(g, store, feat, task)?;
        resize(g, y, out_hw)
    }

    /// 1×1 projection to the task's output channels: `[H × W × C] → [H × W × out]`.
    pub fn task_head<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, feat: Var, task: usize) -> Result<Var> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::config(format!("unknown task index {task}")))?;
        head.forward(g, store, feat)
    }

    /// Auxiliary prediction from the coarsest fused map, resized to `out_hw`.
    pub fn aux_head<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        coarsest: Var,
        task: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let head = self
            .aux_heads
            .get(task)
            .ok_or_else(|| Error::config("auxiliary heads are disabled"))?;
        let s = g.shape(coarsest).to_vec();
        let y = head.forward(g, store, coarsest)?;
        g.bilinear(y, s[0], s[1], out_hw.0, out_hw.1)
    }
}

/// Bilinear resize of an `[h × w × C]` map; identity when sizes agree.
fn resize<F: Scalar>(g: &mut Graph<F>, x: Var, out_hw: (usize, usize)) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if (s[0], s[1]) == out_hw {
        Ok(x)
    } else {
        g.bilinear(x, s[0], s[1], out_hw.0, out_hw.1)
    }
}
