//! Transformer encoder with task-specific deep prompts.
//!
//! Layers before `prompt_start` are shared by every task. From
//! `prompt_start` to `prompt_end` each task's branch appends its own fresh
//! prompt tokens to the sequence; the prompt positions of each layer's
//! output are dropped, so patch count never changes and every prompted
//! layer sees only its own prompt parameters.

use crate::config::{EncoderConfig, PromptInit, UnifiedMode};
use crate::error::{Error, Result};
use crate::init;
use crate::layers::{BlockParams, Linear};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// CLS token plus patch tokens, stored as one `[1 + m × D]` sequence with
/// CLS in row 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenState {
    pub tokens: Var,
    pub patches: usize,
}

impl TokenState {
    pub fn cls<F: Scalar>(&self, g: &mut Graph<F>) -> Result<Var> {
        g.slice_rows(self.tokens, 0, 1)
    }

    pub fn patch_tokens<F: Scalar>(&self, g: &mut Graph<F>) -> Result<Var> {
        g.slice_rows(self.tokens, 1, self.patches)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderWeights {
    pub patch: Linear,
    pub pos: ParamId,
    pub cls: ParamId,
    pub layers: Vec<BlockParams>,
}

/// Learnable prompt tokens: `specific[task][layer - prompt_start]` is an
/// `n × D` tensor; `unified[layer - prompt_start]` is `n_unified × D`.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub specific: Vec<Vec<ParamId>>,
    pub unified: Option<Vec<ParamId>>,
}

impl PromptBank {
    pub fn specific_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.specific.iter().flatten().copied()
    }
}

/// Everything one task branch produced.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub final_state: TokenState,
    /// Patch tokens `[m × D]` after each tap layer.
    pub taps: Vec<Var>,
    /// Patch tokens after every layer (index 0 is layer 1).
    pub layer_patches: Vec<Var>,
    /// Attention probabilities of every layer.
    pub attention: Vec<LayerAttention>,
}

/// Per-head attention probabilities `[G × s × s]` of a layer that ran `G`
/// branches side by side; `slot` is this branch's index among them.
#[derive(Clone, Debug)]
pub struct LayerAttention {
    pub heads: Vec<Var>,
    pub slot: usize,
}

impl LayerAttention {
    /// This branch's `[s × s]` probabilities for one head.
    pub fn head<F: Scalar>(&self, g: &Graph<F>, head: usize) -> Tensor<F> {
        let t = g.value(self.heads[head]);
        let s = t.shape();
        let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
        let data = t.data()[self.slot * n * m..(self.slot + 1) * n * m].to_vec();
        Tensor::new(&[n, m], data).expect("slice of a valid tensor")
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub tasks: usize,
    /// One entry when the encoder is shared, otherwise one per task.
    pub weights: Vec<EncoderWeights>,
    pub bank: PromptBank,
}

fn weights_prefix(shared: bool, task: usize) -> (String, String) {
    if shared {
        ("patch_embed".into(), "encoder".into())
    } else {
        (format!("patch_embed.task{task}"), format!("encoder.task{task}"))
    }
}

fn prompt_value<F: Scalar>(cfg: &EncoderConfig, seed: u64, name: &str, rows: usize) -> Tensor<F> {
    let shape = [rows, cfg.dim];
    match cfg.prompt_init {
        PromptInit::Zeros => Tensor::zeros(&shape),
        PromptInit::Ones => Tensor::ones(&shape),
        PromptInit::Random => {
            let t: Tensor<F> = init::uniform(seed, name, &shape, 0.5);
            let s = F::of(1.0 / (cfg.dim as f64).sqrt());
            t.map(|v| v * s)
        }
    }
}

impl Encoder {
    pub fn build<F: Scalar>(cfg: &EncoderConfig, tasks: usize, store: &mut ParamStore<F>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let patch_in = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        let copies = if cfg.shared_encoder { 1 } else { tasks };
        let mut weights = Vec::with_capacity(copies);
        for t in 0..copies {
            let (pe, enc) = weights_prefix(cfg.shared_encoder, t);
            let patch = Linear::new(store, seed, &pe, patch_in, cfg.dim)?;
            let pos_name = format!("{pe}.pos");
            let pos = store.add(&pos_name, init::normal(seed, &pos_name, &[cfg.num_patches(), cfg.dim], 0.02))?;
            let cls_name = format!("{pe}.cls");
            let cls = store.add(&cls_name, init::normal(seed, &cls_name, &[1, cfg.dim], 0.02))?;
            let layers = (1..=cfg.layers)
                .map(|l| BlockParams::new(store, seed, &format!("{enc}.layer{l}"), cfg.dim, cfg.mlp_hidden()))
                .collect::<Result<Vec<_>>>()?;
            weights.push(EncoderWeights { patch, pos, cls, layers });
        }

        let mut specific = vec![Vec::new(); tasks];
        if cfg.prompts > 0 {
            for (t, slot) in specific.iter_mut().enumerate() {
                for l in cfg.prompt_start..=cfg.prompt_end {
                    let name = format!("prompts.task{t}.layer{l}");
                    let v = prompt_value(cfg, seed, &name, cfg.prompts);
                    slot.push(store.add(name, v)?);
                }
            }
        }
        let unified = if cfg.n_unified > 0
            && matches!(cfg.unified_mode, UnifiedMode::UnifiedOnly | UnifiedMode::Concat | UnifiedMode::Add)
        {
            let ids = (cfg.prompt_start..=cfg.prompt_end)
                .map(|l| {
                    let name = format!("prompts.unified.layer{l}");
                    let v = prompt_value(cfg, seed, &name, cfg.n_unified);
                    store.add(name, v)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(ids)
        } else {
            None
        };

        Ok(Encoder {
            cfg: cfg.clone(),
            tasks,
            weights,
            bank: PromptBank { specific, unified },
        })
    }

    pub fn weights_for(&self, task: usize) -> &EncoderWeights {
        &self.weights[self.weight_index(task)]
    }

    fn weight_index(&self, task: usize) -> usize {
        if self.cfg.shared_encoder {
            0
        } else {
            task
        }
    }

    /// Split an `H×W×C` image into patches, project them, add positional
    /// encodings and prepend the CLS token.
    pub fn patch_embed<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        weights: &EncoderWeights,
        image: &Tensor<F>,
    ) -> Result<TokenState> {
        let cfg = &self.cfg;
        let s = image.shape();
        if s.len() != 3 || s[2] != cfg.in_channels {
            return Err(Error::shape(format!("image must be H×W×{}, got {s:?}", cfg.in_channels)));
        }
        let (h, w, c, p) = (s[0], s[1], s[2], cfg.patch_size);
        if h % p != 0 || w % p != 0 {
            return Err(Error::config(format!("image {h}x{w} not divisible by patch {p}")));
        }
        if h != cfg.image_h || w != cfg.image_w {
            return Err(Error::shape(format!(
                "image {h}x{w} does not match configured {}x{}",
                cfg.image_h, cfg.image_w
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let mut cols = Vec::with_capacity(h * w * c);
        let d = image.data();
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..p {
                    let row = ((py * p + y) * w + px * p) * c;
                    cols.extend_from_slice(&d[row..row + p * c]);
                }
            }
        }
        let patches = g.constant(Tensor::new(&[gh * gw, p * p * c], cols)?);
        let emb = weights.patch.forward(g, store, patches)?;
        let pos = g.param(store, weights.pos);
        let emb = g.add(emb, pos)?;
        let cls = g.param(store, weights.cls);
        let tokens = g.concat_rows(&[cls, emb])?;
        Ok(TokenState {
            tokens,
            patches: gh * gw,
        })
    }

    /// Multi-head self-attention over `x[s × D]`; returns the output and the
    /// per-head attention probabilities `[1 × s × s]`.
    pub fn msa<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        block: &BlockParams,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        msa(g, store, block, x, self.cfg.heads, 1)
    }

    pub fn vanilla_layer<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        block: &BlockParams,
        state: TokenState,
    ) -> Result<TokenState> {
        let (tokens, _) = block_forward(g, store, block, state.tokens, self.cfg.heads, 1)?;
        Ok(TokenState { tokens, ..state })
    }

    /// A layer over `[cls ‖ patches ‖ prompts]` whose prompt outputs are
    /// discarded. With no prompts this is exactly [`Encoder::vanilla_layer`].
    pub fn prompt_layer<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        block: &BlockParams,
        state: TokenState,
        prompts: Option<Var>,
    ) -> Result<TokenState> {
        Ok(self.prompt_layer_traced(g, store, block, state, prompts)?.0)
    }

    fn prompt_layer_traced<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        block: &BlockParams,
        state: TokenState,
        prompts: Option<Var>,
    ) -> Result<(TokenState, LayerAttention)> {
        let (mut states, attn) = self.grouped_layer(g, store, block, &[(state, prompts)])?;
        Ok((states.remove(0), attn.into_iter().next().expect("one group")))
    }

    /// Run one layer for several branches sharing `block`, stacked row-wise
    /// so the projections run as single products. Attention stays within
    /// each branch. Every branch must carry the same number of prompts.
    fn grouped_layer<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        block: &BlockParams,
        branches: &[(TokenState, Option<Var>)],
    ) -> Result<(Vec<TokenState>, Vec<LayerAttention>)> {
        let seqs = branches
            .iter()
            .map(|&(state, prompts)| match prompts {
                Some(p) => g.concat_rows(&[state.tokens, p]),
                None => Ok(state.tokens),
            })
            .collect::<Result<Vec<_>>>()?;
        let len = g.value(seqs[0]).rows();
        if seqs.iter().any(|&v| g.value(v).rows() != len) {
            return Err(Error::shape("stacked branches need equal sequence lengths"));
        }
        let x = if seqs.len() == 1 { seqs[0] } else { g.concat_rows(&seqs)? };
        let (out, heads) = block_forward(g, store, block, x, self.cfg.heads, seqs.len())?;
        let mut states = Vec::with_capacity(branches.len());
        let mut attn = Vec::with_capacity(branches.len());
        for (i, &(state, _)) in branches.iter().enumerate() {
            let keep = 1 + state.patches;
            let tokens = if branches.len() == 1 && keep == len {
                out
            } else {
                g.slice_rows(out, i * len, keep)?
            };
            states.push(TokenState { tokens, ..state });
            attn.push(LayerAttention {
                heads: heads.clone(),
                slot: i,
            });
        }
        Ok((states, attn))
    }

    /// The prompt tokens task `task` feeds into 1-based `layer`, or `None`
    /// when that layer takes no prompts.
    pub fn compose_prompts<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        task: usize,
        layer: usize,
    ) -> Result<Option<Var>> {
        let cfg = &self.cfg;
        if !cfg.is_prompt_layer(layer) {
            return Ok(None);
        }
        if task >= self.tasks {
            return Err(Error::config(format!("task {task} out of range 0..{}", self.tasks)));
        }
        let li = layer - cfg.prompt_start;
        let specific = |g: &mut Graph<F>, t: usize| -> Option<Var> {
            self.bank.specific[t].get(li).map(|&id| g.param(store, id))
        };
        let unified = |g: &mut Graph<F>| -> Option<Var> {
            self.bank.unified.as_ref().map(|u| g.param(store, u[li]))
        };
        Ok(match cfg.unified_mode {
            UnifiedMode::None => specific(g, task),
            UnifiedMode::UnifiedOnly => unified(g),
            UnifiedMode::Concat => match (specific(g, task), unified(g)) {
                (Some(s), Some(u)) => Some(g.concat_rows(&[s, u])?),
                (s, u) => s.or(u),
            },
            UnifiedMode::Add => match (specific(g, task), unified(g)) {
                (Some(s), Some(u)) => Some(g.add(s, u)?),
                (s, u) => s.or(u),
            },
            UnifiedMode::CrossPromptAttention => {
                let Some(own) = specific(g, task) else { return Ok(None) };
                let all: Vec<Var> = (0..self.tasks).filter_map(|t| specific(g, t)).collect();
                let stacked = g.concat_rows(&all)?;
                let scores = g.matmul_t(stacked, stacked, false, true)?;
                let scores = g.scale(scores, 1.0 / (cfg.dim as f64).sqrt());
                let attn = g.softmax_rows(scores);
                let mixed = g.matmul(attn, stacked)?;
                let n = cfg.prompts;
                let mut acc = g.slice_rows(mixed, 0, n)?;
                for t in 1..self.tasks {
                    let part = g.slice_rows(mixed, t * n, n)?;
                    acc = g.add(acc, part)?;
                }
                let fused = g.scale(acc, 1.0 / self.tasks as f64);
                Some(g.add(own, fused)?)
            }
        })
    }

    /// Encode one image for one task.
    pub fn encode<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        image: &Tensor<F>,
        task: usize,
    ) -> Result<EncoderOutput> {
        if task >= self.tasks {
            return Err(Error::config(format!("task {task} out of range 0..{}", self.tasks)));
        }
        let weights = self.weights_for(task);
        let mut state = self.patch_embed(g, store, weights, image)?;
        let mut out = EncoderOutput {
            final_state: state,
            taps: Vec::new(),
            layer_patches: Vec::new(),
            attention: Vec::new(),
        };
        for l in 1..=self.cfg.layers {
            let prompts = self.compose_prompts(g, store, task, l)?;
            let (next, attn) = self.prompt_layer_traced(g, store, &weights.layers[l - 1], state, prompts)?;
            state = next;
            self.record(g, &mut out, state, attn, l)?;
        }
        out.final_state = state;
        Ok(out)
    }

    fn record<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        out: &mut EncoderOutput,
        state: TokenState,
        attn: LayerAttention,
        layer: usize,
    ) -> Result<()> {
        let patches = state.patch_tokens(g)?;
        if self.cfg.tap_layers.contains(&layer) {
            out.taps.push(patches);
        }
        out.layer_patches.push(patches);
        out.attention.push(attn);
        Ok(())
    }

    /// Encode one image for every task. `prompt_owner[t]` names the task
    /// whose prompts branch `t` uses (identity for normal inference).
    /// Branches whose computation is provably identical share nodes, so
    /// outputs are bitwise equal to per-task [`Encoder::encode`] calls.
    pub fn encode_all<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        image: &Tensor<F>,
        prompt_owner: &[usize],
    ) -> Result<Vec<EncoderOutput>> {
        if prompt_owner.len() != self.tasks || prompt_owner.iter().any(|&o| o >= self.tasks) {
            return Err(Error::config(format!("prompt owners {prompt_owner:?} invalid for {} tasks", self.tasks)));
        }
        struct Group {
            tasks: Vec<usize>,
            state: TokenState,
            out: EncoderOutput,
        }
        let empty = |state| EncoderOutput {
            final_state: state,
            taps: Vec::new(),
            layer_patches: Vec::new(),
            attention: Vec::new(),
        };
        let mut groups: Vec<Group> = if self.cfg.shared_encoder {
            let state = self.patch_embed(g, store, &self.weights[0], image)?;
            vec![Group {
                tasks: (0..self.tasks).collect(),
                state,
                out: empty(state),
            }]
        } else {
            (0..self.tasks)
                .map(|t| {
                    let state = self.patch_embed(g, store, &self.weights[t], image)?;
                    Ok(Group {
                        tasks: vec![t],
                        state,
                        out: empty(state),
                    })
                })
                .collect::<Result<_>>()?
        };

        for l in 1..=self.cfg.layers {
            if self.cfg.task_dependent_layer(l) {
                let mut split = Vec::new();
                for grp in groups {
                    let mut keys: Vec<usize> = grp.tasks.iter().map(|&t| prompt_owner[t]).collect();
                    keys.sort_unstable();
                    keys.dedup();
                    if keys.len() == 1 {
                        split.push(grp);
                        continue;
                    }
                    for k in keys {
                        split.push(Group {
                            tasks: grp.tasks.iter().copied().filter(|&t| prompt_owner[t] == k).collect(),
                            state: grp.state,
                            out: grp.out.clone(),
                        });
                    }
                }
                groups = split;
            }
            // groups sharing weights run stacked
            let mut done = vec![false; groups.len()];
            for i in 0..groups.len() {
                if done[i] {
                    continue;
                }
                let widx = self.weight_index(groups[i].tasks[0]);
                let members: Vec<usize> = (i..groups.len())
                    .filter(|&j| !done[j] && self.weight_index(groups[j].tasks[0]) == widx)
                    .collect();
                let mut branches = Vec::with_capacity(members.len());
                for &j in &members {
                    done[j] = true;
                    let lead = groups[j].tasks[0];
                    let prompts = self.compose_prompts(g, store, prompt_owner[lead], l)?;
                    branches.push((groups[j].state, prompts));
                }
                let block = &self.weights[widx].layers[l - 1];
                let (states, attn) = self.grouped_layer(g, store, block, &branches)?;
                for ((&j, state), a) in members.iter().zip(states).zip(attn) {
                    groups[j].state = state;
                    let grp = &mut groups[j];
                    self.record(g, &mut grp.out, state, a, l)?;
                }
            }
        }

        let mut per_task: Vec<Option<EncoderOutput>> = vec![None; self.tasks];
        for grp in groups {
            let mut out = grp.out;
            out.final_state = grp.state;
            for &t in &grp.tasks {
                per_task[t] = Some(out.clone());
            }
        }
        Ok(per_task.into_iter().map(|o| o.expect("every task assigned")).collect())
    }
}

/// Multi-head scaled dot-product self-attention with output projection,
/// applied independently to `groups` equal-length sequences stacked
/// row-wise in `x`. Returns the output and per-head probabilities
/// `[groups × s × s]`.
pub fn msa<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    block: &BlockParams,
    x: Var,
    heads: usize,
    groups: usize,
) -> Result<(Var, Vec<Var>)> {
    let rows = g.value(x).rows();
    let dim = g.value(x).last_dim();
    if groups == 0 || rows % groups != 0 {
        return Err(Error::shape(format!("{rows} tokens do not split into {groups} groups")));
    }
    let s = rows / groups;
    let d = dim / heads;
    let qkv = block.qkv.forward(g, store, x)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut part = |off: usize| -> Result<Var> {
            let v = g.slice_cols(qkv, off + h * d, d)?;
            g.reshape(v, &[groups, s, d])
        };
        let (q, k, v) = (part(0)?, part(dim)?, part(2 * dim)?);
        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, scale);
        let a = g.softmax_rows(scores);
        let o = g.batch_matmul(a, v, false)?;
        outs.push(g.reshape(o, &[rows, d])?);
        probs.push(a);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((block.proj.forward(g, store, cat)?, probs))
}

/// Pre-norm block `x + MSA(LN(x))` then `+ MLP(LN(·))`, attention grouped
/// as in [`msa`].
pub fn block_forward<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    block: &BlockParams,
    x: Var,
    heads: usize,
    groups: usize,
) -> Result<(Var, Vec<Var>)> {
    let h = block.ln1.forward(g, store, x)?;
    let (a, probs) = msa(g, store, block, h, heads, groups)?;
    let x = g.add(x, a)?;
    Ok((block.mlp_residual(g, store, x)?, probs))
}
