//! The full network: prompted encoder, feature fusion, decoder and heads.

use std::path::Path;

use crate::config::{Config, FusionMode};
use crate::data::mtt::{self, NamedTensor};
use crate::data::Sample;
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::fusion::Fusion;
use crate::losses::{self, TotalLoss};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::ParamStore;
use crate::task::Task;

#[derive(Clone, Debug)]
pub struct Model<F: Scalar> {
    pub cfg: Config,
    pub seed: u64,
    pub store: ParamStore<F>,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

/// Nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Per-task predictions `[H × W × C]`, in task order.
    pub preds: Vec<Var>,
    pub encoded: Vec<EncoderOutput>,
    /// Fused maps, finest first.
    pub fused: Vec<Var>,
    pub aux: Vec<Var>,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let tasks = cfg.num_tasks();
        let encoder = Encoder::build(&cfg.encoder, tasks, &mut store, seed)?;
        let fusion = Fusion::build(
            &cfg.fusion,
            tasks,
            cfg.encoder.grid(),
            &cfg.encoder.scale_factors(),
            cfg.encoder.dim,
            cfg.decoder.dim,
            &mut store,
            seed,
        )?;
        let decoder = Decoder::build(&cfg.decoder, &cfg.tasks, cfg.encoder.dim, &mut store, seed)?;
        Ok(Model {
            cfg: cfg.clone(),
            seed,
            store,
            encoder,
            fusion,
            decoder,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.cfg.tasks
    }

    /// Every branch uses its own prompts.
    pub fn own_prompts(&self) -> Vec<usize> {
        (0..self.cfg.num_tasks()).collect()
    }

    pub fn image_tensor(&self, sample: &Sample) -> Tensor<F> {
        sample.image.cast()
    }

    /// Forward one image. `owners[t]` selects the prompts used by branch `t`.
    pub fn forward(&self, g: &mut Graph<F>, image: &Tensor<F>, owners: &[usize]) -> Result<Forward> {
        let enc = &self.cfg.encoder;
        let expect = [enc.image_h, enc.image_w, enc.in_channels];
        if image.shape() != expect {
            return Err(Error::shape(format!("image {:?}, model expects {expect:?}", image.shape())));
        }
        let encoded = self.encoder.encode_all(g, &self.store, image, owners)?;
        let fused = if self.cfg.fusion.mode == FusionMode::None {
            // nothing flows through zero fusion, so skip the upsampling work
            self.fusion
                .spatial()
                .into_iter()
                .map(|(h, w)| g.constant(Tensor::zeros(&[h, w, self.cfg.decoder.dim])))
                .collect()
        } else {
            let fs = self.fusion.unfold_and_upsample(g, &self.store, &encoded)?;
            self.fusion.fuse(g, &self.store, &fs)?
        };
        let final_tokens = encoded
            .iter()
            .map(|o| o.final_state.patch_tokens(g))
            .collect::<Result<Vec<_>>>()?;
        let out_hw = (enc.image_h, enc.image_w);
        let feats = self
            .decoder
            .decode_native(g, &self.store, &final_tokens, enc.grid(), &fused)?;
        let preds = feats
            .into_iter()
            .enumerate()
            .map(|(t, f)| self.decoder.predict_resized(g, &self.store, f, t, out_hw))
            .collect::<Result<Vec<_>>>()?;
        let aux = if self.cfg.decoder.aux_heads {
            let coarsest = *fused.last().expect("at least one scale");
            (0..self.cfg.num_tasks())
                .map(|t| self.decoder.aux_head(g, &self.store, coarsest, t, out_hw))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Forward {
            preds,
            encoded,
            fused,
            aux,
        })
    }

    /// Forward plus the weighted multi-task loss (auxiliary heads, when
    /// enabled, add their own weighted terms).
    pub fn loss(&self, g: &mut Graph<F>, sample: &Sample, owners: &[usize]) -> Result<(Forward, TotalLoss)> {
        let image = self.image_tensor(sample);
        let fwd = self.forward(g, &image, owners)?;
        let pairs: Vec<(Task, Var)> = self.cfg.tasks.iter().copied().zip(fwd.preds.iter().copied()).collect();
        let mut total = losses::total_loss(g, &pairs, sample, &self.cfg.loss)?;
        if !fwd.aux.is_empty() {
            let aux: Vec<(Task, Var)> = self.cfg.tasks.iter().copied().zip(fwd.aux.iter().copied()).collect();
            let extra = losses::total_loss(g, &aux, sample, &self.cfg.loss)?;
            total.loss = g.add(total.loss, extra.loss)?;
        }
        Ok((fwd, total))
    }

    /// Predictions without gradient bookkeeping beyond one throwaway tape.
    pub fn predict(&self, image: &Tensor<F>, owners: &[usize]) -> Result<Vec<Tensor<F>>> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, image, owners)?;
        Ok(fwd.preds.iter().map(|&p| g.value(p).clone()).collect())
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            seed: self.seed,
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.store
            .iter()
            .map(|(_, name, t)| NamedTensor::from_tensor(name, t))
            .collect()
    }

    pub fn load_named(&mut self, entries: &[NamedTensor]) -> Result<()> {
        let named = entries
            .iter()
            .map(|e| Ok((e.name.clone(), e.to_tensor::<F>()?)))
            .collect::<Result<Vec<_>>>()?;
        self.store.load_named(&named)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        mtt::write_mtt(path, &self.to_named())
    }

    /// Build the architecture from `cfg` and overwrite every weight from `path`.
    pub fn load(cfg: &Config, seed: u64, path: &Path) -> Result<Self> {
        let mut m = Model::new(cfg, seed)?;
        m.load_named(&mtt::read_mtt(path)?)?;
        Ok(m)
    }
}
