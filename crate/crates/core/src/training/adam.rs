use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};
use crate::params::{Gradients, ParamStore};

/// Adam with bias correction and decoupled weight decay. Parameters that
/// received no gradient are treated as having a zero gradient.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |(_, _, t): (_, &str, &Tensor<F>)| Tensor::zeros(t.shape());
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn from_config(store: &ParamStore<F>, cfg: &TrainConfig) -> Self {
        Adam::new(store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Every gradient is checked before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64, weight_decay: f64) -> Result<()> {
        for (id, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let shrink = F::of(1.0 - lr * weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let g = grads.get(id);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j].f64());
                let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
                m[j] = F::of(mj);
                v[j] = F::of(vj);
                let mhat = mj / c1;
                let vhat = vj / c2;
                p[j] = p[j] * shrink - F::of(lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}
