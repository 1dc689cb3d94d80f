//! Small parameterised building blocks shared by encoder, fusion and decoder.

use crate::error::Result;
use crate::init;
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::params::{ParamId, ParamStore};

/// `y = x·W + b` with `W: in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Glorot-uniform weight, zero bias, registered as `{name}.w` / `{name}.b`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        seed: u64,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        let wn = format!("{name}.w");
        let w = store.add(&wn, init::xavier(seed, &wn, fan_in, fan_out))?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear { w, b })
    }

    pub fn with_values<F: Scalar>(store: &mut ParamStore<F>, name: &str, w: Tensor<F>, b: Tensor<F>) -> Result<Self> {
        let w = store.add(format!("{name}.w"), w)?;
        let b = store.add(format!("{name}.b"), b)?;
        Ok(Linear { w, b })
    }

    /// Apply to the matrix view `[rows × in]` of `x`; leading shape is kept.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = g.value(x).rows();
        let flat = if shape.len() == 2 {
            x
        } else {
            g.reshape(x, &[rows, shape[shape.len() - 1]])?
        };
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(flat, w)?;
        let y = g.add_row(y, b)?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = g.value(y).last_dim();
            g.reshape(y, &out)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.w"), Tensor::ones(&[dim]))?;
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(Norm { gamma, beta })
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gm = g.param(store, self.gamma);
        let bt = g.param(store, self.beta);
        g.layer_norm(x, gm, bt)
    }
}

/// Pre-norm transformer block parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: Norm,
    pub mlp1: Linear,
    pub mlp2: Linear,
}

impl BlockParams {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        seed: u64,
        prefix: &str,
        dim: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(BlockParams {
            ln1: Norm::new(store, &format!("{prefix}.ln1"), dim)?,
            qkv: Linear::new(store, seed, &format!("{prefix}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, seed, &format!("{prefix}.proj"), dim, dim)?,
            ln2: Norm::new(store, &format!("{prefix}.ln2"), dim)?,
            mlp1: Linear::new(store, seed, &format!("{prefix}.mlp1"), dim, hidden)?,
            mlp2: Linear::new(store, seed, &format!("{prefix}.mlp2"), hidden, dim)?,
        })
    }

    /// `x + mlp2(gelu(mlp1(ln2(x))))`.
    pub fn mlp_residual<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.ln2.forward(g, store, x)?;
        let h = self.mlp1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.mlp2.forward(g, store, h)?;
        g.add(x, h)
    }
}
