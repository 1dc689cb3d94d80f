//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is the tape: every op appends a node whose inputs are
//! earlier nodes, so node order is a topological order and `backward`
//! simply walks it in reverse.

use std::collections::HashMap;

use super::kernels::{self, MatRef};
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable op defined outside the core op set (losses, mostly).
pub trait CustomOp<F: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient.
    /// `None` marks an input as non-differentiable (labels, masks).
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Swap01(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Gelu(Var, Vec<F>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Index { x: Var, at: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    DepthToSpace { x: Var, h: usize, w: usize, k: usize },
    Bilinear { x: Var, ih: usize, iw: usize, oh: usize, ow: usize },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F>> },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Tensor<F>>,
}

/// The tape. Confined to one thread; build one per forward pass.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    bound: HashMap<ParamId, Var>,
    ln_eps: F,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            ln_eps: F::of(1e-5),
        }
    }

    /// Graph with a non-default layer-norm epsilon.
    pub fn with_ln_eps(eps: f64) -> Self {
        Graph {
            ln_eps: F::of(eps),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// A leaf node.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Bind a trainable parameter from `store` as a leaf. Binding the same
    /// parameter twice returns the same node, so fan-out accumulates.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.leaf(store.value(id).clone(), trainable);
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    /// Bind a parameter but substitute its value (used for prompt swaps).
    pub fn param_with_value(&mut self, id: ParamId, value: Tensor<F>) -> Var {
        let v = self.leaf(value, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `(param, gradient)` pairs for every bound parameter that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_ref()?)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = F::of(c);
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `x * s` for a single-element `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::shape(format!("scale_by needs a scalar, got {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    /// Broadcast-add a row vector `b[c]` to every row of `x[.. × c]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).numel() != c {
            return Err(Error::shape(format!(
                "add_row: bias {:?} vs rows of {c}",
                self.shape(b)
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for r in out.data_mut().chunks_exact_mut(c) {
            for (o, &bv) in r.iter_mut().zip(&bias) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    fn mat_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(format!("{what}: expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.mat_dims(a, "matmul lhs")?;
        let (br, bc) = self.mat_dims(b, "matmul rhs")?;
        let av = MatRef::new(self.value(a).data(), ar, ac, ta);
        let bv = MatRef::new(self.value(b).data(), br, bc, tb);
        if av.cols != bv.rows {
            return Err(Error::shape(format!(
                "matmul inner dims: {}x{} · {}x{}",
                av.rows, av.cols, bv.rows, bv.cols
            )));
        }
        let (m, n) = (av.rows, bv.cols);
        let mut out = vec![F::zero(); m * n];
        kernels::gemm(av, bv, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Batched product of `a[B×m×k]` with `b[B×k×n]` (or `b[B×n×k]` when `tb`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape(format!("batch_matmul: {sa:?} · {sb:?}")));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape(format!("batch_matmul inner dims: {sa:?} · {sb:?}")));
        }
        let mut out = vec![F::zero(); bsz * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bsz {
                let av = MatRef::new(&ad[i * m * k..(i + 1) * m * k], m, k, false);
                let bv = MatRef::new(&bd[i * sb[1] * sb[2]..(i + 1) * sb[1] * sb[2]], sb[1], sb[2], tb);
                kernels::gemm_auto(av, bv, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![bsz, m, n], out), Op::BatchMatMul { a, b, tb }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    /// `[a × b × c] → [b × a × c]`.
    pub fn swap01(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape(format!("swap01 needs rank 3, got {s:?}")));
        }
        let out = swap01_data(self.value(x).data(), s[0], s[1], s[2]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![s[1], s[0], s[2]], out), Op::Swap01(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let mut out = vec![F::zero(); t.numel()];
        kernels::softmax_rows(t.data(), c, &mut out);
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::shape(format!(
                "layer_norm: features {d}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let t = self.value(x);
        let rows = t.rows();
        let mut out = vec![F::zero(); t.numel()];
        let mut xhat = vec![F::zero(); t.numel()];
        let mut rstd = vec![F::zero(); rows];
        kernels::layer_norm(
            t.data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            self.ln_eps,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tanh: Vec<F> = xv.data().iter().map(|&v| kernels::gelu_tanh(v)).collect();
        let data = xv.data().iter().zip(&tanh).map(|(&v, &t)| kernels::gelu_from_tanh(v, t)).collect();
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x, tanh), rg)
    }

    /// Concatenate along the first axis; trailing extents must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(format!("concat_rows: {s:?} vs tail {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `x[start..start+len]` along the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::shape(format!("slice_rows {start}+{len} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceRows { x, start }, rg))
    }

    /// Concatenate along the last axis; leading extents must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols of nothing"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = numel(&lead);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape(format!("concat_cols: {s:?} vs lead {lead:?}")));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s[s.len() - 1];
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("slice_cols {start}+{len} of {s:?}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceCols { x, start }, rg))
    }

    /// Flat element `at` as a single-element tensor.
    pub fn index(&mut self, x: Var, at: usize) -> Result<Var> {
        let t = self.value(x);
        if at >= t.numel() {
            return Err(Error::shape(format!("index {at} of {:?}", t.shape())));
        }
        let out = Tensor::scalar(t.data()[at]);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Index { x, at }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / F::of(t.numel() as f64));
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    /// Mean over all rows of the matrix view: `[.. × c] → [1 × c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.last_dim();
        let inv = F::one() / F::of(t.rows() as f64);
        let mut out = vec![F::zero(); c];
        for r in t.data().chunks_exact(c) {
            for (o, &v) in out.iter_mut().zip(r) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let rg = self.rg(&[x]);
        self.push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(x), rg)
    }

    /// Unpack `[h·w × k·k·c]` (per-pixel k×k blocks) into a `[h·k × w·k × c]` map.
    pub fn depth_to_space(&mut self, x: Var, h: usize, w: usize, k: usize) -> Result<Var> {
        let t = self.value(x);
        if t.numel() % (h * w * k * k) != 0 {
            return Err(Error::shape(format!("depth_to_space {h}x{w} k={k} of {:?}", t.shape())));
        }
        let c = t.numel() / (h * w * k * k);
        let mut out = vec![F::zero(); t.numel()];
        kernels::depth_to_space(t.data(), &mut out, h, w, k, c, false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![h * k, w * k, c], out),
            Op::DepthToSpace { x, h, w, k },
            rg,
        ))
    }

    /// Bilinear resize of a channels-last `[ih × iw × c]` map.
    pub fn bilinear(&mut self, x: Var, ih: usize, iw: usize, oh: usize, ow: usize) -> Result<Var> {
        let t = self.value(x);
        if t.numel() % (ih * iw) != 0 {
            return Err(Error::shape(format!("bilinear {ih}x{iw} of {:?}", t.shape())));
        }
        let c = t.numel() / (ih * iw);
        let mut out = vec![F::zero(); oh * ow * c];
        kernels::bilinear(t.data(), &mut out, ih, iw, oh, ow, c, false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![oh, ow, c], out),
            Op::Bilinear { x, ih, iw, oh, ow },
            rg,
        ))
    }

    /// Record an externally defined op with an already computed output.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a single-element `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lt.item())));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), F::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (input, gi) in self.input_grads(i, g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: Tensor<F>) -> Vec<(Var, Tensor<F>)> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if need(*a) && need(*b) {
                    out.push((*a, g.clone()));
                    out.push((*b, g));
                } else {
                    out.push((if need(*a) { *a } else { *b }, g));
                }
            }
            Op::Sub(a, b) => {
                if need(*b) {
                    out.push((*b, g.map(|x| -x)));
                }
                out.push((*a, g));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.zip_map(val(*b), |x, y| x * y)));
                }
                if need(*b) {
                    out.push((*b, g.zip_map(val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.map(|x| x * *c))),
            Op::ScaleBy(x, s) => {
                let c = val(*s).item();
                if need(*x) {
                    out.push((*x, g.map(|v| v * c)));
                }
                if need(*s) {
                    let dot: F = g.data().iter().zip(val(*x).data()).map(|(&a, &b)| a * b).sum();
                    out.push((*s, Tensor::from_parts(val(*s).shape().to_vec(), vec![dot])));
                }
            }
            Op::AddRow(x, b) => {
                if need(*b) {
                    let c = g.last_dim();
                    let mut db = vec![F::zero(); c];
                    for r in g.data().chunks_exact(c) {
                        for (d, &v) in db.iter_mut().zip(r) {
                            *d = *d + v;
                        }
                    }
                    out.push((*b, Tensor::from_parts(val(*b).shape().to_vec(), db)));
                }
                out.push((*x, g));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (at, bt) = (val(*a), val(*b));
                let av = MatRef::new(at.data(), at.shape()[0], at.shape()[1], *ta);
                let bv = MatRef::new(bt.data(), bt.shape()[0], bt.shape()[1], *tb);
                let gv = MatRef::new(g.data(), av.rows, bv.cols, false);
                if need(*a) {
                    let mut da = vec![F::zero(); at.numel()];
                    if *ta {
                        // stored A is k×m: dA = op(B) · gᵀ
                        kernels::gemm(bv, gv.t(), &mut da, false);
                    } else {
                        kernels::gemm(gv, bv.t(), &mut da, false);
                    }
                    out.push((*a, Tensor::from_parts(at.shape().to_vec(), da)));
                }
                if need(*b) {
                    let mut db = vec![F::zero(); bt.numel()];
                    if *tb {
                        // stored B is n×k: dB = gᵀ · op(A)
                        kernels::gemm(gv.t(), av, &mut db, false);
                    } else {
                        kernels::gemm(av.t(), gv, &mut db, false);
                    }
                    out.push((*b, Tensor::from_parts(bt.shape().to_vec(), db)));
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let (at, bt) = (val(*a), val(*b));
                let (bsz, m, k) = (at.shape()[0], at.shape()[1], at.shape()[2]);
                let (sb1, sb2) = (bt.shape()[1], bt.shape()[2]);
                let n = if *tb { sb1 } else { sb2 };
                let mut da = vec![F::zero(); at.numel()];
                let mut db = vec![F::zero(); bt.numel()];
                for i in 0..bsz {
                    let ad = &at.data()[i * m * k..(i + 1) * m * k];
                    let bd = &bt.data()[i * sb1 * sb2..(i + 1) * sb1 * sb2];
                    let gd = &g.data()[i * m * n..(i + 1) * m * n];
                    let av = MatRef::new(ad, m, k, false);
                    let bv = MatRef::new(bd, sb1, sb2, *tb);
                    let gv = MatRef::new(gd, m, n, false);
                    if need(*a) {
                        kernels::gemm_auto(gv, bv.t(), &mut da[i * m * k..(i + 1) * m * k], false);
                    }
                    if need(*b) {
                        let slot = &mut db[i * sb1 * sb2..(i + 1) * sb1 * sb2];
                        if *tb {
                            kernels::gemm_auto(gv.t(), av, slot, false);
                        } else {
                            kernels::gemm_auto(av.t(), gv, slot, false);
                        }
                    }
                }
                if need(*a) {
                    out.push((*a, Tensor::from_parts(at.shape().to_vec(), da)));
                }
                if need(*b) {
                    out.push((*b, Tensor::from_parts(bt.shape().to_vec(), db)));
                }
            }
            Op::Transpose(a) => out.push((*a, g.transpose().expect("rank-2 grad"))),
            Op::Swap01(x) => {
                let s = g.shape();
                let d = swap01_data(g.data(), s[0], s[1], s[2]);
                out.push((*x, Tensor::from_parts(val(*x).shape().to_vec(), d)));
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                out.push((*x, g.reshape(&shape).expect("same numel")));
            }
            Op::Softmax(x) => {
                let mut dx = vec![F::zero(); g.numel()];
                kernels::softmax_rows_backward(node.value.data(), g.data(), g.last_dim(), &mut dx);
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), dx)));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = val(*gamma);
                let mut dx = need(*x).then(|| vec![F::zero(); g.numel()]);
                let mut dg = need(*gamma).then(|| vec![F::zero(); gm.numel()]);
                let mut dbeta = need(*beta).then(|| vec![F::zero(); gm.numel()]);
                kernels::layer_norm_backward(
                    g.data(),
                    gm.data(),
                    xhat,
                    rstd,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    dbeta.as_deref_mut(),
                );
                if let Some(d) = dx {
                    out.push((*x, Tensor::from_parts(g.shape().to_vec(), d)));
                }
                if let Some(d) = dg {
                    out.push((*gamma, Tensor::from_parts(gm.shape().to_vec(), d)));
                }
                if let Some(d) = dbeta {
                    out.push((*beta, Tensor::from_parts(val(*beta).shape().to_vec(), d)));
                }
            }
            Op::Gelu(x, tanh) => {
                let d = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .zip(tanh)
                    .map(|((&gv, &xv), &t)| gv * kernels::gelu_grad_from_tanh(xv, t))
                    .collect();
                out.push((*x, Tensor::from_parts(g.shape().to_vec(), d)));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if need(p) {
                        let d = g.data()[off..off + n].to_vec();
                        out.push((p, Tensor::from_parts(val(p).shape().to_vec(), d)));
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xt = val(*x);
                let inner = xt.numel() / xt.shape()[0];
                let mut d = vec![F::zero(); xt.numel()];
                d[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                out.push((*x, Tensor::from_parts(xt.shape().to_vec(), d)));
            }
            Op::ConcatCols(parts) => {
                let total = g.last_dim();
                let rows = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).last_dim();
                    if need(p) {
                        let mut d = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        out.push((p, Tensor::from_parts(val(p).shape().to_vec(), d)));
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let xt = val(*x);
                let c = xt.last_dim();
                let len = g.last_dim();
                let mut d = vec![F::zero(); xt.numel()];
                for r in 0..xt.rows() {
                    d[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
                }
                out.push((*x, Tensor::from_parts(xt.shape().to_vec(), d)));
            }
            Op::Index { x, at } => {
                let mut d = Tensor::zeros(val(*x).shape());
                d.data_mut()[*at] = g.item();
                out.push((*x, d));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape(), g.item()))),
            Op::Mean(x) => {
                let n = F::of(val(*x).numel() as f64);
                out.push((*x, Tensor::full(val(*x).shape(), g.item() / n)));
            }
            Op::MeanRows(x) => {
                let xt = val(*x);
                let inv = F::one() / F::of(xt.rows() as f64);
                let row: Vec<F> = g.data().iter().map(|&v| v * inv).collect();
                let mut d = Vec::with_capacity(xt.numel());
                for _ in 0..xt.rows() {
                    d.extend_from_slice(&row);
                }
                out.push((*x, Tensor::from_parts(xt.shape().to_vec(), d)));
            }
            Op::DepthToSpace { x, h, w, k } => {
                let xt = val(*x);
                let c = xt.numel() / (h * w * k * k);
                let mut d = vec![F::zero(); xt.numel()];
                kernels::depth_to_space(g.data(), &mut d, *h, *w, *k, c, true);
                out.push((*x, Tensor::from_parts(xt.shape().to_vec(), d)));
            }
            Op::Bilinear { x, ih, iw, oh, ow } => {
                let xt = val(*x);
                let c = xt.numel() / (ih * iw);
                let mut d = vec![F::zero(); xt.numel()];
                kernels::bilinear(g.data(), &mut d, *ih, *iw, *oh, *ow, c, true);
                out.push((*x, Tensor::from_parts(xt.shape().to_vec(), d)));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|&v| val(v)).collect();
                for (v, gi) in inputs.iter().zip(op.backward(&ins, &node.value, &g)) {
                    if let Some(gi) = gi {
                        out.push((*v, gi));
                    }
                }
            }
        }
        out
    }
}

fn swap01_data<F: Copy>(src: &[F], a: usize, b: usize, c: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..b {
        for i in 0..a {
            let at = (i * b + j) * c;
            out.extend_from_slice(&src[at..at + c]);
        }
    }
    out
}
