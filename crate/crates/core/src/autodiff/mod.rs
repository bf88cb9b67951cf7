//! Tape-based reverse-mode differentiation over the fixed operation set used by the model.
//!
//! Sequence tensors are `[E, C, L]` (epochs, channels, time). Nodes are appended in
//! evaluation order, so reverse index order is a valid reverse topological order.

mod check;
mod ops;
mod params;

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use thiserror::Error;

use crate::ssm::{compute_kernel, kernel_vjp, modal_scan_block, modal_scan_block_backward, ModalScratch, FftConvolver, SsmError, SsmParams};
use crate::tensor::{gemm, Real, Tensor};

pub use check::{grad_check, rel_err};
pub use params::{ParamId, ParamStore};

/// Lower and upper clamp applied to probabilities inside the BCE loss.
pub const PROB_CLAMP: f64 = 1e-7;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error(transparent)]
    Ssm(#[from] SsmError),
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T, GraphError> {
    Err(GraphError::Shape(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu { x: Var, t: Vec<T> },
    Sigmoid(Var),
    Reshape(Var),
    Transpose2(Var),
    FlipTime(Var),
    Concat(Var, Var),
    MeanTime(Var),
    ChannelScale { x: Var, d: Var },
    Conv1d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Pointwise { x: Var, w: Var, b: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    CausalConv { u: Var, k: Var, conv: Arc<FftConvolver<T>>, u_spec: Vec<Complex<T>>, k_spec: Vec<Complex<T>> },
    ModalConv { u: Var, modes: Var, rev: bool },
    SsmKernel { parents: [Var; 7], len: usize },
    Bce { p: Var, targets: Vec<T>, weights: Vec<T>, norm: T },
}

struct Node<T: Real> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use computation graph; build it, call [`Graph::backward`], read gradients.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    planner: RealFftPlanner<T>,
    convolvers: HashMap<usize, Arc<FftConvolver<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), planner: RealFftPlanner::new(), convolvers: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf; gradients are recorded only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, grad: None, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient after [`Graph::backward`]; zeros for nodes the loss does not reach.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        n.grad.clone().unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize), GraphError> {
        match *self.shape(v) {
            [e, c, l] => Ok((e, c, l)),
            ref s => shape_err(format!("{what}: expected [E, C, L], got {s:?}")),
        }
    }

    fn convolver(&mut self, len: usize) -> Arc<FftConvolver<T>> {
        let planner = &mut self.planner;
        self.convolvers
            .entry(len)
            .or_insert_with(|| Arc::new(FftConvolver::new(len, planner)))
            .clone()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let v = Tensor::from_vec(self.shape(a), data);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t: Vec<T> = x.data().iter().map(|&v| ops::gelu_tanh(v)).collect();
        let y = x.data().iter().zip(&t).map(|(&v, &tv)| ops::gelu_from_tanh(v, tv)).collect();
        let v = Tensor::from_vec(x.shape(), y);
        self.push(v, Op::Gelu { x: a, t }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(ops::sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let v = Tensor::try_from_vec(shape, self.value(a).data().to_vec())
            .ok_or_else(|| GraphError::Shape(format!("reshape {:?} -> {shape:?}", self.shape(a))))?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// `[r, c] -> [c, r]`.
    pub fn transpose2(&mut self, a: Var) -> Result<Var, GraphError> {
        let (r, c) = match *self.shape(a) {
            [r, c] => (r, c),
            ref s => return shape_err(format!("transpose2: expected 2-D, got {s:?}")),
        };
        let v = Tensor::from_vec(&[c, r], ops::transpose(self.value(a).data(), r, c));
        Ok(self.push(v, Op::Transpose2(a), &[a]))
    }

    pub fn flip_time(&mut self, a: Var) -> Result<Var, GraphError> {
        let (_, _, l) = self.dims3(a, "flip_time")?;
        let v = Tensor::from_vec(self.shape(a), ops::flip_rows(self.value(a).data(), l));
        Ok(self.push(v, Op::FlipTime(a), &[a]))
    }

    /// Channel concatenation `[E, C1, L] ++ [E, C2, L] -> [E, C1 + C2, L]`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let (e, c1, l) = self.dims3(a, "concat")?;
        let (e2, c2, l2) = self.dims3(b, "concat")?;
        if e != e2 || l != l2 {
            return shape_err(format!("concat: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(e * (c1 + c2) * l);
        for i in 0..e {
            out.extend_from_slice(&da[i * c1 * l..(i + 1) * c1 * l]);
            out.extend_from_slice(&db[i * c2 * l..(i + 1) * c2 * l]);
        }
        let v = Tensor::from_vec(&[e, c1 + c2, l], out);
        Ok(self.push(v, Op::Concat(a, b), &[a, b]))
    }

    /// `[E, C, L] -> [E, C]` arithmetic mean over time.
    pub fn mean_time(&mut self, a: Var) -> Result<Var, GraphError> {
        let (e, c, l) = self.dims3(a, "mean_time")?;
        let inv = T::one() / T::c(l as f64);
        let out = self.value(a).data().chunks(l).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let v = Tensor::from_vec(&[e, c], out);
        Ok(self.push(v, Op::MeanTime(a), &[a]))
    }

    /// `y[e, c, l] = d[c] x[e, c, l]`.
    pub fn channel_scale(&mut self, x: Var, d: Var) -> Result<Var, GraphError> {
        let (_, c, l) = self.dims3(x, "channel_scale")?;
        if self.shape(d) != [c] {
            return shape_err(format!("channel_scale: gains {:?} for {c} channels", self.shape(d)));
        }
        let dv = self.value(d).data();
        let out = self.value(x).data().iter().enumerate().map(|(i, &v)| v * dv[(i / l) % c]).collect();
        let v = Tensor::from_vec(self.shape(x), out);
        Ok(self.push(v, Op::ChannelScale { x, d }, &[x, d]))
    }

    /// 1-D convolution, `x: [E, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, GraphError> {
        let (e, cin, l) = self.dims3(x, "conv1d")?;
        let (cout, wcin, k) = self.dims3(w, "conv1d weight")?;
        if wcin != cin || self.shape(b) != [cout] || stride == 0 || l + 2 * pad < k {
            return shape_err(format!(
                "conv1d: input {:?}, weight {:?}, bias {:?}, stride {stride}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            ));
        }
        let lout = (l + 2 * pad - k) / stride + 1;
        let geom = ops::ConvGeom { cin, l, k, stride, pad, lout };
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); e * cout * lout];
        let mut col = vec![T::zero(); cin * k * lout];
        for i in 0..e {
            ops::im2col(&xd[i * cin * l..(i + 1) * cin * l], &geom, &mut col);
            let y = &mut out[i * cout * lout..(i + 1) * cout * lout];
            for (row, &bias) in y.chunks_mut(lout).zip(bd) {
                row.fill(bias);
            }
            gemm(cout, cin * k, lout, wd, false, &col, false, y, true);
        }
        let v = Tensor::from_vec(&[e, cout, lout], out);
        Ok(self.push(v, Op::Conv1d { x, w, b, stride, pad }, &[x, w, b]))
    }

    /// Channel mixing `y[e] = W x[e] + b`, `W: [Cout, Cin]`.
    pub fn pointwise(&mut self, x: Var, w: Var, b: Var) -> Result<Var, GraphError> {
        let (e, cin, l) = self.dims3(x, "pointwise")?;
        let (cout, wcin) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return shape_err(format!("pointwise weight: expected 2-D, got {s:?}")),
        };
        if wcin != cin || self.shape(b) != [cout] {
            return shape_err(format!("pointwise: input {:?}, weight {:?}", self.shape(x), self.shape(w)));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![T::zero(); e * cout * l];
        for i in 0..e {
            let y = &mut out[i * cout * l..(i + 1) * cout * l];
            for (row, &bias) in y.chunks_mut(l).zip(bd) {
                row.fill(bias);
            }
            gemm(cout, cin, l, wd, false, &xd[i * cin * l..(i + 1) * cin * l], false, y, true);
        }
        let v = Tensor::from_vec(&[e, cout, l], out);
        Ok(self.push(v, Op::Pointwise { x, w, b }, &[x, w, b]))
    }

    /// Normalizes each `x[e, :, l]` over channels, then applies `gamma`, `beta` (`[C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, GraphError> {
        let (e, c, l) = self.dims3(x, "layer_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("layer_norm: affine parameters must be [C]");
        }
        let (out, mean, rstd) = ops::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            e,
            c,
            l,
        );
        let v = Tensor::from_vec(&[e, c, l], out);
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, mean, rstd }, &[x, gamma, beta]))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::from_vec(self.shape(x), out);
        self.push(v, Op::Dropout { x, mask }, &[x])
    }

    /// Causal convolution of `u: [E, H, L]` with per-channel kernels `k: [H, L]`.
    pub fn causal_conv(&mut self, u: Var, k: Var) -> Result<Var, GraphError> {
        let (e, h, l) = self.dims3(u, "causal_conv")?;
        if self.shape(k) != [h, l] {
            return shape_err(format!("causal_conv: kernel {:?} for input {:?}", self.shape(k), self.shape(u)));
        }
        let conv = self.convolver(l);
        let (ud, kd) = (self.value(u).data(), self.value(k).data());
        let k_spec: Vec<Complex<T>> = kd.chunks(l).flat_map(|r| conv.spectrum(r)).collect();
        let bins = k_spec.len() / h;
        let mut u_spec = Vec::with_capacity(e * h * bins);
        let mut out = Vec::with_capacity(e * h * l);
        for (row_idx, row) in ud.chunks(l).enumerate() {
            let ch = row_idx % h;
            let spec = conv.spectrum(row);
            out.extend(conv.inverse(crate::ssm::spectral_product(&spec, &k_spec[ch * bins..(ch + 1) * bins])));
            u_spec.extend(spec);
        }
        let v = Tensor::from_vec(&[e, h, l], out);
        Ok(self.push(v, Op::CausalConv { u, k, conv, u_spec, k_spec }, &[u, k]))
    }

    /// Causal convolution of `u: [E, H, L]` with kernels given in modal form `[H, M, 4]`
    /// (see [`crate::ssm::modal_coefficients`]); `O(L M)` per row. `rev` makes it
    /// anti-causal, equal to flipping time before and after.
    pub fn modal_conv(&mut self, u: Var, modes: Var, rev: bool) -> Result<Var, GraphError> {
        let (e, h, l) = self.dims3(u, "modal_conv")?;
        let m = match *self.shape(modes) {
            [hh, m, 4] if hh == h && m > 0 => m,
            ref s => return shape_err(format!("modal_conv: modes {s:?} for input {:?}", self.shape(u))),
        };
        let (ud, md) = (self.value(u).data(), self.value(modes).data());
        debug_assert_eq!(md.len(), 4 * h * m);
        let mut out = vec![T::zero(); e * h * l];
        let mut scratch = ModalScratch::default();
        for (y, block) in out.chunks_mut(h * l).zip(ud.chunks(h * l)) {
            modal_scan_block(md, block, y, h, l, rev, &mut scratch);
        }
        let v = Tensor::from_vec(&[e, h, l], out);
        Ok(self.push(v, Op::ModalConv { u, modes, rev }, &[u, modes]))
    }

    /// SSM kernel `[H, L]` from parameter nodes `log_neg_a_re, a_im, b_re, b_im, c_re, c_im`
    /// (each `[H, M]`) and `log_dt` (`[H]`).
    pub fn ssm_kernel(&mut self, parents: [Var; 7], len: usize) -> Result<Var, GraphError> {
        let p = self.ssm_params(&parents)?;
        let k = compute_kernel(&p, len)?;
        let v = Tensor::from_vec(&[p.h, len], k);
        Ok(self.push(v, Op::SsmKernel { parents, len }, &parents))
    }

    fn ssm_params(&self, parents: &[Var; 7]) -> Result<SsmParams<T>, GraphError> {
        let (h, m) = match *self.shape(parents[0]) {
            [h, m] => (h, m),
            ref s => return shape_err(format!("ssm_kernel: expected [H, M] mode parameters, got {s:?}")),
        };
        if parents[1..6].iter().any(|&v| self.shape(v) != [h, m]) || self.shape(parents[6]) != [h] {
            return shape_err("ssm_kernel: parameter shapes disagree");
        }
        let get = |i: usize| self.value(parents[i]).data().to_vec();
        Ok(SsmParams {
            h,
            n: 2 * m,
            log_neg_a_re: get(0),
            a_im: get(1),
            b_re: get(2),
            b_im: get(3),
            c_re: get(4),
            c_im: get(5),
            d: vec![T::zero(); h],
            log_dt: get(6),
        })
    }

    /// `-sum w [t ln p + (1 - t) ln(1 - p)] / norm`, `p` clamped to `[1e-7, 1 - 1e-7]`.
    pub fn bce(&mut self, p: Var, targets: &[T], weights: &[T], norm: T) -> Result<Var, GraphError> {
        let n = self.value(p).numel();
        if targets.len() != n || weights.len() != n {
            return shape_err(format!("bce: {n} probabilities, {} targets, {} weights", targets.len(), weights.len()));
        }
        if !(norm > T::zero()) {
            return shape_err("bce: normalizer must be positive");
        }
        let loss = ops::bce_sum(self.value(p).data(), targets, weights) / norm;
        let op = Op::Bce { p, targets: targets.to_vec(), weights: weights.to_vec(), norm };
        Ok(self.push(Tensor::scalar(loss), op, &[p]))
    }

    /// Reverse accumulation from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), GraphError> {
        if self.value(loss).numel() != 1 {
            return Err(GraphError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g)?;
            for (var, grad) in contributions {
                let node = &mut self.nodes[var.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient contributions of node `i` to its parents given its output gradient `g`.
    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, GraphError> {
        let node = &self.nodes[i];
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let ga = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                let gb = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                out.push((*a, Tensor::from_vec(av.shape(), ga)));
                out.push((*b, Tensor::from_vec(bv.shape(), gb)));
            }
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * *s))),
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), gd[0]))),
            Op::Gelu { x: a, t } => {
                let x = val(*a);
                let d = x.data().iter().zip(t).zip(gd).map(|((&v, &tv), &gv)| gv * ops::gelu_grad_from_tanh(v, tv)).collect();
                out.push((*a, Tensor::from_vec(x.shape(), d)));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = y.data().iter().zip(gd).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                out.push((*a, Tensor::from_vec(y.shape(), d)));
            }
            Op::Reshape(a) => out.push((*a, Tensor::from_vec(val(*a).shape(), gd.to_vec()))),
            Op::Transpose2(a) => {
                let s = val(*a).shape();
                out.push((*a, Tensor::from_vec(s, ops::transpose(gd, s[1], s[0]))));
            }
            Op::FlipTime(a) => {
                let s = val(*a).shape();
                out.push((*a, Tensor::from_vec(s, ops::flip_rows(gd, s[2]))));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (e, c1, l, c2) = (sa[0], sa[1], sa[2], sb[1]);
                let mut ga = Vec::with_capacity(e * c1 * l);
                let mut gb = Vec::with_capacity(e * c2 * l);
                for blk in gd.chunks((c1 + c2) * l) {
                    ga.extend_from_slice(&blk[..c1 * l]);
                    gb.extend_from_slice(&blk[c1 * l..]);
                }
                out.push((*a, Tensor::from_vec(sa, ga)));
                out.push((*b, Tensor::from_vec(sb, gb)));
            }
            Op::MeanTime(a) => {
                let s = val(*a).shape();
                let inv = T::one() / T::c(s[2] as f64);
                let d = gd.iter().flat_map(|&v| std::iter::repeat_n(v * inv, s[2])).collect();
                out.push((*a, Tensor::from_vec(s, d)));
            }
            Op::ChannelScale { x, d } => {
                let (xv, dv) = (val(*x), val(*d));
                let (c, l) = (xv.shape()[1], xv.shape()[2]);
                if self.wants(*x) {
                    let gx = gd.iter().enumerate().map(|(j, &v)| v * dv.data()[(j / l) % c]).collect();
                    out.push((*x, Tensor::from_vec(xv.shape(), gx)));
                }
                if self.wants(*d) {
                    let mut gdv = vec![T::zero(); c];
                    for (j, (&gv, &xx)) in gd.iter().zip(xv.data()).enumerate() {
                        gdv[(j / l) % c] += gv * xx;
                    }
                    out.push((*d, Tensor::from_vec(&[c], gdv)));
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let (xv, wv) = (val(*x), val(*w));
                let (e, cin, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let lout = g.shape()[2];
                let geom = ops::ConvGeom { cin, l, k, stride: *stride, pad: *pad, lout };
                let mut gw = vec![T::zero(); cout * cin * k];
                let mut gb = vec![T::zero(); cout];
                let want_x = self.wants(*x);
                let mut gx = if want_x { vec![T::zero(); e * cin * l] } else { Vec::new() };
                let mut col = vec![T::zero(); cin * k * lout];
                for ei in 0..e {
                    let gy = &gd[ei * cout * lout..(ei + 1) * cout * lout];
                    ops::im2col(&xv.data()[ei * cin * l..(ei + 1) * cin * l], &geom, &mut col);
                    gemm(cout, lout, cin * k, gy, false, &col, true, &mut gw, true);
                    for (acc, row) in gb.iter_mut().zip(gy.chunks(lout)) {
                        *acc += row.iter().copied().sum::<T>();
                    }
                    if want_x {
                        gemm(cin * k, cout, lout, wv.data(), true, gy, false, &mut col, false);
                        ops::col2im(&col, &geom, &mut gx[ei * cin * l..(ei + 1) * cin * l]);
                    }
                }
                if want_x {
                    out.push((*x, Tensor::from_vec(xv.shape(), gx)));
                }
                out.push((*w, Tensor::from_vec(wv.shape(), gw)));
                out.push((*b, Tensor::from_vec(&[cout], gb)));
            }
            Op::Pointwise { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (e, cin, l) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let cout = wv.shape()[0];
                let mut gw = vec![T::zero(); cout * cin];
                let mut gb = vec![T::zero(); cout];
                let want_x = self.wants(*x);
                let mut gx = if want_x { vec![T::zero(); e * cin * l] } else { Vec::new() };
                for ei in 0..e {
                    let gy = &gd[ei * cout * l..(ei + 1) * cout * l];
                    let xe = &xv.data()[ei * cin * l..(ei + 1) * cin * l];
                    gemm(cout, l, cin, gy, false, xe, true, &mut gw, true);
                    for (acc, row) in gb.iter_mut().zip(gy.chunks(l)) {
                        *acc += row.iter().copied().sum::<T>();
                    }
                    if want_x {
                        gemm(cin, cout, l, wv.data(), true, gy, false, &mut gx[ei * cin * l..(ei + 1) * cin * l], false);
                    }
                }
                if want_x {
                    out.push((*x, Tensor::from_vec(xv.shape(), gx)));
                }
                out.push((*w, Tensor::from_vec(wv.shape(), gw)));
                out.push((*b, Tensor::from_vec(&[cout], gb)));
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = val(*x);
                let s = xv.shape();
                let (gx, gg, gbeta) =
                    ops::layer_norm_backward(xv.data(), val(*gamma).data(), mean, rstd, gd, s[0], s[1], s[2]);
                out.push((*x, Tensor::from_vec(s, gx)));
                out.push((*gamma, Tensor::from_vec(&[s[1]], gg)));
                out.push((*beta, Tensor::from_vec(&[s[1]], gbeta)));
            }
            Op::Dropout { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&v, &m)| v * m).collect();
                out.push((*x, Tensor::from_vec(val(*x).shape(), d)));
            }
            Op::CausalConv { u, k, conv, u_spec, k_spec } => {
                let s = val(*u).shape();
                let (h, l) = (s[1], s[2]);
                let bins = k_spec.len() / h;
                let want_u = self.wants(*u);
                let mut gu = if want_u { Vec::with_capacity(gd.len()) } else { Vec::new() };
                let mut gk_spec = vec![Complex::new(T::zero(), T::zero()); h * bins];
                for (row_idx, row) in gd.chunks(l).enumerate() {
                    let ch = row_idx % h;
                    let gs = conv.spectrum(row);
                    let us = &u_spec[row_idx * bins..(row_idx + 1) * bins];
                    for ((acc, gv), uv) in gk_spec[ch * bins..(ch + 1) * bins].iter_mut().zip(&gs).zip(us) {
                        *acc = *acc + gv * uv.conj();
                    }
                    if want_u {
                        let ks = &k_spec[ch * bins..(ch + 1) * bins];
                        gu.extend(conv.inverse(gs.iter().zip(ks).map(|(a, b)| a * b.conj()).collect()));
                    }
                }
                if want_u {
                    out.push((*u, Tensor::from_vec(s, gu)));
                }
                if self.wants(*k) {
                    let gk: Vec<T> = gk_spec.chunks(bins).flat_map(|sp| conv.inverse(sp.to_vec())).collect();
                    out.push((*k, Tensor::from_vec(&[h, l], gk)));
                }
            }
            Op::ModalConv { u, modes, rev } => {
                let s = val(*u).shape();
                let (h, l) = (s[1], s[2]);
                let mv = val(*modes);
                let want_u = self.wants(*u);
                let mut gu = if want_u { vec![T::zero(); gd.len()] } else { Vec::new() };
                let mut gm = vec![T::zero(); mv.numel()];
                let mut scratch = ModalScratch::default();
                for (i, (gy, block)) in gd.chunks(h * l).zip(val(*u).data().chunks(h * l)).enumerate() {
                    let gu_block = if want_u { Some(&mut gu[i * h * l..(i + 1) * h * l]) } else { None };
                    modal_scan_block_backward(mv.data(), block, gy, gu_block, &mut gm, h, l, *rev, &mut scratch);
                }
                if want_u {
                    out.push((*u, Tensor::from_vec(s, gu)));
                }
                out.push((*modes, Tensor::from_vec(mv.shape(), gm)));
            }
            Op::SsmKernel { parents, len } => {
                let p = self.ssm_params(parents)?;
                let kg = kernel_vjp(&p, *len, gd)?;
                let (h, m) = (p.h, p.modes());
                let fields = [kg.log_neg_a_re, kg.a_im, kg.b_re, kg.b_im, kg.c_re, kg.c_im];
                for (var, data) in parents.iter().zip(fields) {
                    out.push((*var, Tensor::from_vec(&[h, m], data)));
                }
                out.push((parents[6], Tensor::from_vec(&[h], kg.log_dt)));
            }
            Op::Bce { p, targets, weights, norm } => {
                let pv = val(*p);
                let d = ops::bce_grad(pv.data(), targets, weights, gd[0] / *norm);
                out.push((*p, Tensor::from_vec(pv.shape(), d)));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]), true);
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3]), true);
        assert_eq!(g.backward(x), Err(GraphError::NonScalarLoss(vec![3])));
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let unused = g.leaf(Tensor::from_vec(&[2], vec![1.0, 1.0]), true);
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).data(), &[2.0]);
        assert_eq!(g.grad(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn bce_half() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::full(&[2, 3], 0.5), true);
        let loss = g.bce(p, &[0.5; 6], &[1.0; 6], 6.0).unwrap();
        assert!((g.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        g.backward(loss).unwrap();
        assert!(g.grad(p).data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(&[2]), true);
        let b = g.leaf(Tensor::zeros(&[3]), true);
        assert!(g.add(a, b).is_err());
        assert!(g.mean_time(a).is_err());
        let x = g.input(Tensor::zeros(&[1, 2, 8]));
        let w = g.leaf(Tensor::zeros(&[4, 3, 3]), true);
        let bias = g.leaf(Tensor::zeros(&[4]), true);
        assert!(g.conv1d(x, w, bias, 2, 1).is_err());
    }
}
