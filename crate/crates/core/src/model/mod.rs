//! Encoder-predictor network: strided convolutions and bidirectional SSM blocks compress
//! each epoch into a token; a second SSM stack mixes the token sequence; a linear head and
//! sigmoid give per-epoch class probabilities.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GraphError, ParamId, ParamStore, Var};
use crate::ssm::{compute_kernel, init_diagonal_ssm, kernel_vjp, modal_coefficients, modal_vjp, SsmError, SsmParams};
use crate::tensor::{Real, Tensor};

pub use checkpoint::{checkpoint_value_width, load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ssm(#[from] SsmError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// Architecture hyperparameters. Widths are given at full size and multiplied by `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub epoch_len: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub encoder_layers: usize,
    pub predictor_layers: usize,
    pub bidirectional: bool,
    pub n_classes: usize,
    pub input_epochs: usize,
    pub dropout: f64,
    pub scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            epoch_len: crate::pipeline::EPOCH_LEN,
            conv_layers: 2,
            conv_channels: 128,
            conv_kernel: 3,
            conv_stride: 2,
            d_model: 512,
            d_state: 64,
            encoder_layers: 4,
            predictor_layers: 4,
            bidirectional: true,
            n_classes: 3,
            input_epochs: 10,
            dropout: 0.1,
            scale: 1.0,
        }
    }
}

fn scaled(base: usize, scale: f64, what: &str) -> Result<usize, ModelError> {
    let v = base as f64 * scale;
    let r = v.round();
    if (v - r).abs() > 1e-9 || r < 1.0 {
        return Err(ModelError::Config(format!("{what} {base} x scale {scale} = {v} is not a positive integer")));
    }
    Ok(r as usize)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(ModelError::Config(format!("scale must be positive, got {}", self.scale)));
        }
        let d_state = self.eff_d_state()?;
        if d_state % 2 != 0 {
            return Err(ModelError::Config(format!("scaled d_state {d_state} must be even")));
        }
        self.eff_d_model()?;
        self.eff_conv_channels()?;
        if self.conv_layers == 0 || self.conv_kernel == 0 || self.conv_stride == 0 {
            return Err(ModelError::Config("convolution layers, kernel and stride must be positive".into()));
        }
        let factor = self.conv_stride.pow(self.conv_layers as u32);
        if self.epoch_len == 0 || self.epoch_len % factor != 0 {
            return Err(ModelError::Config(format!(
                "epoch_len {} is not divisible by stride^layers = {factor}",
                self.epoch_len
            )));
        }
        if self.n_classes == 0 || self.input_epochs == 0 {
            return Err(ModelError::Config("n_classes and input_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn eff_d_model(&self) -> Result<usize, ModelError> {
        scaled(self.d_model, self.scale, "d_model")
    }

    pub fn eff_d_state(&self) -> Result<usize, ModelError> {
        scaled(self.d_state, self.scale, "d_state")
    }

    pub fn eff_conv_channels(&self) -> Result<usize, ModelError> {
        scaled(self.conv_channels, self.scale, "conv_channels")
    }

    /// Time steps per epoch after the convolutional front-end.
    pub fn encoder_len(&self) -> usize {
        self.epoch_len / self.conv_stride.pow(self.conv_layers as u32)
    }

    /// Samples per model input.
    pub fn input_size(&self) -> usize {
        self.epoch_len * self.input_epochs
    }

    pub fn uses_predictor(&self) -> bool {
        self.input_epochs > 1 && self.predictor_layers > 0
    }

    fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }
}

/// Trainable scalars of the network described by `config` (complex entries count twice).
pub fn count_params(config: &ModelConfig) -> Result<usize, ModelError> {
    config.validate()?;
    let c = config.eff_conv_channels()?;
    let h = config.eff_d_model()?;
    let m = config.eff_d_state()? / 2;
    let k = config.conv_kernel;
    let dirs = config.directions();
    let mut total = 0;
    let mut cin = 1;
    for _ in 0..config.conv_layers {
        total += cin * c * k + c;
        cin = c;
    }
    total += c * h + h;
    let block = 2 * h + dirs * (6 * h * m + 2 * h) + dirs * h * h + h;
    let blocks = config.encoder_layers + if config.uses_predictor() { config.predictor_layers } else { 0 };
    total += blocks * block;
    total += h * config.n_classes + config.n_classes;
    Ok(total)
}

#[derive(Debug, Clone)]
struct SsmIds {
    /// `log_neg_a_re, a_im, b_re, b_im, c_re, c_im`, each `[H, M]`.
    modes: [ParamId; 6],
    log_dt: ParamId,
    d: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln_gamma: ParamId,
    ln_beta: ParamId,
    /// Forward direction first.
    ssm: Vec<SsmIds>,
    merge_w: ParamId,
    merge_b: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<(ParamId, ParamId)>,
    proj: (ParamId, ParamId),
    encoder: Vec<BlockIds>,
    predictor: Vec<BlockIds>,
    head: (ParamId, ParamId),
}

const SSM_FIELDS: [&str; 6] = ["log_neg_a_re", "a_im", "b_re", "b_im", "c_re", "c_im"];

/// Stable per-parameter seed (FNV-1a of the name mixed with `seed`), independent of
/// registration order.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in name.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn uniform<T: Real>(shape: &[usize], bound: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::c(rng.random_range(-bound..=bound))).collect())
}

struct Builder<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    seed: u64,
}

impl<T: Real> Builder<'_, T> {
    /// Weight and bias drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    fn affine(&mut self, name: &str, w_shape: &[usize], fan_in: usize) -> (ParamId, ParamId) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let wn = format!("{name}.w");
        let bn = format!("{name}.b");
        let w = uniform(w_shape, bound, param_seed(self.seed, &wn));
        let b = uniform(&[w_shape[0]], bound, param_seed(self.seed, &bn));
        (self.store.add(wn, w), self.store.add(bn, b))
    }

    fn ssm(&mut self, name: &str, h: usize, n: usize) -> Result<SsmIds, ModelError> {
        let p: SsmParams<T> = init_diagonal_ssm(h, n, param_seed(self.seed, name))?;
        let m = n / 2;
        let fields = [p.log_neg_a_re, p.a_im, p.b_re, p.b_im, p.c_re, p.c_im];
        let mut ids = Vec::with_capacity(6);
        for (field, data) in SSM_FIELDS.iter().zip(fields) {
            ids.push(self.store.add(format!("{name}.{field}"), Tensor::from_vec(&[h, m], data)));
        }
        Ok(SsmIds {
            modes: ids.try_into().expect("six mode tensors"),
            log_dt: self.store.add(format!("{name}.log_dt"), Tensor::from_vec(&[h], p.log_dt)),
            d: self.store.add(format!("{name}.d"), Tensor::from_vec(&[h], p.d)),
        })
    }

    /// A residual block; `zero_merge` starts its output projection at zero, so the block is the
    /// identity until trained.
    fn block(&mut self, name: &str, h: usize, n: usize, dirs: usize, zero_merge: bool) -> Result<BlockIds, ModelError> {
        let ln_gamma = self.store.add(format!("{name}.ln.gamma"), Tensor::full(&[h], T::one()));
        let ln_beta = self.store.add(format!("{name}.ln.beta"), Tensor::zeros(&[h]));
        let mut ssm = vec![self.ssm(&format!("{name}.fwd"), h, n)?];
        if dirs == 2 {
            ssm.push(self.ssm(&format!("{name}.bwd"), h, n)?);
        }
        let (merge_w, merge_b) = self.affine(&format!("{name}.merge"), &[h, dirs * h], dirs * h);
        if zero_merge {
            self.store.get_mut(merge_w).data_mut().fill(T::zero());
            self.store.get_mut(merge_b).data_mut().fill(T::zero());
        }
        Ok(BlockIds { ln_gamma, ln_beta, ssm, merge_w, merge_b })
    }
}

/// SSM convolution kernels for every layer, computed once per parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernels<T> {
    pub encoder_len: usize,
    pub predictor_len: Option<usize>,
    /// Encoder layers first, forward direction before backward. Each entry is either a
    /// materialized kernel `[H, L]` or modal coefficients `[H, M, 4]`, whichever convolves
    /// faster at that length.
    pub tensors: Vec<Tensor<T>>,
}

/// Rough flop comparison of the modal recurrence against zero-padded FFT convolution.
fn modal_is_cheaper(modes: usize, len: usize) -> bool {
    let n = (2 * len.max(1)).next_power_of_two() as f64;
    let modal = 8.0 * (modes * len) as f64;
    modal < 5.0 * n * n.log2()
}

/// Where the graph gets SSM kernels from.
pub enum KernelSource<'a, T> {
    /// Differentiate through kernel construction inside the graph.
    InGraph { predictor_len: Option<usize> },
    /// Precomputed kernels entered as leaves; their gradients are pulled back to the
    /// parameters separately with [`Model::kernel_param_grads`].
    Given(&'a Kernels<T>),
}

/// Graph handles for one bound copy of the model parameters.
pub struct Bound {
    pub params: Vec<Var>,
    pub kernels: Vec<Var>,
    predictor_len: Option<usize>,
}

pub struct ForwardOpts<'a> {
    pub bypass_predictor: bool,
    /// Dropout is active only when a generator is supplied.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Default for ForwardOpts<'_> {
    fn default() -> Self {
        Self { bypass_predictor: false, rng: None }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config.eff_conv_channels()?;
        let h = config.eff_d_model()?;
        let n = config.eff_d_state()?;
        let dirs = config.directions();
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, seed };
        let mut convs = Vec::new();
        let mut cin = 1;
        for i in 0..config.conv_layers {
            convs.push(b.affine(&format!("enc.conv{i}"), &[c, cin, config.conv_kernel], cin * config.conv_kernel));
            cin = c;
        }
        let proj = b.affine("enc.proj", &[h, c], c);
        let encoder = (0..config.encoder_layers)
            .map(|i| b.block(&format!("enc.block{i}"), h, n, dirs, false))
            .collect::<Result<Vec<_>, _>>()?;
        let predictor = if config.uses_predictor() {
            (0..config.predictor_layers)
                // identity at start: a fresh multi-epoch model scores each epoch on its own
                .map(|i| b.block(&format!("pred.block{i}"), h, n, dirs, true))
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let head = b.affine("head", &[config.n_classes, h], h);
        let layout = Layout { convs, proj, encoder, predictor, head };
        Ok(Self { config, params: store, layout })
    }

    pub fn n_params(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn d_model(&self) -> usize {
        self.params.get(self.layout.proj.0).shape()[0]
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for (name, t) in self.params.iter() {
            params.add(name, t.cast());
        }
        Model { config: self.config.clone(), params, layout: self.layout.clone() }
    }

    fn ssm_modules(&self, predictor: bool) -> impl Iterator<Item = &SsmIds> {
        let pred: &[BlockIds] = if predictor { &self.layout.predictor } else { &[] };
        self.layout.encoder.iter().chain(pred).flat_map(|b| b.ssm.iter())
    }

    fn n_encoder_ssm(&self) -> usize {
        self.layout.encoder.iter().map(|b| b.ssm.len()).sum()
    }

    fn ssm_params(&self, ids: &SsmIds) -> SsmParams<T> {
        let get = |id: ParamId| self.params.get(id).data().to_vec();
        let shape = self.params.get(ids.modes[0]).shape();
        SsmParams {
            h: shape[0],
            n: 2 * shape[1],
            log_neg_a_re: get(ids.modes[0]),
            a_im: get(ids.modes[1]),
            b_re: get(ids.modes[2]),
            b_im: get(ids.modes[3]),
            c_re: get(ids.modes[4]),
            c_im: get(ids.modes[5]),
            d: get(ids.d),
            log_dt: get(ids.log_dt),
        }
    }

    /// Kernels for the current parameters; predictor kernels only when `predictor_len` is set
    /// and the model has a predictor.
    pub fn compute_kernels(&self, predictor_len: Option<usize>) -> Result<Kernels<T>, ModelError> {
        let enc_len = self.config.encoder_len();
        let pred_len = predictor_len.filter(|_| !self.layout.predictor.is_empty());
        let n_enc = self.n_encoder_ssm();
        let mut tensors = Vec::new();
        for (i, ids) in self.ssm_modules(pred_len.is_some()).enumerate() {
            let len = if i < n_enc { enc_len } else { pred_len.expect("predictor length") };
            let p = self.ssm_params(ids);
            if modal_is_cheaper(p.modes(), len) {
                tensors.push(Tensor::from_vec(&[p.h, p.modes(), 4], modal_coefficients(&p)?));
            } else {
                tensors.push(Tensor::from_vec(&[p.h, len], compute_kernel(&p, len)?));
            }
        }
        Ok(Kernels { encoder_len: enc_len, predictor_len: pred_len, tensors })
    }

    /// Adds the parameter gradients implied by kernel gradients `grads` (aligned with
    /// `kernels.tensors`) into `accum` (aligned with the parameter store).
    pub fn kernel_param_grads(&self, kernels: &Kernels<T>, grads: &[Tensor<T>], accum: &mut [Tensor<T>]) -> Result<(), ModelError> {
        let n_enc = self.n_encoder_ssm();
        for (i, (ids, g)) in self.ssm_modules(kernels.predictor_len.is_some()).zip(grads).enumerate() {
            let len = if i < n_enc { kernels.encoder_len } else { kernels.predictor_len.expect("predictor length") };
            let p = self.ssm_params(ids);
            let kg = if g.shape().len() == 3 { modal_vjp(&p, g.data())? } else { kernel_vjp(&p, len, g.data())? };
            let fields = [kg.log_neg_a_re, kg.a_im, kg.b_re, kg.b_im, kg.c_re, kg.c_im];
            for (id, data) in ids.modes.iter().zip(fields) {
                accum[id.index()].add_assign(&Tensor::from_vec(self.params.get(*id).shape(), data));
            }
            accum[ids.log_dt.index()].add_assign(&Tensor::from_vec(&[p.h], kg.log_dt));
        }
        Ok(())
    }

    /// Enters the parameters (and kernels) into `g`.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool, kernels: KernelSource<'_, T>) -> Result<Bound, ModelError> {
        let params: Vec<Var> = self.params.values().iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
        let (kernels, predictor_len) = match kernels {
            KernelSource::Given(k) => {
                let expected = self.ssm_modules(k.predictor_len.is_some()).count();
                if k.tensors.len() != expected || k.encoder_len != self.config.encoder_len() {
                    return Err(ModelError::Shape("kernel set does not match the model".into()));
                }
                (k.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect(), k.predictor_len)
            }
            KernelSource::InGraph { predictor_len } => {
                let pred_len = predictor_len.filter(|_| !self.layout.predictor.is_empty());
                let n_enc = self.n_encoder_ssm();
                let mut vars = Vec::new();
                for (i, ids) in self.ssm_modules(pred_len.is_some()).enumerate() {
                    let len = if i < n_enc { self.config.encoder_len() } else { pred_len.expect("predictor length") };
                    let pv = |id: ParamId| params[id.index()];
                    let parents = [
                        pv(ids.modes[0]),
                        pv(ids.modes[1]),
                        pv(ids.modes[2]),
                        pv(ids.modes[3]),
                        pv(ids.modes[4]),
                        pv(ids.modes[5]),
                        pv(ids.log_dt),
                    ];
                    vars.push(g.ssm_kernel(parents, len)?);
                }
                (vars, pred_len)
            }
        };
        Ok(Bound { params, kernels, predictor_len })
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        ids: &BlockIds,
        kernels: &[Var],
        x: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let p = |id: ParamId| bound.params[id.index()];
        let u = g.layer_norm(x, p(ids.ln_gamma), p(ids.ln_beta))?;
        let modal = |g: &Graph<T>, k: Var| g.value(k).shape().len() == 3;
        let yf = if modal(g, kernels[0]) { g.modal_conv(u, kernels[0], false)? } else { g.causal_conv(u, kernels[0])? };
        let skip = g.channel_scale(u, p(ids.ssm[0].d))?;
        let mut y = g.add(yf, skip)?;
        if ids.ssm.len() == 2 {
            let yb = if modal(g, kernels[1]) {
                g.modal_conv(u, kernels[1], true)?
            } else {
                let ur = g.flip_time(u)?;
                let yb = g.causal_conv(ur, kernels[1])?;
                g.flip_time(yb)?
            };
            let skip = g.channel_scale(u, p(ids.ssm[1].d))?;
            let yb = g.add(yb, skip)?;
            y = g.concat_channels(y, yb)?;
        }
        let z = g.gelu(y);
        let mut m = g.pointwise(z, p(ids.merge_w), p(ids.merge_b))?;
        if let Some(r) = rng.as_deref_mut() {
            m = g.dropout(m, self.config.dropout, r);
        }
        Ok(g.add(x, m)?)
    }

    /// Signals `[E, 1, epoch_len]` to tokens `[E, d_model]`.
    pub fn encode_graph(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        signal: Var,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let s = g.shape(signal).to_vec();
        if s.len() != 3 || s[1] != 1 || s[2] != self.config.epoch_len {
            return Err(ModelError::Shape(format!(
                "encoder input must be [E, 1, {}], got {s:?}",
                self.config.epoch_len
            )));
        }
        let p = |id: ParamId| bound.params[id.index()];
        let mut x = signal;
        for &(w, b) in &self.layout.convs {
            let c = g.conv1d(x, p(w), p(b), self.config.conv_stride, self.config.conv_kernel / 2)?;
            x = g.gelu(c);
        }
        x = g.pointwise(x, p(self.layout.proj.0), p(self.layout.proj.1))?;
        let mut k = 0;
        for ids in &self.layout.encoder {
            let n = ids.ssm.len();
            x = self.block(g, bound, ids, &bound.kernels[k..k + n], x, rng)?;
            k += n;
        }
        Ok(g.mean_time(x)?)
    }

    /// Tokens `[N, d_model]` of one window to probabilities `[N, n_classes]`.
    pub fn predict_graph(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        tokens: Var,
        bypass_predictor: bool,
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var, ModelError> {
        let (n, h) = match *g.shape(tokens) {
            [n, h] => (n, h),
            ref s => return Err(ModelError::Shape(format!("tokens must be [N, d_model], got {s:?}"))),
        };
        let t = g.transpose2(tokens)?;
        let mut x = g.reshape(t, &[1, h, n])?;
        if !bypass_predictor && !self.layout.predictor.is_empty() {
            let Some(len) = bound.predictor_len else {
                return Err(ModelError::Shape("predictor kernels were not bound".into()));
            };
            if len != n {
                return Err(ModelError::Shape(format!("predictor kernels have length {len}, window has {n}")));
            }
            let mut k = self.n_encoder_ssm();
            for ids in &self.layout.predictor {
                let c = ids.ssm.len();
                x = self.block(g, bound, ids, &bound.kernels[k..k + c], x, rng)?;
                k += c;
            }
        }
        let p = |id: ParamId| bound.params[id.index()];
        let logits = g.pointwise(x, p(self.layout.head.0), p(self.layout.head.1))?;
        let logits = g.reshape(logits, &[self.config.n_classes, n])?;
        let logits = g.transpose2(logits)?;
        Ok(g.sigmoid(logits))
    }

    /// Full forward pass over one window `[N, 1, epoch_len]`; returns `[N, n_classes]`.
    pub fn forward_graph(&self, g: &mut Graph<T>, bound: &Bound, signal: Var, opts: ForwardOpts<'_>) -> Result<Var, ModelError> {
        let mut rng = opts.rng;
        let tokens = self.encode_graph(g, bound, signal, &mut rng)?;
        self.predict_graph(g, bound, tokens, opts.bypass_predictor, &mut rng)
    }

    /// Inference on a batch of windows `[B, N * epoch_len]` (flattened), returning
    /// `[B, N, n_classes]`.
    pub fn forward(&self, batch: &[T], batch_size: usize, bypass_predictor: bool) -> Result<Tensor<T>, ModelError> {
        let el = self.config.epoch_len;
        if batch_size == 0 || batch.len() % batch_size != 0 {
            return Err(ModelError::Shape(format!("{} samples cannot form {batch_size} windows", batch.len())));
        }
        let per = batch.len() / batch_size;
        if per == 0 || per % el != 0 {
            return Err(ModelError::Shape(format!("window of {per} samples is not a whole number of {el}-sample epochs")));
        }
        let n = per / el;
        let kernels = self.compute_kernels((n > 1 && !bypass_predictor).then_some(n))?;
        let mut out = Vec::with_capacity(batch_size * n * self.config.n_classes);
        for w in batch.chunks(per) {
            let tokens = self.encode(w, &kernels)?;
            out.extend(self.predict_tokens(&tokens, &kernels, bypass_predictor)?.into_data());
        }
        Ok(Tensor::from_vec(&[batch_size, n, self.config.n_classes], out))
    }

    /// Tokens `[E, d_model]` for `E` consecutive epochs, encoded in bounded chunks.
    pub fn encode(&self, signal: &[T], kernels: &Kernels<T>) -> Result<Tensor<T>, ModelError> {
        const CHUNK: usize = 16;
        let el = self.config.epoch_len;
        if signal.len() % el != 0 {
            return Err(ModelError::Shape(format!("{} samples is not a whole number of epochs", signal.len())));
        }
        let e = signal.len() / el;
        let mut out = Vec::with_capacity(e * self.d_model());
        for chunk in signal.chunks(CHUNK * el) {
            let mut g = Graph::new();
            let bound = self.bind(&mut g, false, KernelSource::Given(kernels))?;
            let x = g.input(Tensor::from_vec(&[chunk.len() / el, 1, el], chunk.to_vec()));
            let t = self.encode_graph(&mut g, &bound, x, &mut None)?;
            out.extend_from_slice(g.value(t).data());
        }
        Ok(Tensor::from_vec(&[e, self.d_model()], out))
    }

    /// Probabilities `[N, n_classes]` for a window of tokens.
    pub fn predict_tokens(&self, tokens: &Tensor<T>, kernels: &Kernels<T>, bypass_predictor: bool) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, KernelSource::Given(kernels))?;
        let t = g.input(tokens.clone());
        let p = self.predict_graph(&mut g, &bound, t, bypass_predictor, &mut None)?;
        Ok(g.value(p).clone())
    }
}

/// `[E, 1, epoch_len]` input tensor from an `f32` signal.
pub fn epochs_tensor<T: Real>(signal: &[f32], epoch_len: usize) -> Tensor<T> {
    Tensor::from_vec(&[signal.len() / epoch_len, 1, epoch_len], signal.iter().map(|&v| T::c(v as f64)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(input_epochs: usize) -> ModelConfig {
        ModelConfig { epoch_len: 64, d_model: 8, d_state: 4, conv_channels: 4, input_epochs, ..ModelConfig::default() }
    }

    #[test]
    fn paper_count_in_band() {
        let n = count_params(&ModelConfig::default()).unwrap();
        assert!((3_400_000..=6_400_000).contains(&n), "{n}");
    }

    #[test]
    fn count_matches_built_model() {
        for cfg in [tiny(1), tiny(3), ModelConfig { bidirectional: false, ..tiny(2) }] {
            let m = Model::<f64>::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.n_params(), count_params(&cfg).unwrap());
        }
    }

    #[test]
    fn doubling_width_more_than_doubles_count() {
        let a = count_params(&ModelConfig { scale: 0.125, ..ModelConfig::default() }).unwrap();
        let b = count_params(&ModelConfig { scale: 0.25, ..ModelConfig::default() }).unwrap();
        assert!(b > 2 * a);
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig { scale: 0.0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { scale: 0.3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { epoch_len: 3842, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { d_state: 6, scale: 0.5, ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn lengths_and_ranges() {
        let cfg = tiny(3);
        assert_eq!(cfg.encoder_len(), 16);
        let m = Model::<f64>::new(cfg, 7).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 64).map(|i| (i as f64 * 0.1).sin()).collect();
        let y = m.forward(&x, 2, false).unwrap();
        assert_eq!(y.shape(), &[2, 3, 3]);
        assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
        assert!(m.forward(&x[..100], 1, false).is_err());
    }

    /// Gives the zero-initialised predictor merges nonzero weights.
    fn wake_predictor(m: &mut Model<f64>) {
        let ids: Vec<ParamId> = m.params.ids().filter(|&id| m.params.name(id).starts_with("pred.")).collect();
        for (k, id) in ids.into_iter().enumerate() {
            for (i, v) in m.params.get_mut(id).data_mut().iter_mut().enumerate() {
                if *v == 0.0 {
                    *v = ((i * 7 + k * 3) % 11) as f64 * 0.02 - 0.1;
                }
            }
        }
    }

    #[test]
    fn fresh_predictor_is_identity() {
        let mut m = Model::<f64>::new(tiny(3), 4).unwrap();
        let x: Vec<f64> = (0..192).map(|i| (i as f64 * 0.21).sin()).collect();
        let with = m.forward(&x, 1, false).unwrap();
        let without = m.forward(&x, 1, true).unwrap();
        assert_eq!(with, without);
        wake_predictor(&mut m);
        assert_ne!(m.forward(&x, 1, false).unwrap(), without);
    }

    #[test]
    fn in_graph_and_given_kernels_agree() {
        let mut m = Model::<f64>::new(tiny(2), 3).unwrap();
        wake_predictor(&mut m);
        let m = m;
        let x: Vec<f32> = (0..128).map(|i| (i as f32 * 0.3).cos()).collect();
        let run = |source: KernelSource<'_, f64>| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false, source).unwrap();
            let s = g.input(epochs_tensor(&x, 64));
            let p = m.forward_graph(&mut g, &b, s, ForwardOpts::default()).unwrap();
            g.value(p).clone()
        };
        let k = m.compute_kernels(Some(2)).unwrap();
        assert!(k.tensors.iter().all(|t| t.shape().len() == 3));
        let a = run(KernelSource::InGraph { predictor_len: Some(2) });
        let b = run(KernelSource::Given(&k));
        assert!(crate::ssm::max_rel_err(a.data(), b.data()) < 1e-12);
    }

    #[test]
    fn zero_input_zero_biases_give_zero_token() {
        let mut m = Model::<f64>::new(tiny(1), 3).unwrap();
        let ids: Vec<ParamId> = m.params.ids().collect();
        for id in ids {
            let name = m.params.name(id).to_string();
            if name.ends_with(".b") || name.ends_with("ln.beta") {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        }
        let k = m.compute_kernels(None).unwrap();
        let t = m.encode(&[0.0; 128], &k).unwrap();
        assert_eq!(t.shape(), &[2, 8]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_parameter_init_is_order_independent() {
        let a = Model::<f64>::new(tiny(1), 5).unwrap();
        let b = Model::<f64>::new(tiny(4), 5).unwrap();
        for (name, t) in a.params.iter() {
            assert_eq!(b.params.get(b.params.id(name).unwrap()), t, "{name}");
        }
    }
}
