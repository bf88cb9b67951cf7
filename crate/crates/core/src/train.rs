//! Masked fractional BCE, AdamW, and the accumulate-then-step training loop with
//! validation-based checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, PROB_CLAMP};
use crate::eval::{sliding_window_predict, EvalError, ScoredEpochs, METRIC_UNKNOWN_MAX};
use crate::model::{epochs_tensor, Checkpoint, ForwardOpts, KernelSource, Kernels, Model, ModelError, RngState};
use crate::pipeline::{sample_crops, Crop, CropMode, EpochDataset, Partition, PipelineError};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    /// Every epoch in the batch was masked out; the step is skipped.
    #[error("no epoch in the batch contributes to the loss")]
    EmptyLoss,
    #[error("non-finite gradient in {tensor}; step rejected")]
    NonFinite { tensor: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub micro_batch: usize,
    pub accumulation: usize,
    /// Passes over the training crops.
    pub max_epochs: usize,
    pub seed: u64,
    /// Epochs whose unknown fraction exceeds this are left out of the loss.
    pub unknown_exclusion_threshold: f64,
    /// Sliding stride for validation inference; the crop length when unset.
    pub validation_stride: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            micro_batch: 4,
            accumulation: 16,
            max_epochs: 5,
            seed: 0,
            unknown_exclusion_threshold: 0.0,
            validation_stride: None,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch(&self) -> usize {
        self.micro_batch * self.accumulation
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("lr and weight_decay must be positive, got {} and {}", self.lr, self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.micro_batch == 0 || self.accumulation == 0 || self.max_epochs == 0 {
            return bad("micro_batch, accumulation and max_epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.unknown_exclusion_threshold) {
            return bad(format!("unknown_exclusion_threshold {} outside [0, 1]", self.unknown_exclusion_threshold));
        }
        if self.validation_stride == Some(0) {
            return bad("validation_stride must be at least 1".into());
        }
        Ok(())
    }
}

/// Mean masked binary cross-entropy over `(epoch, class)` entries of `probs` `[B, N, C]`.
pub fn bce_fractional_loss<T: Real>(probs: &Tensor<T>, targets: &[f64], epoch_mask: &[bool]) -> Result<f64, TrainError> {
    let c = *probs.shape().last().unwrap_or(&0);
    if c == 0 || targets.len() != probs.numel() || epoch_mask.len() * c != probs.numel() {
        return Err(TrainError::Config(format!(
            "loss: {} probabilities, {} targets, {} mask entries",
            probs.numel(),
            targets.len(),
            epoch_mask.len()
        )));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (e, &keep) in epoch_mask.iter().enumerate() {
        if !keep {
            continue;
        }
        for j in e * c..(e + 1) * c {
            let p = probs.data()[j].f64().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let t = targets[j];
            sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(TrainError::EmptyLoss);
    }
    Ok(sum / count as f64)
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self { step: 0, m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One AdamW update with decoupled weight decay. Nothing is modified when a gradient is
/// non-finite.
pub fn adamw_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TrainError::Config("gradient and optimizer state must match the parameters".into()));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(TrainError::Config(format!("gradient of {name} has shape {:?}, expected {:?}", g.shape(), p.shape())));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFinite { tensor: name.to_string() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.values_mut().iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gf = gv.f64();
            let mn = b1 * mv.f64() + (1.0 - b1) * gf;
            let vn = b2 * vv.f64() + (1.0 - b2) * gf * gf;
            *mv = T::c(mn);
            *vv = T::c(vn);
            let th = pv.f64();
            *pv = T::c(th - cfg.lr * ((mn / c1) / ((vn / c2).sqrt() + cfg.eps) + cfg.weight_decay * th));
        }
    }
    Ok(())
}

/// A training window with its loss targets.
#[derive(Debug, Clone)]
pub struct CropBatchItem {
    pub signal: Vec<f32>,
    /// `[N, C]` fractions.
    pub targets: Vec<f64>,
    /// Epochs included in the loss.
    pub mask: Vec<bool>,
    /// Stable index used to derive the dropout stream.
    pub index: u64,
}

impl CropBatchItem {
    pub fn from_crop(dataset: &EpochDataset, crop: &Crop, threshold: f64, index: u64) -> Self {
        let rec = &dataset.records[crop.record];
        let labels = rec.labels.slice(crop.epochs.start, crop.epochs.end);
        Self {
            signal: rec.epoch_signal(crop.epochs.clone()).to_vec(),
            targets: labels.fractions,
            mask: labels.unknown.iter().map(|&u| u <= threshold).collect(),
            index,
        }
    }

    fn masked_entries(&self, n_classes: usize) -> usize {
        self.mask.iter().filter(|&&m| m).count() * n_classes
    }
}

/// Summed gradients of one effective batch.
pub struct BatchGrads<T> {
    /// Aligned with the parameter store.
    pub params: Vec<Tensor<T>>,
    /// Mean loss over the batch's masked entries.
    pub loss: f64,
}

fn crop_stream(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

struct CropGrads<T> {
    params: Vec<Tensor<T>>,
    kernels: Vec<Tensor<T>>,
    loss_sum: f64,
}

fn crop_grads<T: Real>(
    model: &Model<T>,
    kernels: &Kernels<T>,
    item: &CropBatchItem,
    norm: T,
    dropout_seed: Option<(u64, u64)>,
) -> Result<CropGrads<T>, TrainError> {
    let el = model.config.epoch_len;
    let c = model.config.n_classes;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true, KernelSource::Given(kernels))?;
    let x = g.input(epochs_tensor(&item.signal, el));
    let mut rng = dropout_seed.map(|(seed, step)| crop_stream(seed, step, item.index));
    let opts = ForwardOpts { bypass_predictor: false, rng: rng.as_mut() };
    let p = model.forward_graph(&mut g, &bound, x, opts)?;
    let targets: Vec<T> = item.targets.iter().map(|&t| T::c(t)).collect();
    let weights: Vec<T> = item.mask.iter().flat_map(|&m| std::iter::repeat_n(if m { T::one() } else { T::zero() }, c)).collect();
    let loss = g.bce(p, &targets, &weights, norm).map_err(ModelError::from)?;
    g.backward(loss).map_err(ModelError::from)?;
    Ok(CropGrads {
        params: bound.params.iter().map(|&v| g.grad(v)).collect(),
        kernels: bound.kernels.iter().map(|&v| g.grad(v)).collect(),
        loss_sum: g.value(loss).data()[0].f64() * norm.f64(),
    })
}

/// Gradients of the mean masked loss over `batch`, processed `micro_batch` crops at a time.
/// Per-crop gradients are added into the accumulator one crop at a time in batch order, so
/// the result does not depend on how the batch is partitioned.
pub fn accumulate_gradients<T: Real>(
    model: &Model<T>,
    batch: &[CropBatchItem],
    micro_batch: usize,
    dropout_seed: Option<(u64, u64)>,
) -> Result<BatchGrads<T>, TrainError> {
    let c = model.config.n_classes;
    let total: usize = batch.iter().map(|b| b.masked_entries(c)).sum();
    if total == 0 {
        return Err(TrainError::EmptyLoss);
    }
    if micro_batch == 0 {
        return Err(TrainError::Config("micro_batch must be at least 1".into()));
    }
    let n = batch.first().map_or(0, |b| b.mask.len());
    if batch.iter().any(|b| b.mask.len() != n) {
        return Err(TrainError::Config("crops in a batch must have equal length".into()));
    }
    let norm = T::c(total as f64);
    let kernels = model.compute_kernels((n > 1).then_some(n))?;
    let mut acc = model.params.zeros_like();
    let mut kacc: Vec<Tensor<T>> = kernels.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut loss_sum = 0.0;
    for micro in batch.chunks(micro_batch) {
        let results: Vec<CropGrads<T>> = micro
            .par_iter()
            .map(|item| crop_grads(model, &kernels, item, norm, dropout_seed))
            .collect::<Result<_, _>>()?;
        for r in results {
            for (a, g) in acc.iter_mut().zip(&r.params) {
                a.add_assign(g);
            }
            for (a, g) in kacc.iter_mut().zip(&r.kernels) {
                a.add_assign(g);
            }
            loss_sum += r.loss_sum;
        }
    }
    model.kernel_param_grads(&kernels, &kacc, &mut acc)?;
    Ok(BatchGrads { params: acc, loss: loss_sum / total as f64 })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    /// Training pass the record belongs to (1-based).
    pub epoch: usize,
    pub loss: Option<f64>,
    pub lr: f64,
    pub val_macro_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Real> {
    /// Highest validation macro-AUROC seen after any pass (the first pass when none was defined).
    pub best: Checkpoint<T>,
    /// State after the last pass.
    pub last: Checkpoint<T>,
    /// Mean training loss of each pass.
    pub epoch_losses: Vec<f64>,
    pub val_scores: Vec<Option<f64>>,
    pub skipped_steps: u64,
}

/// Scores every epoch of `records` with sliding-window inference.
pub fn score_records<T: Real>(
    model: &Model<T>,
    dataset: &EpochDataset,
    records: &[usize],
    input_epochs: usize,
    stride: usize,
) -> Result<ScoredEpochs, TrainError> {
    let c = dataset.classes.len();
    let per_record: Vec<Vec<f64>> = records
        .par_iter()
        .map(|&r| sliding_window_predict(model, &dataset.records[r].signal, input_epochs, stride))
        .collect::<Result<_, _>>()?;
    let mut out = ScoredEpochs::new(c);
    for (&r, probs) in records.iter().zip(per_record) {
        let rec = &dataset.records[r];
        for e in 0..rec.n_epochs() {
            out.push(&rec.patient_id, &probs[e * c..(e + 1) * c], rec.labels.epoch(e), rec.labels.unknown[e]);
        }
    }
    Ok(out)
}

fn checkpoint<T: Real>(model: &Model<T>, opt: &AdamState<T>, rng: &ChaCha8Rng, epoch: usize, val: Option<f64>) -> Checkpoint<T> {
    let mut ck = Checkpoint::from_model(model);
    ck.optimizer = Some(opt.clone());
    ck.rng_state = Some(RngState::capture(rng));
    ck.train_epoch = epoch;
    ck.validation_macro_auroc = val;
    ck
}

/// Trains `model` on the training partition of `dataset`, validating after each pass.
pub fn train<T: Real>(
    model: &mut Model<T>,
    dataset: &EpochDataset,
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    dataset.validate()?;
    if model.config.n_classes != dataset.classes.len() {
        return Err(TrainError::Config(format!(
            "model predicts {} classes, dataset has {}",
            model.config.n_classes,
            dataset.classes.len()
        )));
    }
    if model.config.epoch_len != dataset.epoch_len {
        return Err(TrainError::Config(format!(
            "model epoch length {} differs from dataset epoch length {}",
            model.config.epoch_len, dataset.epoch_len
        )));
    }
    let n = model.config.input_epochs;
    let train_records = dataset.records_in(Partition::Train)?;
    let val_records = dataset.records_in(Partition::Valid)?;
    if train_records.is_empty() || val_records.is_empty() {
        return Err(TrainError::Config("training and validation partitions must be non-empty".into()));
    }
    let crops = sample_crops(dataset, Some(&train_records), n, CropMode::TrainNonOverlap)?;
    let items: Vec<CropBatchItem> = crops
        .iter()
        .enumerate()
        .map(|(i, c)| CropBatchItem::from_crop(dataset, c, cfg.unknown_exclusion_threshold, i as u64))
        .collect();
    if items.iter().all(|it| it.mask.iter().all(|&m| !m)) {
        return Err(TrainError::Config(format!(
            "no training crop of {n} epochs has an epoch within the unknown threshold"
        )));
    }
    let stride = cfg.validation_stride.unwrap_or(n);
    let dropout = (model.config.dropout > 0.0).then_some(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamState::new(&model.params);
    let mut best: Option<Checkpoint<T>> = None;
    let mut epoch_losses = Vec::new();
    let mut val_scores = Vec::new();
    let mut skipped = 0;
    let mut order: Vec<usize> = (0..items.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for chunk in order.chunks(cfg.effective_batch()) {
            let batch: Vec<CropBatchItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let grads = match accumulate_gradients(model, &batch, cfg.micro_batch, dropout.map(|s| (s, opt.step))) {
                Err(TrainError::EmptyLoss) => {
                    skipped += 1;
                    continue;
                }
                r => r?,
            };
            adamw_step(&mut model.params, &grads.params, &mut opt, cfg)?;
            loss_sum += grads.loss;
            loss_n += 1;
            log(&LogRecord { step: opt.step, epoch, loss: Some(grads.loss), lr: cfg.lr, val_macro_auroc: None });
        }
        epoch_losses.push(if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN });
        let scored = score_records(model, dataset, &val_records, n, stride)?;
        let val = scored.excluding_unknown(METRIC_UNKNOWN_MAX).macro_auroc().ok();
        val_scores.push(val);
        log(&LogRecord { step: opt.step, epoch, loss: None, lr: cfg.lr, val_macro_auroc: val });
        let better = match (&best, val) {
            (None, _) => true,
            (Some(b), Some(v)) => b.validation_macro_auroc.is_none_or(|bv| v > bv),
            (Some(_), None) => false,
        };
        if better {
            best = Some(checkpoint(model, &opt, &rng, epoch, val));
        }
    }
    let last = checkpoint(model, &opt, &rng, cfg.max_epochs, val_scores.last().copied().flatten());
    Ok(TrainOutcome { best: best.expect("at least one pass"), last, epoch_losses, val_scores, skipped_steps: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn loss_examples() {
        let p = Tensor::from_vec(&[1, 2, 3], vec![0.5f64; 6]);
        let l = bce_fractional_loss(&p, &[0.5; 6], &[true, true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let p = Tensor::from_vec(&[1, 1, 2], vec![0.0f64, 1.0]);
        assert!(bce_fractional_loss(&p, &[0.0, 1.0], &[true]).unwrap() < 1e-6);
        assert!(matches!(bce_fractional_loss(&p, &[0.0, 1.0], &[false]), Err(TrainError::EmptyLoss)));
    }

    #[test]
    fn loss_matches_elementwise_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p: Vec<f64> = (0..60).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
        let mut oracle = 0.0;
        let mut n = 0.0;
        for e in 0..20 {
            if mask[e] {
                for j in 0..3 {
                    let (pp, tt) = (p[e * 3 + j], t[e * 3 + j]);
                    oracle += -(tt * pp.ln() + (1.0 - tt) * (1.0 - pp).ln());
                    n += 1.0;
                }
            }
        }
        let l = bce_fractional_loss(&Tensor::from_vec(&[4, 5, 3], p), &t, &mask).unwrap();
        assert!((l - oracle / n).abs() < 1e-12);
    }

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::from_vec(&[1], vec![v]));
        s
    }

    #[test]
    fn adamw_examples() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[Tensor::from_vec(&[1], vec![1.0])], &mut st, &cfg).unwrap();
        let expect = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.values()[0].data()[0] - expect).abs() < 1e-15);

        let cfg = TrainConfig::default();
        let mut p = scalar_store(2.0);
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &[Tensor::from_vec(&[1], vec![0.0])], &mut st, &cfg).unwrap();
        assert!((p.values()[0].data()[0] - 2.0 * (1.0 - 1e-3 * 1e-3)).abs() < 1e-15);
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut p = scalar_store(1.0);
        let mut st = AdamState::new(&p);
        let err = adamw_step(&mut p, &[Tensor::from_vec(&[1], vec![f64::NAN])], &mut st, &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::NonFinite { ref tensor }) if tensor == "theta"));
        assert_eq!((p.values()[0].data()[0], st.step), (1.0, 0));
    }

    #[test]
    fn default_effective_batch() {
        assert_eq!(TrainConfig::default().effective_batch(), 64);
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    fn tiny_items(n_crops: usize, n: usize, el: usize) -> Vec<CropBatchItem> {
        (0..n_crops)
            .map(|k| CropBatchItem {
                signal: (0..n * el).map(|i| ((i * (k + 3)) as f32 * 0.05).sin()).collect(),
                targets: (0..n * 3).map(|i| ((i + k) % 3 == 0) as u8 as f64).collect(),
                mask: (0..n).map(|e| (e + k) % 4 != 0).collect(),
                index: k as u64,
            })
            .collect()
    }

    #[test]
    fn masked_epoch_has_no_gradient_effect() {
        let cfg = ModelConfig { epoch_len: 64, d_model: 8, d_state: 4, conv_channels: 4, input_epochs: 3, dropout: 0.0, ..ModelConfig::default() };
        let m = Model::<f64>::new(cfg, 2).unwrap();
        let items = tiny_items(2, 3, 64);
        let a = accumulate_gradients(&m, &items, 2, None).unwrap();
        let mut perturbed = items.clone();
        // epoch 0 of crop 0 is masked: change its targets
        assert!(!perturbed[0].mask[0]);
        perturbed[0].targets[0] = 0.77;
        perturbed[0].targets[2] = 0.11;
        let b = accumulate_gradients(&m, &perturbed, 2, None).unwrap();
        assert_eq!(a.loss, b.loss);
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x, y);
        }
        let mut none = items.clone();
        for it in &mut none {
            it.mask.fill(false);
        }
        assert!(matches!(accumulate_gradients(&m, &none, 2, None), Err(TrainError::EmptyLoss)));
    }

    #[test]
    fn accumulated_grads_match_finite_differences() {
        let cfg = ModelConfig { epoch_len: 32, d_model: 4, d_state: 2, conv_channels: 2, input_epochs: 2, encoder_layers: 1, predictor_layers: 1, dropout: 0.0, ..ModelConfig::default() };
        let mut m = Model::<f64>::new(cfg, 4).unwrap();
        // the predictor merge starts at zero, which would hide predictor gradients
        let merge = m.params.id("pred.block0.merge.w").unwrap();
        for (i, v) in m.params.get_mut(merge).data_mut().iter_mut().enumerate() {
            *v = ((i % 5) as f64 - 2.0) * 0.1;
        }
        let items = tiny_items(3, 2, 32);
        let g = accumulate_gradients(&m, &items, 2, None).unwrap();
        let loss = |mm: &Model<f64>| {
            let mut total = 0.0;
            let mut n = 0.0;
            for it in &items {
                let p = mm.forward(&it.signal.iter().map(|&v| v as f64).collect::<Vec<_>>(), 1, false).unwrap();
                let c = 3;
                for (e, &keep) in it.mask.iter().enumerate() {
                    if keep {
                        for j in 0..c {
                            let (pp, t) = (p.data()[e * c + j], it.targets[e * c + j]);
                            total -= t * pp.ln() + (1.0 - t) * (1.0 - pp).ln();
                            n += 1.0;
                        }
                    }
                }
            }
            total / n
        };
        let eps = 1e-6;
        for name in ["pred.block0.fwd.log_dt", "enc.block0.bwd.c_im", "enc.conv0.w", "head.b"] {
            let id = m.params.id(name).unwrap();
            let mut hi = m.clone();
            hi.params.get_mut(id).data_mut()[0] += eps;
            let mut lo = m.clone();
            lo.params.get_mut(id).data_mut()[0] -= eps;
            let num = (loss(&hi) - loss(&lo)) / (2.0 * eps);
            let ana = g.params[id.index()].data()[0];
            assert!(crate::autodiff::rel_err(ana, num) < 1e-5, "{name}: {ana} vs {num}");
        }
    }

    #[test]
    fn partition_does_not_change_update() {
        let cfg = ModelConfig { epoch_len: 64, d_model: 8, d_state: 4, conv_channels: 4, input_epochs: 2, ..ModelConfig::default() };
        let m = Model::<f32>::new(cfg, 9).unwrap();
        let items = tiny_items(8, 2, 64);
        let a = accumulate_gradients(&m, &items, 2, Some((5, 0))).unwrap();
        let b = accumulate_gradients(&m, &items, 8, Some((5, 0))).unwrap();
        assert_eq!(a.params, b.params);
    }
}
