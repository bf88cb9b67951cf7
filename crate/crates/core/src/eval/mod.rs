//! Per-epoch metrics: AUROC, threshold selection, specificity at fixed sensitivity,
//! patient-level bootstrap, sliding-window inference and AF burden.

mod band;
mod bootstrap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::pipeline::{crop_ranges, CropMode};
use crate::pipeline::PipelineError;
use crate::tensor::Real;

pub use band::{fragmentation, BandData};
pub use bootstrap::{bootstrap_ci, paired_bootstrap_diff, BootstrapCi, PairedDiff, DEFAULT_BOOTSTRAP_ITERS, REDRAW_LIMIT};

/// Targets at or above this fraction count as positive.
pub const POSITIVE_FRACTION: f64 = 0.5;
/// Epochs whose unknown fraction exceeds this are left out of metrics.
pub const METRIC_UNKNOWN_MAX: f64 = 0.5;
pub const DEFAULT_FNR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Argument(String),
    /// The metric is not defined on this data (for example a single-class label set).
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

/// Mann-Whitney AUROC with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Argument(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Argument("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::Undefined("AUROC needs both positive and negative examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Counted in half-pairs so ties stay exact.
    let mut half_pairs: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        half_pairs += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(half_pairs as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Mean of the defined entries.
pub fn macro_auroc(per_class: &[Option<f64>]) -> Result<f64, EvalError> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(EvalError::Undefined("no class has a defined AUROC".into()));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Threshold `t` (predict positive iff `score >= t`) whose false-negative rate is closest to
/// `fnr_target`. Candidates are `-inf`, midpoints between consecutive distinct scores and
/// `+inf`. Equidistant FNRs resolve to the lower FNR; among candidates with the same FNR the
/// highest one is returned, since it rejects the most negatives.
pub fn threshold_at_fnr(scores: &[f64], labels: &[bool], fnr_target: f64) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Argument(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if !(0.0..=1.0).contains(&fnr_target) {
        return Err(EvalError::Argument(format!("FNR target {fnr_target} outside [0, 1]")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::Argument("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(EvalError::Undefined("threshold needs both positive and negative examples".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let fnr = |missed: usize| missed as f64 / n_pos as f64;
    let mut best = (f64::NEG_INFINITY, (fnr(0) - fnr_target).abs(), 0);
    let mut missed = 0;
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            missed += pairs[i].1 as usize;
            i += 1;
        }
        let t = if i < pairs.len() { v + (pairs[i].0 - v) / 2.0 } else { f64::INFINITY };
        let d = (fnr(missed) - fnr_target).abs();
        if d < best.1 || (d == best.1 && missed == best.2) {
            best = (t, d, missed);
        }
    }
    Ok(best.0)
}

/// Specificity at the threshold chosen for `1 - sensitivity` FNR.
pub fn specificity_at_sensitivity(scores: &[f64], labels: &[bool], sensitivity: f64) -> Result<f64, EvalError> {
    let t = threshold_at_fnr(scores, labels, 1.0 - sensitivity)?;
    let (mut tn, mut neg) = (0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        if !l {
            neg += 1;
            tn += (s < t) as usize;
        }
    }
    Ok(tn as f64 / neg as f64)
}

/// Mean of per-epoch values (AF fractions, or thresholded AF indicators).
pub fn af_burden(per_epoch: &[f64]) -> Result<f64, EvalError> {
    if per_epoch.is_empty() {
        return Err(EvalError::Argument("burden of an empty record".into()));
    }
    Ok(per_epoch.iter().sum::<f64>() / per_epoch.len() as f64)
}

/// Predicted burden: fraction of epochs whose AF probability reaches `threshold`.
pub fn predicted_af_burden(af_probs: &[f64], threshold: f64) -> Result<f64, EvalError> {
    let ind: Vec<f64> = af_probs.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect();
    af_burden(&ind)
}

/// Scored epochs of an evaluation set, row-major `[epoch][class]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredEpochs {
    pub n_classes: usize,
    /// Patient of each epoch.
    pub patients: Vec<String>,
    pub scores: Vec<f64>,
    pub targets: Vec<f64>,
    pub unknown: Vec<f64>,
}

impl ScoredEpochs {
    pub fn new(n_classes: usize) -> Self {
        Self { n_classes, patients: Vec::new(), scores: Vec::new(), targets: Vec::new(), unknown: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let n = self.len();
        if self.n_classes == 0
            || self.scores.len() != n * self.n_classes
            || self.targets.len() != n * self.n_classes
            || self.unknown.len() != n
        {
            return Err(EvalError::Argument("scored epoch arrays have inconsistent lengths".into()));
        }
        Ok(())
    }

    pub fn push(&mut self, patient: &str, scores: &[f64], targets: &[f64], unknown: f64) {
        self.patients.push(patient.to_string());
        self.scores.extend_from_slice(scores);
        self.targets.extend_from_slice(targets);
        self.unknown.push(unknown);
    }

    /// Rows `idx` in order (repeats allowed).
    pub fn select(&self, idx: &[usize]) -> Self {
        let c = self.n_classes;
        let mut out = Self::new(c);
        for &i in idx {
            out.push(&self.patients[i], &self.scores[i * c..(i + 1) * c], &self.targets[i * c..(i + 1) * c], self.unknown[i]);
        }
        out
    }

    /// Drops epochs whose unknown fraction exceeds `max_unknown`.
    pub fn excluding_unknown(&self, max_unknown: f64) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.unknown[i] <= max_unknown).collect();
        self.select(&idx)
    }

    pub fn class_scores(&self, class: usize) -> Vec<f64> {
        self.scores.iter().skip(class).step_by(self.n_classes).copied().collect()
    }

    /// Binarized targets of `class`.
    pub fn class_labels(&self, class: usize) -> Vec<bool> {
        self.targets.iter().skip(class).step_by(self.n_classes).map(|&t| t >= POSITIVE_FRACTION).collect()
    }

    pub fn per_class_auroc(&self) -> Vec<Option<f64>> {
        (0..self.n_classes).map(|c| auroc(&self.class_scores(c), &self.class_labels(c)).ok()).collect()
    }

    pub fn macro_auroc(&self) -> Result<f64, EvalError> {
        macro_auroc(&self.per_class_auroc())
    }

    /// Epoch indices grouped by patient, groups in order of first appearance.
    pub fn patient_groups(&self) -> Vec<Vec<usize>> {
        let mut names: Vec<&str> = Vec::new();
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, p) in self.patients.iter().enumerate() {
            match names.iter().position(|n| n == p) {
                Some(g) => groups[g].push(i),
                None => {
                    names.push(p);
                    groups.push(vec![i]);
                }
            }
        }
        groups
    }
}

/// Per-epoch class probabilities `[E, C]` of one record, averaging every sliding window
/// that covers an epoch.
pub fn sliding_window_predict<T: Real>(
    model: &Model<T>,
    signal: &[f32],
    input_epochs: usize,
    stride: usize,
) -> Result<Vec<f64>, EvalError> {
    let el = model.config.epoch_len;
    if stride == 0 {
        return Err(EvalError::Argument("stride must be at least 1".into()));
    }
    if signal.len() % el != 0 {
        return Err(EvalError::Argument(format!("{} samples is not a whole number of epochs", signal.len())));
    }
    let n_epochs = signal.len() / el;
    let ranges = crop_ranges(n_epochs, input_epochs, CropMode::InferSliding { stride })?;
    let c = model.config.n_classes;
    let mut sum = vec![0.0; n_epochs * c];
    let mut count = vec![0usize; n_epochs];
    let Some(first) = ranges.first() else {
        return Ok(sum);
    };
    let window = first.len();
    let kernels = model.compute_kernels(Some(window))?;
    let x: Vec<T> = signal.iter().map(|&v| T::c(v as f64)).collect();
    let tokens = model.encode(&x, &kernels)?;
    let h = tokens.shape()[1];
    for r in ranges {
        let t = crate::tensor::Tensor::from_vec(&[r.len(), h], tokens.data()[r.start * h..r.end * h].to_vec());
        let p = model.predict_tokens(&t, &kernels, false)?;
        for (k, e) in r.enumerate() {
            count[e] += 1;
            for j in 0..c {
                sum[e * c + j] += p.data()[k * c + j].f64();
            }
        }
    }
    for (e, &n) in count.iter().enumerate() {
        for v in &mut sum[e * c..(e + 1) * c] {
            *v /= n as f64;
        }
    }
    Ok(sum)
}

/// Class of each epoch from probabilities `[E, C]`: the class with the largest margin over
/// its threshold.
pub fn predicted_classes(probs: &[f64], thresholds: &[f64]) -> Vec<Option<usize>> {
    let c = thresholds.len();
    probs
        .chunks(c)
        .map(|row| {
            row.iter()
                .zip(thresholds)
                .enumerate()
                .map(|(j, (&p, &t))| (j, if t.is_finite() { p - t } else if t < 0.0 { f64::INFINITY } else { f64::NEG_INFINITY }))
                .fold(None, |best: Option<(usize, f64)>, (j, m)| match best {
                    Some((_, bm)) if bm >= m => best,
                    _ => Some((j, m)),
                })
                .map(|(j, _)| j)
        })
        .collect()
}

/// Reference class of each epoch: the largest fraction, or `None` when unknown dominates.
pub fn reference_classes(targets: &[f64], unknown: &[f64], n_classes: usize) -> Vec<Option<usize>> {
    targets
        .chunks(n_classes)
        .zip(unknown)
        .map(|(row, &u)| {
            if u > METRIC_UNKNOWN_MAX {
                return None;
            }
            let (j, _) = row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            Some(j)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurdenReport {
    pub record: String,
    pub actual: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    pub n_epochs: usize,
    pub n_patients: usize,
    pub per_class_auroc: Vec<Option<f64>>,
    pub per_class_auroc_ci: Vec<Option<BootstrapCi>>,
    pub macro_auroc: f64,
    pub macro_auroc_ci: Option<BootstrapCi>,
    /// Specificity of the AF class at 0.9 sensitivity, when AF is evaluable.
    pub af_specificity_at_sensitivity: Option<f64>,
    pub af_specificity_ci: Option<BootstrapCi>,
    pub af_burden: Vec<BurdenReport>,
    pub paired_difference: Option<PairedDiff>,
}

impl MetricsReport {
    /// Point metrics of `scored` (unknown-heavy epochs already removed), with patient-level
    /// bootstrap intervals when `bootstrap` gives `(iterations, seed)`.
    pub fn from_scored(
        scored: &ScoredEpochs,
        classes: &[String],
        af_class: Option<usize>,
        af_burden: Vec<BurdenReport>,
        bootstrap: Option<(usize, u64)>,
    ) -> Result<Self, EvalError> {
        if classes.len() != scored.n_classes {
            return Err(EvalError::Argument(format!("{} class names for {} classes", classes.len(), scored.n_classes)));
        }
        let per_class_auroc = scored.per_class_auroc();
        let macro_value = macro_auroc(&per_class_auroc)?;
        let af_metric = |s: &ScoredEpochs, c: usize| specificity_at_sensitivity(&s.class_scores(c), &s.class_labels(c), 1.0 - DEFAULT_FNR);
        let af_spec = af_class.and_then(|c| af_metric(scored, c).ok());
        let (per_class_auroc_ci, macro_auroc_ci, af_specificity_ci) = match bootstrap {
            None => (vec![None; classes.len()], None, None),
            Some((iters, seed)) => {
                let per = per_class_auroc
                    .iter()
                    .enumerate()
                    .map(|(c, a)| match a {
                        Some(_) => bootstrap_ci(scored, |s| auroc(&s.class_scores(c), &s.class_labels(c)), iters, seed).map(Some),
                        None => Ok(None),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let m = bootstrap_ci(scored, |s| s.macro_auroc(), iters, seed)?;
                let af = match (af_class, af_spec) {
                    (Some(c), Some(_)) => Some(bootstrap_ci(scored, |s| af_metric(s, c), iters, seed)?),
                    _ => None,
                };
                (per, Some(m), af)
            }
        };
        Ok(Self {
            classes: classes.to_vec(),
            n_epochs: scored.len(),
            n_patients: scored.patient_groups().len(),
            per_class_auroc,
            per_class_auroc_ci,
            macro_auroc: macro_value,
            macro_auroc_ci,
            af_specificity_at_sensitivity: af_spec,
            af_specificity_ci,
            af_burden,
            paired_difference: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auroc(s: &[f64], l: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auroc_examples() {
        let a = auroc(&[0.35, 0.8, 0.1, 0.4], &[true, true, false, false]).unwrap();
        assert_eq!(a, 0.75);
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(EvalError::Undefined(_))));
    }

    #[test]
    fn macro_examples() {
        assert_eq!(macro_auroc(&[Some(1.0), Some(0.5)]).unwrap(), 0.75);
        assert_eq!(macro_auroc(&[Some(0.6)]).unwrap(), 0.6);
        assert_eq!(macro_auroc(&[Some(0.6), None, Some(0.8)]).unwrap(), 0.7);
        assert!(macro_auroc(&[None]).is_err());
    }

    #[test]
    fn threshold_examples() {
        let mut s: Vec<f64> = (1..=9).map(|i| 0.9 + i as f64 / 100.0).collect();
        s.push(0.05);
        let mut scores = s.clone();
        let mut labels = vec![true; 10];
        scores.extend([0.2, 0.3, 0.5]);
        labels.extend([false; 3]);
        let t = threshold_at_fnr(&scores, &labels, 0.1).unwrap();
        assert_eq!(s.iter().filter(|&&v| v >= t).count(), 9);
        let t0 = threshold_at_fnr(&scores, &labels, 0.0).unwrap();
        assert!(t0 < 0.05);
        let t1 = threshold_at_fnr(&scores, &labels, 1.0).unwrap();
        assert!(t1 > 0.99);
    }

    #[test]
    fn specificity_examples() {
        let s = [0.9, 0.8, 0.7, 0.1, 0.2];
        let l = [true, true, true, false, false];
        assert_eq!(specificity_at_sensitivity(&s, &l, 0.9).unwrap(), 1.0);
    }

    #[test]
    fn identical_distributions_give_complementary_specificity() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut total = 0.0;
        for _ in 0..50 {
            let s: Vec<f64> = (0..400).map(|_| rng.random()).collect();
            let l: Vec<bool> = (0..400).map(|_| rng.random_bool(0.5)).collect();
            total += specificity_at_sensitivity(&s, &l, 0.9).unwrap();
        }
        assert!((total / 50.0 - 0.1).abs() < 0.03, "{}", total / 50.0);
    }

    #[test]
    fn burden_examples() {
        assert_eq!(af_burden(&[1.0; 7]).unwrap(), 1.0);
        assert_eq!(af_burden(&[1.0, 0.0, 1.0, 0.0]).unwrap(), 0.5);
        assert!(af_burden(&[]).is_err());
        assert_eq!(predicted_af_burden(&[0.9, 0.2, 0.6, 0.1], 0.5).unwrap(), 0.5);
    }

    #[test]
    fn predicted_class_rule() {
        let p = [0.6, 0.5, 0.1, 0.2, 0.3, 0.9];
        assert_eq!(predicted_classes(&p, &[0.5, 0.2, 0.5]), vec![Some(1), Some(2)]);
        assert_eq!(reference_classes(&[0.6, 0.4, 0.0, 0.1, 0.1, 0.1], &[0.0, 0.7], 3), vec![Some(0), None]);
    }

    #[test]
    fn patient_groups_in_first_seen_order() {
        let mut s = ScoredEpochs::new(1);
        for p in ["b", "a", "b", "c", "a"] {
            s.push(p, &[0.5], &[1.0], 0.0);
        }
        assert_eq!(s.patient_groups(), vec![vec![0, 2], vec![1, 4], vec![3]]);
        assert_eq!(s.excluding_unknown(0.5).len(), 5);
    }

    #[test]
    fn metrics_report_from_scored() {
        // class 0 separable, class 1 never positive
        let mut s = ScoredEpochs::new(2);
        for p in 0..4 {
            for k in 0..6 {
                let pos = (p + k) % 2 == 0;
                let score = if pos { 0.6 + 0.05 * k as f64 } else { 0.1 + 0.05 * k as f64 };
                s.push(&format!("p{p}"), &[score, 0.2], &[f64::from(u8::from(pos)), 0.0], 0.0);
            }
        }
        let classes = vec!["AF".to_string(), "AFL".to_string()];
        let r = MetricsReport::from_scored(&s, &classes, Some(0), Vec::new(), None).unwrap();
        assert_eq!(r.per_class_auroc, vec![Some(1.0), None]);
        assert_eq!(r.macro_auroc, 1.0);
        assert_eq!(r.af_specificity_at_sensitivity, Some(1.0));
        assert_eq!((r.n_epochs, r.n_patients), (24, 4));
        assert!(r.macro_auroc_ci.is_none());
        let b = MetricsReport::from_scored(&s, &classes, Some(0), Vec::new(), Some((50, 1))).unwrap();
        assert_eq!(b.macro_auroc_ci.as_ref().unwrap().n_iter, 50);
        assert!(b.per_class_auroc_ci[0].is_some() && b.per_class_auroc_ci[1].is_none());
        assert!(b.af_specificity_ci.is_some());
        assert!(MetricsReport::from_scored(&s, &classes[..1], None, Vec::new(), None).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pairs(v in proptest::collection::vec((0u8..5, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|x| x.0 as f64 / 4.0).collect();
            let l: Vec<bool> = v.iter().map(|x| x.1).collect();
            prop_assume!(l.iter().any(|&b| b) && l.iter().any(|&b| !b));
            prop_assert_eq!(auroc(&s, &l).unwrap(), brute_auroc(&s, &l));
        }

        #[test]
        fn auroc_rank_invariant(v in proptest::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)) {
            let s: Vec<f64> = v.iter().map(|x| x.0).collect();
            let l: Vec<bool> = v.iter().map(|x| x.1).collect();
            prop_assume!(l.iter().any(|&b| b) && l.iter().any(|&b| !b));
            let t: Vec<f64> = s.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        }

        #[test]
        fn specificity_monotone(v in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 4..60)) {
            let s: Vec<f64> = v.iter().map(|x| x.0).collect();
            let l: Vec<bool> = v.iter().map(|x| x.1).collect();
            prop_assume!(l.iter().any(|&b| b) && l.iter().any(|&b| !b));
            let n_pos = l.iter().filter(|&&b| b).count();
            // achievable sensitivities only
            let mut prev = f64::INFINITY;
            for k in 0..=n_pos {
                let sens = k as f64 / n_pos as f64;
                let sp = specificity_at_sensitivity(&s, &l, sens).unwrap();
                prop_assert!((0.0..=1.0).contains(&sp));
                prop_assert!(sp <= prev);
                prev = sp;
            }
        }
    }
}
