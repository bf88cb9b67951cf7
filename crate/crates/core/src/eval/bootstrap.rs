use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalError, ScoredEpochs};

pub const DEFAULT_BOOTSTRAP_ITERS: usize = 10_000;
/// Maximum draws for a single resample before the data is declared degenerate.
pub const REDRAW_LIMIT: u64 = 1_000_000;
const LO_PCT: f64 = 2.5;
const HI_PCT: f64 = 97.5;

/// Percentile interval of a patient-level bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    /// `max(|point - lo|, |point - hi|)`, the symmetric +/- value.
    pub max_abs_dev: f64,
    pub n_iter: usize,
    /// Resamples discarded because a class lost all positives or the metric was undefined.
    pub redraws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDiff {
    pub ci: BootstrapCi,
    /// Zero lies outside the interval.
    pub significant: bool,
}

/// Linear interpolation between order statistics; `sorted` must be non-empty.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

fn summarize(point: f64, mut stats: Vec<f64>, redraws: u64) -> BootstrapCi {
    stats.sort_by(f64::total_cmp);
    let lo = percentile(&stats, LO_PCT);
    let hi = percentile(&stats, HI_PCT);
    BootstrapCi { point, lo, hi, max_abs_dev: (point - lo).abs().max((point - hi).abs()), n_iter: stats.len(), redraws }
}

/// Classes with a positive epoch in `data`; every resample must keep one.
fn present_classes(data: &ScoredEpochs) -> Vec<usize> {
    (0..data.n_classes).filter(|&c| data.class_labels(c).iter().any(|&l| l)).collect()
}

fn has_positives(data: &ScoredEpochs, classes: &[usize], idx: &[usize]) -> bool {
    let c = data.n_classes;
    classes
        .iter()
        .all(|&k| idx.iter().any(|&i| data.targets[i * c + k] >= super::POSITIVE_FRACTION))
}

/// Runs `n_iter` patient resamples. Iteration `i` draws from its own stream of `seed`, so
/// results do not depend on scheduling.
fn resample<F>(
    data: &ScoredEpochs,
    n_iter: usize,
    seed: u64,
    stat: F,
) -> Result<(Vec<f64>, u64), EvalError>
where
    F: Fn(&[usize]) -> Result<f64, EvalError> + Sync,
{
    let groups = data.patient_groups();
    if groups.len() < 2 {
        return Err(EvalError::Argument(format!("bootstrap needs at least 2 patients, got {}", groups.len())));
    }
    if n_iter == 0 {
        return Err(EvalError::Argument("n_iter must be positive".into()));
    }
    let classes = present_classes(data);
    let results: Vec<(f64, u64)> = (0..n_iter)
        .into_par_iter()
        .map(|it| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(it as u64);
            let mut redraws = 0u64;
            let mut idx = Vec::new();
            loop {
                idx.clear();
                for _ in 0..groups.len() {
                    idx.extend_from_slice(&groups[rng.random_range(0..groups.len())]);
                }
                if has_positives(data, &classes, &idx) {
                    match stat(&idx) {
                        Ok(v) => return Ok((v, redraws)),
                        Err(EvalError::Undefined(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                redraws += 1;
                if redraws >= REDRAW_LIMIT {
                    return Err(EvalError::Degenerate(format!(
                        "resample {it}: no admissible draw in {REDRAW_LIMIT} attempts"
                    )));
                }
            }
        })
        .collect::<Result<_, _>>()?;
    let redraws = results.iter().map(|r| r.1).sum();
    Ok((results.into_iter().map(|r| r.0).collect(), redraws))
}

/// Patient-level percentile bootstrap of `metric`.
pub fn bootstrap_ci<F>(data: &ScoredEpochs, metric: F, n_iter: usize, seed: u64) -> Result<BootstrapCi, EvalError>
where
    F: Fn(&ScoredEpochs) -> Result<f64, EvalError> + Sync,
{
    data.validate()?;
    let point = metric(data)?;
    let (stats, redraws) = resample(data, n_iter, seed, |idx| metric(&data.select(idx)))?;
    Ok(summarize(point, stats, redraws))
}

/// Bootstrap of `metric(a) - metric(b)` with both systems resampled by the same indices.
pub fn paired_bootstrap_diff<F>(
    a: &ScoredEpochs,
    b: &ScoredEpochs,
    metric: F,
    n_iter: usize,
    seed: u64,
) -> Result<PairedDiff, EvalError>
where
    F: Fn(&ScoredEpochs) -> Result<f64, EvalError> + Sync,
{
    a.validate()?;
    b.validate()?;
    if a.n_classes != b.n_classes || a.patients != b.patients || a.targets != b.targets || a.unknown != b.unknown {
        return Err(EvalError::Argument("paired systems must be scored on identical epochs".into()));
    }
    let point = metric(a)? - metric(b)?;
    let (stats, redraws) = resample(a, n_iter, seed, |idx| Ok(metric(&a.select(idx))? - metric(&b.select(idx))?))?;
    let ci = summarize(point, stats, redraws);
    let significant = ci.lo > 0.0 || ci.hi < 0.0;
    Ok(PairedDiff { ci, significant })
}
