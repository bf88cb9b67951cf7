//! Single-epoch versus multi-epoch comparison on a synthetic corpus, end to end: synthesis,
//! WFDB round trip, preprocessing, patient split, training of both models, test-set
//! scoring, paired bootstrap and rhythm-band fragmentation.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{
    fragmentation, paired_bootstrap_diff, predicted_classes, reference_classes, threshold_at_fnr, EvalError, PairedDiff,
    ScoredEpochs, DEFAULT_FNR, METRIC_UNKNOWN_MAX,
};
use crate::model::{Model, ModelConfig, ModelError};
use crate::pipeline::{prepare_record, split_patients, EpochDataset, Partition, PipelineError};
use crate::synth::{generate_corpus, patient_from_header, SynthError, SynthSpec};
use crate::train::{score_records, train, LogRecord, TrainConfig, TrainError};
use crate::wfdb::{read_record, Channels, RhythmClass, WfdbError};

#[derive(Debug, Error)]
pub enum StudyError {
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Wfdb(#[from] WfdbError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub synth: SynthSpec,
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
    /// Architecture shared by both arms; `input_epochs` and `n_classes` are set per arm.
    pub model: ModelConfig,
    pub single_epochs: usize,
    pub multi_epochs: usize,
    /// Optimizer settings of the single-epoch arm.
    pub single_train: TrainConfig,
    /// Optimizer settings of the multi-epoch arm. Its crops hold many labels each, so a step
    /// takes fewer of them.
    pub multi_train: TrainConfig,
    pub model_seed: u64,
    pub bootstrap_iters: usize,
    pub bootstrap_seed: u64,
}

impl StudyConfig {
    /// 40 patients of 2 h, a 3:1:1 split, scale 0.125, N = 1 against N = 10, five passes.
    /// Steps take 16 crops (16 labelled epochs) for N = 1 and 8 crops (80 epochs) for N = 10.
    pub fn desk(seed: u64) -> Self {
        Self {
            synth: SynthSpec::desk_study(seed),
            split_ratios: [3.0, 1.0, 1.0],
            split_seed: seed,
            model: ModelConfig { scale: 0.125, ..ModelConfig::default() },
            single_epochs: 1,
            multi_epochs: 10,
            single_train: TrainConfig { lr: 5e-3, micro_batch: 8, accumulation: 2, max_epochs: 5, seed, ..TrainConfig::default() },
            multi_train: TrainConfig { lr: 5e-3, micro_batch: 8, accumulation: 1, max_epochs: 5, seed, ..TrainConfig::default() },
            model_seed: seed,
            bootstrap_iters: 2000,
            bootstrap_seed: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub input_epochs: usize,
    pub test_macro_auroc: f64,
    pub epoch_losses: Vec<f64>,
    pub val_scores: Vec<Option<f64>>,
    /// Class-change boundaries in the predicted band, summed over AF-dominant test records.
    pub af_dominant_boundaries: usize,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub single: ArmReport,
    pub multi: ArmReport,
    /// Multi minus single test macro-AUROC.
    pub diff: PairedDiff,
    pub af_dominant_records: Vec<String>,
    pub reference_boundaries: usize,
    pub wall_seconds: f64,
}

/// Synthesizes `cfg.synth` into `dir`, reads it back and builds the split dataset.
pub fn build_dataset(cfg: &StudyConfig, dir: &Path) -> Result<EpochDataset, StudyError> {
    let names = generate_corpus(&cfg.synth, dir)?;
    let classes: Vec<RhythmClass> = cfg.synth.classes.iter().filter_map(|t| t.rhythm()).collect();
    let mut ds = EpochDataset::new(classes.clone());
    for name in &names {
        let rec = read_record(dir, name, "atr", Channels::First)?;
        let patient = patient_from_header(&rec.header).unwrap_or_else(|| name.clone());
        ds.records.push(prepare_record(&rec, &patient, &classes)?);
    }
    ds.split = Some(split_patients(&ds.patient_ids(), cfg.split_ratios, cfg.split_seed)?);
    Ok(ds)
}

/// Records whose reference labels spend more epochs in AF than in any other class.
pub fn af_dominant(ds: &EpochDataset, records: &[usize]) -> Vec<usize> {
    let Some(af) = ds.classes.iter().position(|c| *c == RhythmClass::AtrialFibrillation) else {
        return Vec::new();
    };
    let c = ds.classes.len();
    records
        .iter()
        .copied()
        .filter(|&r| {
            let rec = &ds.records[r];
            let mut counts = vec![0usize; c];
            for k in reference_classes(&rec.labels.fractions, &rec.labels.unknown, c).into_iter().flatten() {
                counts[k] += 1;
            }
            counts.iter().enumerate().all(|(j, &n)| j == af || n < counts[af])
        })
        .collect()
}

/// Trains and scores one arm with `n` input epochs.
pub fn run_arm(
    cfg: &StudyConfig,
    ds: &EpochDataset,
    n: usize,
    train_cfg: &TrainConfig,
    log: &mut dyn FnMut(&str),
) -> Result<(ArmReport, ScoredEpochs, Vec<Vec<Option<usize>>>), StudyError> {
    let model_cfg = ModelConfig { input_epochs: n, n_classes: ds.classes.len(), ..cfg.model.clone() };
    let mut model = Model::<f32>::new(model_cfg, cfg.model_seed)?;
    let t0 = Instant::now();
    let mut on_log = |r: &LogRecord| {
        if let Some(v) = r.val_macro_auroc {
            log(&format!("N={n} pass {} step {} val macro-AUROC {v:.4}", r.epoch, r.step));
        } else if let Some(l) = r.loss.filter(|_| r.step % 25 == 0) {
            log(&format!("N={n} step {} loss {l:.4}", r.step));
        }
    };
    let outcome = train(&mut model, ds, train_cfg, &mut on_log)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let best = outcome.best.model()?;
    // thresholds from validation, bands on test
    let val = ds.records_in(Partition::Valid)?;
    let val_scores = score_records(&best, ds, &val, n, 1.max(n / 2))?.excluding_unknown(METRIC_UNKNOWN_MAX);
    let c = ds.classes.len();
    let thresholds: Vec<f64> = (0..c)
        .map(|j| threshold_at_fnr(&val_scores.class_scores(j), &val_scores.class_labels(j), DEFAULT_FNR).unwrap_or(0.5))
        .collect();
    let test = ds.records_in(Partition::Test)?;
    let scored = score_records(&best, ds, &test, n, 1.max(n / 2))?;
    let mut bands = Vec::new();
    let mut offset = 0;
    for &r in &test {
        let e = ds.records[r].n_epochs();
        bands.push(predicted_classes(&scored.scores[offset * c..(offset + e) * c], &thresholds));
        offset += e;
    }
    let test_auc = scored.excluding_unknown(METRIC_UNKNOWN_MAX).macro_auroc()?;
    let af_recs = af_dominant(ds, &test);
    let boundaries = test.iter().zip(&bands).filter(|(r, _)| af_recs.contains(r)).map(|(_, b)| fragmentation(b)).sum();
    log(&format!("N={n} trained in {train_seconds:.0} s, test macro-AUROC {test_auc:.4}"));
    let report = ArmReport {
        input_epochs: n,
        test_macro_auroc: test_auc,
        epoch_losses: outcome.epoch_losses,
        val_scores: outcome.val_scores,
        af_dominant_boundaries: boundaries,
        train_seconds,
    };
    Ok((report, scored, bands))
}

pub fn run_study(cfg: &StudyConfig, dir: &Path, log: &mut dyn FnMut(&str)) -> Result<StudyReport, StudyError> {
    let t0 = Instant::now();
    let ds = build_dataset(cfg, dir)?;
    log(&format!("corpus ready: {} records, {} epochs", ds.records.len(), ds.records.iter().map(|r| r.n_epochs()).sum::<usize>()));
    let (single, s_scored, _) = run_arm(cfg, &ds, cfg.single_epochs, &cfg.single_train, log)?;
    let (multi, m_scored, _) = run_arm(cfg, &ds, cfg.multi_epochs, &cfg.multi_train, log)?;
    let (a, b) = (m_scored.excluding_unknown(METRIC_UNKNOWN_MAX), s_scored.excluding_unknown(METRIC_UNKNOWN_MAX));
    let diff = paired_bootstrap_diff(&a, &b, |s| s.macro_auroc(), cfg.bootstrap_iters, cfg.bootstrap_seed)?;
    let test = ds.records_in(Partition::Test)?;
    let af_recs = af_dominant(&ds, &test);
    let c = ds.classes.len();
    let reference_boundaries = af_recs
        .iter()
        .map(|&r| fragmentation(&reference_classes(&ds.records[r].labels.fractions, &ds.records[r].labels.unknown, c)))
        .sum();
    Ok(StudyReport {
        single,
        multi,
        diff,
        af_dominant_records: af_recs.iter().map(|&r| ds.records[r].record_name.clone()).collect(),
        reference_boundaries,
        wall_seconds: t0.elapsed().as_secs_f64(),
    })
}
