//! From WFDB records to model-ready epoch datasets.

mod archive;
mod crops;
mod labels;
mod resample;
mod split;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use archive::{export_dataset, load_dataset, ARCHIVE_VERSION};
pub use crops::{crop_ranges, sample_crops, Crop, CropMode};
pub use labels::{aggregate_epoch_fractions, build_rhythm_mask, FractionLabels, RhythmMask};
pub use resample::{resample, KAISER_BETA, ROLLOFF, ZERO_CROSSINGS};
pub use split::{partition_sizes, split_patients, Partition, SplitAssignment};

use crate::wfdb::{Record, RhythmClass};

/// Sampling rate every signal is brought to.
pub const TARGET_RATE: f64 = 128.0;
/// Samples per 30-second epoch at [`TARGET_RATE`].
pub const EPOCH_LEN: usize = 3840;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("event at sample {index} lies beyond the record ({limit} samples)")]
    Range { index: u64, limit: usize },
    #[error("dataset format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// One resampled recording with its epoch labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub record_name: String,
    pub patient_id: String,
    /// Signal in mV at [`TARGET_RATE`], truncated to whole epochs.
    pub signal: Vec<f32>,
    pub labels: FractionLabels,
}

impl EpochRecord {
    pub fn n_epochs(&self) -> usize {
        self.labels.n_epochs()
    }

    pub fn epoch_signal(&self, epochs: std::ops::Range<usize>) -> &[f32] {
        &self.signal[epochs.start * EPOCH_LEN..epochs.end * EPOCH_LEN]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochDataset {
    pub classes: Vec<RhythmClass>,
    pub sampling_rate: f64,
    pub epoch_len: usize,
    pub records: Vec<EpochRecord>,
    pub split: Option<SplitAssignment>,
}

impl EpochDataset {
    pub fn new(classes: Vec<RhythmClass>) -> Self {
        Self { classes, sampling_rate: TARGET_RATE, epoch_len: EPOCH_LEN, records: Vec::new(), split: None }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.sampling_rate != TARGET_RATE || self.epoch_len != EPOCH_LEN {
            return Err(PipelineError::Format(format!(
                "dataset must be at {TARGET_RATE} Hz with {EPOCH_LEN}-sample epochs, found {} Hz / {}",
                self.sampling_rate, self.epoch_len
            )));
        }
        for r in &self.records {
            if r.labels.n_classes != self.classes.len() {
                return Err(PipelineError::Format(format!("{}: label width mismatch", r.record_name)));
            }
            if r.signal.len() != r.n_epochs() * EPOCH_LEN {
                return Err(PipelineError::Format(format!("{}: signal is not whole epochs", r.record_name)));
            }
        }
        Ok(())
    }

    /// Distinct patient ids in record order.
    pub fn patient_ids(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.patient_id.clone()))
            .map(|r| r.patient_id.clone())
            .collect()
    }

    /// Indices of records whose patient is in `part` of the stored split.
    pub fn records_in(&self, part: Partition) -> Result<Vec<usize>, PipelineError> {
        let split = self
            .split
            .as_ref()
            .ok_or_else(|| PipelineError::Argument("dataset has no patient split".into()))?;
        let patients = split.patients(part);
        Ok((0..self.records.len())
            .filter(|&i| patients.contains(&self.records[i].patient_id))
            .collect())
    }
}

/// Resamples the first channel of `record`, labels it, and truncates to whole epochs.
pub fn prepare_record(record: &Record, patient_id: &str, classes: &[RhythmClass]) -> Result<EpochRecord, PipelineError> {
    let channel = record
        .signal
        .first()
        .ok_or_else(|| PipelineError::Argument(format!("{}: no decoded channel", record.header.record_name)))?;
    let fs = record.header.sampling_rate;
    let resampled = resample(channel, fs, TARGET_RATE)?;
    let mask = build_rhythm_mask(&record.annotations, resampled.len(), fs, classes)?;
    let labels = aggregate_epoch_fractions(&mask, EPOCH_LEN)?;
    let signal = resampled[..labels.n_epochs() * EPOCH_LEN].iter().map(|&v| v as f32).collect();
    Ok(EpochRecord {
        record_name: record.header.record_name.clone(),
        patient_id: patient_id.to_string(),
        signal,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wfdb::{parse_header, AnnotationEvent};

    #[test]
    fn prepare_360hz_record() {
        let header = parse_header("m 1 360 26000\nm.dat 212\n").unwrap();
        let record = Record {
            header,
            signal: vec![vec![0.1; 26000]],
            annotations: vec![AnnotationEvent::rhythm(0, "(N"), AnnotationEvent::rhythm(10800, "(AFIB")],
        };
        let classes = [RhythmClass::Normal, RhythmClass::AtrialFibrillation, RhythmClass::AtrialFlutter];
        let rec = prepare_record(&record, "m", &classes).unwrap();
        // 26000 * 128 / 360 = 9244.4 -> 9244 samples -> 2 epochs
        assert_eq!(rec.n_epochs(), 2);
        assert_eq!(rec.signal.len(), 2 * EPOCH_LEN);
        assert_eq!(rec.labels.epoch(0), &[1.0, 0.0, 0.0]);
        // AF starts at 10800 * 128 / 360 = 3840 exactly
        assert_eq!(rec.labels.epoch(1), &[0.0, 1.0, 0.0]);
    }
}
