use std::ops::Range;

use super::{EpochDataset, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropMode {
    /// Disjoint windows tiling each record from epoch 0; the tail is dropped and records
    /// shorter than the window are skipped.
    TrainNonOverlap,
    /// Windows every `stride` epochs plus a right-aligned final window, so every epoch is
    /// covered. A record shorter than the window yields one window over the whole record.
    InferSliding { stride: usize },
}

/// A window of consecutive epochs of one record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Crop {
    pub record: usize,
    pub epochs: Range<usize>,
}

/// Epoch windows of size `input_epochs` over a record holding `n_epochs` epochs.
pub fn crop_ranges(n_epochs: usize, input_epochs: usize, mode: CropMode) -> Result<Vec<Range<usize>>, PipelineError> {
    if input_epochs == 0 {
        return Err(PipelineError::Argument("input_epochs must be at least 1".into()));
    }
    match mode {
        CropMode::TrainNonOverlap => Ok((0..n_epochs / input_epochs)
            .map(|k| k * input_epochs..(k + 1) * input_epochs)
            .collect()),
        CropMode::InferSliding { stride } => {
            if stride == 0 {
                return Err(PipelineError::Argument("stride must be at least 1".into()));
            }
            if n_epochs == 0 {
                return Ok(Vec::new());
            }
            if n_epochs <= input_epochs {
                return Ok(vec![0..n_epochs]);
            }
            let last_start = n_epochs - input_epochs;
            let mut out: Vec<Range<usize>> =
                (0..=last_start).step_by(stride).map(|s| s..s + input_epochs).collect();
            if out.last().is_some_and(|r| r.start != last_start) {
                out.push(last_start..n_epochs);
            }
            Ok(out)
        }
    }
}

/// Crops over every record of `dataset` (optionally restricted to `records`).
pub fn sample_crops(
    dataset: &EpochDataset,
    records: Option<&[usize]>,
    input_epochs: usize,
    mode: CropMode,
) -> Result<Vec<Crop>, PipelineError> {
    let all: Vec<usize>;
    let indices = match records {
        Some(r) => r,
        None => {
            all = (0..dataset.records.len()).collect();
            &all
        }
    };
    let mut out = Vec::new();
    for &record in indices {
        let n = dataset.records[record].labels.n_epochs();
        out.extend(crop_ranges(n, input_epochs, mode)?.into_iter().map(|epochs| Crop { record, epochs }));
    }
    Ok(out)
}
