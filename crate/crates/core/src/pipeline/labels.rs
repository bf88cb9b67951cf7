use crate::wfdb::{AnnotationEvent, RhythmClass};

use super::{PipelineError, TARGET_RATE};

/// Per-sample rhythm class indices into `classes`; [`RhythmMask::UNKNOWN`] marks unlabeled time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RhythmMask {
    pub classes: Vec<RhythmClass>,
    pub mask: Vec<u8>,
}

impl RhythmMask {
    pub const UNKNOWN: u8 = u8::MAX;

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Per-epoch fraction of time spent in each class, plus the unlabeled remainder.
#[derive(Debug, Clone, PartialEq)]
pub struct FractionLabels {
    pub n_classes: usize,
    /// Row-major `[epoch][class]`.
    pub fractions: Vec<f64>,
    pub unknown: Vec<f64>,
}

impl FractionLabels {
    pub fn empty(n_classes: usize) -> Self {
        Self { n_classes, fractions: Vec::new(), unknown: Vec::new() }
    }

    pub fn n_epochs(&self) -> usize {
        self.unknown.len()
    }

    pub fn epoch(&self, e: usize) -> &[f64] {
        &self.fractions[e * self.n_classes..(e + 1) * self.n_classes]
    }

    /// Copy restricted to epochs `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            n_classes: self.n_classes,
            fractions: self.fractions[start * self.n_classes..end * self.n_classes].to_vec(),
            unknown: self.unknown[start..end].to_vec(),
        }
    }
}

/// Maps rhythm-change annotations onto a sample mask at [`TARGET_RATE`].
///
/// Each rhythm-change event opens a segment that lasts until the next one; time before the
/// first event, and rhythms absent from `classes`, are unknown. Other annotations are ignored.
pub fn build_rhythm_mask(
    annotations: &[AnnotationEvent],
    n_samples: usize,
    fs_orig: f64,
    classes: &[RhythmClass],
) -> Result<RhythmMask, PipelineError> {
    if !(fs_orig > 0.0 && fs_orig.is_finite()) {
        return Err(PipelineError::Argument(format!("sampling rate must be positive, got {fs_orig}")));
    }
    if classes.len() >= usize::from(RhythmMask::UNKNOWN) {
        return Err(PipelineError::Argument("too many classes".into()));
    }
    let mut mask = vec![RhythmMask::UNKNOWN; n_samples];
    let mut segments: Vec<(usize, u8)> = Vec::new();
    let mut last = 0u64;
    for ev in annotations.iter().filter(|e| e.is_rhythm_change()) {
        if ev.sample < last {
            return Err(PipelineError::Argument(format!(
                "rhythm events out of order at sample {}",
                ev.sample
            )));
        }
        last = ev.sample;
        let start = (ev.sample as f64 * TARGET_RATE / fs_orig).round() as usize;
        if start > n_samples {
            return Err(PipelineError::Range { index: ev.sample, limit: n_samples });
        }
        let class = ev
            .aux
            .as_deref()
            .and_then(RhythmClass::from_aux)
            .and_then(|c| classes.iter().position(|&k| k == c))
            .map_or(RhythmMask::UNKNOWN, |i| i as u8);
        segments.push((start, class));
    }
    for (i, &(start, class)) in segments.iter().enumerate() {
        let end = segments.get(i + 1).map_or(n_samples, |s| s.0);
        mask[start..end].fill(class);
    }
    Ok(RhythmMask { classes: classes.to_vec(), mask })
}

/// Counts class membership per complete epoch; a trailing partial epoch is dropped.
pub fn aggregate_epoch_fractions(mask: &RhythmMask, epoch_len: usize) -> Result<FractionLabels, PipelineError> {
    if epoch_len == 0 {
        return Err(PipelineError::Argument("epoch length must be positive".into()));
    }
    let n_classes = mask.classes.len();
    let n_epochs = mask.len() / epoch_len;
    let mut fractions = vec![0.0; n_epochs * n_classes];
    let mut unknown = vec![0.0; n_epochs];
    let mut counts = vec![0usize; n_classes + 1];
    for (e, chunk) in mask.mask.chunks_exact(epoch_len).enumerate() {
        counts.fill(0);
        for &c in chunk {
            let slot = if c == RhythmMask::UNKNOWN { n_classes } else { usize::from(c) };
            counts[slot] += 1;
        }
        for c in 0..n_classes {
            fractions[e * n_classes + c] = counts[c] as f64 / epoch_len as f64;
        }
        unknown[e] = counts[n_classes] as f64 / epoch_len as f64;
    }
    Ok(FractionLabels { n_classes, fractions, unknown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use RhythmClass::*;

    const CLASSES: [RhythmClass; 3] = [Normal, AtrialFibrillation, AtrialFlutter];

    #[test]
    fn single_segment() {
        let ann = [AnnotationEvent::rhythm(0, "(N")];
        let m = build_rhythm_mask(&ann, 100, 128.0, &CLASSES).unwrap();
        assert!(m.mask.iter().all(|&c| c == 0));
    }

    #[test]
    fn two_halves() {
        let ann = [AnnotationEvent::rhythm(0, "(N"), AnnotationEvent::rhythm(180, "(AFIB")];
        let m = build_rhythm_mask(&ann, 128, 360.0, &CLASSES).unwrap();
        // 180 * 128 / 360 = 64
        assert!(m.mask[..64].iter().all(|&c| c == 0));
        assert!(m.mask[64..].iter().all(|&c| c == 1));
    }

    #[test]
    fn no_events_is_unknown() {
        let m = build_rhythm_mask(&[], 50, 250.0, &CLASSES).unwrap();
        assert!(m.mask.iter().all(|&c| c == RhythmMask::UNKNOWN));
    }

    #[test]
    fn leading_and_foreign_rhythms_are_unknown() {
        let ann = [
            AnnotationEvent { sample: 2, code: crate::wfdb::code::NORMAL, aux: None },
            AnnotationEvent::rhythm(10, "(SVTA"),
            AnnotationEvent::rhythm(20, "(AFL"),
            AnnotationEvent::rhythm(30, "(B"),
        ];
        let m = build_rhythm_mask(&ann, 40, 128.0, &CLASSES).unwrap();
        assert!(m.mask[..20].iter().all(|&c| c == RhythmMask::UNKNOWN));
        assert!(m.mask[20..30].iter().all(|&c| c == 2));
        assert!(m.mask[30..].iter().all(|&c| c == RhythmMask::UNKNOWN));
    }

    #[test]
    fn event_past_end_is_range_error() {
        let ann = [AnnotationEvent::rhythm(1000, "(N")];
        let err = build_rhythm_mask(&ann, 100, 128.0, &CLASSES).unwrap_err();
        assert!(matches!(err, PipelineError::Range { index: 1000, limit: 100 }));
    }

    #[test]
    fn sixty_forty_epoch() {
        let mut mask = vec![0u8; 3840];
        mask[2304..].fill(1);
        let m = RhythmMask { classes: CLASSES.to_vec(), mask };
        let f = aggregate_epoch_fractions(&m, 3840).unwrap();
        assert_eq!(f.epoch(0), &[0.6, 0.4, 0.0]);
        assert_eq!(f.unknown, vec![0.0]);
    }

    #[test]
    fn partial_epoch_dropped() {
        let m = RhythmMask { classes: CLASSES.to_vec(), mask: vec![0; 7680 + 100] };
        let f = aggregate_epoch_fractions(&m, 3840).unwrap();
        assert_eq!(f.n_epochs(), 2);
        assert_eq!(f.epoch(1), &[1.0, 0.0, 0.0]);
        assert!(aggregate_epoch_fractions(&m, 0).is_err());
    }
}
