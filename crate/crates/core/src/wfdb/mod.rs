//! Reader and writer for the subset of WFDB used by long-term rhythm databases:
//! `.hea` headers, `.dat` signals in formats 212 and 16, and MIT `.atr` annotations.

mod annotation;
mod header;
mod signal;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use annotation::{code, parse_annotations, write_annotations, AnnotationEvent};
pub use header::{parse_header, RecordHeader, SignalSpec, DEFAULT_ADC_GAIN};
pub use signal::{adc_to_physical, checksum, decode_signal, encode_signal, physical_to_adc, SignalFormat};

#[derive(Debug, Error)]
pub enum WfdbError {
    #[error("header line {line}: {message}")]
    Header { line: usize, message: String },
    #[error("unsupported signal format {0}")]
    UnsupportedFormat(u16),
    #[error("signal file truncated at byte {offset} (need {needed} bytes)")]
    Truncated { offset: usize, needed: usize },
    #[error("signal file has {found_bytes} payload bytes, expected {expected} samples per signal ending at byte {offset}")]
    SampleCountMismatch { offset: usize, expected: usize, found_bytes: usize },
    #[error("unsupported record layout: {0}")]
    Layout(String),
    #[error("value {value} of signal {signal} at sample {sample} does not fit format {format}")]
    OutOfRange { signal: usize, sample: usize, value: i32, format: u16 },
    #[error("invalid calibration: ADC gain {0}")]
    InvalidCalibration(f64),
    #[error("annotation stream at byte {offset}: {message}")]
    Annotation { offset: usize, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl WfdbError {
    pub(crate) fn header(line: usize, message: impl Into<String>) -> Self {
        Self::Header { line, message: message.into() }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// Rhythm classes recognised in rhythm-change aux strings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RhythmClass {
    Normal,
    AtrialFibrillation,
    AtrialFlutter,
    Svta,
}

impl RhythmClass {
    pub const ALL: [RhythmClass; 4] = [Self::Normal, Self::AtrialFibrillation, Self::AtrialFlutter, Self::Svta];

    /// Case-sensitive mapping of an aux string; anything else is unknown (`None`).
    pub fn from_aux(aux: &str) -> Option<Self> {
        match aux {
            "(N" => Some(Self::Normal),
            "(AFIB" => Some(Self::AtrialFibrillation),
            "(AFL" => Some(Self::AtrialFlutter),
            "(SVTA" => Some(Self::Svta),
            _ => None,
        }
    }

    pub fn aux(self) -> &'static str {
        match self {
            Self::Normal => "(N",
            Self::AtrialFibrillation => "(AFIB",
            Self::AtrialFlutter => "(AFL",
            Self::Svta => "(SVTA",
        }
    }

    /// Short label: N, AF, AFLT, SVTA.
    pub fn label(self) -> &'static str {
        match self {
            Self::Normal => "N",
            Self::AtrialFibrillation => "AF",
            Self::AtrialFlutter => "AFLT",
            Self::Svta => "SVTA",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == label)
    }
}

impl fmt::Display for RhythmClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Which channels [`read_record`] converts to physical units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Channels {
    #[default]
    First,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub header: RecordHeader,
    /// Decoded channels in mV, `[channel][sample]`.
    pub signal: Vec<Vec<f64>>,
    pub annotations: Vec<AnnotationEvent>,
}

/// Reads `<dir>/<name>.hea`, its signal file and, when present, `<dir>/<name>.<ann_ext>`.
pub fn read_record(dir: &Path, name: &str, ann_ext: &str, channels: Channels) -> Result<Record, WfdbError> {
    let hea_path = dir.join(format!("{name}.hea"));
    let text = fs::read_to_string(&hea_path).map_err(|e| WfdbError::io(&hea_path, e))?;
    let header = parse_header(&text)?;
    let dat_path = dir.join(&header.signals[0].file_name);
    let bytes = fs::read(&dat_path).map_err(|e| WfdbError::io(&dat_path, e))?;
    let adc = decode_signal(&bytes, &header)?;
    let take = match channels {
        Channels::First => 1,
        Channels::All => adc.len(),
    };
    let signal = adc
        .iter()
        .zip(&header.signals)
        .take(take)
        .map(|(s, spec)| adc_to_physical(s, spec.adc_gain, spec.baseline))
        .collect::<Result<Vec<_>, _>>()?;
    let ann_path = dir.join(format!("{name}.{ann_ext}"));
    let annotations = if ann_path.exists() {
        let raw = fs::read(&ann_path).map_err(|e| WfdbError::io(&ann_path, e))?;
        parse_annotations(&raw)?
    } else {
        Vec::new()
    };
    Ok(Record { header, signal, annotations })
}

/// Writes a header/signal/annotation triplet. Every signal in `record.header` must have a
/// matching channel in `record.signal`; samples are quantised with each signal's gain and baseline.
pub fn write_record(dir: &Path, record: &Record, ann_ext: &str) -> Result<(), WfdbError> {
    let header = &record.header;
    header.validate()?;
    if record.signal.len() != header.n_signals() {
        return Err(WfdbError::Layout(format!(
            "header lists {} signal(s), record holds {}",
            header.n_signals(),
            record.signal.len()
        )));
    }
    let format = header.signals[0].format;
    let adc = record
        .signal
        .iter()
        .zip(&header.signals)
        .map(|(s, spec)| physical_to_adc(s, spec.adc_gain, spec.baseline, format))
        .collect::<Result<Vec<_>, _>>()?;
    write_adc_record(dir, header, &adc, &record.annotations, ann_ext)
}

/// Writes raw ADC values; `initial_value` and `checksum` in the written header are recomputed.
pub fn write_adc_record(
    dir: &Path,
    header: &RecordHeader,
    adc: &[Vec<i32>],
    annotations: &[AnnotationEvent],
    ann_ext: &str,
) -> Result<(), WfdbError> {
    if adc.iter().any(|s| s.len() != header.n_samples) {
        return Err(WfdbError::Layout("sample count differs from header".into()));
    }
    let mut header = header.clone();
    for (spec, s) in header.signals.iter_mut().zip(adc) {
        spec.initial_value = s.first().copied().unwrap_or(0);
        spec.checksum = Some(checksum(s));
    }
    let format = header.signals[0].format;
    let bytes = encode_signal(adc, format)?;
    let dat_path = dir.join(&header.signals[0].file_name);
    fs::write(&dat_path, bytes).map_err(|e| WfdbError::io(&dat_path, e))?;
    let hea_path = dir.join(format!("{}.hea", header.record_name));
    fs::write(&hea_path, header.to_text()).map_err(|e| WfdbError::io(&hea_path, e))?;
    let ann_path = dir.join(format!("{}.{ann_ext}", header.record_name));
    fs::write(&ann_path, write_annotations(annotations)?).map_err(|e| WfdbError::io(&ann_path, e))?;
    Ok(())
}

/// Record names (header stems) in a directory, sorted.
pub fn list_records(dir: &Path) -> Result<Vec<String>, WfdbError> {
    let entries = fs::read_dir(dir).map_err(|e| WfdbError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| WfdbError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "hea") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aux_mapping_is_case_sensitive() {
        assert_eq!(RhythmClass::from_aux("(N"), Some(RhythmClass::Normal));
        assert_eq!(RhythmClass::from_aux("(AFIB"), Some(RhythmClass::AtrialFibrillation));
        assert_eq!(RhythmClass::from_aux("(AFL"), Some(RhythmClass::AtrialFlutter));
        assert_eq!(RhythmClass::from_aux("(SVTA"), Some(RhythmClass::Svta));
        assert_eq!(RhythmClass::from_aux("(afib"), None);
        assert_eq!(RhythmClass::from_aux("(B"), None);
        for c in RhythmClass::ALL {
            assert_eq!(RhythmClass::from_aux(c.aux()), Some(c));
            assert_eq!(RhythmClass::from_label(c.label()), Some(c));
        }
    }

    #[test]
    fn record_triplet_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut header = parse_header("rt 2 250 5\nrt.dat 212 200(10)/mV 12 0 0 0 0 I\nrt.dat 212 100 12 0 0 0 0 II\n").unwrap();
        header.comments.push(" synthetic".into());
        let adc = vec![vec![10, 11, -200, 2047, -2048], vec![0, 1, 2, 3, 4]];
        let ann = vec![AnnotationEvent::rhythm(0, "(N"), AnnotationEvent::rhythm(3, "(AFIB")];
        write_adc_record(dir.path(), &header, &adc, &ann, "atr").unwrap();

        let rec = read_record(dir.path(), "rt", "atr", Channels::All).unwrap();
        assert_eq!(rec.header.signals[0].checksum, Some(checksum(&adc[0])));
        assert_eq!(rec.header.signals[1].initial_value, 0);
        assert_eq!(rec.signal[0], vec![0.0, 0.005, -1.05, 10.185, -10.29]);
        assert_eq!(rec.signal[1][4], 0.04);
        assert_eq!(rec.annotations, ann);

        let first = read_record(dir.path(), "rt", "atr", Channels::First).unwrap();
        assert_eq!(first.signal.len(), 1);
        assert_eq!(first.header.n_signals(), 2);
        assert_eq!(list_records(dir.path()).unwrap(), vec!["rt".to_string()]);
    }
}
