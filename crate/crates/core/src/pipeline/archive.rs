//! On-disk dataset archive: `manifest.json` plus one binary blob per record.
//!
//! Blob layout (little-endian): magic `S4EB`, `u32` version, `u64` sample count, `f32`
//! samples, `u64` epoch count, `u32` class count, `f64` fractions (epoch-major), `f64`
//! unknown fractions.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochDataset, EpochRecord, FractionLabels, PipelineError, SplitAssignment};
use crate::wfdb::RhythmClass;

pub const ARCHIVE_VERSION: u32 = 1;
const BLOB_MAGIC: &[u8; 4] = b"S4EB";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    sampling_rate: f64,
    epoch_len: usize,
    classes: Vec<String>,
    records: Vec<ManifestRecord>,
    split: Option<SplitAssignment>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRecord {
    record: String,
    patient_id: String,
    file: String,
    n_samples: usize,
    n_epochs: usize,
    sha256: String,
}

fn format_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Format(msg.into())
}

fn encode_blob(rec: &EpochRecord) -> Vec<u8> {
    let labels = &rec.labels;
    let mut out = Vec::with_capacity(32 + 4 * rec.signal.len() + 8 * (labels.fractions.len() + labels.unknown.len()));
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rec.signal.len() as u64).to_le_bytes());
    for v in &rec.signal {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(labels.n_epochs() as u64).to_le_bytes());
    out.extend_from_slice(&(labels.n_classes as u32).to_le_bytes());
    for v in labels.fractions.iter().chain(&labels.unknown) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            format_err(format!("{}: blob truncated at byte {}", self.name, self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<usize, PipelineError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| format_err(format!("{}: length {v} overflows", self.name)))
    }
}

fn decode_blob(bytes: &[u8], name: &str) -> Result<(Vec<f32>, FractionLabels), PipelineError> {
    let mut r = Reader { bytes, pos: 0, name };
    if r.take(4)? != BLOB_MAGIC {
        return Err(format_err(format!("{name}: not a record blob")));
    }
    let version = r.u32()?;
    if version != ARCHIVE_VERSION {
        return Err(format_err(format!("{name}: blob version {version}, expected {ARCHIVE_VERSION}")));
    }
    let n = r.u64()?;
    let signal = r
        .take(n.checked_mul(4).ok_or_else(|| format_err("sample count overflows"))?)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let n_epochs = r.u64()?;
    let n_classes = r.u32()? as usize;
    let count = n_epochs
        .checked_mul(n_classes + 1)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| format_err("label count overflows"))?;
    let values: Vec<f64> = r
        .take(count)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if r.pos != bytes.len() {
        return Err(format_err(format!("{name}: {} trailing byte(s)", bytes.len() - r.pos)));
    }
    let (fractions, unknown) = values.split_at(n_epochs * n_classes);
    Ok((signal, FractionLabels { n_classes, fractions: fractions.to_vec(), unknown: unknown.to_vec() }))
}

fn blob_name(index: usize, record: &str) -> String {
    let safe: String = record
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:05}_{safe}.bin")
}

/// Writes `dataset` into directory `path`, creating it if needed.
pub fn export_dataset(dataset: &EpochDataset, path: &Path) -> Result<(), PipelineError> {
    dataset.validate()?;
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))?;
    let mut records = Vec::with_capacity(dataset.records.len());
    for (i, rec) in dataset.records.iter().enumerate() {
        let blob = encode_blob(rec);
        let file = blob_name(i, &rec.record_name);
        let blob_path = path.join(&file);
        fs::write(&blob_path, &blob).map_err(|e| PipelineError::io(&blob_path, e))?;
        records.push(ManifestRecord {
            record: rec.record_name.clone(),
            patient_id: rec.patient_id.clone(),
            file,
            n_samples: rec.signal.len(),
            n_epochs: rec.labels.n_epochs(),
            sha256: hex::encode(Sha256::digest(&blob)),
        });
    }
    let manifest = Manifest {
        format: "s4ecg-dataset".into(),
        version: ARCHIVE_VERSION,
        sampling_rate: dataset.sampling_rate,
        epoch_len: dataset.epoch_len,
        classes: dataset.classes.iter().map(|c| c.label().to_string()).collect(),
        records,
        split: dataset.split.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| format_err(e.to_string()))?;
    let manifest_path = path.join(MANIFEST);
    fs::write(&manifest_path, text).map_err(|e| PipelineError::io(&manifest_path, e))
}

/// Reads an archive written by [`export_dataset`], verifying versions and checksums.
pub fn load_dataset(path: &Path) -> Result<EpochDataset, PipelineError> {
    let manifest_path = path.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| PipelineError::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| format_err(format!("manifest: {e}")))?;
    if manifest.format != "s4ecg-dataset" {
        return Err(format_err(format!("unexpected archive format {:?}", manifest.format)));
    }
    if manifest.version != ARCHIVE_VERSION {
        return Err(format_err(format!(
            "archive version {}, expected {ARCHIVE_VERSION}",
            manifest.version
        )));
    }
    let classes = manifest
        .classes
        .iter()
        .map(|c| RhythmClass::from_label(c).ok_or_else(|| format_err(format!("unknown class {c:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let mut records = Vec::with_capacity(manifest.records.len());
    for entry in &manifest.records {
        let blob_path = path.join(&entry.file);
        let blob = fs::read(&blob_path).map_err(|e| PipelineError::io(&blob_path, e))?;
        let digest = hex::encode(Sha256::digest(&blob));
        if digest != entry.sha256 {
            return Err(format_err(format!("{}: checksum mismatch", entry.file)));
        }
        let (signal, labels) = decode_blob(&blob, &entry.file)?;
        if signal.len() != entry.n_samples || labels.n_epochs() != entry.n_epochs {
            return Err(format_err(format!("{}: sizes disagree with manifest", entry.file)));
        }
        records.push(EpochRecord {
            record_name: entry.record.clone(),
            patient_id: entry.patient_id.clone(),
            signal,
            labels,
        });
    }
    let dataset = EpochDataset {
        classes,
        sampling_rate: manifest.sampling_rate,
        epoch_len: manifest.epoch_len,
        records,
        split: manifest.split,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{EPOCH_LEN, TARGET_RATE};

    fn tiny() -> EpochDataset {
        let classes = vec![RhythmClass::Normal, RhythmClass::AtrialFibrillation, RhythmClass::AtrialFlutter];
        let rec = EpochRecord {
            record_name: "rec/1".into(),
            patient_id: "p1".into(),
            signal: (0..EPOCH_LEN * 2).map(|i| (i as f32 * 0.01).sin()).collect(),
            labels: FractionLabels { n_classes: 3, fractions: vec![0.6, 0.4, 0.0, 1.0, 0.0, 0.0], unknown: vec![0.0, 0.0] },
        };
        EpochDataset { classes, sampling_rate: TARGET_RATE, epoch_len: EPOCH_LEN, records: vec![rec], split: None }
    }

    #[test]
    fn round_trip_and_manifest_classes() {
        let dir = tempfile::tempdir().unwrap();
        let d = tiny();
        export_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(m["classes"], serde_json::json!(["N", "AF", "AFLT"]));
    }

    #[test]
    fn empty_archive() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = tiny();
        d.records.clear();
        export_dataset(&d, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), d);
    }

    #[test]
    fn corrupted_blob_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&tiny(), dir.path()).unwrap();
        let blob = dir.path().join(blob_name(0, "rec/1"));
        let mut bytes = fs::read(&blob).unwrap();
        bytes[20] ^= 1;
        fs::write(&blob, bytes).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&tiny(), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST);
        let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&path, text).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncated_blob() {
        let err = decode_blob(&encode_blob(&tiny().records[0])[..50], "x").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }
}
