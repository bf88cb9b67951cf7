use super::{RecordHeader, WfdbError};

/// Sample storage formats this reader understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SignalFormat {
    /// Two 12-bit two's complement samples packed into three bytes.
    Format212,
    /// 16-bit two's complement, little-endian.
    Format16,
}

impl SignalFormat {
    pub fn from_code(code: u16) -> Result<Self, WfdbError> {
        match code {
            212 => Ok(Self::Format212),
            16 => Ok(Self::Format16),
            other => Err(WfdbError::UnsupportedFormat(other)),
        }
    }

    pub const fn code(self) -> u16 {
        match self {
            Self::Format212 => 212,
            Self::Format16 => 16,
        }
    }

    pub const fn bits(self) -> u32 {
        match self {
            Self::Format212 => 12,
            Self::Format16 => 16,
        }
    }

    /// Inclusive range of storable ADC values.
    pub const fn range(self) -> (i32, i32) {
        match self {
            Self::Format212 => (-2048, 2047),
            Self::Format16 => (i16::MIN as i32, i16::MAX as i32),
        }
    }

    /// Exact byte length of `total` interleaved samples.
    pub const fn byte_len(self, total: usize) -> usize {
        match self {
            Self::Format212 => 3 * (total / 2) + 2 * (total % 2),
            Self::Format16 => 2 * total,
        }
    }
}

fn sign_extend_12(v: u16) -> i32 {
    let v = i32::from(v & 0x0FFF);
    if v & 0x800 != 0 {
        v - 0x1000
    } else {
        v
    }
}

/// Decodes the interleaved signal file of `header` into `[signal][sample]` ADC values.
///
/// All signals must live in one file with a shared format. A format-212 file holding an odd
/// number of samples may carry one trailing pad byte.
pub fn decode_signal(bytes: &[u8], header: &RecordHeader) -> Result<Vec<Vec<i32>>, WfdbError> {
    let first = header
        .signals
        .first()
        .ok_or(WfdbError::Layout("header declares no signals".into()))?;
    if header
        .signals
        .iter()
        .any(|s| s.file_name != first.file_name || s.format != first.format || s.byte_offset != first.byte_offset)
    {
        return Err(WfdbError::Layout(
            "signals spread over several files or formats are not supported".into(),
        ));
    }
    let offset = first.byte_offset as usize;
    if bytes.len() < offset {
        return Err(WfdbError::Truncated { offset: bytes.len(), needed: offset });
    }
    let payload = &bytes[offset..];
    let n_signals = header.signals.len();
    let total = n_signals * header.n_samples;
    let needed = first.format.byte_len(total);
    if payload.len() < needed {
        // Report where the first incomplete sample starts.
        let complete = match first.format {
            SignalFormat::Format212 => payload.len() / 3 * 3,
            SignalFormat::Format16 => payload.len() / 2 * 2,
        };
        return Err(WfdbError::Truncated { offset: offset + complete, needed: offset + needed });
    }
    let pad_ok = first.format == SignalFormat::Format212 && total % 2 == 1 && payload.len() == needed + 1;
    if payload.len() != needed && !pad_ok {
        return Err(WfdbError::SampleCountMismatch {
            offset: offset + needed,
            expected: header.n_samples,
            found_bytes: payload.len(),
        });
    }

    let flat = match first.format {
        SignalFormat::Format212 => unpack_212(payload, total),
        SignalFormat::Format16 => payload[..needed]
            .chunks_exact(2)
            .map(|c| i32::from(i16::from_le_bytes([c[0], c[1]])))
            .collect(),
    };

    let mut out = vec![Vec::with_capacity(header.n_samples); n_signals];
    for (i, v) in flat.into_iter().enumerate() {
        out[i % n_signals].push(v);
    }
    Ok(out)
}

fn unpack_212(payload: &[u8], total: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(total);
    for chunk in payload.chunks(3) {
        if out.len() == total {
            break;
        }
        let b0 = u16::from(chunk[0]);
        let b1 = u16::from(chunk[1]);
        out.push(sign_extend_12(b0 | ((b1 & 0x0F) << 8)));
        if out.len() < total {
            let b2 = u16::from(chunk[2]);
            out.push(sign_extend_12(b2 | ((b1 & 0xF0) << 4)));
        }
    }
    out
}

/// Interleaves and packs `[signal][sample]` ADC values. All signals must have equal length.
pub fn encode_signal(samples: &[Vec<i32>], format: SignalFormat) -> Result<Vec<u8>, WfdbError> {
    let n_signals = samples.len();
    let n = samples.first().map_or(0, Vec::len);
    if samples.iter().any(|s| s.len() != n) {
        return Err(WfdbError::Layout("signals have unequal lengths".into()));
    }
    let (lo, hi) = format.range();
    let mut flat = Vec::with_capacity(n * n_signals);
    for t in 0..n {
        for (sig, s) in samples.iter().enumerate() {
            let v = s[t];
            if v < lo || v > hi {
                return Err(WfdbError::OutOfRange { signal: sig, sample: t, value: v, format: format.code() });
            }
            flat.push(v);
        }
    }
    let mut out = Vec::with_capacity(format.byte_len(flat.len()));
    match format {
        SignalFormat::Format212 => {
            for pair in flat.chunks(2) {
                let a = (pair[0] & 0x0FFF) as u16;
                out.push((a & 0xFF) as u8);
                match pair.get(1) {
                    Some(&b) => {
                        let b = (b & 0x0FFF) as u16;
                        out.push(((a >> 8) | ((b >> 8) << 4)) as u8);
                        out.push((b & 0xFF) as u8);
                    }
                    None => out.push((a >> 8) as u8),
                }
            }
        }
        SignalFormat::Format16 => {
            for v in flat {
                out.extend_from_slice(&(v as i16).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Converts ADC values to physical units: `(sample - baseline) / gain`.
pub fn adc_to_physical(samples: &[i32], gain: f64, baseline: i32) -> Result<Vec<f64>, WfdbError> {
    if gain == 0.0 || !gain.is_finite() {
        return Err(WfdbError::InvalidCalibration(gain));
    }
    Ok(samples
        .iter()
        .map(|&s| (f64::from(s) - f64::from(baseline)) / gain)
        .collect())
}

/// Inverse of [`adc_to_physical`], rounding to the nearest ADC step and clamping to `format`'s range.
pub fn physical_to_adc(values: &[f64], gain: f64, baseline: i32, format: SignalFormat) -> Result<Vec<i32>, WfdbError> {
    if gain == 0.0 || !gain.is_finite() {
        return Err(WfdbError::InvalidCalibration(gain));
    }
    let (lo, hi) = format.range();
    Ok(values
        .iter()
        .map(|&v| {
            let adc = (v * gain).round() + f64::from(baseline);
            adc.clamp(f64::from(lo), f64::from(hi)) as i32
        })
        .collect())
}

/// WFDB header checksum: 16-bit two's complement sum of the samples.
pub fn checksum(samples: &[i32]) -> i32 {
    let sum = samples.iter().fold(0i64, |acc, &v| acc + i64::from(v));
    i32::from(sum as u16 as i16)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wfdb::{parse_header, SignalSpec};

    fn header(format: SignalFormat, n_signals: usize, n_samples: usize) -> RecordHeader {
        RecordHeader {
            record_name: "t".into(),
            sampling_rate: 360.0,
            n_samples,
            signals: (0..n_signals).map(|i| SignalSpec::new("t.dat", format, format!("ch{i}"))).collect(),
            comments: vec![],
        }
    }

    #[test]
    fn golden_212_triplet() {
        let h = header(SignalFormat::Format212, 1, 2);
        let out = decode_signal(&[0xE8, 0x33, 0xF4], &h).unwrap();
        assert_eq!(out, vec![vec![1000, 1012]]);
    }

    #[test]
    fn sign_extension_212() {
        // -1 and -2048 as 12-bit: 0xFFF, 0x800
        let h = header(SignalFormat::Format212, 1, 2);
        let out = decode_signal(&[0xFF, 0x8F, 0x00], &h).unwrap();
        assert_eq!(out, vec![vec![-1, -2048]]);
    }

    #[test]
    fn format16_unit_value() {
        let h = header(SignalFormat::Format16, 1, 1);
        assert_eq!(decode_signal(&[0x01, 0x00], &h).unwrap(), vec![vec![1]]);
        assert_eq!(decode_signal(&[0xFF, 0xFF], &h).unwrap(), vec![vec![-1]]);
    }

    #[test]
    fn interleaving_across_signals() {
        let h = header(SignalFormat::Format16, 2, 3);
        let samples = vec![vec![1, 2, 3], vec![-1, -2, -3]];
        let bytes = encode_signal(&samples, SignalFormat::Format16).unwrap();
        assert_eq!(&bytes[..4], &[1, 0, 0xFF, 0xFF]);
        assert_eq!(decode_signal(&bytes, &h).unwrap(), samples);
    }

    #[test]
    fn odd_212_with_and_without_pad() {
        let h = header(SignalFormat::Format212, 1, 3);
        let samples = vec![vec![5, -6, 7]];
        let mut bytes = encode_signal(&samples, SignalFormat::Format212).unwrap();
        assert_eq!(bytes.len(), 5);
        assert_eq!(decode_signal(&bytes, &h).unwrap(), samples);
        bytes.push(0);
        assert_eq!(decode_signal(&bytes, &h).unwrap(), samples);
        bytes.push(0);
        assert!(matches!(decode_signal(&bytes, &h), Err(WfdbError::SampleCountMismatch { .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let h = header(SignalFormat::Format16, 1, 4);
        let err = decode_signal(&[0, 0, 0, 0, 0], &h).unwrap_err();
        assert!(matches!(err, WfdbError::Truncated { offset: 4, needed: 8 }), "{err}");
    }

    #[test]
    fn byte_offset_is_honoured() {
        let h = parse_header("x 1 128 2\nx.dat 16+3\n").unwrap();
        let out = decode_signal(&[9, 9, 9, 2, 0, 3, 0], &h).unwrap();
        assert_eq!(out, vec![vec![2, 3]]);
    }

    #[test]
    fn encode_rejects_out_of_range() {
        let err = encode_signal(&[vec![2048]], SignalFormat::Format212).unwrap_err();
        assert!(matches!(err, WfdbError::OutOfRange { value: 2048, .. }));
    }

    #[test]
    fn physical_conversion() {
        assert_eq!(adc_to_physical(&[1024], 200.0, 0).unwrap(), vec![5.12]);
        assert_eq!(adc_to_physical(&[37], 123.4, 37).unwrap(), vec![0.0]);
        assert!(matches!(adc_to_physical(&[1], 0.0, 0), Err(WfdbError::InvalidCalibration(_))));
        let back = physical_to_adc(&[5.12, -0.004], 200.0, 0, SignalFormat::Format16).unwrap();
        assert_eq!(back, vec![1024, -1]);
    }

    #[test]
    fn checksum_wraps_to_16_bits() {
        assert_eq!(checksum(&[1, 2, 3]), 6);
        assert_eq!(checksum(&[32767, 1]), -32768);
    }
}
