use std::fmt::Write as _;

use super::{SignalFormat, WfdbError};

/// Gain assumed when a header omits it (or gives 0, the WFDB "uncalibrated" marker).
pub const DEFAULT_ADC_GAIN: f64 = 200.0;

/// One signal line of a header file.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSpec {
    pub file_name: String,
    pub format: SignalFormat,
    /// Byte offset of the first sample inside the signal file.
    pub byte_offset: u64,
    /// ADC units per physical unit (mV).
    pub adc_gain: f64,
    pub baseline: i32,
    pub units: String,
    pub adc_resolution: u32,
    pub adc_zero: i32,
    pub initial_value: i32,
    pub checksum: Option<i32>,
    pub block_size: u32,
    pub channel_name: String,
}

impl SignalSpec {
    /// A signal line with the usual defaults for the given file and format.
    pub fn new(file_name: impl Into<String>, format: SignalFormat, channel_name: impl Into<String>) -> Self {
        Self {
            file_name: file_name.into(),
            format,
            byte_offset: 0,
            adc_gain: DEFAULT_ADC_GAIN,
            baseline: 0,
            units: "mV".to_string(),
            adc_resolution: format.bits(),
            adc_zero: 0,
            initial_value: 0,
            checksum: None,
            block_size: 0,
            channel_name: channel_name.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub record_name: String,
    pub sampling_rate: f64,
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
    /// `#` comment lines, without the leading marker.
    pub comments: Vec<String>,
}

impl RecordHeader {
    pub fn n_signals(&self) -> usize {
        self.signals.len()
    }

    pub fn validate(&self) -> Result<(), WfdbError> {
        if self.signals.is_empty() {
            return Err(WfdbError::header(1, "record must declare at least one signal"));
        }
        if !(self.sampling_rate.is_finite() && self.sampling_rate > 0.0) {
            return Err(WfdbError::header(1, format!("sampling rate must be positive, got {}", self.sampling_rate)));
        }
        for (i, s) in self.signals.iter().enumerate() {
            if s.adc_gain == 0.0 || !s.adc_gain.is_finite() {
                return Err(WfdbError::header(i + 2, "ADC gain must be finite and non-zero"));
            }
        }
        Ok(())
    }

    /// Serializes to header-file text that [`parse_header`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} {} {} {}",
            self.record_name,
            self.signals.len(),
            fmt_real(self.sampling_rate),
            self.n_samples
        );
        for s in &self.signals {
            let mut fmt = s.format.code().to_string();
            if s.byte_offset > 0 {
                let _ = write!(fmt, "+{}", s.byte_offset);
            }
            let _ = write!(
                out,
                "{} {} {}({})/{} {} {} {} {} {}",
                s.file_name,
                fmt,
                fmt_real(s.adc_gain),
                s.baseline,
                s.units,
                s.adc_resolution,
                s.adc_zero,
                s.initial_value,
                s.checksum.unwrap_or(0),
                s.block_size
            );
            if !s.channel_name.is_empty() {
                let _ = write!(out, " {}", s.channel_name);
            }
            out.push('\n');
        }
        for c in &self.comments {
            let _ = writeln!(out, "#{c}");
        }
        out
    }
}

// Shortest representation that parses back to the same f64.
fn fmt_real(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Parses the text of a `.hea` file.
pub fn parse_header(text: &str) -> Result<RecordHeader, WfdbError> {
    let mut comments = Vec::new();
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw.trim();
        if let Some(c) = trimmed.strip_prefix('#') {
            comments.push(c.to_string());
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        lines.push((line_no, trimmed));
    }

    let Some(&(first_no, first)) = lines.first() else {
        return Err(WfdbError::header(1, "header has no record line"));
    };
    let fields: Vec<&str> = first.split_whitespace().collect();
    if fields.len() < 4 {
        return Err(WfdbError::header(
            first_no,
            format!("record line needs `name n_signals fs n_samples`, found {} field(s)", fields.len()),
        ));
    }
    let record_name = fields[0];
    if record_name.contains('/') {
        return Err(WfdbError::header(first_no, "multi-segment records are not supported"));
    }
    let n_signals: usize = parse_num(fields[1], first_no, "signal count")?;
    let fs_token = fields[2].split(['/', '(']).next().unwrap_or("");
    let sampling_rate: f64 = parse_num(fs_token, first_no, "sampling rate")?;
    let n_samples: usize = parse_num(fields[3], first_no, "sample count")?;

    let signal_lines = &lines[1..];
    if signal_lines.len() != n_signals {
        return Err(WfdbError::header(
            first_no,
            format!("record declares {n_signals} signal(s) but {} signal line(s) follow", signal_lines.len()),
        ));
    }

    let signals = signal_lines
        .iter()
        .map(|&(no, line)| parse_signal_line(line, no))
        .collect::<Result<Vec<_>, _>>()?;

    let header = RecordHeader {
        record_name: record_name.to_string(),
        sampling_rate,
        n_samples,
        signals,
        comments,
    };
    header.validate().map_err(|e| match e {
        WfdbError::Header { message, .. } => WfdbError::header(first_no, message),
        other => other,
    })?;
    Ok(header)
}

fn parse_signal_line(line: &str, line_no: usize) -> Result<SignalSpec, WfdbError> {
    let mut fields = line.split_whitespace();
    let file_name = fields
        .next()
        .ok_or_else(|| WfdbError::header(line_no, "empty signal line"))?;
    let fmt_token = fields
        .next()
        .ok_or_else(|| WfdbError::header(line_no, "signal line is missing its format"))?;

    // format[xspf][:skew][+offset]
    let digits: String = fmt_token.chars().take_while(|c| c.is_ascii_digit()).collect();
    let code: u16 = parse_num(&digits, line_no, "signal format")?;
    let format = SignalFormat::from_code(code).map_err(|_| {
        WfdbError::header(line_no, format!("unsupported signal format {code} (only 212 and 16 are read)"))
    })?;
    let rest = &fmt_token[digits.len()..];
    if let Some(spf) = rest.strip_prefix('x') {
        let spf_digits: String = spf.chars().take_while(|c| c.is_ascii_digit()).collect();
        let spf: u32 = parse_num(&spf_digits, line_no, "samples per frame")?;
        if spf != 1 {
            return Err(WfdbError::header(line_no, "multi-frequency records are not supported"));
        }
    }
    let byte_offset = match rest.split_once('+') {
        Some((_, off)) => parse_num(off, line_no, "byte offset")?,
        None => 0,
    };

    let mut spec = SignalSpec::new(file_name, format, "");
    spec.byte_offset = byte_offset;
    let Some(gain_token) = fields.next() else {
        return Ok(spec);
    };

    // gain[(baseline)][/units]
    let (gain_part, units) = match gain_token.split_once('/') {
        Some((g, u)) => (g, Some(u)),
        None => (gain_token, None),
    };
    let (gain_str, baseline) = match gain_part.split_once('(') {
        Some((g, b)) => {
            let b = b
                .strip_suffix(')')
                .ok_or_else(|| WfdbError::header(line_no, "unterminated baseline in gain field"))?;
            (g, Some(parse_num::<i32>(b, line_no, "baseline")?))
        }
        None => (gain_part, None),
    };
    let gain: f64 = parse_num(gain_str, line_no, "ADC gain")?;
    spec.adc_gain = if gain == 0.0 { DEFAULT_ADC_GAIN } else { gain };
    spec.baseline = baseline.unwrap_or(0);
    if let Some(u) = units {
        spec.units = u.to_string();
    }

    if let Some(tok) = fields.next() {
        spec.adc_resolution = parse_num(tok, line_no, "ADC resolution")?;
    }
    if let Some(tok) = fields.next() {
        spec.adc_zero = parse_num(tok, line_no, "ADC zero")?;
    }
    if let Some(tok) = fields.next() {
        spec.initial_value = parse_num(tok, line_no, "initial value")?;
    }
    if let Some(tok) = fields.next() {
        spec.checksum = Some(parse_num(tok, line_no, "checksum")?);
    }
    if let Some(tok) = fields.next() {
        spec.block_size = parse_num(tok, line_no, "block size")?;
    }
    spec.channel_name = fields.collect::<Vec<_>>().join(" ");
    Ok(spec)
}

fn parse_num<T: std::str::FromStr>(token: &str, line: usize, what: &str) -> Result<T, WfdbError> {
    token
        .parse()
        .map_err(|_| WfdbError::header(line, format!("{what} is not numeric: {token:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MITDB_100: &str = "100 2 360 650000\n\
        100.dat 212 200 11 1024 995 -22131 0 MLII\n\
        100.dat 212 200 11 1024 1011 20052 0 V5\n\
        # 69 M 1085 1629 x1\n";

    #[test]
    fn parses_two_signal_212_header() {
        let h = parse_header(MITDB_100).unwrap();
        assert_eq!(h.record_name, "100");
        assert_eq!(h.n_signals(), 2);
        assert_eq!(h.sampling_rate, 360.0);
        assert_eq!(h.n_samples, 650_000);
        assert_eq!(h.signals[0].format, SignalFormat::Format212);
        assert_eq!(h.signals[0].adc_gain, 200.0);
        assert_eq!(h.signals[0].baseline, 0);
        assert_eq!(h.signals[0].adc_zero, 1024);
        assert_eq!(h.signals[0].channel_name, "MLII");
        assert_eq!(h.signals[1].channel_name, "V5");
        assert_eq!(h.comments, vec![" 69 M 1085 1629 x1".to_string()]);
    }

    #[test]
    fn minimal_format16_header() {
        let h = parse_header("r 1 128 3840\nr.dat 16\n").unwrap();
        assert_eq!(h.n_signals(), 1);
        assert_eq!(h.sampling_rate, 128.0);
        assert_eq!(h.n_samples, 3840);
        assert_eq!(h.signals[0].format, SignalFormat::Format16);
        assert_eq!(h.signals[0].adc_gain, DEFAULT_ADC_GAIN);
        assert_eq!(h.signals[0].baseline, 0);
    }

    #[test]
    fn gain_with_baseline_and_units() {
        let h = parse_header("x 1 250/1000(0) 10\nx.dat 16+512 400(-12)/uV 16 0 0 0 0 ECG lead I\n").unwrap();
        let s = &h.signals[0];
        assert_eq!(h.sampling_rate, 250.0);
        assert_eq!(s.adc_gain, 400.0);
        assert_eq!(s.baseline, -12);
        assert_eq!(s.units, "uV");
        assert_eq!(s.byte_offset, 512);
        assert_eq!(s.channel_name, "ECG lead I");
    }

    #[test]
    fn zero_gain_means_default() {
        let h = parse_header("x 1 128 1\nx.dat 16 0\n").unwrap();
        assert_eq!(h.signals[0].adc_gain, DEFAULT_ADC_GAIN);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_header("x 2 128 10\nx.dat 16\n").unwrap_err();
        assert!(matches!(err, WfdbError::Header { line: 1, .. }), "{err}");

        let err = parse_header("x 1 128 10\nx.dat 80\n").unwrap_err();
        assert!(matches!(err, WfdbError::Header { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("80"));

        let err = parse_header("x 1 abc 10\nx.dat 16\n").unwrap_err();
        assert!(matches!(err, WfdbError::Header { line: 1, .. }));

        let err = parse_header("x 1 128 10\nx.dat 16 two\n").unwrap_err();
        assert!(matches!(err, WfdbError::Header { line: 2, .. }));

        let err = parse_header("x 1 0 10\nx.dat 16\n").unwrap_err();
        assert!(err.to_string().contains("sampling rate"));
    }

    #[test]
    fn text_round_trip() {
        let h = parse_header(MITDB_100).unwrap();
        let again = parse_header(&h.to_text()).unwrap();
        assert_eq!(h, again);
    }
}
