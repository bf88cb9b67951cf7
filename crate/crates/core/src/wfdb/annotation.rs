//! MIT-format annotation streams.
//!
//! Each annotation is a little-endian 16-bit word: the top 6 bits hold the code, the low
//! 10 bits the sample delta from the previous annotation. A handful of pseudo-codes carry
//! extra payload (see [`code`]).

use super::WfdbError;

/// Annotation codes used by this crate.
pub mod code {
    pub const NOT_QRS: u8 = 0;
    pub const NORMAL: u8 = 1;
    /// Rhythm change, `+`. The aux string names the new rhythm.
    pub const RHYTHM: u8 = 28;
    /// Followed by a 4-byte signed interval (PDP-11 word order).
    pub const SKIP: u8 = 59;
    pub const NUM: u8 = 60;
    pub const SUB: u8 = 61;
    pub const CHN: u8 = 62;
    /// Followed by `delta` aux bytes, padded to an even count.
    pub const AUX: u8 = 63;

    const MNEMONICS: [&str; 42] = [
        " ", "N", "L", "R", "a", "V", "F", "J", "A", "S", "E", "j", "/", "Q", "~", " ", "|", " ", "s",
        "T", "*", "D", "\"", "=", "p", "B", "^", "t", "+", "u", "?", "!", "[", "]", "e", "n", "@", "x",
        "f", "(", ")", "r",
    ];

    /// One-character WFDB mnemonic for a code, when it has one.
    pub fn mnemonic(code: u8) -> Option<&'static str> {
        MNEMONICS.get(usize::from(code)).copied().filter(|m| *m != " ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationEvent {
    pub sample: u64,
    pub code: u8,
    pub aux: Option<String>,
}

impl AnnotationEvent {
    pub fn rhythm(sample: u64, aux: impl Into<String>) -> Self {
        Self { sample, code: code::RHYTHM, aux: Some(aux.into()) }
    }

    pub fn is_rhythm_change(&self) -> bool {
        self.code == code::RHYTHM && self.aux.is_some()
    }
}

fn read_word(bytes: &[u8], pos: usize) -> Result<u16, WfdbError> {
    match bytes.get(pos..pos + 2) {
        Some(w) => Ok(u16::from_le_bytes([w[0], w[1]])),
        None => Err(WfdbError::Annotation { offset: pos, message: "stream ends mid-word".into() }),
    }
}

/// Parses an annotation stream into events with cumulative sample indices.
///
/// The stream ends at a zero word or at the end of the buffer.
pub fn parse_annotations(bytes: &[u8]) -> Result<Vec<AnnotationEvent>, WfdbError> {
    let mut events: Vec<AnnotationEvent> = Vec::new();
    let mut time: i64 = 0;
    let mut last_sample: i64 = 0;
    let mut pos = 0usize;

    while pos + 1 < bytes.len() {
        let word_pos = pos;
        let word = read_word(bytes, pos)?;
        pos += 2;
        let kind = (word >> 10) as u8;
        let value = word & 0x03FF;

        match kind {
            0 if value == 0 => return Ok(events),
            code::SKIP => {
                let hi = read_word(bytes, pos)?;
                let lo = read_word(bytes, pos + 2)?;
                pos += 4;
                let interval = ((u32::from(hi) << 16) | u32::from(lo)) as i32;
                time += i64::from(interval);
            }
            code::AUX => {
                let len = usize::from(value);
                let padded = len + (len & 1);
                let Some(raw) = bytes.get(pos..pos + len) else {
                    return Err(WfdbError::Annotation {
                        offset: word_pos,
                        message: format!("aux block of {len} byte(s) runs past end of stream"),
                    });
                };
                let Some(last) = events.last_mut() else {
                    return Err(WfdbError::Annotation {
                        offset: word_pos,
                        message: "aux block precedes any annotation".into(),
                    });
                };
                let end = raw.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
                last.aux = Some(String::from_utf8_lossy(&raw[..end]).into_owned());
                pos += padded.min(bytes.len() - pos);
            }
            code::NUM | code::SUB | code::CHN => {}
            _ => {
                time += i64::from(value);
                if time < 0 {
                    return Err(WfdbError::Annotation {
                        offset: word_pos,
                        message: format!("cumulative sample index is negative ({time})"),
                    });
                }
                if time < last_sample {
                    return Err(WfdbError::Annotation {
                        offset: word_pos,
                        message: format!("sample index decreases from {last_sample} to {time}"),
                    });
                }
                last_sample = time;
                events.push(AnnotationEvent { sample: time as u64, code: kind, aux: None });
            }
        }
    }
    Ok(events)
}

/// Encodes events (which must have non-decreasing sample indices) as an annotation stream.
pub fn write_annotations(events: &[AnnotationEvent]) -> Result<Vec<u8>, WfdbError> {
    let mut out = Vec::new();
    let mut prev = 0u64;
    for (i, ev) in events.iter().enumerate() {
        if ev.sample < prev {
            return Err(WfdbError::Annotation {
                offset: out.len(),
                message: format!("event {i} at sample {} precedes sample {prev}", ev.sample),
            });
        }
        if ev.code >= code::SKIP {
            return Err(WfdbError::Annotation {
                offset: out.len(),
                message: format!("code {} is reserved for pseudo-annotations", ev.code),
            });
        }
        let mut delta = ev.sample - prev;
        if delta > 0x03FF {
            let interval = i32::try_from(delta).map_err(|_| WfdbError::Annotation {
                offset: out.len(),
                message: format!("interval {delta} does not fit a SKIP record"),
            })? as u32;
            out.extend_from_slice(&(u16::from(code::SKIP) << 10).to_le_bytes());
            out.extend_from_slice(&((interval >> 16) as u16).to_le_bytes());
            out.extend_from_slice(&((interval & 0xFFFF) as u16).to_le_bytes());
            delta = 0;
        }
        if ev.code == 0 && delta == 0 {
            return Err(WfdbError::Annotation {
                offset: out.len(),
                message: "code 0 with zero delta is indistinguishable from the terminator".into(),
            });
        }
        out.extend_from_slice(&((u16::from(ev.code) << 10) | delta as u16).to_le_bytes());
        if let Some(aux) = &ev.aux {
            let raw = aux.as_bytes();
            if raw.len() > 0x03FF {
                return Err(WfdbError::Annotation { offset: out.len(), message: "aux string too long".into() });
            }
            out.extend_from_slice(&((u16::from(code::AUX) << 10) | raw.len() as u16).to_le_bytes());
            out.extend_from_slice(raw);
            if raw.len() % 2 == 1 {
                out.push(0);
            }
        }
        prev = ev.sample;
    }
    out.extend_from_slice(&[0, 0]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_encoded_rhythm_event() {
        // "+" at delta 0 -> word 28 << 10 = 0x7000; aux "(N" -> 63 << 10 | 2 = 0xFC02.
        let bytes = [0x00, 0x70, 0x02, 0xFC, b'(', b'N', 0x00, 0x00];
        let events = parse_annotations(&bytes).unwrap();
        assert_eq!(events, vec![AnnotationEvent::rhythm(0, "(N")]);
        assert_eq!(code::mnemonic(events[0].code), Some("+"));
        assert_eq!(write_annotations(&events).unwrap(), bytes);
    }

    #[test]
    fn empty_stream() {
        assert!(parse_annotations(&[0, 0]).unwrap().is_empty());
        assert!(parse_annotations(&[]).unwrap().is_empty());
    }

    #[test]
    fn two_rhythms_with_skip() {
        let events = vec![AnnotationEvent::rhythm(0, "(N"), AnnotationEvent::rhythm(5000, "(AFIB")];
        let bytes = write_annotations(&events).unwrap();
        let parsed = parse_annotations(&bytes).unwrap();
        assert_eq!(parsed, events);
        assert_eq!(parsed[1].sample, 5000);
    }

    #[test]
    fn trailing_nuls_stripped() {
        let bytes = [0x00, 0x70, 0x04, 0xFC, b'(', b'N', 0, 0, 0, 0];
        assert_eq!(parse_annotations(&bytes).unwrap()[0].aux.as_deref(), Some("(N"));
    }

    #[test]
    fn pseudo_codes_are_consumed() {
        // NUM word, then a normal beat at delta 10
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&((u16::from(code::NUM) << 10) | 3).to_le_bytes());
        bytes.extend_from_slice(&((u16::from(code::NORMAL) << 10) | 10).to_le_bytes());
        bytes.extend_from_slice(&[0, 0]);
        let events = parse_annotations(&bytes).unwrap();
        assert_eq!(events, vec![AnnotationEvent { sample: 10, code: code::NORMAL, aux: None }]);
    }

    #[test]
    fn truncated_aux_is_an_error() {
        let bytes = [0x00, 0x70, 0x06, 0xFC, b'(', b'N'];
        let err = parse_annotations(&bytes).unwrap_err();
        assert!(matches!(err, WfdbError::Annotation { offset: 2, .. }), "{err}");
    }

    #[test]
    fn negative_index_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(u16::from(code::SKIP) << 10).to_le_bytes());
        let interval = (-5i32) as u32;
        bytes.extend_from_slice(&((interval >> 16) as u16).to_le_bytes());
        bytes.extend_from_slice(&((interval & 0xFFFF) as u16).to_le_bytes());
        bytes.extend_from_slice(&((u16::from(code::NORMAL) << 10) | 1).to_le_bytes());
        let err = parse_annotations(&bytes).unwrap_err();
        assert!(err.to_string().contains("negative"), "{err}");
    }

    #[test]
    fn decreasing_index_is_rejected() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&((u16::from(code::NORMAL) << 10) | 100).to_le_bytes());
        bytes.extend_from_slice(&(u16::from(code::SKIP) << 10).to_le_bytes());
        let interval = (-50i32) as u32;
        bytes.extend_from_slice(&((interval >> 16) as u16).to_le_bytes());
        bytes.extend_from_slice(&((interval & 0xFFFF) as u16).to_le_bytes());
        bytes.extend_from_slice(&((u16::from(code::NORMAL) << 10) | 1).to_le_bytes());
        let err = parse_annotations(&bytes).unwrap_err();
        assert!(err.to_string().contains("decreases"), "{err}");
    }
}
