//! Synthetic ECG-like corpora with long-range rhythm structure.
//!
//! A semi-Markov process picks the rhythm: each segment lasts a fixed minimum plus a
//! geometric number of whole seconds, then jumps uniformly to one of the other classes.
//! Each segment is rendered as a Gaussian pulse train at a class-specific rate and RR
//! irregularity. Optional lead-off bursts blank the pulses for one to a few epochs, which
//! makes those epochs ambiguous in isolation while their labels still follow the rhythm.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wfdb::{write_record, AnnotationEvent, Record, RecordHeader, RhythmClass, SignalFormat, SignalSpec, WfdbError};

pub const MIN_BPM: f64 = 30.0;
pub const MAX_BPM: f64 = 220.0;
/// Header comment key carrying the patient id.
pub const PATIENT_COMMENT: &str = "patient:";
const ADC_GAIN: f64 = 200.0;
const EPOCH_SECONDS: f64 = 30.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Wfdb(#[from] WfdbError),
}

/// Waveform template for one rhythm class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTemplate {
    /// Short label: N, AF, AFLT or SVTA.
    pub class: String,
    /// Mean segment length in seconds, minimum dwell included.
    pub mean_dwell_s: f64,
    /// Per-segment heart rate is drawn uniformly from this range.
    pub bpm: [f64; 2],
    /// RR-interval coefficient of variation within a segment.
    pub rr_cv: f64,
    pub amplitude_mv: f64,
    /// Standard deviation of the Gaussian pulse.
    pub width_s: f64,
    /// Amplitude of a 5 Hz sawtooth baseline (flutter waves); 0 disables it.
    #[serde(default)]
    pub flutter_mv: f64,
}

/// Lead-off bursts: pulses vanish and the trace sits at a random offset plus noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactSpec {
    /// Expected share of epochs covered by bursts.
    pub coverage: f64,
    /// Burst length in whole epochs, inclusive range.
    pub epochs: [usize; 2],
    pub offset_mv: f64,
    pub noise_mv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_patients: usize,
    pub record_minutes: f64,
    #[serde(default = "default_rate")]
    pub sampling_rate: f64,
    /// Shortest segment; the geometric remainder has mean `mean_dwell_s - min_dwell_s`.
    #[serde(default)]
    pub min_dwell_s: f64,
    pub noise_mv: f64,
    pub seed: u64,
    pub classes: Vec<ClassTemplate>,
    #[serde(default)]
    pub artifacts: Option<ArtifactSpec>,
}

fn default_rate() -> f64 {
    250.0
}

impl SynthSpec {
    /// Three-class corpus used by the desk study: 40 patients, 2 h each, segments of 2 to
    /// roughly 10 minutes, one- and two-epoch lead-off bursts on about 30 % of the epochs.
    pub fn desk_study(seed: u64) -> Self {
        Self {
            n_patients: 40,
            record_minutes: 120.0,
            sampling_rate: 250.0,
            min_dwell_s: 120.0,
            noise_mv: 0.05,
            seed,
            classes: vec![
                ClassTemplate::new("N", 330.0, [60.0, 90.0], 0.03, 0.0),
                ClassTemplate::new("AF", 330.0, [90.0, 130.0], 0.2, 0.0),
                ClassTemplate::new("AFLT", 270.0, [140.0, 170.0], 0.02, 0.15),
            ],
            artifacts: Some(ArtifactSpec { coverage: 0.3, epochs: [1, 2], offset_mv: 1.0, noise_mv: 0.1 }),
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_patients == 0 {
            return bad("n_patients must be positive".into());
        }
        if !(self.record_minutes > 0.0 && self.record_minutes.is_finite()) {
            return bad("record_minutes must be positive".into());
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate.is_finite()) {
            return bad("sampling_rate must be positive".into());
        }
        if !(self.min_dwell_s >= 0.0 && self.min_dwell_s.is_finite()) {
            return bad("min_dwell_s must be non-negative".into());
        }
        if !(self.noise_mv >= 0.0 && self.noise_mv.is_finite()) {
            return bad("noise_mv must be non-negative".into());
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let mut seen = Vec::new();
        for t in &self.classes {
            let c = t.rhythm().ok_or_else(|| SynthError::Spec(format!("unknown class {:?}", t.class)))?;
            if seen.contains(&c) {
                return bad(format!("class {} listed twice", t.class));
            }
            seen.push(c);
            if !(t.mean_dwell_s > 0.0 && t.mean_dwell_s >= self.min_dwell_s) {
                return bad(format!("{}: mean dwell must be positive and at least min_dwell_s", t.class));
            }
            let [lo, hi] = t.bpm;
            if !(MIN_BPM..=MAX_BPM).contains(&lo) || !(MIN_BPM..=MAX_BPM).contains(&hi) || lo > hi {
                return bad(format!("{}: rates must lie in {MIN_BPM}-{MAX_BPM} bpm", t.class));
            }
            if !(t.rr_cv >= 0.0 && t.rr_cv < 1.0) || !(t.width_s > 0.0) || !t.amplitude_mv.is_finite() || !t.flutter_mv.is_finite() {
                return bad(format!("{}: rr_cv must be in [0, 1), width positive", t.class));
            }
        }
        if let Some(a) = &self.artifacts {
            if !(0.0..1.0).contains(&a.coverage) || a.epochs[0] == 0 || a.epochs[0] > a.epochs[1] || !(a.noise_mv >= 0.0) {
                return bad("artifacts: coverage in [0, 1), epochs a non-empty range starting at 1".into());
            }
        }
        Ok(())
    }

    /// Long-run share of time in each class: the jump chain is uniform over other classes,
    /// so its stationary law is uniform and time shares are proportional to mean dwell.
    pub fn stationary_prevalence(&self) -> Vec<f64> {
        let total: f64 = self.classes.iter().map(|t| t.mean_dwell_s).sum();
        self.classes.iter().map(|t| t.mean_dwell_s / total).collect()
    }

    pub fn n_samples(&self) -> usize {
        (self.record_minutes * 60.0 * self.sampling_rate).round() as usize
    }

    pub fn record_name(patient_id: usize) -> String {
        format!("synth{patient_id:03}")
    }
}

impl ClassTemplate {
    pub fn new(class: &str, mean_dwell_s: f64, bpm: [f64; 2], rr_cv: f64, flutter_mv: f64) -> Self {
        Self { class: class.into(), mean_dwell_s, bpm, rr_cv, amplitude_mv: 1.0, width_s: 0.02, flutter_mv }
    }

    pub fn rhythm(&self) -> Option<RhythmClass> {
        RhythmClass::from_label(&self.class)
    }
}

/// One rhythm segment, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    /// Index into `SynthSpec::classes`.
    pub class: usize,
    pub start: usize,
    pub end: usize,
}

fn rng_for(spec: &SynthSpec, patient_id: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(patient_id as u64 * 4 + stream);
    rng
}

fn draw_dwell_s(spec: &SynthSpec, t: &ClassTemplate, rng: &mut ChaCha8Rng) -> f64 {
    let extra = t.mean_dwell_s - spec.min_dwell_s;
    let k = if extra > 0.0 {
        Geometric::new(1.0 / (extra + 1.0)).expect("probability in (0, 1]").sample(rng)
    } else {
        0
    };
    spec.min_dwell_s + k as f64
}

/// The rhythm process of one record. The first class follows the stationary law.
pub fn rhythm_segments(spec: &SynthSpec, patient_id: usize) -> Result<Vec<Segment>, SynthError> {
    spec.validate()?;
    let mut rng = rng_for(spec, patient_id, 0);
    let n = spec.n_samples();
    let k = spec.classes.len();
    let prev = spec.stationary_prevalence();
    let mut u: f64 = rng.random();
    let mut class = k - 1;
    for (i, p) in prev.iter().enumerate() {
        if u < *p {
            class = i;
            break;
        }
        u -= p;
    }
    if k == 1 {
        return Ok(vec![Segment { class: 0, start: 0, end: n }]);
    }
    let mut segments = Vec::new();
    let mut start = 0usize;
    while start < n {
        let dwell = draw_dwell_s(spec, &spec.classes[class], &mut rng);
        let len = ((dwell * spec.sampling_rate).round() as usize).max(1);
        let end = (start + len).min(n);
        segments.push(Segment { class, start, end });
        start = end;
        let j = rng.random_range(0..k - 1);
        class = if j >= class { j + 1 } else { j };
    }
    Ok(segments)
}

/// Beat sample times within each segment; the first beat of a segment follows the last
/// beat of the previous one by one RR interval of the new rhythm.
fn beat_times(spec: &SynthSpec, segments: &[Segment], rng: &mut ChaCha8Rng) -> Vec<(f64, usize)> {
    let fs = spec.sampling_rate;
    let mut beats = Vec::new();
    let mut last = rng.random::<f64>() * 0.5;
    for seg in segments {
        let t = &spec.classes[seg.class];
        let bpm = if t.bpm[1] > t.bpm[0] { rng.random_range(t.bpm[0]..=t.bpm[1]) } else { t.bpm[0] };
        let mean_rr = 60.0 / bpm;
        let end_s = seg.end as f64 / fs;
        let mut next = last.max(seg.start as f64 / fs);
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let rr = (mean_rr * (1.0 + t.rr_cv * z)).max(0.3 * mean_rr);
            if next + rr >= end_s {
                last = next + rr;
                break;
            }
            next += rr;
            beats.push((next, seg.class));
        }
    }
    beats
}

/// Lead-off bursts as `[start, end)` sample ranges aligned to whole epochs.
fn artifact_ranges(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let Some(a) = &spec.artifacts else { return Vec::new() };
    let epoch = (EPOCH_SECONDS * spec.sampling_rate).round() as usize;
    let n_epochs = spec.n_samples() / epoch.max(1);
    let mean_len = (a.epochs[0] + a.epochs[1]) as f64 / 2.0;
    // each clean epoch opens a burst with probability q; clean runs average (1 - q) / q
    let q = a.coverage / (mean_len * (1.0 - a.coverage) + a.coverage);
    let mut out = Vec::new();
    let mut e = 0;
    while e < n_epochs {
        if rng.random::<f64>() < q {
            let len = rng.random_range(a.epochs[0]..=a.epochs[1]);
            let end = (e + len).min(n_epochs);
            out.push((e * epoch, end * epoch));
            e = end;
        } else {
            e += 1;
        }
    }
    out
}

/// The segments, beats and artifact spans behind one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordPlan {
    pub segments: Vec<Segment>,
    /// `(time in seconds, class index)` per beat.
    pub beats: Vec<(f64, usize)>,
    pub artifacts: Vec<(usize, usize)>,
}

pub fn plan_record(spec: &SynthSpec, patient_id: usize) -> Result<RecordPlan, SynthError> {
    let segments = rhythm_segments(spec, patient_id)?;
    let beats = beat_times(spec, &segments, &mut rng_for(spec, patient_id, 1));
    let artifacts = artifact_ranges(spec, &mut rng_for(spec, patient_id, 2));
    Ok(RecordPlan { segments, beats, artifacts })
}

/// Synthesizes one record with `+` rhythm-change annotations at every segment start.
pub fn generate_record(spec: &SynthSpec, patient_id: usize) -> Result<Record, SynthError> {
    let plan = plan_record(spec, patient_id)?;
    let fs = spec.sampling_rate;
    let n = spec.n_samples();
    let mut x = vec![0.0f64; n];
    for seg in &plan.segments {
        let t = &spec.classes[seg.class];
        if t.flutter_mv != 0.0 {
            for (i, v) in x[seg.start..seg.end].iter_mut().enumerate() {
                let phase = ((seg.start + i) as f64 / fs * 5.0).fract();
                *v += t.flutter_mv * (phase - 0.5);
            }
        }
    }
    for &(time, class) in &plan.beats {
        let t = &spec.classes[class];
        let c = time * fs;
        let half = (4.0 * t.width_s * fs).ceil() as isize;
        let lo = (c.round() as isize - half).max(0) as usize;
        let hi = ((c.round() as isize + half + 1).max(0) as usize).min(n);
        let inv = 1.0 / (2.0 * (t.width_s * fs).powi(2));
        for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
            let d = i as f64 - c;
            *v += t.amplitude_mv * (-d * d * inv).exp();
        }
    }
    let mut rng = rng_for(spec, patient_id, 3);
    for v in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += spec.noise_mv * z;
    }
    if let Some(a) = &spec.artifacts {
        for &(s, e) in &plan.artifacts {
            let offset = if rng.random::<bool>() { a.offset_mv } else { -a.offset_mv };
            for v in &mut x[s..e] {
                let z: f64 = rng.sample(StandardNormal);
                *v = offset + a.noise_mv * z;
            }
        }
    }
    let name = SynthSpec::record_name(patient_id);
    let mut signal = SignalSpec::new(format!("{name}.dat"), SignalFormat::Format212, "ECG");
    signal.adc_gain = ADC_GAIN;
    let header = RecordHeader {
        record_name: name.clone(),
        sampling_rate: fs,
        n_samples: n,
        signals: vec![signal],
        comments: vec![format!("{PATIENT_COMMENT} {name}"), format!("synthetic: seed {} id {patient_id}", spec.seed)],
    };
    let annotations = plan
        .segments
        .iter()
        .map(|s| {
            let class = spec.classes[s.class].rhythm().expect("validated class");
            AnnotationEvent::rhythm(s.start as u64, class.aux())
        })
        .collect();
    Ok(Record { header, signal: vec![x], annotations })
}

/// Patient id from a `patient:` header comment.
pub fn patient_from_header(header: &RecordHeader) -> Option<String> {
    header
        .comments
        .iter()
        .find_map(|c| c.trim().strip_prefix(PATIENT_COMMENT).map(|p| p.trim().to_string()))
        .filter(|p| !p.is_empty())
}

/// Generates every patient of `spec` into `dir` (annotation extension `atr`) and returns the
/// record names in patient order.
pub fn generate_corpus(spec: &SynthSpec, dir: &Path) -> Result<Vec<String>, SynthError> {
    spec.validate()?;
    (0..spec.n_patients)
        .into_par_iter()
        .map(|id| {
            let rec = generate_record(spec, id)?;
            write_record(dir, &rec, "atr")?;
            Ok(rec.header.record_name)
        })
        .collect()
}
