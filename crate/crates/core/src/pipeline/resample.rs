//! Band-limited resampling with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use super::PipelineError;

/// Kaiser window shape parameter.
pub const KAISER_BETA: f64 = 8.6;
/// Zero crossings of the sinc kernel on each side of its centre.
pub const ZERO_CROSSINGS: usize = 64;
/// Cutoff as a fraction of the lower Nyquist rate. Places the end of the transition band
/// just below the output Nyquist frequency.
pub const ROLLOFF: f64 = 0.947_593_7;

/// Largest phase count for which a polyphase table is built.
const MAX_PHASES: u64 = 4096;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let half_sq = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut k = 1.0;
    while term > 1e-17 * sum {
        term *= half_sq / (k * k);
        sum += term;
        k += 1.0;
    }
    sum
}

#[derive(Debug, Clone)]
struct Kernel {
    /// Normalised cutoff in cycles per input sample, times two.
    scale: f64,
    half_width: f64,
    i0_beta: f64,
}

impl Kernel {
    fn new(fs_in: f64, fs_out: f64) -> Self {
        let scale = (fs_out / fs_in).min(1.0) * ROLLOFF;
        Self { scale, half_width: ZERO_CROSSINGS as f64 / scale, i0_beta: bessel_i0(KAISER_BETA) }
    }

    /// Kernel value at offset `t` input samples from the centre.
    fn eval(&self, t: f64) -> f64 {
        let x = t / self.half_width;
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let arg = PI * self.scale * t;
        let sinc = if arg == 0.0 { 1.0 } else { arg.sin() / arg };
        let window = bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / self.i0_beta;
        self.scale * sinc * window
    }
}

/// Approximates `fs_in / fs_out` as a reduced fraction `num / den` when both rates are
/// exact multiples of 1/1000 Hz.
fn rational_step(fs_in: f64, fs_out: f64) -> Option<(u64, u64)> {
    let to_milli = |f: f64| {
        let m = (f * 1000.0).round();
        ((m / 1000.0 - f).abs() <= 1e-9 * f && m >= 1.0 && m < 1e15).then_some(m as u64)
    };
    let (a, b) = (to_milli(fs_in)?, to_milli(fs_out)?);
    let g = gcd(a, b);
    Some((a / g, b / g))
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Resamples `signal` from `fs_in` to `fs_out` Hz.
///
/// The output has `round(n * fs_out / fs_in)` samples; equal rates return the input unchanged.
pub fn resample(signal: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>, PipelineError> {
    if !(fs_in > 0.0 && fs_in.is_finite() && fs_out > 0.0 && fs_out.is_finite()) {
        return Err(PipelineError::Argument(format!(
            "sampling rates must be positive, got {fs_in} -> {fs_out}"
        )));
    }
    if fs_in == fs_out {
        return Ok(signal.to_vec());
    }
    let n_out = (signal.len() as f64 * fs_out / fs_in).round() as usize;
    let kernel = Kernel::new(fs_in, fs_out);
    let reach = kernel.half_width.ceil() as i64;

    let convolve = |base: i64, taps: &mut dyn FnMut(i64) -> f64| -> f64 {
        let lo = (base - reach).max(0);
        let hi = (base + reach + 1).min(signal.len() as i64 - 1);
        let mut acc = 0.0;
        let mut i = lo;
        while i <= hi {
            acc += signal[i as usize] * taps(i - base);
            i += 1;
        }
        acc
    };

    let mut out = Vec::with_capacity(n_out);
    match rational_step(fs_in, fs_out).filter(|&(_, den)| den <= MAX_PHASES) {
        Some((num, den)) => {
            // Output j sits at input position j*num/den = base + phase/den.
            let width = (2 * reach + 2) as usize;
            let table: Vec<Vec<f64>> = (0..den)
                .map(|phase| {
                    let frac = phase as f64 / den as f64;
                    (0..width).map(|k| kernel.eval(frac - (k as i64 - reach) as f64)).collect()
                })
                .collect();
            for j in 0..n_out as u64 {
                let pos = j * num;
                let base = (pos / den) as i64;
                let row = &table[(pos % den) as usize];
                out.push(convolve(base, &mut |m| row[(m + reach) as usize]));
            }
        }
        None => {
            let step = fs_in / fs_out;
            for j in 0..n_out {
                let centre = j as f64 * step;
                let base = centre.floor() as i64;
                let frac = centre - base as f64;
                out.push(convolve(base, &mut |m| kernel.eval(frac - m as f64)));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn identity_at_equal_rates() {
        let x: Vec<f64> = (0..100).map(|i| (i as f64 * 0.37).cos()).collect();
        assert_eq!(resample(&x, 128.0, 128.0).unwrap(), x);
    }

    #[test]
    fn output_length() {
        assert_eq!(resample(&vec![0.0; 3600], 360.0, 128.0).unwrap().len(), 1280);
        assert_eq!(resample(&vec![0.0; 2500], 250.0, 128.0).unwrap().len(), 1280);
        assert_eq!(resample(&vec![0.0; 3], 250.0, 128.0).unwrap().len(), 2);
        assert!(resample(&[], 250.0, 128.0).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_rates() {
        assert!(resample(&[1.0], 0.0, 128.0).is_err());
        assert!(resample(&[1.0], 128.0, -1.0).is_err());
        assert!(resample(&[1.0], f64::NAN, 128.0).is_err());
    }

    #[test]
    fn kernel_peak_and_zero_crossings() {
        let k = Kernel::new(1.0, 1.0);
        assert!((k.eval(0.0) - ROLLOFF).abs() < 1e-15);
        assert!(k.eval(1.0 / ROLLOFF).abs() < 1e-12);
        assert_eq!(k.eval(k.half_width + 1.0), 0.0);
    }

    #[test]
    fn polyphase_matches_direct_evaluation() {
        // 250 -> 128 uses the table; an irrational-looking rate pair forces the direct path.
        let x = sine(3.0, 250.0, 2000);
        let table = resample(&x, 250.0, 128.0).unwrap();
        let direct = resample(&x, 250.0 + 1e-7, 128.0).unwrap();
        assert_eq!(table.len(), direct.len());
        let err = table.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn upsampling_preserves_low_frequency() {
        let x = sine(2.0, 64.0, 64 * 20);
        let y = resample(&x, 64.0, 128.0).unwrap();
        let expected = sine(2.0, 128.0, y.len());
        let err = y[400..2000].iter().zip(&expected[400..2000]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn bessel_reference_values() {
        assert!((bessel_i0(0.0) - 1.0).abs() < 1e-15);
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008_4).abs() < 1e-14);
        assert!((bessel_i0(8.6) / 750.461_159_563_165_9 - 1.0).abs() < 1e-13);
    }
}
