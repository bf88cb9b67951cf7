//! Forward/backward kernels behind the graph operations.

use super::{LAYER_NORM_EPS, PROB_CLAMP};
use crate::tensor::Real;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044715;

/// `tanh` through one `exp`; libm's `tanhf` goes through `expm1f` and dominated profiles.
/// Absolute error stays at rounding level, which is all GELU needs.
fn tanh_exp<T: Real>(z: T) -> T {
    T::one() - T::c(2.0) / ((z + z).exp() + T::one())
}

/// Tanh approximation of GELU.
/// The tanh term of the GELU approximation; the forward caches it for the backward.
pub fn gelu_tanh<T: Real>(x: T) -> T {
    tanh_exp(T::c(GELU_K) * (x + T::c(GELU_C) * x * x * x))
}

pub fn gelu_from_tanh<T: Real>(x: T, t: T) -> T {
    T::c(0.5) * x * (T::one() + t)
}

pub fn gelu_grad_from_tanh<T: Real>(x: T, t: T) -> T {
    let half = T::c(0.5);
    let inner = T::c(GELU_K) * (T::one() + T::c(3.0 * GELU_C) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * inner
}

#[cfg(test)]
pub fn gelu<T: Real>(x: T) -> T {
    gelu_from_tanh(x, gelu_tanh(x))
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn transpose<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(x[r * cols + c]);
        }
    }
    out
}

pub fn flip_rows<T: Copy>(x: &[T], len: usize) -> Vec<T> {
    x.chunks(len).flat_map(|r| r.iter().rev().copied()).collect()
}

pub struct ConvGeom {
    pub cin: usize,
    pub l: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub lout: usize,
}

impl ConvGeom {
    /// Input index read by output `lo` at tap `kk`, if inside the signal.
    fn source(&self, lo: usize, kk: usize) -> Option<usize> {
        (lo * self.stride + kk).checked_sub(self.pad).filter(|&s| s < self.l)
    }
}

/// `col[(ci K + kk) Lout + lo] = x[ci, lo stride + kk - pad]` (zero outside).
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    for ci in 0..g.cin {
        let row = &x[ci * g.l..(ci + 1) * g.l];
        for kk in 0..g.k {
            let dst = &mut col[(ci * g.k + kk) * g.lout..(ci * g.k + kk + 1) * g.lout];
            for (lo, d) in dst.iter_mut().enumerate() {
                *d = g.source(lo, kk).map_or(T::zero(), |s| row[s]);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `col` into `gx`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, gx: &mut [T]) {
    for ci in 0..g.cin {
        let row = &mut gx[ci * g.l..(ci + 1) * g.l];
        for kk in 0..g.k {
            let src = &col[(ci * g.k + kk) * g.lout..(ci * g.k + kk + 1) * g.lout];
            for (lo, &v) in src.iter().enumerate() {
                if let Some(s) = g.source(lo, kk) {
                    row[s] += v;
                }
            }
        }
    }
}

/// Returns `(y, mean, rstd)`; statistics are per `(e, l)`.
pub fn layer_norm_forward<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    e: usize,
    c: usize,
    l: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_c = T::one() / T::c(c as f64);
    let eps = T::c(LAYER_NORM_EPS);
    let mut y = vec![T::zero(); x.len()];
    let mut mean = vec![T::zero(); e * l];
    let mut rstd = vec![T::zero(); e * l];
    for ei in 0..e {
        let xe = &x[ei * c * l..(ei + 1) * c * l];
        let mu = &mut mean[ei * l..(ei + 1) * l];
        for row in xe.chunks(l) {
            for (m, &v) in mu.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mu.iter_mut() {
            *m *= inv_c;
        }
        let rs = &mut rstd[ei * l..(ei + 1) * l];
        for row in xe.chunks(l) {
            for ((r, &v), &m) in rs.iter_mut().zip(row).zip(mu.iter()) {
                *r += (v - m) * (v - m);
            }
        }
        for r in rs.iter_mut() {
            *r = T::one() / (*r * inv_c + eps).sqrt();
        }
        let ye = &mut y[ei * c * l..(ei + 1) * c * l];
        for (ci, (yrow, xrow)) in ye.chunks_mut(l).zip(xe.chunks(l)).enumerate() {
            for (((yv, &xv), &m), &r) in yrow.iter_mut().zip(xrow).zip(mu.iter()).zip(rs.iter()) {
                *yv = (xv - m) * r * gamma[ci] + beta[ci];
            }
        }
    }
    (y, mean, rstd)
}

/// Returns `(gx, ggamma, gbeta)`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Real>(
    x: &[T],
    gamma: &[T],
    mean: &[T],
    rstd: &[T],
    gy: &[T],
    e: usize,
    c: usize,
    l: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_c = T::one() / T::c(c as f64);
    let mut gx = vec![T::zero(); x.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut a = vec![T::zero(); l];
    let mut b = vec![T::zero(); l];
    for ei in 0..e {
        let off = ei * c * l;
        let mu = &mean[ei * l..(ei + 1) * l];
        let rs = &rstd[ei * l..(ei + 1) * l];
        a.fill(T::zero());
        b.fill(T::zero());
        for ci in 0..c {
            let xr = &x[off + ci * l..off + (ci + 1) * l];
            let gr = &gy[off + ci * l..off + (ci + 1) * l];
            for j in 0..l {
                let xhat = (xr[j] - mu[j]) * rs[j];
                let gxhat = gr[j] * gamma[ci];
                a[j] += gxhat;
                b[j] += gxhat * xhat;
                gg[ci] += gr[j] * xhat;
                gb[ci] += gr[j];
            }
        }
        for ci in 0..c {
            let xr = &x[off + ci * l..off + (ci + 1) * l];
            let gr = &gy[off + ci * l..off + (ci + 1) * l];
            let out = &mut gx[off + ci * l..off + (ci + 1) * l];
            for j in 0..l {
                let xhat = (xr[j] - mu[j]) * rs[j];
                out[j] = rs[j] * (gr[j] * gamma[ci] - a[j] * inv_c - xhat * b[j] * inv_c);
            }
        }
    }
    (gx, gg, gb)
}

fn clamp_prob<T: Real>(p: T) -> T {
    let lo = T::c(PROB_CLAMP);
    let hi = T::one() - lo;
    p.max(lo).min(hi)
}

/// Unnormalized weighted binary cross-entropy.
pub fn bce_sum<T: Real>(p: &[T], t: &[T], w: &[T]) -> T {
    let mut acc = T::zero();
    for ((&pv, &tv), &wv) in p.iter().zip(t).zip(w) {
        if wv == T::zero() {
            continue;
        }
        let q = clamp_prob(pv);
        acc -= wv * (tv * q.ln() + (T::one() - tv) * (T::one() - q).ln());
    }
    acc
}

/// Gradient of `scale * bce_sum` w.r.t. `p`; zero where the clamp is active.
pub fn bce_grad<T: Real>(p: &[T], t: &[T], w: &[T], scale: T) -> Vec<T> {
    let lo = T::c(PROB_CLAMP);
    let hi = T::one() - lo;
    p.iter()
        .zip(t)
        .zip(w)
        .map(|((&pv, &tv), &wv)| {
            if wv == T::zero() || pv < lo || pv > hi {
                T::zero()
            } else {
                -scale * wv * (tv / pv - (T::one() - tv) / (T::one() - pv))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        // tanh-approximation values
        assert!((gelu(1.0f64) - 0.841_191_990_608_276_8).abs() < 1e-12);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(-3.0f64) - -0.003_637_392_081_772_994).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
        assert!((sigmoid(2.0f64) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom { cin: 2, l: 7, k: 3, stride: 2, pad: 1, lout: 4 };
        let x: Vec<f64> = (0..14).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).cos()).collect();
        let mut col = vec![0.0; 24];
        im2col(&x, &g, &mut col);
        let mut back = vec![0.0; 14];
        col2im(&y, &g, &mut back);
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bce_clamps_perfect_fit() {
        let loss = bce_sum(&[0.0f64, 1.0], &[0.0, 1.0], &[1.0, 1.0]);
        assert!(loss < 1e-6 && loss >= 0.0);
        assert_eq!(bce_grad(&[0.0f64, 1.0], &[0.0, 1.0], &[1.0, 1.0], 1.0), vec![0.0, 0.0]);
    }
}
