//! Diagonal state-space layers: ZOH discretization, kernel materialization, FFT causal
//! convolution and the equivalent recurrent scan.
//!
//! Each of the `n` complex modes per channel is paired with its conjugate, so only `n / 2`
//! modes are stored and real outputs are `2 Re(...)`. The real part of `A` is stored as
//! `log(-Re A)` so that every parameter value is stable.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use thiserror::Error;

use crate::tensor::Real;

#[derive(Debug, Error, PartialEq)]
pub enum SsmError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("unstable mode (channel {channel}, mode {mode}): |A_bar| = {magnitude}")]
    Stability { channel: usize, mode: usize, magnitude: f64 },
}

/// Continuous-time parameters of `h` independent channels with `n` states each.
///
/// Per-mode arrays are `h x n/2`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmParams<T> {
    pub h: usize,
    pub n: usize,
    pub log_neg_a_re: Vec<T>,
    pub a_im: Vec<T>,
    pub b_re: Vec<T>,
    pub b_im: Vec<T>,
    pub c_re: Vec<T>,
    pub c_im: Vec<T>,
    /// Skip gain per channel.
    pub d: Vec<T>,
    /// `ln(dt)` per channel.
    pub log_dt: Vec<T>,
}

impl<T: Real> SsmParams<T> {
    pub fn modes(&self) -> usize {
        self.n / 2
    }

    pub fn a(&self, i: usize) -> Complex<T> {
        Complex::new(-self.log_neg_a_re[i].exp(), self.a_im[i])
    }

    pub fn b(&self, i: usize) -> Complex<T> {
        Complex::new(self.b_re[i], self.b_im[i])
    }

    pub fn c(&self, i: usize) -> Complex<T> {
        Complex::new(self.c_re[i], self.c_im[i])
    }

    pub fn dt(&self, ch: usize) -> T {
        self.log_dt[ch].exp()
    }

    /// Builds parameters from explicit complex `A`, `B`, `C` (each `h x n/2`).
    pub fn from_complex(
        h: usize,
        a: &[Complex<T>],
        b: &[Complex<T>],
        c: &[Complex<T>],
        d: Vec<T>,
        log_dt: Vec<T>,
    ) -> Result<Self, SsmError> {
        let m = a.len() / h.max(1);
        if h == 0 || m == 0 || a.len() != h * m || b.len() != h * m || c.len() != h * m || d.len() != h || log_dt.len() != h {
            return Err(SsmError::Argument("inconsistent parameter shapes".into()));
        }
        if let Some(i) = a.iter().position(|v| !(v.re < T::zero())) {
            return Err(SsmError::Argument(format!("Re(A) must be negative (entry {i})")));
        }
        Ok(Self {
            h,
            n: 2 * m,
            log_neg_a_re: a.iter().map(|v| (-v.re).ln()).collect(),
            a_im: a.iter().map(|v| v.im).collect(),
            b_re: b.iter().map(|v| v.re).collect(),
            b_im: b.iter().map(|v| v.im).collect(),
            c_re: c.iter().map(|v| v.re).collect(),
            c_im: c.iter().map(|v| v.im).collect(),
            d,
            log_dt,
        })
    }

    pub fn cast<U: Real>(&self) -> SsmParams<U> {
        let f = |v: &[T]| v.iter().map(|x| U::c(x.f64())).collect::<Vec<U>>();
        SsmParams {
            h: self.h,
            n: self.n,
            log_neg_a_re: f(&self.log_neg_a_re),
            a_im: f(&self.a_im),
            b_re: f(&self.b_re),
            b_im: f(&self.b_im),
            c_re: f(&self.c_re),
            c_im: f(&self.c_im),
            d: f(&self.d),
            log_dt: f(&self.log_dt),
        }
    }

    /// Trainable scalars (complex entries count twice).
    pub fn n_scalars(&self) -> usize {
        6 * self.h * self.modes() + 2 * self.h
    }
}

/// `A_n = -1/2 + i pi n`, `B = 1`, `C ~ CN(0, 1)`, `D = 1`, `ln dt ~ U[ln 1e-3, ln 1e-1]`.
pub fn init_diagonal_ssm<T: Real>(h: usize, n: usize, seed: u64) -> Result<SsmParams<T>, SsmError> {
    if h == 0 || n == 0 || n % 2 != 0 {
        return Err(SsmError::Argument(format!("need h >= 1 and even n >= 2, got h={h}, n={n}")));
    }
    let m = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut c_re = Vec::with_capacity(h * m);
    let mut c_im = Vec::with_capacity(h * m);
    for _ in 0..h * m {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c_re.push(T::c(re * half));
        c_im.push(T::c(im * half));
    }
    let (lo, hi) = (0.001f64.ln(), 0.1f64.ln());
    let log_dt = (0..h).map(|_| T::c(rng.random_range(lo..hi))).collect();
    Ok(SsmParams {
        h,
        n,
        log_neg_a_re: vec![T::c(0.5f64.ln()); h * m],
        a_im: (0..h).flat_map(|_| (0..m).map(|k| T::c(std::f64::consts::PI * k as f64))).collect(),
        b_re: vec![T::one(); h * m],
        b_im: vec![T::zero(); h * m],
        c_re,
        c_im,
        d: vec![T::one(); h],
        log_dt,
    })
}

/// Zero-order-hold discretization, `h x n/2` each.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm<T> {
    pub h: usize,
    pub modes: usize,
    pub a_bar: Vec<Complex<T>>,
    pub b_bar: Vec<Complex<T>>,
}

const PHI_SERIES_RADIUS: f64 = 1e-3;

/// `(e^x - 1) / x`, continuous at 0.
fn phi<T: Real>(x: Complex<T>) -> Complex<T> {
    if x.norm().f64() < PHI_SERIES_RADIUS {
        // 1 + x/2 + x^2/6 + x^3/24 + x^4/120
        let one = Complex::new(T::one(), T::zero());
        let mut acc = one;
        let mut term = one;
        for k in 2..=5 {
            term = term * x / T::c(k as f64);
            acc = acc + term;
        }
        acc
    } else {
        (x.exp() - T::one()) / x
    }
}

/// Derivative of [`phi`].
fn phi_prime<T: Real>(x: Complex<T>) -> Complex<T> {
    if x.norm().f64() < PHI_SERIES_RADIUS {
        // sum_k k x^(k-1) / (k+1)!
        let mut acc = Complex::new(T::zero(), T::zero());
        let mut pow = Complex::new(T::one(), T::zero());
        let mut fact = 1.0f64;
        for k in 1..=5 {
            fact *= (k + 1) as f64;
            acc = acc + pow * T::c(k as f64 / fact);
            pow = pow * x;
        }
        acc
    } else {
        let e = x.exp();
        (x * e - e + T::one()) / (x * x)
    }
}

pub fn discretize<T: Real>(p: &SsmParams<T>) -> Result<DiscreteSsm<T>, SsmError> {
    let m = p.modes();
    let mut a_bar = Vec::with_capacity(p.h * m);
    let mut b_bar = Vec::with_capacity(p.h * m);
    for ch in 0..p.h {
        let dt = p.dt(ch);
        for k in 0..m {
            let i = ch * m + k;
            let x = p.a(i) * dt;
            let ab = x.exp();
            let mag = ab.norm().f64();
            if !(mag < 1.0) {
                return Err(SsmError::Stability { channel: ch, mode: k, magnitude: mag });
            }
            a_bar.push(ab);
            b_bar.push(phi(x) * p.b(i) * dt);
        }
    }
    Ok(DiscreteSsm { h: p.h, modes: m, a_bar, b_bar })
}

/// Real convolution kernel `K[h][l] = 2 Re sum_n C A_bar^l B_bar`, `h x l` row-major.
pub fn compute_kernel<T: Real>(p: &SsmParams<T>, len: usize) -> Result<Vec<T>, SsmError> {
    if len == 0 {
        return Err(SsmError::Argument("kernel length must be at least 1".into()));
    }
    let disc = discretize(p)?;
    let m = disc.modes;
    let two = T::c(2.0);
    let mut out = vec![T::zero(); p.h * len];
    for ch in 0..p.h {
        let row = &mut out[ch * len..(ch + 1) * len];
        for k in 0..m {
            let i = ch * m + k;
            let w = p.c(i) * disc.b_bar[i];
            let z = disc.a_bar[i];
            let mut pow = w;
            for v in row.iter_mut() {
                *v += two * pow.re;
                pow = pow * z;
            }
        }
    }
    Ok(out)
}

/// Gradients of a scalar loss with respect to the kernel-defining parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrads<T> {
    pub log_neg_a_re: Vec<T>,
    pub a_im: Vec<T>,
    pub b_re: Vec<T>,
    pub b_im: Vec<T>,
    pub c_re: Vec<T>,
    pub c_im: Vec<T>,
    pub log_dt: Vec<T>,
}

/// Modal coefficients `[h, n/2, 4]`: `(Re W, Im W, Re z, Im z)` with `W = C B_bar` and
/// `z = A_bar`, so that `K[l] = 2 Re sum W z^l`.
pub fn modal_coefficients<T: Real>(p: &SsmParams<T>) -> Result<Vec<T>, SsmError> {
    let disc = discretize(p)?;
    let mut out = Vec::with_capacity(4 * disc.a_bar.len());
    for (i, (z, bb)) in disc.a_bar.iter().zip(&disc.b_bar).enumerate() {
        let w = p.c(i) * *bb;
        out.extend([w.re, w.im, z.re, z.im]);
    }
    Ok(out)
}

/// Pulls `grad_k` (`h x len`, the loss gradient w.r.t. [`compute_kernel`]'s output) back
/// to the parameters.
///
/// Complex gradients are `dL/dRe + i dL/dIm`; for holomorphic `w = f(v)` this gives
/// `g_v = conj(f'(v)) g_w`.
pub fn kernel_vjp<T: Real>(p: &SsmParams<T>, len: usize, grad_k: &[T]) -> Result<KernelGrads<T>, SsmError> {
    if grad_k.len() != p.h * len || len == 0 {
        return Err(SsmError::Argument("kernel gradient shape mismatch".into()));
    }
    let disc = discretize(p)?;
    let m = disc.modes;
    let zero = T::zero();
    let two = T::c(2.0);
    let mut g_modal = Vec::with_capacity(4 * p.h * m);
    for ch in 0..p.h {
        let gk = &grad_k[ch * len..(ch + 1) * len];
        for k in 0..m {
            let i = ch * m + k;
            let z = disc.a_bar[i];
            let w = p.c(i) * disc.b_bar[i];
            // s0 = sum G[l] z^l, s1 = sum l G[l] z^(l-1)
            let mut s0 = Complex::new(zero, zero);
            let mut s1 = Complex::new(zero, zero);
            let mut pow_prev = Complex::new(zero, zero);
            let mut pow = Complex::new(T::one(), zero);
            for (l, &gl) in gk.iter().enumerate() {
                s0 = s0 + pow * gl;
                if l > 0 {
                    s1 = s1 + pow_prev * (gl * T::c(l as f64));
                }
                pow_prev = pow;
                pow = pow * z;
            }
            let g_w = s0.conj() * two;
            let g_z = (w * s1).conj() * two;
            g_modal.extend([g_w.re, g_w.im, g_z.re, g_z.im]);
        }
    }
    modal_vjp(p, &g_modal)
}

/// Pulls a gradient in the layout of [`modal_coefficients`] back to the parameters.
pub fn modal_vjp<T: Real>(p: &SsmParams<T>, g_modal: &[T]) -> Result<KernelGrads<T>, SsmError> {
    let m = p.modes();
    if g_modal.len() != 4 * p.h * m {
        return Err(SsmError::Argument("modal gradient shape mismatch".into()));
    }
    let disc = discretize(p)?;
    let zero = T::zero();
    let mut g = KernelGrads {
        log_neg_a_re: vec![zero; p.h * m],
        a_im: vec![zero; p.h * m],
        b_re: vec![zero; p.h * m],
        b_im: vec![zero; p.h * m],
        c_re: vec![zero; p.h * m],
        c_im: vec![zero; p.h * m],
        log_dt: vec![zero; p.h],
    };
    for ch in 0..p.h {
        let dt = p.dt(ch);
        let mut d_dt = zero;
        for k in 0..m {
            let i = ch * m + k;
            let gm = &g_modal[4 * i..4 * i + 4];
            let g_w = Complex::new(gm[0], gm[1]);
            let g_z = Complex::new(gm[2], gm[3]);
            let a = p.a(i);
            let b = p.b(i);
            let c = p.c(i);
            let x = a * dt;
            let z = disc.a_bar[i];
            let bb = disc.b_bar[i];
            let g_c = bb.conj() * g_w;
            let g_bb = c.conj() * g_w;
            let ph = phi(x);
            let g_b = (ph * dt).conj() * g_bb;
            // z = e^x, b_bar = dt phi(x) b
            let g_x = z.conj() * g_z + (phi_prime(x) * b * dt).conj() * g_bb;
            let g_a = g_x * dt;
            d_dt += (g_bb.conj() * ph * b).re + (g_x.conj() * a).re;
            g.log_neg_a_re[i] = -g_a.re * p.log_neg_a_re[i].exp();
            g.a_im[i] = g_a.im;
            g.b_re[i] = g_b.re;
            g.b_im[i] = g_b.im;
            g.c_re[i] = g_c.re;
            g.c_im[i] = g_c.im;
        }
        g.log_dt[ch] = d_dt * dt;
    }
    Ok(g)
}

/// Causal convolution of one row with the kernel `2 Re sum W z^l`, by running the modal
/// recurrence. `modes` is one channel of [`modal_coefficients`].
pub fn modal_scan_row<T: Real>(modes: &[T], u: &[T], y: &mut [T], state: &mut Vec<Complex<T>>) {
    let m = modes.len() / 4;
    state.clear();
    state.resize(m, Complex::new(T::zero(), T::zero()));
    let two = T::c(2.0);
    for (yt, &ut) in y.iter_mut().zip(u) {
        let mut acc = T::zero();
        for (h, c) in state.iter_mut().zip(modes.chunks_exact(4)) {
            let re = c[2] * h.re - c[3] * h.im + ut;
            let im = c[2] * h.im + c[3] * h.re;
            *h = Complex::new(re, im);
            acc += c[0] * re - c[1] * im;
        }
        *yt = two * acc;
    }
}

/// Backward of [`modal_scan_row`]: writes `dL/du` into `gu` (when given) and adds
/// `dL/dmodes` into `gmodes`. `r` is scratch.
pub fn modal_scan_row_backward<T: Real>(
    modes: &[T],
    u: &[T],
    gy: &[T],
    gu: Option<&mut [T]>,
    gmodes: &mut [T],
    r: &mut Vec<Complex<T>>,
) {
    let m = modes.len() / 4;
    let len = u.len();
    let zero = Complex::new(T::zero(), T::zero());
    let two = T::c(2.0);
    // r_t = gy_t + z r_(t+1); gu_t = 2 Re sum W r_t; S0 = sum u_t r_t
    r.clear();
    r.resize(len * m, zero);
    let mut s0 = vec![zero; m];
    let mut carry = vec![zero; m];
    let mut gu = gu;
    for t in (0..len).rev() {
        let mut acc = T::zero();
        let row = &mut r[t * m..(t + 1) * m];
        for k in 0..m {
            let c = &modes[4 * k..4 * k + 4];
            let p = carry[k];
            let v = Complex::new(c[2] * p.re - c[3] * p.im + gy[t], c[2] * p.im + c[3] * p.re);
            carry[k] = v;
            row[k] = v;
            acc += c[0] * v.re - c[1] * v.im;
            s0[k] = s0[k] + v * u[t];
        }
        if let Some(g) = gu.as_deref_mut() {
            g[t] = two * acc;
        }
    }
    // S1 = sum r_t h_(t-1), with h recomputed
    let mut s1 = vec![zero; m];
    let mut h = vec![zero; m];
    for t in 0..len {
        let row = &r[t * m..(t + 1) * m];
        for k in 0..m {
            let c = &modes[4 * k..4 * k + 4];
            s1[k] = s1[k] + row[k] * h[k];
            let p = h[k];
            h[k] = Complex::new(c[2] * p.re - c[3] * p.im + u[t], c[2] * p.im + c[3] * p.re);
        }
    }
    for k in 0..m {
        let c = &modes[4 * k..4 * k + 4];
        let w = Complex::new(c[0], c[1]);
        let g_w = s0[k].conj() * two;
        let g_z = (w * s1[k]).conj() * two;
        let gm = &mut gmodes[4 * k..4 * k + 4];
        gm[0] += g_w.re;
        gm[1] += g_w.im;
        gm[2] += g_z.re;
        gm[3] += g_z.im;
    }
}

/// Reusable buffers for [`modal_scan_block`] and [`modal_scan_block_backward`].
#[derive(Debug, Default)]
pub struct ModalScratch<T> {
    ut: Vec<T>,
    yt: Vec<T>,
    coef: Vec<T>,
    state: Vec<T>,
    acc: Vec<T>,
    rr: Vec<T>,
    ri: Vec<T>,
}

/// `[rows, cols]` to `[cols, rows]`, optionally reading columns back to front.
fn transpose_into<T: Copy>(src: &[T], rows: usize, cols: usize, rev: bool, dst: &mut Vec<T>) {
    dst.clear();
    dst.reserve(rows * cols);
    for c in 0..cols {
        let c = if rev { cols - 1 - c } else { c };
        dst.extend((0..rows).map(|r| src[r * cols + c]));
    }
}

/// Splits `modes` (`[h, m, 4]`) into mode-major planes `wr, wi, zr, zi`, each `m x h`.
fn mode_planes<T: Real>(modes: &[T], h: usize, m: usize, out: &mut Vec<T>) {
    out.clear();
    out.resize(4 * m * h, T::zero());
    for ch in 0..h {
        for k in 0..m {
            for f in 0..4 {
                out[f * m * h + k * h + ch] = modes[(ch * m + k) * 4 + f];
            }
        }
    }
}

/// [`modal_scan_row`] for all `h` channels of one `h x len` block at once. Channels run in
/// the inner loop so the recurrence vectorizes. With `rev` the scan runs anti-causally
/// (time-flip, convolve, flip back).
pub fn modal_scan_block<T: Real>(
    modes: &[T],
    u: &[T],
    y: &mut [T],
    h: usize,
    len: usize,
    rev: bool,
    s: &mut ModalScratch<T>,
) {
    let m = modes.len() / (4 * h);
    let mh = m * h;
    transpose_into(u, h, len, rev, &mut s.ut);
    mode_planes(modes, h, m, &mut s.coef);
    s.state.clear();
    s.state.resize(2 * mh, T::zero());
    s.yt.clear();
    s.yt.resize(len * h, T::zero());
    let (wr, rest) = s.coef.split_at(mh);
    let (wi, rest) = rest.split_at(mh);
    let (zr, zi) = rest.split_at(mh);
    let (hr, hi) = s.state.split_at_mut(mh);
    for (ut, yt) in s.ut.chunks_exact(h).zip(s.yt.chunks_exact_mut(h)) {
        for k in 0..m {
            let r = k * h..(k + 1) * h;
            let it = hr[r.clone()].iter_mut().zip(&mut hi[r.clone()]).zip(&zr[r.clone()]).zip(&zi[r.clone()]);
            let it = it.zip(&wr[r.clone()]).zip(&wi[r]).zip(ut).zip(yt.iter_mut());
            for (((((((a, b), &cr), &ci), &w_r), &w_i), &x), y) in it {
                let na = cr * *a - ci * *b + x;
                let nb = cr * *b + ci * *a;
                *a = na;
                *b = nb;
                *y += w_r * na - w_i * nb;
            }
        }
    }
    let two = T::c(2.0);
    for (ch, row) in y.chunks_exact_mut(len).enumerate() {
        for (t, v) in row.iter_mut().enumerate() {
            let t = if rev { len - 1 - t } else { t };
            *v = two * s.yt[t * h + ch];
        }
    }
}

/// Backward of [`modal_scan_block`]; adds `dL/du` into `gu` (when given) and `dL/dmodes`
/// into `gmodes`.
pub fn modal_scan_block_backward<T: Real>(
    modes: &[T],
    u: &[T],
    gy: &[T],
    gu: Option<&mut [T]>,
    gmodes: &mut [T],
    h: usize,
    len: usize,
    rev: bool,
    s: &mut ModalScratch<T>,
) {
    let m = modes.len() / (4 * h);
    let mh = m * h;
    let zero = T::zero();
    let two = T::c(2.0);
    transpose_into(u, h, len, rev, &mut s.ut);
    transpose_into(gy, h, len, rev, &mut s.yt);
    mode_planes(modes, h, m, &mut s.coef);
    let (wr, rest) = s.coef.split_at(mh);
    let (wi, rest) = rest.split_at(mh);
    let (zr, zi) = rest.split_at(mh);
    // state: carry re/im; acc: s0 re/im, s1 re/im, gu^T
    s.state.clear();
    s.state.resize(2 * mh, zero);
    s.acc.clear();
    s.acc.resize(4 * mh + len * h, zero);
    s.rr.clear();
    s.rr.resize(len * mh, zero);
    s.ri.clear();
    s.ri.resize(len * mh, zero);
    let (cr_all, ci_all) = s.state.split_at_mut(mh);
    let (s0r, rest) = s.acc.split_at_mut(mh);
    let (s0i, rest) = rest.split_at_mut(mh);
    let (s1r, rest) = rest.split_at_mut(mh);
    let (s1i, gut) = rest.split_at_mut(mh);
    // r_t = gy_t + z r_(t+1); gu_t = 2 Re sum W r_t; S0 = sum u_t r_t
    for t in (0..len).rev() {
        let g = &s.yt[t * h..(t + 1) * h];
        let x = &s.ut[t * h..(t + 1) * h];
        let gout = &mut gut[t * h..(t + 1) * h];
        for k in 0..m {
            let r = k * h..(k + 1) * h;
            let base = t * mh + k * h;
            let it = cr_all[r.clone()].iter_mut().zip(&mut ci_all[r.clone()]).zip(&zr[r.clone()]).zip(&zi[r.clone()]);
            let it = it.zip(&wr[r.clone()]).zip(&wi[r.clone()]).zip(&mut s0r[r.clone()]).zip(&mut s0i[r]);
            let it = it.zip(&mut s.rr[base..base + h]).zip(&mut s.ri[base..base + h]).zip(g).zip(x).zip(gout.iter_mut());
            for ((((((((((((c_r, c_i), &a), &b), &w_r), &w_i), s_r), s_i), rr), ri), &gv), &xv), go) in it {
                let vr = a * *c_r - b * *c_i + gv;
                let vi = a * *c_i + b * *c_r;
                *c_r = vr;
                *c_i = vi;
                *rr = vr;
                *ri = vi;
                *go += w_r * vr - w_i * vi;
                *s_r += vr * xv;
                *s_i += vi * xv;
            }
        }
    }
    // S1 = sum r_t h_(t-1), with h recomputed
    cr_all.fill(zero);
    ci_all.fill(zero);
    for t in 0..len {
        let x = &s.ut[t * h..(t + 1) * h];
        for k in 0..m {
            let r = k * h..(k + 1) * h;
            let base = t * mh + k * h;
            let it = cr_all[r.clone()].iter_mut().zip(&mut ci_all[r.clone()]).zip(&zr[r.clone()]).zip(&zi[r.clone()]);
            let it = it.zip(&mut s1r[r.clone()]).zip(&mut s1i[r]).zip(&s.rr[base..base + h]).zip(&s.ri[base..base + h]).zip(x);
            for ((((((((p_r, p_i), &a), &b), s_r), s_i), &qr), &qi), &xv) in it {
                let (pr, pi) = (*p_r, *p_i);
                *s_r += qr * pr - qi * pi;
                *s_i += qr * pi + qi * pr;
                *p_r = a * pr - b * pi + xv;
                *p_i = a * pi + b * pr;
            }
        }
    }
    if let Some(gu) = gu {
        for (ch, row) in gu.chunks_exact_mut(len).enumerate() {
            for (t, v) in row.iter_mut().enumerate() {
                let t = if rev { len - 1 - t } else { t };
                *v += two * gut[t * h + ch];
            }
        }
    }
    for ch in 0..h {
        for k in 0..m {
            let j = k * h + ch;
            let w = Complex::new(wr[j], wi[j]);
            let g_w = Complex::new(s0r[j], s0i[j]).conj() * two;
            let g_z = (w * Complex::new(s1r[j], s1i[j])).conj() * two;
            let gm = &mut gmodes[(ch * m + k) * 4..(ch * m + k) * 4 + 4];
            gm[0] += g_w.re;
            gm[1] += g_w.im;
            gm[2] += g_z.re;
            gm[3] += g_z.im;
        }
    }
}

/// Zero-padded real FFT plan pair for causal convolution of length-`len` signals.
pub struct FftConvolver<T: Real> {
    len: usize,
    n: usize,
    forward: Arc<dyn RealToComplex<T>>,
    inverse: Arc<dyn ComplexToReal<T>>,
}

impl<T: Real> FftConvolver<T> {
    pub fn new(len: usize, planner: &mut RealFftPlanner<T>) -> Self {
        let n = (2 * len.max(1)).next_power_of_two();
        Self { len, n, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    pub fn with_new_planner(len: usize) -> Self {
        Self::new(len, &mut RealFftPlanner::new())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn fft_len(&self) -> usize {
        self.n
    }

    /// Spectrum of `x` (at most `len` samples) zero-padded to the FFT length.
    pub fn spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        let mut buf = vec![T::zero(); self.n];
        buf[..x.len()].copy_from_slice(x);
        let mut out = self.forward.make_output_vec();
        self.forward.process(&mut buf, &mut out).expect("buffer sizes match the plan");
        out
    }

    /// First `len` samples of the inverse transform, scaled by `1/n`.
    pub fn inverse(&self, mut spec: Vec<Complex<T>>) -> Vec<T> {
        // DC and Nyquist bins of a real signal are real; drop rounding residue.
        spec[0].im = T::zero();
        let last = spec.len() - 1;
        spec[last].im = T::zero();
        let mut out = self.inverse.make_output_vec();
        self.inverse.process(&mut spec, &mut out).expect("buffer sizes match the plan");
        let scale = T::one() / T::c(self.n as f64);
        out.truncate(self.len);
        for v in &mut out {
            *v *= scale;
        }
        out
    }
}

/// Pointwise product of two spectra.
pub fn spectral_product<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Vec<Complex<T>> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Causal convolution of each channel of `u` with the matching kernel row, `h x len`.
pub fn fft_convolve<T: Real>(u: &[T], k: &[T], h: usize, len: usize) -> Result<Vec<T>, SsmError> {
    check_shapes(u, k, h, len)?;
    let conv = FftConvolver::with_new_planner(len);
    let mut out = Vec::with_capacity(h * len);
    for ch in 0..h {
        let r = ch * len..(ch + 1) * len;
        let kf = conv.spectrum(&k[r.clone()]);
        let uf = conv.spectrum(&u[r]);
        out.extend(conv.inverse(spectral_product(&uf, &kf)));
    }
    Ok(out)
}

/// `O(len^2)` reference for [`fft_convolve`].
pub fn direct_convolve<T: Real>(u: &[T], k: &[T], h: usize, len: usize) -> Result<Vec<T>, SsmError> {
    check_shapes(u, k, h, len)?;
    let mut out = vec![T::zero(); h * len];
    for ch in 0..h {
        let (uu, kk) = (&u[ch * len..(ch + 1) * len], &k[ch * len..(ch + 1) * len]);
        for l in 0..len {
            let mut acc = T::zero();
            for j in 0..=l {
                acc += kk[j] * uu[l - j];
            }
            out[ch * len + l] = acc;
        }
    }
    Ok(out)
}

fn check_shapes<T>(u: &[T], k: &[T], h: usize, len: usize) -> Result<(), SsmError> {
    if u.len() != h * len || k.len() != h * len {
        return Err(SsmError::Argument(format!(
            "expected {h} x {len} input and kernel, got {} and {} values",
            u.len(),
            k.len()
        )));
    }
    Ok(())
}

/// Recurrent form: `x_l = A_bar x_(l-1) + B_bar u_l`, `y_l = 2 Re(C x_l)`. No skip term.
pub fn recurrent_scan<T: Real>(p: &SsmParams<T>, u: &[T], len: usize) -> Result<Vec<T>, SsmError> {
    if u.len() != p.h * len {
        return Err(SsmError::Argument(format!("expected {} x {len} input", p.h)));
    }
    let disc = discretize(p)?;
    let m = disc.modes;
    let two = T::c(2.0);
    let mut out = vec![T::zero(); p.h * len];
    let mut state = vec![Complex::new(T::zero(), T::zero()); m];
    for ch in 0..p.h {
        state.fill(Complex::new(T::zero(), T::zero()));
        for l in 0..len {
            let ul = u[ch * len + l];
            let mut y = T::zero();
            for (k, s) in state.iter_mut().enumerate() {
                let i = ch * m + k;
                *s = disc.a_bar[i] * *s + disc.b_bar[i] * ul;
                y += two * (p.c(i) * *s).re;
            }
            out[ch * len + l] = y;
        }
    }
    Ok(out)
}

/// Applies one direction: kernel convolution plus the `D u` skip.
pub fn ssm_apply<T: Real>(p: &SsmParams<T>, u: &[T], len: usize) -> Result<Vec<T>, SsmError> {
    let k = compute_kernel(p, len)?;
    let mut y = fft_convolve(u, &k, p.h, len)?;
    for ch in 0..p.h {
        for l in 0..len {
            y[ch * len + l] += p.d[ch] * u[ch * len + l];
        }
    }
    Ok(y)
}

fn flip_rows<T: Copy>(x: &[T], len: usize) -> Vec<T> {
    x.chunks(len).flat_map(|r| r.iter().rev().copied()).collect()
}

/// Forward and time-reversed SSMs over the same `h` channels, merged `2h -> h`.
#[derive(Debug, Clone)]
pub struct BidirectionalLayer<T> {
    pub forward: SsmParams<T>,
    pub backward: SsmParams<T>,
    /// `h x 2h`, row-major; columns `0..h` read the forward branch.
    pub merge_w: Vec<T>,
    pub merge_b: Vec<T>,
    /// Pointwise nonlinearity applied to the concatenation before merging.
    pub activation: Option<fn(T) -> T>,
}

/// `merge(act([ssm_f(u) ; flip(ssm_b(flip(u)))]))`, `h x len`.
pub fn bidirectional_apply<T: Real>(layer: &BidirectionalLayer<T>, u: &[T], len: usize) -> Result<Vec<T>, SsmError> {
    let h = layer.forward.h;
    if layer.backward.h != h || layer.merge_w.len() != 2 * h * h || layer.merge_b.len() != h {
        return Err(SsmError::Argument("bidirectional layer shapes disagree".into()));
    }
    let yf = ssm_apply(&layer.forward, u, len)?;
    let yb = flip_rows(&ssm_apply(&layer.backward, &flip_rows(u, len), len)?, len);
    let mut cat = yf;
    cat.extend(yb);
    if let Some(act) = layer.activation {
        for v in &mut cat {
            *v = act(*v);
        }
    }
    let mut out: Vec<T> = layer.merge_b.iter().flat_map(|&b| std::iter::repeat_n(b, len)).collect();
    crate::tensor::gemm(h, 2 * h, len, &layer.merge_w, false, &cat, false, &mut out, true);
    Ok(out)
}

/// `max |a - b| / max |b|`: error relative to the reference's scale.
pub fn max_rel_err(a: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(reference).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
