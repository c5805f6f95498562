//! Sequential selective-scan kernel and its adjoint.
//!
//! Per batch item, channel `d` and state `n`, with `A = -exp(a_log)`:
//!
//! ```text
//! z      = Δ[t,d] · A[d,n]
//! ā      = exp(z)
//! b̄      = expm1(z) / A · B[t,n]      (zero-order hold)  or  Δ · B[t,n]  (Euler)
//! h[t]   = ā · h[t-1] + b̄ · x[t,d]
//! y[t,d] = Σ_n C[t,n] · h[t,d,n]
//! ```

use crate::error::{Error, Result};
use crate::tensor::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    /// Exact zero-order hold for both `ā` and `b̄`.
    #[default]
    Zoh,
    /// `ā` by zero-order hold, `b̄ = Δ·B`.
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScanOptions {
    /// Run the recurrence right-to-left along the sequence.
    pub reverse: bool,
    pub discretization: Discretization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub d: usize,
    pub n: usize,
}

/// Forward intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ScanSaved<T> {
    /// Hidden states `[B, L, D, N]` in scan order (step, not timestep).
    h: Vec<T>,
}

#[derive(Debug, Default)]
pub struct ScanGrads<T> {
    pub x: Option<Vec<T>>,
    pub delta: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
    pub c: Option<Vec<T>>,
    pub a_log: Option<Vec<T>>,
}

const SERIES_CUTOFF: f64 = 0.1;

/// Taylor coefficients of `expm1(z)/z`: `1/(k+1)!`.
const PHI_SERIES: [f64; 9] = [
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362880.0,
];

/// Taylor coefficients of its derivative: `(k+1)/(k+2)!`.
const PHI_PRIME_SERIES: [f64; 8] = [
    1.0 / 2.0,
    1.0 / 3.0,
    1.0 / 8.0,
    1.0 / 30.0,
    1.0 / 144.0,
    1.0 / 840.0,
    1.0 / 5760.0,
    1.0 / 45360.0,
];

#[inline(always)]
fn horner<T: Float, const K: usize>(z: T, coeffs: &[T; K]) -> T {
    let mut acc = T::zero();
    for &c in coeffs.iter().rev() {
        acc = acc * z + c;
    }
    acc
}

/// `expm1(z) / z`, the zero-order-hold input scale divided by `Δ`.
/// Both branches are evaluated so the caller's loop stays branch-free.
#[inline(always)]
fn phi<T: Float>(z: T, a_bar: T, coeffs: &[T; 9]) -> T {
    let series = horner(z, coeffs);
    let direct = (a_bar - T::one()) / z;
    if z.abs() < T::lit(SERIES_CUTOFF) {
        series
    } else {
        direct
    }
}

/// `d/dz [expm1(z) / z] = (z e^z - expm1(z)) / z²`.
#[inline(always)]
fn phi_prime<T: Float>(z: T, a_bar: T, coeffs: &[T; 8]) -> T {
    let series = horner(z, coeffs);
    let direct = (z * a_bar - (a_bar - T::one())) / (z * z);
    if z.abs() < T::lit(SERIES_CUTOFF) {
        series
    } else {
        direct
    }
}

/// Input coefficient `b̄ / B` for one element.
#[inline(always)]
pub fn input_coefficient<T: Float>(delta: T, a: T, a_bar: T, disc: Discretization) -> T {
    match disc {
        Discretization::Zoh => delta * phi(delta * a, a_bar, &PHI_SERIES.map(T::lit)),
        Discretization::Euler => delta,
    }
}

#[inline]
fn timestep(step: usize, len: usize, reverse: bool) -> usize {
    if reverse {
        len - 1 - step
    } else {
        step
    }
}

/// Runs the recurrence from `h = 0`. Returns `y: [B, L, D]` and the saved
/// intermediates for [`scan_backward`].
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<T: Float>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    opts: ScanOptions,
) -> Result<(Vec<T>, ScanSaved<T>)> {
    match opts.discretization {
        Discretization::Zoh => forward_dispatch::<T, true>(x, delta, b, c, a_log, dims, opts.reverse),
        Discretization::Euler => forward_dispatch::<T, false>(x, delta, b, c, a_log, dims, opts.reverse),
    }
}

// The kernels are compiled twice: once for the baseline target and once
// with AVX2 enabled, picked at runtime. Rust never contracts a*b+c into an
// FMA on its own, so both builds produce identical bits.

#[allow(clippy::too_many_arguments)]
fn forward_dispatch<T: Float, const ZOH: bool>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    reverse: bool,
) -> Result<(Vec<T>, ScanSaved<T>)> {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { forward_avx2::<T, ZOH>(x, delta, b, c, a_log, dims, reverse) };
    }
    forward_impl::<T, ZOH>(x, delta, b, c, a_log, dims, reverse)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
fn forward_avx2<T: Float, const ZOH: bool>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    reverse: bool,
) -> Result<(Vec<T>, ScanSaved<T>)> {
    forward_impl::<T, ZOH>(x, delta, b, c, a_log, dims, reverse)
}

#[allow(clippy::too_many_arguments)]
fn backward_dispatch<T: Float, const ZOH: bool>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    reverse: bool,
    saved: &ScanSaved<T>,
    gy: &[T],
    out: &mut ScanGrads<T>,
) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { backward_avx2::<T, ZOH>(x, delta, b, c, a_log, dims, reverse, saved, gy, out) };
    }
    backward_impl::<T, ZOH>(x, delta, b, c, a_log, dims, reverse, saved, gy, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
fn backward_avx2<T: Float, const ZOH: bool>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    reverse: bool,
    saved: &ScanSaved<T>,
    gy: &[T],
    out: &mut ScanGrads<T>,
) {
    backward_impl::<T, ZOH>(x, delta, b, c, a_log, dims, reverse, saved, gy, out)
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn forward_impl<T: Float, const ZOH: bool>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    reverse: bool,
) -> Result<(Vec<T>, ScanSaved<T>)> {
    let ScanDims { batch, len, d, n } = dims;
    let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
    let total = batch * len * d * n;
    let mut y = vec![T::zero(); batch * len * d];
    let mut hs = Vec::with_capacity(total);
    let mut h = vec![T::zero(); d * n];
    let phi_c: [T; 9] = PHI_SERIES.map(T::lit);
    for bi in 0..batch {
        h.iter_mut().for_each(|v| *v = T::zero());
        for step in 0..len {
            let t = timestep(step, len, reverse);
            let row = bi * len + t;
            let bt = &b[row * n..][..n];
            let ct = &c[row * n..][..n];
            let mut finite = true;
            for di in 0..d {
                let xv = x[row * d + di];
                let dv = delta[row * d + di];
                forward_state::<T, ZOH>(dv, xv, &a[di * n..][..n], bt, &mut h[di * n..][..n], &phi_c);
                let hd = &h[di * n..][..n];
                hs.extend_from_slice(hd);
                let mut acc = T::zero();
                for ni in 0..n {
                    acc = acc + ct[ni] * hd[ni];
                }
                finite &= acc.is_finite();
                y[row * d + di] = acc;
            }
            if !finite {
                return Err(Error::NonFiniteScan { what: "selective scan output", t });
            }
        }
    }
    Ok((y, ScanSaved { h: hs }))
}

/// Adjoint of [`scan_forward`]; accumulates into whichever buffers in
/// `out` are present.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Float>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    opts: ScanOptions,
    saved: &ScanSaved<T>,
    gy: &[T],
    out: &mut ScanGrads<T>,
) {
    match opts.discretization {
        Discretization::Zoh => backward_dispatch::<T, true>(x, delta, b, c, a_log, dims, opts.reverse, saved, gy, out),
        Discretization::Euler => backward_dispatch::<T, false>(x, delta, b, c, a_log, dims, opts.reverse, saved, gy, out),
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_impl<T: Float, const ZOH: bool>(
    x: &[T],
    delta: &[T],
    b: &[T],
    c: &[T],
    a_log: &[T],
    dims: ScanDims,
    reverse: bool,
    saved: &ScanSaved<T>,
    gy: &[T],
    out: &mut ScanGrads<T>,
) {
    let ScanDims { batch, len, d, n } = dims;
    let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
    let mut g_a = vec![T::zero(); d * n];
    let mut g_x = vec![T::zero(); batch * len * d];
    let mut g_delta = vec![T::zero(); batch * len * d];
    let mut g_b = vec![T::zero(); batch * len * n];
    let mut g_c = vec![T::zero(); batch * len * n];
    let mut carry = vec![T::zero(); d * n];
    let zeros = vec![T::zero(); n];
    let mut tmp_x = vec![T::zero(); n];
    let mut tmp_d = vec![T::zero(); n];
    let phi_c: [T; 9] = PHI_SERIES.map(T::lit);
    let phi_prime_c: [T; 8] = PHI_PRIME_SERIES.map(T::lit);
    for bi in 0..batch {
        carry.iter_mut().for_each(|v| *v = T::zero());
        for step in (0..len).rev() {
            let t = timestep(step, len, reverse);
            let row = bi * len + t;
            let srow = bi * len + step;
            let bt = &b[row * n..][..n];
            let ct = &c[row * n..][..n];
            let gb_row = &mut g_b[row * n..][..n];
            let gc_row = &mut g_c[row * n..][..n];
            for di in 0..d {
                let xv = x[row * d + di];
                let dv = delta[row * d + di];
                let gyv = gy[row * d + di];
                let h_prev = if step > 0 { &saved.h[((srow - 1) * d + di) * n..][..n] } else { &zeros[..n] };
                backward_state::<T, ZOH>(
                    BackwardScalars { xv, dv, gyv },
                    &a[di * n..][..n],
                    &saved.h[(srow * d + di) * n..][..n],
                    h_prev,
                    bt,
                    ct,
                    &mut g_a[di * n..][..n],
                    &mut carry[di * n..][..n],
                    gb_row,
                    gc_row,
                    &mut tmp_x[..n],
                    &mut tmp_d[..n],
                    (&phi_c, &phi_prime_c),
                );
                let (mut sx, mut sd) = (T::zero(), T::zero());
                for ni in 0..n {
                    sx = sx + tmp_x[ni];
                    sd = sd + tmp_d[ni];
                }
                g_x[row * d + di] = sx;
                g_delta[row * d + di] = sd;
            }
        }
    }
    let add = |dst: &mut Option<Vec<T>>, src: &[T]| {
        if let Some(dst) = dst.as_deref_mut() {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
        }
    };
    add(&mut out.x, &g_x);
    add(&mut out.delta, &g_delta);
    add(&mut out.b, &g_b);
    add(&mut out.c, &g_c);
    let g_alog: Vec<T> = g_a.iter().zip(&a).map(|(&g, &av)| g * av).collect();
    add(&mut out.a_log, &g_alog);
}

/// One timestep of the recurrence for the `N` states of one channel.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn forward_state<T: Float, const ZOH: bool>(
    dv: T,
    xv: T,
    a: &[T],
    b: &[T],
    h: &mut [T],
    phi_c: &[T; 9],
) {
    let n = h.len();
    let (a, b) = (&a[..n], &b[..n]);
    for ni in 0..n {
        let (ab, cf) = discretized::<T, ZOH>(dv, a[ni], phi_c);
        h[ni] = ab * h[ni] + cf * b[ni] * xv;
    }
}

/// `(Ā, b̄/B)` for one state. Forward and backward share this so the
/// recomputed values match bit for bit.
#[inline(always)]
fn discretized<T: Float, const ZOH: bool>(dv: T, a: T, phi_c: &[T; 9]) -> (T, T) {
    let z = dv * a;
    let ab = z.exp_fast();
    let cf = if ZOH { dv * phi(z, ab, phi_c) } else { dv };
    (ab, cf)
}

struct BackwardScalars<T> {
    xv: T,
    dv: T,
    gyv: T,
}

/// Adjoint of [`forward_state`]. Per-state contributions to `dx` and
/// `dΔ` go to `tmp_x` / `tmp_d` and are summed by the caller.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn backward_state<T: Float, const ZOH: bool>(
    sc: BackwardScalars<T>,
    a: &[T],
    h: &[T],
    h_prev: &[T],
    b: &[T],
    c: &[T],
    g_a: &mut [T],
    carry: &mut [T],
    g_b: &mut [T],
    g_c: &mut [T],
    tmp_x: &mut [T],
    tmp_d: &mut [T],
    (phi_c, phi_prime_c): (&[T; 9], &[T; 8]),
) {
    let BackwardScalars { xv, dv, gyv } = sc;
    let n = carry.len();
    let (a, h, h_prev, b, c) = (&a[..n], &h[..n], &h_prev[..n], &b[..n], &c[..n]);
    let (g_a, g_b, g_c, tmp_x, tmp_d) = (&mut g_a[..n], &mut g_b[..n], &mut g_c[..n], &mut tmp_x[..n], &mut tmp_d[..n]);
    for ni in 0..n {
        let an = a[ni];
        let (ab, cf) = discretized::<T, ZOH>(dv, an, phi_c);
        let gh = carry[ni] + c[ni] * gyv;
        g_c[ni] = g_c[ni] + gyv * h[ni];
        let g_abar = gh * h_prev[ni];
        let g_coef = gh * b[ni] * xv;
        tmp_x[ni] = gh * cf * b[ni];
        g_b[ni] = g_b[ni] + gh * cf * xv;
        if ZOH {
            tmp_d[ni] = g_abar * an * ab + g_coef * ab;
            g_a[ni] = g_a[ni] + g_abar * dv * ab + g_coef * dv * dv * phi_prime(dv * an, ab, phi_prime_c);
        } else {
            tmp_d[ni] = g_abar * an * ab + g_coef;
            g_a[ni] = g_a[ni] + g_abar * dv * ab;
        }
        carry[ni] = ab * gh;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_branches_agree_at_cutoff() {
        for z in [-0.0999999f64, -0.1000001, 0.0999999] {
            let ab = z.exp();
            let exact = z.exp_m1() / z;
            assert!((phi(z, ab, &PHI_SERIES) - exact).abs() < 1e-12);
            let exact_prime = (z * ab - z.exp_m1()) / (z * z);
            assert!((phi_prime(z, ab, &PHI_PRIME_SERIES) - exact_prime).abs() < 1e-9);
        }
        assert_eq!(phi(0.0f64, 1.0, &PHI_SERIES), 1.0);
        assert_eq!(phi_prime(0.0f64, 1.0, &PHI_PRIME_SERIES), 0.5);
    }

    fn both_builds_agree<T: Float + std::fmt::Debug>() {
        use rand::{Rng, SeedableRng};
        let dims = ScanDims { batch: 2, len: 13, d: 5, n: 4 };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut draw = |k: usize, lo: f64, hi: f64| -> Vec<T> { (0..k).map(|_| T::lit(rng.random_range(lo..hi))).collect() };
        let rows = dims.batch * dims.len;
        let (x, delta) = (draw(rows * dims.d, -1.0, 1.0), draw(rows * dims.d, 0.001, 0.5));
        let (b, c) = (draw(rows * dims.n, -1.0, 1.0), draw(rows * dims.n, -1.0, 1.0));
        let a_log = draw(dims.d * dims.n, -1.0, 1.5);
        let gy = draw(rows * dims.d, -1.0, 1.0);
        let grads = || ScanGrads {
            x: Some(vec![T::zero(); rows * dims.d]),
            delta: Some(vec![T::zero(); rows * dims.d]),
            b: Some(vec![T::zero(); rows * dims.n]),
            c: Some(vec![T::zero(); rows * dims.n]),
            a_log: Some(vec![T::zero(); dims.d * dims.n]),
        };
        for reverse in [false, true] {
            let (y1, s1) = forward_impl::<T, true>(&x, &delta, &b, &c, &a_log, dims, reverse).unwrap();
            let (y2, s2) = forward_dispatch::<T, true>(&x, &delta, &b, &c, &a_log, dims, reverse).unwrap();
            assert_eq!(y1, y2);
            let (mut g1, mut g2) = (grads(), grads());
            backward_impl::<T, true>(&x, &delta, &b, &c, &a_log, dims, reverse, &s1, &gy, &mut g1);
            backward_dispatch::<T, true>(&x, &delta, &b, &c, &a_log, dims, reverse, &s2, &gy, &mut g2);
            assert_eq!((g1.x, g1.delta, g1.b, g1.c, g1.a_log), (g2.x, g2.delta, g2.b, g2.c, g2.a_log));
        }
    }

    #[test]
    fn plain_and_dispatched_kernels_match_bitwise() {
        both_builds_agree::<f32>();
        both_builds_agree::<f64>();
    }
}
