//! Raw forward/backward kernels on flat slices. The tape wraps these.

use super::Float;

pub const NORM_EPS: f64 = 1e-5;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// With `ta` the buffer `a` holds the `k×m` matrix; likewise `tb`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths checked above; `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    // e^{-|x|} never overflows; fold the sign back in afterwards
    let e = (-x.abs()).exp_fast();
    let r = T::one() / (T::one() + e);
    if x >= T::zero() { r } else { e * r }
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Float>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// `log(1 + e^x)` without overflow for large `|x|`.
#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp_fast().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    // log(e^y - 1), stable for small and large y
    y + (-(-y).exp_m1()).ln()
}

/// Layer norm over rows of length `e`. Returns `(out, rstd)`.
pub fn layer_norm_forward<T: Float>(x: &[T], gain: &[T], bias: &[T], e: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / e;
    let eps = T::lit(NORM_EPS);
    let inv_e = T::one() / T::from_usize(e).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * e..(r + 1) * e];
        let mean = row.iter().copied().sum::<T>() * inv_e;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_e;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let o = &mut out[r * e..(r + 1) * e];
        for i in 0..e {
            o[i] = (row[i] - mean) * rs * gain[i] + bias[i];
        }
    }
    (out, rstd)
}

/// Backward of [`layer_norm_forward`]. Accumulates into the given buffers.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Float>(
    x: &[T],
    gain: &[T],
    rstd: &[T],
    gy: &[T],
    e: usize,
    gx: Option<&mut [T]>,
    ggain: Option<&mut [T]>,
    gbias: Option<&mut [T]>,
) {
    let rows = x.len() / e;
    let inv_e = T::one() / T::from_usize(e).unwrap();
    let mut xhat = vec![T::zero(); e];
    let mut gx = gx;
    let mut ggain = ggain;
    let mut gbias = gbias;
    for r in 0..rows {
        let row = &x[r * e..(r + 1) * e];
        let g = &gy[r * e..(r + 1) * e];
        let mean = row.iter().copied().sum::<T>() * inv_e;
        let rs = rstd[r];
        for i in 0..e {
            xhat[i] = (row[i] - mean) * rs;
        }
        if let Some(gg) = ggain.as_deref_mut() {
            for i in 0..e {
                gg[i] = gg[i] + g[i] * xhat[i];
            }
        }
        if let Some(gb) = gbias.as_deref_mut() {
            for i in 0..e {
                gb[i] = gb[i] + g[i];
            }
        }
        if let Some(gx) = gx.as_deref_mut() {
            let mut mean_d = T::zero();
            let mut mean_dx = T::zero();
            for i in 0..e {
                let d = g[i] * gain[i];
                mean_d = mean_d + d;
                mean_dx = mean_dx + d * xhat[i];
            }
            mean_d = mean_d * inv_e;
            mean_dx = mean_dx * inv_e;
            let o = &mut gx[r * e..(r + 1) * e];
            for i in 0..e {
                let d = g[i] * gain[i];
                o[i] = o[i] + rs * (d - mean_d - xhat[i] * mean_dx);
            }
        }
    }
}

/// Per-channel statistics over all rows of a channel-last buffer.
/// Returns `(mean, biased variance)`.
pub fn channel_stats<T: Float>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let inv = T::one() / T::from_usize(rows.max(1)).unwrap();
    let mut mean = vec![T::zero(); c];
    for r in 0..rows {
        for j in 0..c {
            mean[j] = mean[j] + x[r * c + j];
        }
    }
    mean.iter_mut().for_each(|m| *m = *m * inv);
    let mut var = vec![T::zero(); c];
    for r in 0..rows {
        for j in 0..c {
            let d = x[r * c + j] - mean[j];
            var[j] = var[j] + d * d;
        }
    }
    var.iter_mut().for_each(|v| *v = *v * inv);
    (mean, var)
}

/// Causal depthwise convolution on a channel-last `[rows, len, d]` buffer
/// with kernel `[d, k]`. `reverse` runs the same filter right-to-left.
pub fn conv1d_depthwise_forward<T: Float>(
    x: &[T],
    kernel: &[T],
    len: usize,
    d: usize,
    k: usize,
    reverse: bool,
) -> Vec<T> {
    let rows = x.len() / (len * d);
    let taps = tap_major(kernel, d, k);
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        let base = r * len * d;
        for t in 0..len {
            for j in 0..k {
                let Some(src) = conv_source(t, j, k, len, reverse) else {
                    continue;
                };
                let (xo, oo) = (base + src * d, base + t * d);
                axpy_mul(&mut out[oo..oo + d], &taps[j * d..(j + 1) * d], &x[xo..xo + d]);
            }
        }
    }
    out
}

/// Kernel `[d, k]` transposed to `[k, d]` so each tap is contiguous.
fn tap_major<T: Float>(kernel: &[T], d: usize, k: usize) -> Vec<T> {
    let mut taps = vec![T::zero(); d * k];
    for c in 0..d {
        for j in 0..k {
            taps[j * d + c] = kernel[c * k + j];
        }
    }
    taps
}

/// `acc += a * b` elementwise.
#[inline(always)]
fn axpy_mul<T: Float>(acc: &mut [T], a: &[T], b: &[T]) {
    let n = acc.len();
    let (a, b) = (&a[..n], &b[..n]);
    for i in 0..n {
        acc[i] = acc[i] + a[i] * b[i];
    }
}

/// Source timestep read by tap `j` when producing output `t`.
#[inline]
fn conv_source(t: usize, j: usize, k: usize, len: usize, reverse: bool) -> Option<usize> {
    if reverse {
        let s = t + (k - 1) - j;
        (s < len).then_some(s)
    } else {
        (t + j).checked_sub(k - 1)
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_depthwise_backward<T: Float>(
    x: &[T],
    kernel: &[T],
    gy: &[T],
    len: usize,
    d: usize,
    k: usize,
    reverse: bool,
    gx: Option<&mut [T]>,
    gk: Option<&mut [T]>,
) {
    let rows = x.len() / (len * d);
    let taps = tap_major(kernel, d, k);
    let mut gtaps = gk.as_ref().map(|_| vec![T::zero(); d * k]);
    let mut gx = gx;
    for r in 0..rows {
        let base = r * len * d;
        for t in 0..len {
            for j in 0..k {
                let Some(src) = conv_source(t, j, k, len, reverse) else {
                    continue;
                };
                let (xo, oo) = (base + src * d, base + t * d);
                let g = &gy[oo..oo + d];
                if let Some(gx) = gx.as_deref_mut() {
                    axpy_mul(&mut gx[xo..xo + d], &taps[j * d..(j + 1) * d], g);
                }
                if let Some(gt) = gtaps.as_mut() {
                    axpy_mul(&mut gt[j * d..(j + 1) * d], &x[xo..xo + d], g);
                }
            }
        }
    }
    if let (Some(gk), Some(gt)) = (gk, gtaps) {
        for c in 0..d {
            for j in 0..k {
                gk[c * k + j] = gk[c * k + j] + gt[j * d + c];
            }
        }
    }
}

/// im2col for a same-padded square-kernel conv on `[bt, h, w, cin]`.
/// Column layout per output pixel is `(ky, kx, cin)`.
pub fn im2col<T: Float>(x: &[T], bt: usize, h: usize, w: usize, cin: usize, ksize: usize) -> Vec<T> {
    let pad = (ksize / 2) as isize;
    let cols_per = ksize * ksize * cin;
    let mut cols = vec![T::zero(); bt * h * w * cols_per];
    for b in 0..bt {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * cols_per;
                for ky in 0..ksize {
                    let si = i as isize + ky as isize - pad;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kx in 0..ksize {
                        let sj = j as isize + kx as isize - pad;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = ((b * h + si as usize) * w + sj as usize) * cin;
                        let dst = row + (ky * ksize + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back to the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add<T: Float>(
    gcols: &[T],
    gx: &mut [T],
    bt: usize,
    h: usize,
    w: usize,
    cin: usize,
    ksize: usize,
) {
    let pad = (ksize / 2) as isize;
    let cols_per = ksize * ksize * cin;
    for b in 0..bt {
        for i in 0..h {
            for j in 0..w {
                let row = ((b * h + i) * w + j) * cols_per;
                for ky in 0..ksize {
                    let si = i as isize + ky as isize - pad;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for kx in 0..ksize {
                        let sj = j as isize + kx as isize - pad;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + si as usize) * w + sj as usize) * cin;
                        let src = row + (ky * ksize + kx) * cin;
                        for c in 0..cin {
                            gx[dst + c] = gx[dst + c] + gcols[src + c];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(100.0f64), 100.0);
        assert!(softplus(100.0f32).is_finite());
        let tiny = softplus(-50.0f64);
        assert!(tiny > 0.0 && tiny < 1e-20);
    }

    #[test]
    fn inverse_softplus_roundtrip() {
        for y in [1e-3, 0.05, 0.1, 1.0, 30.0] {
            assert!((softplus(inverse_softplus(y)) - y).abs() / y < 1e-10);
        }
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0f64), 0.0);
        assert!((silu(1.0f64) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((silu(40.0f64) - 40.0).abs() < 1e-12);
        assert!(silu(-40.0f64).abs() < 1e-12);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn im2col_roundtrip_counts_taps() {
        // col2im(im2col(ones)) counts how many windows cover each pixel.
        let x = vec![1.0f64; 3 * 3];
        let cols = im2col(&x, 1, 3, 3, 1, 3);
        let mut back = vec![0.0; 9];
        col2im_add(&cols, &mut back, 1, 3, 3, 1, 3);
        assert_eq!(back, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }
}
