//! Raw-slice compute kernels behind the tape primitives.

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
///
/// `a` is `m x k` after `op`, `b` is `k x n` after `op`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted slice extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Unfolds a zero-padded `[channels, h, w]` image into a `[channels*k*k, h*w]`
/// patch matrix for a "same" convolution with odd kernel size `k`.
pub(crate) fn im2col(input: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut col = vec![0.0; channels * k * k * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = sy as usize * w;
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let len = x_hi - x_lo;
                    dst[y * w + x_lo..y * w + x_hi]
                        .copy_from_slice(&plane[src_row + sx_lo..src_row + sx_lo + len]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto the image.
pub(crate) fn col2im(col: &[f64], channels: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = sy as usize * w;
                    let sx_lo = (x_lo as isize + dx) as usize;
                    let dst = &mut plane[dst_row + sx_lo..dst_row + sx_lo + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `lo + (hi - lo) * sigmoid(v)`, kept strictly inside `(lo, hi)` even where
/// the sigmoid rounds to exactly 0 or 1.
pub(crate) fn bounded_sigmoid(v: f64, lo: f64, hi: f64) -> f64 {
    (lo + (hi - lo) * sigmoid(v)).clamp(lo.next_up(), hi.next_down())
}
