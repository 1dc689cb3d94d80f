//! Raw numeric kernels on slices. The differentiable graph calls into these.

use super::Scalar;

/// Strided read-only matrix view: `rows × cols` with row/column strides.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, F: Scalar> MatRef<'a, F> {
    /// Row-major `rows × cols` matrix, optionally viewed transposed.
    pub fn new(data: &'a [F], rows: usize, cols: usize, transposed: bool) -> Self {
        debug_assert!(data.len() >= rows * cols);
        if transposed {
            MatRef {
                data,
                rows: cols,
                cols: rows,
                rs: 1,
                cs: cols as isize,
            }
        } else {
            MatRef {
                data,
                rows,
                cols,
                rs: cols as isize,
                cs: 1,
            }
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `out (+)= a · b` with `out` row-major `a.rows × b.cols`.
pub fn gemm<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, out: &mut [F], accumulate: bool) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            out[..m * n].iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    // SAFETY: views were bounds-checked against their slices above and `out`
    // is an exclusive borrow of at least m*n elements.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Plain triple-loop product used for tiny batched matrices, where the
/// blocked kernel's packing overhead dominates.
pub fn small_gemm<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, out: &mut [F], accumulate: bool) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if b.cs == 1 && b.rs >= 0 {
        // row-major B: sweep whole rows of B so the inner loop vectorizes.
        // Each output still sums over p in order from zero.
        let rs = b.rs as usize;
        let mut row = vec![F::zero(); n];
        for i in 0..m {
            row.iter_mut().for_each(|x| *x = F::zero());
            for p in 0..k {
                let av = a.data[(i as isize * a.rs + p as isize * a.cs) as usize];
                let br = &b.data[p * rs..p * rs + n];
                for (r, &bv) in row.iter_mut().zip(br) {
                    *r = *r + av * bv;
                }
            }
            let o = &mut out[i * n..(i + 1) * n];
            if accumulate {
                o.iter_mut().zip(&row).for_each(|(o, &r)| *o = *o + r);
            } else {
                o.copy_from_slice(&row);
            }
        }
        return;
    }
    if a.cs == 1 && b.rs == 1 && a.rs >= 0 && b.cs >= 0 {
        // rows of A against columns of B, both contiguous
        let (ars, bcs) = (a.rs as usize, b.cs as usize);
        for i in 0..m {
            let ar = &a.data[i * ars..i * ars + k];
            for j in 0..n {
                let bc = &b.data[j * bcs..j * bcs + k];
                let acc = ar.iter().zip(bc).fold(F::zero(), |s, (&x, &y)| s + x * y);
                let o = &mut out[i * n + j];
                *o = if accumulate { *o + acc } else { acc };
            }
        }
        return;
    }
    for i in 0..m {
        for j in 0..n {
            let mut acc = F::zero();
            for p in 0..k {
                let av = a.data[(i as isize * a.rs + p as isize * a.cs) as usize];
                let bv = b.data[(p as isize * b.rs + j as isize * b.cs) as usize];
                acc = acc + av * bv;
            }
            let o = &mut out[i * n + j];
            *o = if accumulate { *o + acc } else { acc };
        }
    }
}

/// Blocked kernel for products large enough to amortize packing, the
/// triple loop otherwise.
pub fn gemm_auto<F: Scalar>(a: MatRef<'_, F>, b: MatRef<'_, F>, out: &mut [F], accumulate: bool) {
    if a.rows * a.cols * b.cols >= 4096 {
        gemm(a, b, out, accumulate)
    } else {
        small_gemm(a, b, out, accumulate)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(x: &[F], cols: usize, out: &mut [F]) {
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let max = xr.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total = total + *o;
        }
        let inv = F::one() / total;
        or.iter_mut().for_each(|o| *o = *o * inv);
    }
}

pub fn softmax_rows_backward<F: Scalar>(y: &[F], dy: &[F], cols: usize, dx: &mut [F]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(cols)
        .zip(dy.chunks_exact(cols))
        .zip(dx.chunks_exact_mut(cols))
    {
        let dot: F = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = *d + yv * (g - dot);
        }
    }
}

/// Forward layer norm. Writes normalized-and-affine output plus the
/// normalized values and reciprocal std per row for the backward pass.
pub fn layer_norm<F: Scalar>(
    x: &[F],
    gamma: &[F],
    beta: &[F],
    eps: F,
    out: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    let d = gamma.len();
    let inv_d = F::one() / F::of(d as f64);
    for (r, ((xr, or), hr)) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().copied().sum::<F>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            hr[i] = h;
            or[i] = h * gamma[i] + beta[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    gamma: &[F],
    xhat: &[F],
    rstd: &[F],
    dx: Option<&mut [F]>,
    dgamma: Option<&mut [F]>,
    dbeta: Option<&mut [F]>,
) {
    let d = gamma.len();
    if let Some(dg) = dgamma {
        for (dyr, hr) in dy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for i in 0..d {
                dg[i] = dg[i] + dyr[i] * hr[i];
            }
        }
    }
    if let Some(db) = dbeta {
        for dyr in dy.chunks_exact(d) {
            for i in 0..d {
                db[i] = db[i] + dyr[i];
            }
        }
    }
    if let Some(dx) = dx {
        let inv_d = F::one() / F::of(d as f64);
        let mut dh = vec![F::zero(); d];
        for (r, ((dyr, hr), dxr)) in dy
            .chunks_exact(d)
            .zip(xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .enumerate()
        {
            let mut mean_dh = F::zero();
            let mut mean_dh_h = F::zero();
            for i in 0..d {
                dh[i] = dyr[i] * gamma[i];
                mean_dh = mean_dh + dh[i];
                mean_dh_h = mean_dh_h + dh[i] * hr[i];
            }
            mean_dh = mean_dh * inv_d;
            mean_dh_h = mean_dh_h * inv_d;
            for i in 0..d {
                dxr[i] = dxr[i] + rstd[r] * (dh[i] - mean_dh - hr[i] * mean_dh_h);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`, noticeably cheaper than the libm routine.
#[inline]
pub fn fast_tanh<F: Scalar>(u: F) -> F {
    let e = (F::of(2.0) * u.abs()).exp();
    let t = F::one() - F::of(2.0) / (e + F::one());
    if u < F::zero() {
        -t
    } else {
        t
    }
}

/// The tanh term of the GELU approximation at `x`.
#[inline]
pub fn gelu_tanh<F: Scalar>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    fast_tanh(c * (x + a * x * x * x))
}

#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    gelu_from_tanh(x, gelu_tanh(x))
}

#[inline]
pub fn gelu_from_tanh<F: Scalar>(x: F, t: F) -> F {
    F::of(0.5) * x * (F::one() + t)
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    gelu_grad_from_tanh(x, gelu_tanh(x))
}

/// Derivative of GELU given the cached tanh term.
#[inline]
pub fn gelu_grad_from_tanh<F: Scalar>(x: F, t: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

/// Per-axis source taps for half-pixel bilinear resampling.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

/// Channels-last bilinear resize. When `transpose` is set, scatters `src`
/// (output-sized) back onto `dst` (input-sized), which is the adjoint.
#[allow(clippy::too_many_arguments)]
pub fn bilinear<F: Scalar>(
    src: &[F],
    dst: &mut [F],
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    c: usize,
    transpose: bool,
) {
    let ty = bilinear_taps(ih, oh);
    let tx = bilinear_taps(iw, ow);
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let o = (oy * ow + ox) * c;
            for &(y, x, w) in &corners {
                if w == 0.0 {
                    continue;
                }
                let w = F::of(w);
                let i = (y * iw + x) * c;
                if transpose {
                    for ch in 0..c {
                        dst[i + ch] = dst[i + ch] + w * src[o + ch];
                    }
                } else {
                    for ch in 0..c {
                        dst[o + ch] = dst[o + ch] + w * src[i + ch];
                    }
                }
            }
        }
    }
}

/// `[h × w × (k·k·c)] → [h·k × w·k × c]`; `inverse` performs the reverse permutation.
pub fn depth_to_space<F: Scalar>(
    src: &[F],
    dst: &mut [F],
    h: usize,
    w: usize,
    k: usize,
    c: usize,
    inverse: bool,
) {
    let ow = w * k;
    for y in 0..h {
        for x in 0..w {
            for ky in 0..k {
                for kx in 0..k {
                    let packed = ((y * w + x) * k * k + ky * k + kx) * c;
                    let spatial = ((y * k + ky) * ow + x * k + kx) * c;
                    if inverse {
                        dst[packed..packed + c].copy_from_slice(&src[spatial..spatial + c]);
                    } else {
                        dst[spatial..spatial + c].copy_from_slice(&src[packed..packed + c]);
                    }
                }
            }
        }
    }
}
