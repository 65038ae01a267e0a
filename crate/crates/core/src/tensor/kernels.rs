//! Raw forward/backward kernels over contiguous buffers.
//!
//! Convolutions lower to im2col + GEMM per sample. Every output element is
//! reduced in a fixed order, so results do not depend on batch composition.

use super::Float;

/// Row-major `C = alpha * op(A) op(B) + beta * C` where `op(A)` is `m x k` and
/// `op(B)` is `k x n`. A transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Float>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: extents were checked against the slice lengths above and `c`
    // is a unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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

/// Geometry of one convolution: input `c x h x w`, kernel `kh x kw`,
/// output `oh x ow`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Output extent of a strided, padded window sweep, or `None` if empty.
    pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        (padded >= k && stride > 0).then(|| (padded - k) / stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox * stride + kj - pad` lies in `0..w`.
fn valid_span(g: &ConvGeometry, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if g.w + g.pad > kj {
        ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Float>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let spatial = g.col_cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let out = &mut cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = valid_span(g, kj);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = lo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, &v) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into an image buffer (adjoint of `im2col`).
fn col2im<T: Float>(cols: &[T], g: &ConvGeometry, x: &mut [T]) {
    let spatial = g.col_cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * spatial..(row + 1) * spatial];
                let (lo, hi) = valid_span(g, kj);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, &v) in dst[start..start + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, &v) in dst[start..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], n: usize, spatial: usize) {
    let c = bias.len();
    for s in 0..n {
        for (o, &b) in bias.iter().enumerate() {
            let start = (s * c + o) * spatial;
            out[start..start + spatial].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn channel_bias_grad<T: Float>(gy: &[T], n: usize, c: usize, spatial: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for s in 0..n {
        for (o, g) in gb.iter_mut().enumerate() {
            let start = (s * c + o) * spatial;
            *g += gy[start..start + spatial].iter().copied().sum::<T>();
        }
    }
    gb
}

/// Cross-correlation of `x` (`n` samples laid out per `g`) with `weight`
/// `[out_c, g.c, g.kh, g.kw]`. Returns `[n, out_c, g.oh, g.ow]` data.
pub(crate) fn conv2d_forward<T: Float>(
    x: &[T],
    n: usize,
    g: &ConvGeometry,
    weight: &[T],
    out_c: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_len = g.c * g.h * g.w;
    let (rows, spatial) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); n * out_c * spatial];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * spatial] };
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let col_ref: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let ys = &mut out[s * out_c * spatial..(s + 1) * out_c * spatial];
        gemm(false, false, out_c, spatial, rows, T::one(), weight, col_ref, T::zero(), ys);
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, n, spatial);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Backward of [`conv2d_forward`] given the upstream gradient `gy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Float>(
    x: &[T],
    n: usize,
    g: &ConvGeometry,
    weight: &[T],
    out_c: usize,
    gy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let in_len = g.c * g.h * g.w;
    let (rows, spatial) = (g.col_rows(), g.col_cols());
    let mut gx = need[0].then(|| vec![T::zero(); n * in_len]);
    let mut gw = need[1].then(|| vec![T::zero(); out_c * rows]);
    let unfold = |wanted: bool| if wanted && !g.is_pointwise() { vec![T::zero(); rows * spatial] } else { Vec::new() };
    let mut cols = unfold(need[1]);
    let mut dcols = unfold(need[0]);
    for s in 0..n {
        let gys = &gy[s * out_c * spatial..(s + 1) * out_c * spatial];
        if let Some(gw) = gw.as_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let col_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(false, true, out_c, rows, spatial, T::one(), gys, col_ref, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(true, false, rows, spatial, out_c, T::one(), weight, gys, T::zero(), gxs);
            } else {
                gemm(true, false, rows, spatial, out_c, T::one(), weight, gys, T::zero(), &mut dcols);
                col2im(&dcols, g, gxs);
            }
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: need[2].then(|| channel_bias_grad(gy, n, out_c, spatial)),
    }
}

/// Transposed convolution: the adjoint of `conv2d` with geometry `g`, where
/// `g` describes the *output* image (`g.c = out_c`, `g.h x g.w`) and the input
/// has `in_c` channels over `g.oh x g.ow`. `weight` is `[in_c, g.c, g.kh, g.kw]`.
pub(crate) fn conv_transpose2d_forward<T: Float>(
    x: &[T],
    n: usize,
    in_c: usize,
    g: &ConvGeometry,
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (rows, spatial) = (g.col_rows(), g.col_cols());
    let in_len = in_c * spatial;
    let out_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); n * out_len];
    let mut cols = vec![T::zero(); rows * spatial];
    for s in 0..n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        gemm(true, false, rows, spatial, in_c, T::one(), weight, xs, T::zero(), &mut cols);
        col2im(&cols, g, &mut out[s * out_len..(s + 1) * out_len]);
    }
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, n, g.h * g.w);
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Float>(
    x: &[T],
    n: usize,
    in_c: usize,
    g: &ConvGeometry,
    weight: &[T],
    gy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let (rows, spatial) = (g.col_rows(), g.col_cols());
    let in_len = in_c * spatial;
    let out_len = g.c * g.h * g.w;
    let mut gx = need[0].then(|| vec![T::zero(); n * in_len]);
    let mut gw = need[1].then(|| vec![T::zero(); in_c * rows]);
    let mut gcols = vec![T::zero(); rows * spatial];
    for s in 0..n {
        im2col(&gy[s * out_len..(s + 1) * out_len], g, &mut gcols);
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx[s * in_len..(s + 1) * in_len];
            gemm(false, false, in_c, spatial, rows, T::one(), weight, &gcols, T::zero(), gxs);
        }
        if let Some(gw) = gw.as_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            gemm(false, true, in_c, rows, spatial, T::one(), xs, &gcols, T::one(), gw);
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: need[2].then(|| channel_bias_grad(gy, n, g.c, g.h * g.w)),
    }
}

/// `y[n, o] = sum_f x[n, f] w[o, f] + b[o]`.
pub(crate) fn linear_forward<T: Float>(
    x: &[T],
    n: usize,
    features: usize,
    weight: &[T],
    out: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * out];
    gemm(false, true, n, out, features, T::one(), x, weight, T::zero(), &mut y);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out) {
            row.iter_mut().zip(b).for_each(|(v, &bv)| *v += bv);
        }
    }
    y
}

pub(crate) fn linear_backward<T: Float>(
    x: &[T],
    n: usize,
    features: usize,
    weight: &[T],
    out: usize,
    gy: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let input = need[0].then(|| {
        let mut gx = vec![T::zero(); n * features];
        gemm(false, false, n, features, out, T::one(), gy, weight, T::zero(), &mut gx);
        gx
    });
    let weight = need[1].then(|| {
        let mut gw = vec![T::zero(); out * features];
        gemm(true, false, out, features, n, T::one(), gy, x, T::zero(), &mut gw);
        gw
    });
    let bias = need[2].then(|| {
        let mut gb = vec![T::zero(); out];
        for row in gy.chunks_exact(out) {
            gb.iter_mut().zip(row).for_each(|(g, &v)| *g += v);
        }
        gb
    });
    ConvGrads { input, weight, bias }
}
