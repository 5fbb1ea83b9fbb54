//! Raw loops behind the differentiable primitives.

use crate::scalar::Scalar;

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, S> Mat<'a, S> {
    pub fn new(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The stored `rows x cols` matrix read as its `cols x rows` transpose.
    pub fn t(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c`, `c` row-major `m x n`.
pub(crate) fn gemm<S: Scalar>(a: Mat<'_, S>, b: Mat<'_, S>, c: &mut [S], beta: S) {
    let (m, k) = a.logical();
    let (kb, n) = b.logical();
    assert_eq!(k, kb, "gemm inner extents");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: extents checked above; strides describe dense row-major storage.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution over a single image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox * stride + k - pad` lies in
/// `0..width`, as a half-open range.
#[inline]
fn valid_cols(g: &ConvGeom, k: usize) -> (usize, usize) {
    let (s, p, w) = (g.stride, g.padding, g.width);
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if w + p > k { ((w + p - k - 1) / s + 1).min(g.out_w) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds `channels x height x width` into a `(c*kh*kw) x (oh*ow)` matrix.
/// `scratch` receives the zero-padded planes when padding is non-zero.
pub(crate) fn im2col<S: Scalar>(img: &[S], g: &ConvGeom, scratch: &mut Vec<S>, col: &mut [S]) {
    let (ph, pw) = (g.height + 2 * g.padding, g.width + 2 * g.padding);
    let padded: &[S] = if g.padding == 0 {
        img
    } else {
        scratch.clear();
        scratch.resize(g.channels * ph * pw, S::zero());
        for c in 0..g.channels {
            for y in 0..g.height {
                let at = (c * ph + y + g.padding) * pw + g.padding;
                scratch[at..at + g.width].copy_from_slice(&img[(c * g.height + y) * g.width..][..g.width]);
            }
        }
        scratch
    };
    let ncols = g.col_cols();
    let ow = g.out_w;
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let src = &padded[(c * ph + oy * g.stride + ky) * pw + kx..];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        d.copy_from_slice(&src[..ow]);
                    } else {
                        for (i, v) in d.iter_mut().enumerate() {
                            *v = src[i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the image.
pub(crate) fn col2im<S: Scalar>(col: &[S], g: &ConvGeom, img: &mut [S]) {
    let ncols = g.col_cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.padding;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let from = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    for (d, v) in dst[start..].iter_mut().step_by(g.stride).zip(from) {
                        *d += *v;
                    }
                }
            }
        }
    }
}

/// Logistic function. `exp(-x)` overflowing to infinity yields exactly 0.
#[inline]
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Row-wise softmax with max shift.
pub(crate) fn softmax_rows<S: Scalar>(logits: &[S], cols: usize, out: &mut [S]) {
    for (row, dst) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut total = S::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
}

/// `log(sum(exp(row)))` computed with the max shift.
pub(crate) fn log_sum_exp<S: Scalar>(row: &[S]) -> S {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let total: S = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}
