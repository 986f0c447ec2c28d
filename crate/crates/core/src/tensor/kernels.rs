use super::Scalar;

/// Sliding-window geometry of a convolution over one spatial plane.
///
/// `in_*` is the side being windowed (the conv input, or the deconv output),
/// `out_*` the number of window positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self, channels: usize) -> usize {
        channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `channels` planes of `src` into `col` with row index
/// `(c * k + ki) * k + kj` and column index `oh * out_w + ow`.
/// Out-of-range taps read as zero.
#[cfg(test)]
pub(crate) fn im2col<T: Scalar>(src: &[T], channels: usize, g: &ConvGeometry, col: &mut [T]) {
    im2col_rows(src, channels, g, 0..g.out_h, col)
}

/// [`im2col`] restricted to window rows `rows`; `col` then has
/// `rows.len() * out_w` columns.
pub(crate) fn im2col_rows<T: Scalar>(
    src: &[T],
    channels: usize,
    g: &ConvGeometry,
    rows: std::ops::Range<usize>,
    col: &mut [T],
) {
    let k = g.kernel;
    let cols = rows.len() * g.out_w;
    debug_assert_eq!(col.len(), g.col_rows(channels) * cols);
    let plane = g.in_h * g.in_w;
    for c in 0..channels {
        let src_plane = &src[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for (r, oh) in rows.clone().enumerate() {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let dst_row = &mut dst[r * g.out_w..(r + 1) * g.out_w];
                    if ih < 0 || ih as usize >= g.in_h {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src_plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    if g.stride == 1 {
                        // contiguous run with zero fringes
                        let shift = kj as isize - g.pad as isize;
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = ow as isize + shift;
                            *d = if iw < 0 || iw as usize >= g.in_w {
                                T::zero()
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    } else {
                        for (ow, d) in dst_row.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            *d = if iw < 0 || iw as usize >= g.in_w {
                                T::zero()
                            } else {
                                src_row[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `dst` (which is not
/// cleared). Taps that fall outside the plane are dropped.
#[cfg(test)]
pub(crate) fn col2im<T: Scalar>(col: &[T], channels: usize, g: &ConvGeometry, dst: &mut [T]) {
    col2im_rows(col, channels, g, 0..g.out_h, dst)
}

pub(crate) fn col2im_rows<T: Scalar>(
    col: &[T],
    channels: usize,
    g: &ConvGeometry,
    rows: std::ops::Range<usize>,
    dst: &mut [T],
) {
    let k = g.kernel;
    let cols = rows.len() * g.out_w;
    debug_assert_eq!(col.len(), g.col_rows(channels) * cols);
    let plane = g.in_h * g.in_w;
    for c in 0..channels {
        let dst_plane = &mut dst[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for (r, oh) in rows.clone().enumerate() {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.in_h {
                        continue;
                    }
                    let dst_row = &mut dst_plane[ih as usize * g.in_w..(ih as usize + 1) * g.in_w];
                    let src_row = &src[r * g.out_w..(r + 1) * g.out_w];
                    for (ow, &v) in src_row.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && (iw as usize) < g.in_w {
                            dst_row[iw as usize] = dst_row[iw as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Layout of one gemm operand: a row-major `rows x cols` block, optionally
/// read transposed.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Op {
    N,
    T,
}

/// `c (m x n) = alpha * op(a) (m x k) * op(b) (k x n) + beta * c`, all
/// operands contiguous row-major in their stored orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    let lda = match op_a {
        Op::N => k,
        Op::T => m,
    };
    let ldb = match op_b {
        Op::N => n,
        Op::T => k,
    };
    gemm_ld(m, k, n, alpha, a, lda, op_a, b, ldb, op_b, beta, c, n);
}

/// [`gemm`] with explicit row strides (`ld*`) of the stored matrices, for
/// operating on column blocks of wider buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ld<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    lda: usize,
    op_a: Op,
    b: &[T],
    ldb: usize,
    op_b: Op,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a_rows, a_cols) = match op_a {
        Op::N => (m, k),
        Op::T => (k, m),
    };
    let (b_rows, b_cols) = match op_b {
        Op::N => (k, n),
        Op::T => (n, k),
    };
    assert!(
        k == 0 || a_cols <= lda && a.len() >= (a_rows - 1) * lda + a_cols,
        "gemm: lhs too short"
    );
    assert!(
        k == 0 || (b_cols <= ldb && b.len() >= (b_rows - 1) * ldb + b_cols),
        "gemm: rhs too short"
    );
    assert!(
        n <= ldc && c.len() >= (m - 1) * ldc + n,
        "gemm: output too short"
    );
    let (rsa, csa) = match op_a {
        Op::N => (lda as isize, 1),
        Op::T => (1, lda as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (ldb as isize, 1),
        Op::T => (1, ldb as isize),
    };
    // SAFETY: bounds asserted above; strides describe dense blocks of the
    // asserted sizes.
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
            ldc as isize,
            1,
        );
    }
}
