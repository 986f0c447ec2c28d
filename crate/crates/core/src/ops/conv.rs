//! Grouped 2-D convolution (cross-correlation) and its transpose.

use rayon::prelude::*;

use crate::error::{Error, Result};
use std::ops::Range;

use crate::tensor::{
    col2im_rows, gemm, gemm_ld, im2col_rows, ConvGeometry, Scalar, Shape, Tensor, Trans,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

/// Transposed-convolution geometry. Output side is
/// `(in - 1) * stride - 2 * pad + kernel + output_pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeconvParams {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    pub groups: usize,
}

impl DeconvParams {
    /// Default geometry for exact integer upscaling by `ratio`: kernel `2r`,
    /// pad `r/2` for even ratios; kernel `2r+1`, pad `ceil(r/2)` for odd ones.
    pub fn for_ratio(ratio: usize, groups: usize) -> Result<Self> {
        if ratio < 2 {
            return Err(Error::invalid(format!(
                "deconvolution ratio must be >= 2, got {ratio}"
            )));
        }
        let (kernel, pad) = if ratio % 2 == 0 {
            (2 * ratio, ratio / 2)
        } else {
            (2 * ratio + 1, ratio.div_ceil(2))
        };
        let params = DeconvParams {
            kernel,
            stride: ratio,
            pad,
            output_pad: 0,
            groups,
        };
        // (in-1)r - 2p + k + op == r*in  <=>  k + op == r + 2p
        debug_assert_eq!(params.kernel + params.output_pad, ratio + 2 * params.pad);
        Ok(params)
    }

    pub fn output_side(&self, input: usize) -> Option<usize> {
        let grown = (input.checked_sub(1)?) * self.stride + self.kernel + self.output_pad;
        grown.checked_sub(2 * self.pad).filter(|&v| v > 0)
    }

    /// Checks that this geometry maps `input` to exactly `ratio * input`.
    pub fn check_ratio(&self, input: usize, ratio: usize) -> Result<()> {
        if self.output_pad >= self.stride.max(1) && self.output_pad > 0 {
            return Err(Error::invalid(format!(
                "output_pad {} must be smaller than stride {}",
                self.output_pad, self.stride
            )));
        }
        match self.output_side(input) {
            Some(out) if out == ratio * input => Ok(()),
            other => Err(Error::invalid(format!(
                "deconvolution (kernel {}, stride {}, pad {}, output_pad {}) maps {input} to {:?}, \
                 not {} = {ratio} x {input}",
                self.kernel,
                self.stride,
                self.pad,
                self.output_pad,
                other,
                ratio * input
            ))),
        }
    }
}

fn check_groups(cin: usize, cout: usize, groups: usize) -> Result<()> {
    if groups == 0 {
        return Err(Error::invalid("groups must be positive"));
    }
    if cin % groups != 0 {
        return Err(Error::invalid(format!(
            "input channels {cin} not divisible by groups {groups}"
        )));
    }
    if cout % groups != 0 {
        return Err(Error::invalid(format!(
            "output channels {cout} not divisible by groups {groups}"
        )));
    }
    Ok(())
}

fn check_bias<T: Scalar>(b: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = b {
        if b.numel() != cout {
            return Err(Error::invalid(format!(
                "bias length {} does not match output channels {cout}",
                b.numel()
            )));
        }
    }
    Ok(())
}

/// Output shape of a convolution, validating every dimension.
pub fn conv2d_output_shape(x: Shape, w: Shape, p: Conv2dParams) -> Result<Shape> {
    if w.h != w.w {
        return Err(Error::invalid(format!(
            "kernel must be square, got {}x{}",
            w.h, w.w
        )));
    }
    if p.stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    check_groups(x.c, w.n, p.groups)?;
    if w.c * p.groups != x.c {
        return Err(Error::invalid(format!(
            "weight input channels {} x groups {} != input channels {}",
            w.c, p.groups, x.c
        )));
    }
    let k = w.h;
    if x.h + 2 * p.pad < k {
        return Err(Error::invalid(format!(
            "height {} + 2*pad {} smaller than kernel {k}",
            x.h, p.pad
        )));
    }
    if x.w + 2 * p.pad < k {
        return Err(Error::invalid(format!(
            "width {} + 2*pad {} smaller than kernel {k}",
            x.w, p.pad
        )));
    }
    let oh = (x.h + 2 * p.pad - k) / p.stride + 1;
    let ow = (x.w + 2 * p.pad - k) / p.stride + 1;
    Ok(Shape::new(x.n, w.n, oh, ow))
}

fn conv_geometry(x: Shape, out: Shape, k: usize, p: Conv2dParams) -> ConvGeometry {
    ConvGeometry {
        in_h: x.h,
        in_w: x.w,
        out_h: out.h,
        out_w: out.w,
        kernel: k,
        stride: p.stride,
        pad: p.pad,
    }
}

/// A 1x1, stride-1, unpadded window makes `im2col` the identity.
fn is_pointwise(g: &ConvGeometry) -> bool {
    g.kernel == 1 && g.stride == 1 && g.pad == 0
}

/// Budget (elements) for one unfolded column block; keeps it cache-resident.
const COL_BLOCK: usize = 1 << 18;

/// Splits `0..rows` into blocks whose unfolded size stays near [`COL_BLOCK`].
fn row_blocks(rows: usize, row_len: usize, col_rows: usize) -> impl Iterator<Item = Range<usize>> {
    let per = (COL_BLOCK / (col_rows * row_len).max(1)).clamp(1, rows.max(1));
    (0..rows).step_by(per).map(move |r| r..(r + per).min(rows))
}

fn add_bias<T: Scalar>(y: &mut [T], b: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = b {
        for (c, chunk) in y.chunks_mut(plane).enumerate() {
            let bias = b.data()[c];
            chunk.iter_mut().for_each(|v| *v = *v + bias);
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    p: Conv2dParams,
) -> Result<Tensor<T>> {
    let out_shape = conv2d_output_shape(x.shape(), w.shape(), p)?;
    check_bias(b, out_shape.c)?;
    let xs = x.shape();
    let geo = conv_geometry(xs, out_shape, w.shape().h, p);
    let cin_g = xs.c / p.groups;
    let cout_g = out_shape.c / p.groups;
    let kg = geo.col_rows(cin_g);
    let cols = geo.col_cols();
    let in_plane = xs.plane();
    let pointwise = is_pointwise(&geo);
    let wd = w.data();
    let mut out = Tensor::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.c * cols)
        .enumerate()
        .for_each(|(n, y)| {
            let xn = x.sample(n);
            let mut col = Vec::new();
            for g in 0..p.groups {
                let xg = &xn[g * cin_g * in_plane..(g + 1) * cin_g * in_plane];
                let wg = &wd[g * cout_g * kg..(g + 1) * cout_g * kg];
                let yg = &mut y[g * cout_g * cols..(g + 1) * cout_g * cols];
                if pointwise {
                    gemm(
                        cout_g,
                        kg,
                        cols,
                        T::one(),
                        wg,
                        Trans::N,
                        xg,
                        Trans::N,
                        T::zero(),
                        yg,
                    );
                    continue;
                }
                for rows in row_blocks(geo.out_h, geo.out_w, kg) {
                    let bc = rows.len() * geo.out_w;
                    col.resize(kg * bc, T::zero());
                    im2col_rows(xg, cin_g, &geo, rows.clone(), &mut col);
                    let c0 = rows.start * geo.out_w;
                    gemm_ld(
                        cout_g,
                        kg,
                        bc,
                        T::one(),
                        wg,
                        kg,
                        Trans::N,
                        &col,
                        bc,
                        Trans::N,
                        T::zero(),
                        &mut yg[c0..],
                        cols,
                    );
                }
            }
            add_bias(y, b, cols);
        });
    Ok(out)
}

pub struct ConvGrads<T: Scalar> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    p: Conv2dParams,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let out_shape = conv2d_output_shape(x.shape(), w.shape(), p)?;
    if dy.shape() != out_shape {
        return Err(Error::invalid(format!(
            "upstream gradient shape {} does not match conv output {}",
            dy.shape(),
            out_shape
        )));
    }
    let xs = x.shape();
    let geo = conv_geometry(xs, out_shape, w.shape().h, p);
    let cin_g = xs.c / p.groups;
    let cout_g = out_shape.c / p.groups;
    let kg = geo.col_rows(cin_g);
    let cols = geo.col_cols();
    let in_plane = xs.plane();
    let pointwise = is_pointwise(&geo);
    let wd = w.data();

    let mut dx = Tensor::zeros(xs);
    dx.data_mut()
        .par_chunks_mut(xs.c * in_plane)
        .enumerate()
        .for_each(|(n, dxn)| {
            let dyn_ = dy.sample(n);
            let mut dcol = Vec::new();
            for g in 0..p.groups {
                let wg = &wd[g * cout_g * kg..(g + 1) * cout_g * kg];
                let dyg = &dyn_[g * cout_g * cols..(g + 1) * cout_g * cols];
                let dxg = &mut dxn[g * cin_g * in_plane..(g + 1) * cin_g * in_plane];
                if pointwise {
                    gemm(
                        kg,
                        cout_g,
                        cols,
                        T::one(),
                        wg,
                        Trans::T,
                        dyg,
                        Trans::N,
                        T::zero(),
                        dxg,
                    );
                    continue;
                }
                for rows in row_blocks(geo.out_h, geo.out_w, kg) {
                    let bc = rows.len() * geo.out_w;
                    dcol.resize(kg * bc, T::zero());
                    let c0 = rows.start * geo.out_w;
                    gemm_ld(
                        kg,
                        cout_g,
                        bc,
                        T::one(),
                        wg,
                        kg,
                        Trans::T,
                        &dyg[c0..],
                        cols,
                        Trans::N,
                        T::zero(),
                        &mut dcol,
                        bc,
                    );
                    col2im_rows(&dcol, cin_g, &geo, rows, dxg);
                }
            }
        });

    // weight gradient accumulates over samples in fixed order
    let mut dw = Tensor::zeros(w.shape());
    let mut col = Vec::new();
    for n in 0..xs.n {
        let xn = x.sample(n);
        let dyn_ = dy.sample(n);
        for g in 0..p.groups {
            let xg = &xn[g * cin_g * in_plane..(g + 1) * cin_g * in_plane];
            let dyg = &dyn_[g * cout_g * cols..(g + 1) * cout_g * cols];
            let dwg = &mut dw.data_mut()[g * cout_g * kg..(g + 1) * cout_g * kg];
            if pointwise {
                gemm(
                    cout_g,
                    cols,
                    kg,
                    T::one(),
                    dyg,
                    Trans::N,
                    xg,
                    Trans::T,
                    T::one(),
                    dwg,
                );
                continue;
            }
            for rows in row_blocks(geo.out_h, geo.out_w, kg) {
                let bc = rows.len() * geo.out_w;
                col.resize(kg * bc, T::zero());
                im2col_rows(xg, cin_g, &geo, rows.clone(), &mut col);
                let c0 = rows.start * geo.out_w;
                gemm_ld(
                    cout_g,
                    bc,
                    kg,
                    T::one(),
                    &dyg[c0..],
                    cols,
                    Trans::N,
                    &col,
                    bc,
                    Trans::T,
                    T::one(),
                    dwg,
                    kg,
                );
            }
        }
    }

    let db = has_bias.then(|| channel_sums(dy));
    Ok(ConvGrads { dx, dw, db })
}

/// Per-channel sum over batch and space, as a vector.
pub(crate) fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut sums = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, acc) in sums.iter_mut().enumerate() {
            *acc = t.plane(n, c).iter().fold(*acc, |a, &v| a + v);
        }
    }
    Tensor::vector(sums)
}

/// Output shape of a transposed convolution. Weights are laid out
/// `(Cin, Cout / groups, k, k)`.
pub fn deconv2d_output_shape(x: Shape, w: Shape, p: DeconvParams) -> Result<Shape> {
    if w.h != p.kernel || w.w != p.kernel {
        return Err(Error::invalid(format!(
            "weight kernel {}x{} does not match geometry kernel {}",
            w.h, w.w, p.kernel
        )));
    }
    if p.stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    if w.n != x.c {
        return Err(Error::invalid(format!(
            "weight input channels {} != input channels {}",
            w.n, x.c
        )));
    }
    let cout = w.c * p.groups;
    check_groups(x.c, cout, p.groups)?;
    let oh = p.output_side(x.h).ok_or_else(|| {
        Error::invalid(format!(
            "deconvolution height collapses for input height {}",
            x.h
        ))
    })?;
    let ow = p.output_side(x.w).ok_or_else(|| {
        Error::invalid(format!(
            "deconvolution width collapses for input width {}",
            x.w
        ))
    })?;
    Ok(Shape::new(x.n, cout, oh, ow))
}

fn deconv_geometry(x: Shape, out: Shape, p: DeconvParams) -> ConvGeometry {
    // Windowing runs over the (larger) deconv output; positions are input pixels.
    ConvGeometry {
        in_h: out.h,
        in_w: out.w,
        out_h: x.h,
        out_w: x.w,
        kernel: p.kernel,
        stride: p.stride,
        pad: p.pad,
    }
}

pub fn deconv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    p: DeconvParams,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let out_shape = deconv2d_output_shape(xs, w.shape(), p)?;
    check_bias(b, out_shape.c)?;
    let geo = deconv_geometry(xs, out_shape, p);
    let cin_g = xs.c / p.groups;
    let cout_g = out_shape.c / p.groups;
    let kg = geo.col_rows(cout_g);
    let in_plane = xs.plane();
    let out_plane = out_shape.plane();
    let wd = w.data();
    let mut out = Tensor::zeros(out_shape);
    out.data_mut()
        .par_chunks_mut(out_shape.c * out_plane)
        .enumerate()
        .for_each(|(n, y)| {
            let xn = x.sample(n);
            let mut col = Vec::new();
            for g in 0..p.groups {
                let wg = &wd[g * cin_g * kg..(g + 1) * cin_g * kg];
                let xg = &xn[g * cin_g * in_plane..(g + 1) * cin_g * in_plane];
                let yg = &mut y[g * cout_g * out_plane..(g + 1) * cout_g * out_plane];
                for rows in row_blocks(xs.h, xs.w, kg) {
                    let bc = rows.len() * xs.w;
                    col.resize(kg * bc, T::zero());
                    let c0 = rows.start * xs.w;
                    gemm_ld(
                        kg,
                        cin_g,
                        bc,
                        T::one(),
                        wg,
                        kg,
                        Trans::T,
                        &xg[c0..],
                        in_plane,
                        Trans::N,
                        T::zero(),
                        &mut col,
                        bc,
                    );
                    col2im_rows(&col, cout_g, &geo, rows, yg);
                }
            }
            add_bias(y, b, out_plane);
        });
    Ok(out)
}

pub fn deconv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    p: DeconvParams,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let xs = x.shape();
    let out_shape = deconv2d_output_shape(xs, w.shape(), p)?;
    if dy.shape() != out_shape {
        return Err(Error::invalid(format!(
            "upstream gradient shape {} does not match deconv output {}",
            dy.shape(),
            out_shape
        )));
    }
    let geo = deconv_geometry(xs, out_shape, p);
    let cin_g = xs.c / p.groups;
    let cout_g = out_shape.c / p.groups;
    let kg = geo.col_rows(cout_g);
    let in_plane = xs.plane();
    let wd = w.data();

    // the unfolded upstream gradient is shared by dx and dw
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(w.shape());
    let mut col = Vec::new();
    for n in 0..xs.n {
        let xn = x.sample(n);
        let dxn_start = n * xs.c * in_plane;
        for rows in row_blocks(xs.h, xs.w, geo.col_rows(out_shape.c)) {
            let bc = rows.len() * xs.w;
            col.resize(geo.col_rows(out_shape.c) * bc, T::zero());
            im2col_rows(dy.sample(n), out_shape.c, &geo, rows.clone(), &mut col);
            let c0 = rows.start * xs.w;
            for g in 0..p.groups {
                let colg = &col[g * kg * bc..(g + 1) * kg * bc];
                let wg = &wd[g * cin_g * kg..(g + 1) * cin_g * kg];
                let dxg = &mut dx.data_mut()
                    [dxn_start + g * cin_g * in_plane..dxn_start + (g + 1) * cin_g * in_plane];
                gemm_ld(
                    cin_g,
                    kg,
                    bc,
                    T::one(),
                    wg,
                    kg,
                    Trans::N,
                    colg,
                    bc,
                    Trans::N,
                    T::zero(),
                    &mut dxg[c0..],
                    in_plane,
                );
                let xg = &xn[g * cin_g * in_plane..(g + 1) * cin_g * in_plane];
                let dwg = &mut dw.data_mut()[g * cin_g * kg..(g + 1) * cin_g * kg];
                gemm_ld(
                    cin_g,
                    bc,
                    kg,
                    T::one(),
                    &xg[c0..],
                    in_plane,
                    Trans::N,
                    colg,
                    bc,
                    Trans::T,
                    T::one(),
                    dwg,
                    kg,
                );
            }
        }
    }
    let db = has_bias.then(|| channel_sums(dy));
    Ok(ConvGrads { dx, dw, db })
}
