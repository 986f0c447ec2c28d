//! Fixed bilinear upsampling with half-pixel centres (align-corners off).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// For each output index along one axis: the two source taps and weights.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w_hi: f64,
}

fn axis_taps(input: usize, ratio: usize) -> Vec<Tap> {
    (0..input * ratio)
        .map(|o| {
            let src = ((o as f64 + 0.5) / ratio as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let w_hi = if hi == lo { 0.0 } else { src - lo as f64 };
            Tap { lo, hi, w_hi }
        })
        .collect()
}

fn check(x: Shape, ratio: usize) -> Result<()> {
    if ratio == 0 {
        return Err(Error::invalid("upsample ratio must be >= 1"));
    }
    if x.h == 0 || x.w == 0 {
        return Err(Error::invalid(format!("cannot upsample empty plane {x}")));
    }
    Ok(())
}

pub fn bilinear_forward<T: Scalar>(x: &Tensor<T>, ratio: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    check(s, ratio)?;
    let rows = axis_taps(s.h, ratio);
    let cols = axis_taps(s.w, ratio);
    let out_shape = Shape::new(s.n, s.c, s.h * ratio, s.w * ratio);
    let mut out = Tensor::zeros(out_shape);
    let ow = out_shape.w;
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let start = out.offset(n, c, 0, 0);
            let dst = &mut out.data_mut()[start..start + out_shape.plane()];
            for (i, r) in rows.iter().enumerate() {
                let wr_hi = T::from_f64_lossy(r.w_hi);
                let wr_lo = T::one() - wr_hi;
                for (j, q) in cols.iter().enumerate() {
                    let wc_hi = T::from_f64_lossy(q.w_hi);
                    let wc_lo = T::one() - wc_hi;
                    let top = src[r.lo * s.w + q.lo] * wc_lo + src[r.lo * s.w + q.hi] * wc_hi;
                    let bottom = src[r.hi * s.w + q.lo] * wc_lo + src[r.hi * s.w + q.hi] * wc_hi;
                    dst[i * ow + j] = top * wr_lo + bottom * wr_hi;
                }
            }
        }
    }
    Ok(out)
}

/// Transpose of [`bilinear_forward`].
pub fn bilinear_backward<T: Scalar>(
    input_shape: Shape,
    ratio: usize,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    check(input_shape, ratio)?;
    let rows = axis_taps(input_shape.h, ratio);
    let cols = axis_taps(input_shape.w, ratio);
    let s = input_shape;
    let mut dx = Tensor::zeros(s);
    let ow = s.w * ratio;
    for n in 0..s.n {
        for c in 0..s.c {
            let g = dy.plane(n, c);
            let start = dx.offset(n, c, 0, 0);
            let dst = &mut dx.data_mut()[start..start + s.plane()];
            for (i, r) in rows.iter().enumerate() {
                let wr_hi = T::from_f64_lossy(r.w_hi);
                let wr_lo = T::one() - wr_hi;
                for (j, q) in cols.iter().enumerate() {
                    let wc_hi = T::from_f64_lossy(q.w_hi);
                    let wc_lo = T::one() - wc_hi;
                    let v = g[i * ow + j];
                    dst[r.lo * s.w + q.lo] = dst[r.lo * s.w + q.lo] + v * wr_lo * wc_lo;
                    dst[r.lo * s.w + q.hi] = dst[r.lo * s.w + q.hi] + v * wr_lo * wc_hi;
                    dst[r.hi * s.w + q.lo] = dst[r.hi * s.w + q.lo] + v * wr_hi * wc_lo;
                    dst[r.hi * s.w + q.hi] = dst[r.hi * s.w + q.hi] + v * wr_hi * wc_hi;
                }
            }
        }
    }
    Ok(dx)
}
