use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Non-overlapping `ratio x ratio` max pooling. Returns the pooled tensor and,
/// per output element, the flat input offset of the window maximum (first in
/// row-major order on ties).
pub fn maxpool2d_forward<T: Scalar>(x: &Tensor<T>, ratio: usize) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if ratio == 0 {
        return Err(Error::invalid("pool ratio must be positive"));
    }
    if s.h % ratio != 0 {
        return Err(Error::invalid(format!(
            "height {} not divisible by pool ratio {ratio}",
            s.h
        )));
    }
    if s.w % ratio != 0 {
        return Err(Error::invalid(format!(
            "width {} not divisible by pool ratio {ratio}",
            s.w
        )));
    }
    if s.numel() > u32::MAX as usize {
        return Err(Error::invalid("tensor too large for pooling indices"));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / ratio, s.w / ratio);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let data = x.data();
    let mut o = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = x.offset(n, c, 0, 0);
            for oh in 0..out_shape.h {
                for ow in 0..out_shape.w {
                    let mut best = base + oh * ratio * s.w + ow * ratio;
                    for i in 0..ratio {
                        let row = base + (oh * ratio + i) * s.w + ow * ratio;
                        for idx in row..row + ratio {
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.data_mut()[o] = data[best];
                    argmax.push(best as u32);
                    o += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: Shape,
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        d[idx as usize] = d[idx as usize] + g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_picks_max() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (y, idx) = maxpool2d_forward(&x, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
    }

    #[test]
    fn output_sizes_for_paper_ratios() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 108, 108));
        assert_eq!(
            maxpool2d_forward(&x, 2).unwrap().0.shape(),
            Shape::new(1, 1, 54, 54)
        );
        assert_eq!(
            maxpool2d_forward(&x, 36).unwrap().0.shape(),
            Shape::new(1, 1, 3, 3)
        );
    }

    #[test]
    fn non_divisible_is_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 1, 10, 12));
        let err = maxpool2d_forward(&x, 4).unwrap_err();
        assert!(err.to_string().contains("height 10"));
    }

    #[test]
    fn ties_route_to_first_maximum() {
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 5.0f64);
        let (_, idx) = maxpool2d_forward(&x, 2).unwrap();
        assert_eq!(idx, vec![0]);
        let dx = maxpool2d_backward(x.shape(), &idx, &Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}
