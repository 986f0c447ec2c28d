use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
    y
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

/// Stacks tensors along the channel axis in argument order.
pub fn concat_forward<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::invalid("concat needs at least one input"))?
        .shape();
    for (i, x) in xs.iter().enumerate() {
        let s = x.shape();
        if s.n != first.n || s.h != first.h || s.w != first.w {
            return Err(Error::invalid(format!(
                "concat input {i} has shape {s}, expected batch {} and spatial {}x{}",
                first.n, first.h, first.w
            )));
        }
    }
    let channels: usize = xs.iter().map(|x| x.shape().c).sum();
    let out_shape = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..first.n {
        for x in xs {
            data.extend_from_slice(x.sample(n));
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Splits an upstream gradient back into per-input channel blocks.
pub fn concat_backward<T: Scalar>(channels: &[usize], dy: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut start = 0;
    channels
        .iter()
        .map(|&c| {
            let part = dy
                .channel_slice(start, c)
                .expect("concat gradient matches recorded channel split");
            start += c;
            part
        })
        .collect()
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)`. Returns the
/// output and the multiplicative mask.
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    p: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout probability must be in [0, 1), got {p}"
        )));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = if p == 0.0 {
        vec![T::one(); x.numel()]
    } else {
        (0..x.numel())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    };
    let mut y = x.clone();
    y.data_mut()
        .iter_mut()
        .zip(&mask)
        .for_each(|(v, &m)| *v = *v * m);
    Ok((y, mask))
}

pub fn mask_backward<T: Scalar>(mask: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    dx.data_mut()
        .iter_mut()
        .zip(mask)
        .for_each(|(g, &m)| *g = *g * m);
    dx
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor::vector(vec![-1.0f32, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_adds_channels() {
        let a = Tensor::<f32>::zeros(Shape::new(2, 3, 4, 4));
        let b = Tensor::<f32>::zeros(Shape::new(2, 5, 4, 4));
        assert_eq!(
            concat_forward(&[&a, &b]).unwrap().shape(),
            Shape::new(2, 8, 4, 4)
        );
        let c = Tensor::<f32>::zeros(Shape::new(2, 5, 4, 3));
        assert!(concat_forward(&[&a, &c]).is_err());
    }

    #[test]
    fn dropout_zero_is_identity() {
        let x = Tensor::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| (c + h + w) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, _) = dropout_forward(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn dropout_keeps_expectation() {
        let x = Tensor::full(Shape::new(1, 1, 200, 200), 1.0f64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (y, mask) = dropout_forward(&x, 0.5, &mut rng).unwrap();
        let zeros = mask.iter().filter(|&&m| m == 0.0).count() as f64 / mask.len() as f64;
        assert!((zeros - 0.5).abs() < 0.01);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(dropout_forward(&x, 1.0, &mut rng).is_err());
    }
}
