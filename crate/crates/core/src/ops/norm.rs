//! Per-channel batch normalisation.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub eps: f64,
    /// Weight of the new batch statistic in the running average.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormSaved<T: Scalar> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics (train mode only): mean and unbiased variance.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    pub train: bool,
}

fn check<T: Scalar>(x: Shape, scale: &Tensor<T>, shift: &Tensor<T>, eps: f64) -> Result<()> {
    if scale.numel() != x.c {
        return Err(Error::invalid(format!(
            "batch-norm scale length {} != channels {}",
            scale.numel(),
            x.c
        )));
    }
    if shift.numel() != x.c {
        return Err(Error::invalid(format!(
            "batch-norm shift length {} != channels {}",
            shift.numel(),
            x.c
        )));
    }
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::invalid(format!(
            "batch-norm eps must be > 0, got {eps}"
        )));
    }
    Ok(())
}

/// Train mode: normalise with the batch statistics of each channel.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let s = x.shape();
    check(s, scale, shift, eps)?;
    let count = s.n * s.plane();
    let inv_count = 1.0 / count as f64;
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    let mut inv_std = vec![T::zero(); s.c];
    for c in 0..s.c {
        // accumulate in f64 for stable statistics
        let mut sum = 0.0;
        for n in 0..s.n {
            sum += x.plane(n, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = sum * inv_count;
        let mut sq = 0.0;
        for n in 0..s.n {
            sq += x
                .plane(n, c)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        let biased = sq * inv_count;
        mean[c] = T::from_f64_lossy(mu);
        var[c] = T::from_f64_lossy(if count > 1 {
            sq / (count - 1) as f64
        } else {
            biased
        });
        inv_std[c] = T::from_f64_lossy(1.0 / (biased + eps).sqrt());
    }
    let mut y = Tensor::zeros(s);
    let mut xhat = vec![T::zero(); s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = x.offset(n, c, 0, 0);
            let (g, b) = (scale.data()[c], shift.data()[c]);
            for i in start..start + plane {
                let xh = (x.data()[i] - mean[c]) * inv_std[c];
                xhat[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
            train: true,
        },
    ))
}

/// Eval mode: normalise with fixed running statistics.
pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BatchNormSaved<T>)> {
    let s = x.shape();
    check(s, scale, shift, eps)?;
    if running_mean.numel() != s.c || running_var.numel() != s.c {
        return Err(Error::invalid(format!(
            "running statistics length does not match channels {}",
            s.c
        )));
    }
    let inv_std: Vec<T> = running_var
        .data()
        .iter()
        .map(|v| T::from_f64_lossy(1.0 / (v.as_f64() + eps).sqrt()))
        .collect();
    let mut y = Tensor::zeros(s);
    let mut xhat = vec![T::zero(); s.numel()];
    let plane = s.plane();
    for n in 0..s.n {
        for c in 0..s.c {
            let start = x.offset(n, c, 0, 0);
            let (g, b, m) = (scale.data()[c], shift.data()[c], running_mean.data()[c]);
            for i in start..start + plane {
                let xh = (x.data()[i] - m) * inv_std[c];
                xhat[i] = xh;
                y.data_mut()[i] = g * xh + b;
            }
        }
    }
    Ok((
        y,
        BatchNormSaved {
            xhat,
            inv_std,
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
            train: false,
        },
    ))
}

pub struct BatchNormGrads<T: Scalar> {
    pub dx: Tensor<T>,
    pub dscale: Tensor<T>,
    pub dshift: Tensor<T>,
}

pub fn batchnorm_backward<T: Scalar>(
    saved: &BatchNormSaved<T>,
    scale: &Tensor<T>,
    dy: &Tensor<T>,
) -> BatchNormGrads<T> {
    let s = dy.shape();
    let plane = s.plane();
    let mut dscale = vec![0.0f64; s.c];
    let mut dshift = vec![0.0f64; s.c];
    for n in 0..s.n {
        for c in 0..s.c {
            let start = dy.offset(n, c, 0, 0);
            for i in start..start + plane {
                let g = dy.data()[i].as_f64();
                dshift[c] += g;
                dscale[c] += g * saved.xhat[i].as_f64();
            }
        }
    }
    let mut dx = Tensor::zeros(s);
    let count = (s.n * plane) as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            let start = dy.offset(n, c, 0, 0);
            let k = scale.data()[c] * saved.inv_std[c];
            if saved.train {
                let mean_g = T::from_f64_lossy(dshift[c] / count);
                let mean_gx = T::from_f64_lossy(dscale[c] / count);
                for i in start..start + plane {
                    dx.data_mut()[i] = k * (dy.data()[i] - mean_g - saved.xhat[i] * mean_gx);
                }
            } else {
                for i in start..start + plane {
                    dx.data_mut()[i] = k * dy.data()[i];
                }
            }
        }
    }
    BatchNormGrads {
        dx,
        dscale: Tensor::vector(dscale.into_iter().map(T::from_f64_lossy).collect()),
        dshift: Tensor::vector(dshift.into_iter().map(T::from_f64_lossy).collect()),
    }
}

/// Exponential moving average update of running statistics.
pub fn update_running_stats<T: Scalar>(running: &mut Tensor<T>, batch: &[T], momentum: f64) {
    let m = T::from_f64_lossy(momentum);
    for (r, &b) in running.data_mut().iter_mut().zip(batch) {
        *r = (T::one() - m) * *r + m * b;
    }
}
