use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel class indices for a batch, row-major `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Labels {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::invalid(format!(
                "label map length {} does not match {n}x{h}x{w}",
                data.len()
            )));
        }
        Ok(Labels { n, h, w, data })
    }
}

/// Softmax over the channel axis, per pixel.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let plane = s.plane();
    let mut probs = Tensor::zeros(s);
    for n in 0..s.n {
        for p in 0..plane {
            let base = n * s.c * plane + p;
            let mut max = logits.data()[base];
            for k in 1..s.c {
                max = max.max(logits.data()[base + k * plane]);
            }
            let mut z = T::zero();
            for k in 0..s.c {
                let e = (logits.data()[base + k * plane] - max).exp();
                probs.data_mut()[base + k * plane] = e;
                z = z + e;
            }
            for k in 0..s.c {
                let i = base + k * plane;
                probs.data_mut()[i] = probs.data()[i] / z;
            }
        }
    }
    probs
}

/// Mean over pixels of `-log softmax(logits)[label]`. Returns the loss and
/// the softmax probabilities.
pub fn softmax_cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Labels,
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.c < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 classes, got {}",
            s.c
        )));
    }
    if labels.n != s.n || labels.h != s.h || labels.w != s.w {
        return Err(Error::invalid(format!(
            "labels {}x{}x{} do not match logits {s}",
            labels.n, labels.h, labels.w
        )));
    }
    let plane = s.plane();
    for (i, &l) in labels.data.iter().enumerate() {
        if l as usize >= s.c {
            let (n, rem) = (i / plane, i % plane);
            return Err(Error::invalid(format!(
                "label {l} out of range [0, {}) at pixel (n={n}, y={}, x={})",
                s.c,
                rem / s.w,
                rem % s.w
            )));
        }
    }
    let probs = softmax_channels(logits);
    let mut total = 0.0f64;
    for n in 0..s.n {
        for p in 0..plane {
            let base = n * s.c * plane + p;
            let k = labels.data[n * plane + p] as usize;
            // log-sum-exp form keeps the loss exact when the probability underflows
            let mut max = logits.data()[base].as_f64();
            for j in 1..s.c {
                max = max.max(logits.data()[base + j * plane].as_f64());
            }
            let lse = (0..s.c)
                .map(|j| (logits.data()[base + j * plane].as_f64() - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            total += lse - logits.data()[base + k * plane].as_f64();
        }
    }
    let loss = total / (s.n * plane) as f64;
    Ok((T::from_f64_lossy(loss), probs))
}

/// `(softmax - onehot) / (N*H*W)`, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &Labels,
    upstream: T,
) -> Tensor<T> {
    let s = probs.shape();
    let plane = s.plane();
    let scale = upstream / T::from_usize(s.n * plane).expect("pixel count fits");
    let mut d = probs.clone();
    for n in 0..s.n {
        for p in 0..plane {
            let k = labels.data[n * plane + p] as usize;
            let i = (n * s.c + k) * plane + p;
            d.data_mut()[i] = d.data()[i] - T::one();
        }
    }
    d.data_mut().iter_mut().for_each(|v| *v = *v * scale);
    d
}
