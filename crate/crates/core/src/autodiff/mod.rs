//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every op appends one node holding its output value and whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes in exact reverse
//! recording order and accumulates gradients additively into shared inputs.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::conv::{self, Conv2dParams, DeconvParams};
use crate::ops::elementwise;
use crate::ops::loss::{self, Labels};
use crate::ops::norm::{self, BatchNormSaved};
use crate::ops::pool;
use crate::ops::upsample;
use crate::tensor::{Scalar, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: Conv2dParams,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        params: DeconvParams,
    },
    Bilinear {
        x: Var,
        ratio: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        saved: BatchNormSaved<T>,
    },
    Relu {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        labels: Labels,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Tensor<T>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<String>,
}

/// Recorded computation. Exclusively owned by one forward/backward pass.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if let Some(i) = value.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value at flat index {i} (shape {})",
                op_name(&op),
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a constant or input tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named trainable tensor; its gradient is reported by name.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.leaf(value);
        self.nodes[v.0].param = Some(name.into());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: Conv2dParams) -> Result<Var> {
        let y = conv::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            params,
        )?;
        self.push(y, Op::Conv2d { x, w, b, params })
    }

    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        params: DeconvParams,
    ) -> Result<Var> {
        let y = conv::deconv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            params,
        )?;
        self.push(y, Op::Deconv2d { x, w, b, params })
    }

    /// Transposed convolution that must upscale exactly by `ratio`.
    pub fn deconv2d_ratio(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        ratio: usize,
        params: DeconvParams,
    ) -> Result<Var> {
        let s = self.shape(x);
        params.check_ratio(s.h, ratio)?;
        params.check_ratio(s.w, ratio)?;
        self.deconv2d(x, w, b, params)
    }

    pub fn bilinear_upsample(&mut self, x: Var, ratio: usize) -> Result<Var> {
        let y = upsample::bilinear_forward(self.value(x), ratio)?;
        self.push(y, Op::Bilinear { x, ratio })
    }

    pub fn maxpool2d(&mut self, x: Var, ratio: usize) -> Result<Var> {
        let (y, argmax) = pool::maxpool2d_forward(self.value(x), ratio)?;
        self.push(y, Op::MaxPool { x, argmax })
    }

    /// Batch normalisation in train mode. Returns the output and the batch
    /// mean / unbiased variance for updating running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (y, saved) = norm::batchnorm_train_forward(
            self.value(x),
            self.value(scale),
            self.value(shift),
            eps,
        )?;
        let (mean, var) = (saved.batch_mean.clone(), saved.batch_var.clone());
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                scale,
                shift,
                saved,
            },
        )?;
        Ok((v, mean, var))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (y, saved) = norm::batchnorm_eval_forward(
            self.value(x),
            self.value(scale),
            self.value(shift),
            running_mean,
            running_var,
            eps,
        )?;
        self.push(
            y,
            Op::BatchNorm {
                x,
                scale,
                shift,
                saved,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = elementwise::relu_forward(self.value(x));
        self.push(y, Op::Relu { x })
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let y = elementwise::concat_forward(&values)?;
        self.push(y, Op::Concat { xs: xs.to_vec() })
    }

    /// Inverted dropout in train mode; identity (no node) in eval mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let (y, mask) = elementwise::dropout_forward(self.value(x), p, rng)?;
        self.push(y, Op::Dropout { x, mask })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &Labels) -> Result<Var> {
        let (loss, probs) = loss::softmax_cross_entropy_forward(self.value(logits), labels)?;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.clone(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::invalid(format!(
                "weights shape {} does not match input {}",
                weights.shape(),
                xv.shape()
            )));
        }
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights })
    }

    /// Hash of every piecewise branch taken so far: the sign pattern of each
    /// ReLU input and the argmax of each max-pool window. Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Propagates gradients from the scalar `loss` back to every node,
    /// consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {loss_shape}"
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        let mut nodes = self.nodes;
        let shapes: Vec<Shape> = nodes.iter().map(|n| n.value.shape()).collect();

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            let mut contributions: Vec<(Var, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv2d { x, w, b, params } => {
                    let g = conv::conv2d_backward(
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        b.is_some(),
                        *params,
                        &dy,
                    )?;
                    contributions.push((*x, g.dx));
                    contributions.push((*w, g.dw));
                    if let (Some(b), Some(db)) = (b, g.db) {
                        contributions.push((*b, db));
                    }
                }
                Op::Deconv2d { x, w, b, params } => {
                    let g = conv::deconv2d_backward(
                        &nodes[x.0].value,
                        &nodes[w.0].value,
                        b.is_some(),
                        *params,
                        &dy,
                    )?;
                    contributions.push((*x, g.dx));
                    contributions.push((*w, g.dw));
                    if let (Some(b), Some(db)) = (b, g.db) {
                        contributions.push((*b, db));
                    }
                }
                Op::Bilinear { x, ratio } => {
                    let dx = upsample::bilinear_backward(nodes[x.0].value.shape(), *ratio, &dy)?;
                    contributions.push((*x, dx));
                }
                Op::MaxPool { x, argmax } => {
                    contributions.push((
                        *x,
                        pool::maxpool2d_backward(nodes[x.0].value.shape(), argmax, &dy),
                    ));
                }
                Op::BatchNorm {
                    x,
                    scale,
                    shift,
                    saved,
                } => {
                    let g = norm::batchnorm_backward(saved, &nodes[scale.0].value, &dy);
                    contributions.push((*x, g.dx));
                    contributions.push((*scale, g.dscale.reshape(nodes[scale.0].value.shape())?));
                    contributions.push((*shift, g.dshift.reshape(nodes[shift.0].value.shape())?));
                }
                Op::Relu { x } => {
                    contributions.push((*x, elementwise::relu_backward(&nodes[x.0].value, &dy)));
                }
                Op::Concat { xs } => {
                    let channels: Vec<usize> =
                        xs.iter().map(|v| nodes[v.0].value.shape().c).collect();
                    for (v, g) in xs.iter().zip(elementwise::concat_backward(&channels, &dy)) {
                        contributions.push((*v, g));
                    }
                }
                Op::Dropout { x, mask } => {
                    contributions.push((*x, elementwise::mask_backward(mask, &dy)));
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    labels,
                } => {
                    let d = loss::softmax_cross_entropy_backward(probs, labels, dy.data()[0]);
                    contributions.push((*logits, d));
                }
                Op::Sum { x } => {
                    contributions.push((*x, Tensor::full(nodes[x.0].value.shape(), dy.data()[0])));
                }
                Op::WeightedSum { x, weights } => {
                    let mut d = weights.clone();
                    let g = dy.data()[0];
                    d.data_mut().iter_mut().for_each(|v| *v = *v * g);
                    contributions.push((*x, d));
                }
            }
            for (v, g) in contributions {
                debug_assert!(v.0 < idx, "tape inputs precede their consumers");
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            }
            // intermediates are no longer needed once their gradient is propagated
            if !matches!(nodes[idx].op, Op::Leaf) {
                nodes[idx].value = Tensor::zeros(Shape::new(0, 0, 0, 0));
                nodes[idx].op = Op::Leaf;
            }
        }

        let mut by_param = BTreeMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                by_param.insert(name.clone(), Var(i));
            }
        }
        Ok(Gradients {
            grads,
            shapes,
            by_param,
        })
    }
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Deconv2d { .. } => "deconv2d",
        Op::Bilinear { .. } => "bilinear_upsample",
        Op::MaxPool { .. } => "maxpool2d",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::Relu { .. } => "relu",
        Op::Concat { .. } => "concat",
        Op::Dropout { .. } => "dropout",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Sum { .. } => "sum",
        Op::WeightedSum { .. } => "weighted_sum",
    }
}

/// Gradients of a scalar loss with respect to every leaf of a consumed tape.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Shape>,
    by_param: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf; zeros when the leaf does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        self.by_param.get(name).map(|&v| self.get(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.by_param.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(Shape::new(2, 3, 2, 2), |n, c, h, w| {
            (n + c + h + w) as f64
        }));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_of_negatives_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 2, 3, 3), -0.5));
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 2, 2), 1.0));
        let c = tape.concat(&[x, x]).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor::full(Shape::new(1, 1, 1, 2), 3.0));
        let b = tape.param("b", Tensor::full(Shape::new(1, 1, 1, 2), 3.0));
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(!g.reached(b));
        assert_eq!(g.param("b").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.param("a").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        let err = tape.backward(x).err().unwrap();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full(Shape::new(1, 1, 1, 2), f64::INFINITY));
        assert!(matches!(tape.sum(x), Err(Error::NonFinite(_))));
    }
}
