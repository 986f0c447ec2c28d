//! Central-difference gradient checking at 64-bit precision.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::collections::HashMap;

use crate::arch::{build_model, Model, ModelConfig};
use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchNormConfig, Conv2dParams, DeconvParams, Labels};
use crate::params::Binding;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Minimum number of coordinates probed (all of them if fewer exist).
    pub samples: usize,
    pub seed: u64,
    /// Detect probes that cross a ReLU / max-pool branch point. Such a probe
    /// is retried at `eps / 10` (not below 1e-6); if it still crosses, the
    /// coordinate is counted in [`GradCheckReport::kinks`] and replaced.
    pub kink_guard: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            samples: 128,
            seed: 0,
            kink_guard: true,
        }
    }
}

const MIN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
    /// Coordinates checked with a reduced step to stay off a branch point.
    pub refined: usize,
    /// Coordinates excluded because every step crossed a branch point.
    pub kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences on a random, per-input stratified subsample of coordinates.
pub fn grad_check<F>(
    mut f: F,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(MIN_EPS..=1e-4).contains(&cfg.eps) {
        return Err(Error::invalid(format!(
            "eps must lie in [1e-6, 1e-4], got {}",
            cfg.eps
        )));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("grad_check needs at least one input"));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.shape(out).numel() != 1 {
        return Err(Error::invalid(format!(
            "checked function must be scalar, got shape {}",
            tape.shape(out)
        )));
    }
    let base_signature = tape.branch_signature();
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
        refined: 0,
        kinks: 0,
    };
    let mut eval = |inputs: &[Tensor<f64>], which: usize, coord: usize| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let non_finite = |msg: String| {
            Error::NonFinite(format!(
                "perturbing input {which} at coordinate {coord}: {msg}"
            ))
        };
        let out = f(&mut tape, &vars).map_err(|e| match e {
            Error::NonFinite(msg) => non_finite(msg),
            other => other,
        })?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(non_finite(format!("function value {v}")));
        }
        Ok((v, tape.branch_signature()))
    };

    let mut perturbed = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        if n == 0 {
            continue;
        }
        let quota = if total <= cfg.samples {
            n
        } else {
            (cfg.samples * n).div_ceil(total).clamp(1, n)
        };
        // visit coordinates in random order until `quota` of them are usable
        let order = index::sample(&mut rng, n, n).into_vec();
        let mut done = 0;
        for coord in order {
            if done == quota {
                break;
            }
            let x0 = input.data()[coord];
            let mut eps = cfg.eps;
            let numeric = loop {
                perturbed[i].data_mut()[coord] = x0 + eps;
                let (plus, sig_plus) = eval(&perturbed, i, coord)?;
                perturbed[i].data_mut()[coord] = x0 - eps;
                let (minus, sig_minus) = eval(&perturbed, i, coord)?;
                perturbed[i].data_mut()[coord] = x0;
                let smooth = sig_plus == base_signature && sig_minus == base_signature;
                if !cfg.kink_guard || smooth {
                    break Some((plus - minus) / (2.0 * eps));
                }
                if eps / 10.0 < MIN_EPS * (1.0 - 1e-9) {
                    break None;
                }
                eps /= 10.0;
            };
            let Some(numeric) = numeric else {
                report.kinks += 1;
                continue;
            };
            if eps < cfg.eps {
                report.refined += 1;
            }
            let err = relative_error(analytic[i].data()[coord], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, coord);
                report.worst_values = (analytic[i].data()[coord], numeric);
            }
            report.checked += 1;
            done += 1;
        }
    }
    Ok(report)
}

/// Uniform random tensor on `[-1, 1)`.
pub fn random_tensor<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Random weighted-sum reduction so every output coordinate has a distinct
/// upstream gradient.
fn reduce(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random_tensor(tape.shape(y), &mut rng);
    tape.weighted_sum(y, w)
}

fn dims<R: Rng + ?Sized>(rng: &mut R, max: usize) -> usize {
    rng.gen_range(1..=max)
}

/// Runs every differentiable op on random shapes no larger than
/// `(2, 4, 12, 12)` and returns `(op name, report)` pairs.
pub fn op_suite(cfg: GradCheckConfig) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::new();
    let seed = cfg.seed;
    let mut run = |name: &str,
                   inputs: Vec<Tensor<f64>>,
                   f: &mut dyn FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let report = grad_check(|t, v| f(t, v), &inputs, cfg)?;
        out.push((name.to_string(), report));
        Ok(())
    };

    {
        let n = dims(&mut rng, 2);
        let cin = 2 * dims(&mut rng, 2);
        let cout = 2 * dims(&mut rng, 2);
        let hw = rng.gen_range(5..=12);
        let p = Conv2dParams {
            stride: 1,
            pad: 1,
            groups: 1,
        };
        let x = random_tensor(Shape::new(n, cin, hw, hw), &mut rng);
        let w = random_tensor(Shape::new(cout, cin, 3, 3), &mut rng);
        let b = random_tensor(Shape::new(cout, 1, 1, 1), &mut rng);
        run("conv2d", vec![x, w, b], &mut |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), p)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let p = Conv2dParams {
            stride: 2,
            pad: 1,
            groups: 2,
        };
        let x = random_tensor(Shape::new(2, 4, 9, 9), &mut rng);
        let w = random_tensor(Shape::new(4, 2, 3, 3), &mut rng);
        run("conv2d_grouped_strided", vec![x, w], &mut |t, v| {
            let y = t.conv2d(v[0], v[1], None, p)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let ratio = 3;
        let p = DeconvParams::for_ratio(ratio, 1)?;
        let x = random_tensor(Shape::new(2, 2, 4, 4), &mut rng);
        let w = random_tensor(Shape::new(2, 3, p.kernel, p.kernel), &mut rng);
        let b = random_tensor(Shape::new(3, 1, 1, 1), &mut rng);
        run("deconv2d", vec![x, w, b], &mut |t, v| {
            let y = t.deconv2d_ratio(v[0], v[1], Some(v[2]), ratio, p)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let ratio = 2;
        let p = DeconvParams::for_ratio(ratio, 4)?;
        let x = random_tensor(Shape::new(1, 4, 6, 6), &mut rng);
        let w = random_tensor(Shape::new(4, 1, p.kernel, p.kernel), &mut rng);
        run("deconv2d_grouped", vec![x, w], &mut |t, v| {
            let y = t.deconv2d_ratio(v[0], v[1], None, ratio, p)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let x = random_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        run("bilinear_upsample", vec![x], &mut |t, v| {
            let y = t.bilinear_upsample(v[0], 3)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let x = random_tensor(Shape::new(2, 4, 12, 12), &mut rng);
        run("maxpool2d", vec![x], &mut |t, v| {
            let y = t.maxpool2d(v[0], 3)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let c = 3;
        let x = random_tensor(Shape::new(2, c, 5, 5), &mut rng);
        let scale = random_tensor(Shape::new(c, 1, 1, 1), &mut rng);
        let shift = random_tensor(Shape::new(c, 1, 1, 1), &mut rng);
        run("batchnorm2d", vec![x, scale, shift], &mut |t, v| {
            let (y, _, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let x = random_tensor(Shape::new(2, 4, 6, 6), &mut rng);
        run("relu", vec![x], &mut |t, v| {
            let y = t.relu(v[0])?;
            reduce(t, y, seed)
        })?;
    }
    {
        let a = random_tensor(Shape::new(2, 1, 5, 5), &mut rng);
        let b = random_tensor(Shape::new(2, 3, 5, 5), &mut rng);
        run("concat", vec![a, b], &mut |t, v| {
            let y = t.concat(&[v[0], v[1]])?;
            reduce(t, y, seed)
        })?;
    }
    {
        let x = random_tensor(Shape::new(2, 4, 6, 6), &mut rng);
        run("dropout", vec![x], &mut |t, v| {
            // same mask on every evaluation
            let mut mask_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
            let y = t.dropout(v[0], 0.5, Mode::Train, &mut mask_rng)?;
            reduce(t, y, seed)
        })?;
    }
    {
        let (n, k, h, w) = (2, 3, 4, 5);
        let logits = random_tensor(Shape::new(n, k, h, w), &mut rng);
        let labels = Labels::new(
            n,
            h,
            w,
            (0..n * h * w).map(|_| rng.gen_range(0..k as u8)).collect(),
        )?;
        run("softmax_cross_entropy", vec![logits], &mut |t, v| {
            t.softmax_cross_entropy(v[0], &labels)
        })?;
    }
    {
        let x = random_tensor(Shape::new(2, 2, 3, 3), &mut rng);
        run("sum", vec![x], &mut |t, v| t.sum(v[0]))?;
    }
    Ok(out)
}

/// Checks the gradient of the cross-entropy loss of a full model (train
/// mode, fixed dropout mask) with respect to its input and every trainable
/// parameter.
pub fn model_check(model_cfg: &ModelConfig, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let model: Model<f64> = build_model(model_cfg, cfg.seed)?;
    let names = model.params.trainable_names();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1ab);
    let size = model_cfg.input_size;
    let image = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, _, _| {
        rng.gen_range(0.0..1.0)
    });
    let labels = Labels::new(
        1,
        size,
        size,
        (0..size * size)
            .map(|_| rng.gen_range(0..model_cfg.classes as u8))
            .collect(),
    )?;
    let mut inputs = vec![image];
    for name in &names {
        inputs.push(model.params.tensor(name)?.clone());
    }
    grad_check(
        |tape, vars| {
            let map: HashMap<String, Var> = names
                .iter()
                .cloned()
                .zip(vars[1..].iter().copied())
                .collect();
            let bind = Binding::from_vars(&model.params, map);
            let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd0);
            let acts = model.graph.forward(
                tape,
                &bind,
                vars[0],
                Mode::Train,
                BatchNormConfig::default(),
                &mut mask_rng,
            )?;
            tape.softmax_cross_entropy(acts.logits(), &labels)
        },
        &inputs,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(Shape::new(1, 2, 4, 4), &mut rng);
        // full-size self-correlation: conv2d(x, x) = sum of squares, with the
        // gradient arriving through both operands
        let r = grad_check(
            |t, v| t.conv2d(v[0], v[0], None, Conv2dParams::default()),
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 32);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu's kink: differences straddling 0 disagree with either one-sided slope
        let x = Tensor::vector(vec![0.0, 1.0]);
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let y = t.relu(v[0])?;
            t.sum(y)
        };
        let unguarded = GradCheckConfig {
            kink_guard: false,
            ..Default::default()
        };
        let r = grad_check(f, &[x.clone()], unguarded).unwrap();
        assert!(r.max_rel_error > 0.4);
        assert_eq!(r.worst, (0, 0));

        // the guard recognises the straddled kink and leaves it out
        let r = grad_check(f, &[x], GradCheckConfig::default()).unwrap();
        assert_eq!((r.kinks, r.checked), (1, 1));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn eps_outside_range_rejected() {
        let cfg = GradCheckConfig {
            eps: 1e-3,
            ..Default::default()
        };
        assert!(grad_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], cfg).is_err());
    }

    #[test]
    fn non_finite_names_coordinate() {
        let x = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let err = grad_check(
            |t, v| {
                if t.value(v[0]).data()[1] != 1.0 {
                    return Err(Error::NonFinite("blew up".into()));
                }
                t.sum(v[0])
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("input 0 at coordinate 1"), "{msg}");
    }

    #[test]
    fn samples_at_least_the_requested_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(Shape::new(1, 1, 20, 20), &mut rng);
        let b = random_tensor(Shape::new(1, 1, 3, 1), &mut rng);
        let r = grad_check(
            |t, v| {
                let s = t.sum(v[0])?;
                let _ = t.sum(v[1])?;
                Ok(s)
            },
            &[a, b],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.checked >= 128, "{}", r.checked);
    }

    #[test]
    fn every_op_passes() {
        for seed in 0..3 {
            let cfg = GradCheckConfig {
                seed,
                ..Default::default()
            };
            for (name, r) in op_suite(cfg).unwrap() {
                assert!(r.max_rel_error < 1e-4, "{name} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn toy_model_gradients_match() {
        let r = model_check(&ModelConfig::toy(), GradCheckConfig::default()).unwrap();
        assert!(r.checked >= 128);
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
