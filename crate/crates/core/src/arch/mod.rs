//! MS-FCN layer graph: encoder with an optional multi-scale pooling module,
//! and a dense-connection or plain gradual-upsampling decoder.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;

pub use config::{ModelConfig, UpsampleMode};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{BatchNormConfig, Conv2dParams, DeconvParams};
use crate::params::{param_rng, xavier_init, Binding, ParamKind, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

/// Grayscale input.
pub const INPUT_CHANNELS: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Conv {
        weight: String,
        bias: Option<String>,
        kernel: usize,
        params: Conv2dParams,
    },
    Deconv {
        weight: String,
        bias: Option<String>,
        ratio: usize,
        params: DeconvParams,
    },
    /// Parameters `{prefix}.scale|shift|running_mean|running_var`.
    BatchNorm {
        prefix: String,
    },
    Relu,
    MaxPool {
        ratio: usize,
    },
    Bilinear {
        ratio: usize,
    },
    Concat,
    Dropout {
        p: f64,
    },
}

impl LayerKind {
    pub fn op_name(&self) -> String {
        match self {
            LayerKind::Input => "input".into(),
            LayerKind::Conv { kernel, params, .. } if params.groups > 1 => {
                format!("conv{kernel}x{kernel}/g{}", params.groups)
            }
            LayerKind::Conv { kernel, .. } => format!("conv{kernel}x{kernel}"),
            LayerKind::Deconv { ratio, params, .. } if params.groups > 1 => {
                format!("deconv x{ratio} k{}/g{}", params.kernel, params.groups)
            }
            LayerKind::Deconv { ratio, params, .. } => {
                format!("deconv x{ratio} k{}", params.kernel)
            }
            LayerKind::BatchNorm { .. } => "batchnorm".into(),
            LayerKind::Relu => "relu".into(),
            LayerKind::MaxPool { ratio } => format!("maxpool {ratio}x{ratio}"),
            LayerKind::Bilinear { ratio } => format!("bilinear x{ratio}"),
            LayerKind::Concat => "concat".into(),
            LayerKind::Dropout { p } => format!("dropout p={p}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub channels: usize,
    pub size: usize,
}

/// Shape and initialisation recipe of one named parameter.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub layer: String,
    pub shape: Shape,
    pub kind: ParamKind,
    /// Xavier fans for weights.
    pub fans: Option<(usize, usize)>,
}

/// Topologically ordered layers; every layer's inputs precede it.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    layers: Vec<Layer>,
    params: Vec<ParamSpec>,
    /// Skip-connection sources keyed by resolution.
    taps: BTreeMap<usize, usize>,
    bottleneck: usize,
}

impl LayerGraph {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::default();
        let input = b.push(
            "input",
            LayerKind::Input,
            vec![],
            INPUT_CHANNELS,
            cfg.input_size,
        );
        let bottleneck = build_encoder(&mut b, cfg, input)?;
        let logits = if cfg.dense_decoder {
            build_dense_decoder(&mut b, cfg, bottleneck)?
        } else {
            build_plain_decoder(&mut b, cfg, bottleneck)?
        };
        let out = &b.layers[logits];
        if out.channels != cfg.classes || out.size != cfg.input_size {
            return Err(Error::config(
                "model",
                format!(
                    "graph emits {}x{}x{} instead of {}x{}x{}",
                    out.channels, out.size, out.size, cfg.classes, cfg.input_size, cfg.input_size
                ),
            ));
        }
        let taps = b.taps;
        Ok(LayerGraph {
            layers: b.layers,
            params: b.params,
            taps,
            bottleneck,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn layer_id(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    pub fn taps(&self) -> &BTreeMap<usize, usize> {
        &self.taps
    }

    pub fn output(&self) -> usize {
        self.layers.len() - 1
    }

    /// Number of 3x3 convolutions in the encoder (stages plus bottleneck).
    pub fn encoder_conv3x3_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with("enc") || l.name.starts_with("bottleneck"))
            .filter(|l| matches!(l.kind, LayerKind::Conv { kernel: 3, .. }))
            .count()
    }

    /// Trainable scalar count per layer, in graph order, layers without
    /// parameters omitted.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for p in self.params.iter().filter(|p| p.kind.trainable()) {
            match out.last_mut() {
                Some((layer, n)) if *layer == p.layer => *n += p.shape.numel(),
                _ => out.push((p.layer.clone(), p.shape.numel())),
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_breakdown().iter().map(|(_, n)| n).sum()
    }

    /// Human-readable layer table for a batch of `n`.
    pub fn describe(&self, n: usize) -> String {
        let breakdown: BTreeMap<String, usize> = self.parameter_breakdown().into_iter().collect();
        let shape = |c: usize, s: usize| format!("{n}x{c}x{s}x{s}");
        let rows: Vec<[String; 5]> = self
            .layers
            .iter()
            .map(|l| {
                let ins = l
                    .inputs
                    .iter()
                    .map(|&i| shape(self.layers[i].channels, self.layers[i].size))
                    .collect::<Vec<_>>()
                    .join(" + ");
                let name = if self.bottleneck == self.layer_id(&l.name).unwrap_or(usize::MAX) {
                    format!("{} (bottleneck)", l.name)
                } else {
                    l.name.clone()
                };
                [
                    name,
                    l.kind.op_name(),
                    if ins.is_empty() { "-".into() } else { ins },
                    shape(l.channels, l.size),
                    breakdown.get(&l.name).copied().unwrap_or(0).to_string(),
                ]
            })
            .collect();
        let header = ["layer", "op", "in", "out", "params"];
        let mut widths = header.map(str::len);
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.len());
            }
        }
        let mut s = String::new();
        let mut line = |cells: [&str; 5]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(header);
        for r in &rows {
            line([&r[0], &r[1], &r[2], &r[3], &r[4]]);
        }
        let _ = writeln!(s, "total trainable parameters: {}", self.parameter_count());
        s
    }

    /// Runs the graph on `input` of shape `(N, 1, size, size)`.
    pub fn forward<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &Binding<T>,
        input: Var,
        mode: Mode,
        bn: BatchNormConfig,
        rng: &mut R,
    ) -> Result<Activations<T>> {
        let s = tape.shape(input);
        let first = &self.layers[0];
        if s.c != first.channels || s.h != first.size || s.w != first.size {
            return Err(Error::invalid(format!(
                "model expects input Nx{}x{}x{}, got {s}",
                first.channels, first.size, first.size
            )));
        }
        let mut vars: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut bn_stats = Vec::new();
        for layer in &self.layers {
            let x = layer.inputs.first().map(|&i| vars[i]);
            let v = match &layer.kind {
                LayerKind::Input => input,
                LayerKind::Conv {
                    weight,
                    bias,
                    params: p,
                    ..
                } => {
                    let b = bias.as_deref().map(|b| params.var(b)).transpose()?;
                    tape.conv2d(x.unwrap(), params.var(weight)?, b, *p)?
                }
                LayerKind::Deconv {
                    weight,
                    bias,
                    ratio,
                    params: p,
                } => {
                    let b = bias.as_deref().map(|b| params.var(b)).transpose()?;
                    tape.deconv2d_ratio(x.unwrap(), params.var(weight)?, b, *ratio, *p)?
                }
                LayerKind::BatchNorm { prefix } => {
                    let scale = params.var(&format!("{prefix}.scale"))?;
                    let shift = params.var(&format!("{prefix}.shift"))?;
                    match mode {
                        Mode::Train => {
                            let (y, mean, var) =
                                tape.batchnorm_train(x.unwrap(), scale, shift, bn.eps)?;
                            bn_stats.push(BnStats {
                                prefix: prefix.clone(),
                                mean,
                                var,
                            });
                            y
                        }
                        Mode::Eval => {
                            let store = params.store();
                            tape.batchnorm_eval(
                                x.unwrap(),
                                scale,
                                shift,
                                store.tensor(&format!("{prefix}.running_mean"))?,
                                store.tensor(&format!("{prefix}.running_var"))?,
                                bn.eps,
                            )?
                        }
                    }
                }
                LayerKind::Relu => tape.relu(x.unwrap())?,
                LayerKind::MaxPool { ratio } => tape.maxpool2d(x.unwrap(), *ratio)?,
                LayerKind::Bilinear { ratio } => tape.bilinear_upsample(x.unwrap(), *ratio)?,
                LayerKind::Concat => {
                    let xs: Vec<Var> = layer.inputs.iter().map(|&i| vars[i]).collect();
                    tape.concat(&xs)?
                }
                LayerKind::Dropout { p } => tape.dropout(x.unwrap(), *p, mode, rng)?,
            };
            vars.push(v);
        }
        Ok(Activations { vars, bn_stats })
    }
}

/// Batch statistics observed by one train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnStats<T: Scalar> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Activations<T: Scalar> {
    /// Tape handle of every layer's output, indexed like [`LayerGraph::layers`].
    pub vars: Vec<Var>,
    pub bn_stats: Vec<BnStats<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn logits(&self) -> Var {
        *self.vars.last().expect("graph has layers")
    }
}

#[derive(Default)]
struct Builder {
    layers: Vec<Layer>,
    params: Vec<ParamSpec>,
    taps: BTreeMap<usize, usize>,
}

impl Builder {
    fn push(
        &mut self,
        name: impl Into<String>,
        kind: LayerKind,
        inputs: Vec<usize>,
        channels: usize,
        size: usize,
    ) -> usize {
        self.layers.push(Layer {
            name: name.into(),
            kind,
            inputs,
            channels,
            size,
        });
        self.layers.len() - 1
    }

    fn dims(&self, id: usize) -> (usize, usize) {
        (self.layers[id].channels, self.layers[id].size)
    }

    fn param(
        &mut self,
        layer: &str,
        suffix: &str,
        shape: Shape,
        kind: ParamKind,
        fans: Option<(usize, usize)>,
    ) -> String {
        let name = format!("{layer}.{suffix}");
        self.params.push(ParamSpec {
            name: name.clone(),
            layer: layer.to_string(),
            shape,
            kind,
            fans,
        });
        name
    }

    fn conv(&mut self, name: &str, x: usize, cout: usize, kernel: usize, bias: bool) -> usize {
        let (cin, size) = self.dims(x);
        let fans = (cin * kernel * kernel, cout * kernel * kernel);
        let weight = self.param(
            name,
            "weight",
            Shape::new(cout, cin, kernel, kernel),
            ParamKind::Weight,
            Some(fans),
        );
        let bias = bias.then(|| {
            self.param(
                name,
                "bias",
                Shape::new(cout, 1, 1, 1),
                ParamKind::Bias,
                None,
            )
        });
        let params = Conv2dParams {
            stride: 1,
            pad: kernel / 2,
            groups: 1,
        };
        self.push(
            name,
            LayerKind::Conv {
                weight,
                bias,
                kernel,
                params,
            },
            vec![x],
            cout,
            size,
        )
    }

    fn deconv(
        &mut self,
        name: &str,
        x: usize,
        cout: usize,
        ratio: usize,
        groups: usize,
        bias: bool,
    ) -> Result<usize> {
        let (cin, size) = self.dims(x);
        let params = DeconvParams::for_ratio(ratio, groups)?;
        let k = params.kernel;
        let fans = (cin / groups * k * k, cout / groups * k * k);
        let weight = self.param(
            name,
            "weight",
            Shape::new(cin, cout / groups, k, k),
            ParamKind::Weight,
            Some(fans),
        );
        let bias = bias.then(|| {
            self.param(
                name,
                "bias",
                Shape::new(cout, 1, 1, 1),
                ParamKind::Bias,
                None,
            )
        });
        Ok(self.push(
            name,
            LayerKind::Deconv {
                weight,
                bias,
                ratio,
                params,
            },
            vec![x],
            cout,
            size * ratio,
        ))
    }

    fn batchnorm(&mut self, name: &str, x: usize) -> usize {
        let (c, size) = self.dims(x);
        let shape = Shape::new(c, 1, 1, 1);
        self.param(name, "scale", shape, ParamKind::BnScale, None);
        self.param(name, "shift", shape, ParamKind::BnShift, None);
        self.param(name, "running_mean", shape, ParamKind::RunningMean, None);
        self.param(name, "running_var", shape, ParamKind::RunningVar, None);
        self.push(
            name,
            LayerKind::BatchNorm {
                prefix: name.to_string(),
            },
            vec![x],
            c,
            size,
        )
    }

    fn relu(&mut self, name: &str, x: usize) -> usize {
        let (c, s) = self.dims(x);
        self.push(name, LayerKind::Relu, vec![x], c, s)
    }

    /// conv (no bias) + batch norm + ReLU.
    fn conv_block(&mut self, name: &str, x: usize, cout: usize, kernel: usize) -> usize {
        let c = self.conv(&format!("{name}.conv"), x, cout, kernel, false);
        let b = self.batchnorm(&format!("{name}.bn"), c);
        self.relu(&format!("{name}.relu"), b)
    }

    /// deconv (no bias) + batch norm + ReLU.
    fn up_block(&mut self, name: &str, x: usize, cout: usize, ratio: usize) -> Result<usize> {
        let d = self.deconv(&format!("{name}.deconv"), x, cout, ratio, 1, false)?;
        let b = self.batchnorm(&format!("{name}.bn"), d);
        Ok(self.relu(&format!("{name}.relu"), b))
    }

    fn maxpool(&mut self, name: &str, x: usize, ratio: usize) -> Result<usize> {
        let (c, s) = self.dims(x);
        if s % ratio != 0 {
            return Err(Error::config(
                "model",
                format!("{name}: size {s} not divisible by pool ratio {ratio}"),
            ));
        }
        Ok(self.push(name, LayerKind::MaxPool { ratio }, vec![x], c, s / ratio))
    }

    fn concat(&mut self, name: &str, xs: Vec<usize>) -> Result<usize> {
        if xs.len() < 2 {
            return Err(Error::config(
                "model",
                format!("{name}: concat needs at least two inputs"),
            ));
        }
        let size = self.layers[xs[0]].size;
        if let Some(&bad) = xs.iter().find(|&&i| self.layers[i].size != size) {
            return Err(Error::config(
                "model",
                format!(
                    "{name}: input `{}` is {} px, expected {size} px",
                    self.layers[bad].name, self.layers[bad].size
                ),
            ));
        }
        let channels = xs.iter().map(|&i| self.layers[i].channels).sum();
        Ok(self.push(name, LayerKind::Concat, xs, channels, size))
    }

    fn tap(&self, size: usize, name: &str) -> Result<usize> {
        self.taps
            .get(&size)
            .copied()
            .ok_or_else(|| Error::config("model", format!("{name}: no skip tap at {size} px")))
    }
}

fn build_encoder(b: &mut Builder, cfg: &ModelConfig, input: usize) -> Result<usize> {
    let mut x = input;
    for (stage, &ratio) in cfg.encoder_pool_ratios.iter().enumerate() {
        let width = cfg.stage_channels(stage);
        for j in 1..=cfg.convs_per_stage {
            x = b.conv_block(&format!("enc{}.{j}", stage + 1), x, width, 3);
        }
        let size = b.layers[x].size;
        b.taps.insert(size, x);
        x = if stage == 0 && cfg.ms_pooling {
            build_ms_pooling_module(b, cfg, x)?
        } else {
            b.maxpool(&format!("enc{}.pool", stage + 1), x, ratio)?
        };
    }
    let width = cfg.stage_channels(cfg.encoder_pool_ratios.len() - 1);
    for j in 1..=cfg.bottleneck_convs {
        x = b.conv_block(&format!("bottleneck.{j}"), x, width, 3);
    }
    let (c, s) = b.dims(x);
    Ok(b.push(
        "bottleneck.dropout",
        LayerKind::Dropout { p: cfg.dropout_p },
        vec![x],
        c,
        s,
    ))
}

/// Parallel subpaths: maxpool(r) -> 1x1 compression -> upsample back to the
/// baseline resolution, then channel concat.
fn build_ms_pooling_module(b: &mut Builder, cfg: &ModelConfig, x: usize) -> Result<usize> {
    let base = cfg.ms_subpath_ratios[0];
    let width = cfg.ms_compression_channels;
    let mut outs = Vec::new();
    for &r in &cfg.ms_subpath_ratios {
        let name = format!("ms.path{r}");
        let p = b.maxpool(&format!("{name}.pool"), x, r)?;
        let mut y = b.conv_block(&name, p, width, 1);
        let up = r / base;
        if up > 1 {
            y = match cfg.ms_upsample_mode {
                UpsampleMode::Bilinear => {
                    let s = b.layers[y].size;
                    b.push(
                        format!("{name}.up"),
                        LayerKind::Bilinear { ratio: up },
                        vec![y],
                        width,
                        s * up,
                    )
                }
                UpsampleMode::Deconv => b.deconv(&format!("{name}.up"), y, width, up, 1, true)?,
                UpsampleMode::GroupDeconv => {
                    b.deconv(&format!("{name}.up"), y, width, up, cfg.ms_group, true)?
                }
            };
        }
        outs.push(y);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    b.concat("ms.concat", outs)
}

fn build_dense_decoder(b: &mut Builder, cfg: &ModelConfig, bottleneck: usize) -> Result<usize> {
    let ratios = &cfg.dense_decoder_ratios;
    let max = *ratios.iter().max().expect("validated");
    let target = b.layers[bottleneck].size * max;
    let mut branches = Vec::new();
    for &d in ratios {
        let mut y = b.up_block(&format!("dec.x{d}"), bottleneck, cfg.decoder_channels, d)?;
        if d < max {
            y = b.up_block(
                &format!("dec.x{d}.x{}", max / d),
                y,
                cfg.decoder_channels,
                max / d,
            )?;
        }
        branches.push(y);
    }
    branches.push(b.tap(target, "dense decoder")?);
    let merged = b.concat(&format!("dec.concat{target}"), branches)?;
    let x = b.conv_block(
        &format!("dec.block{target}"),
        merged,
        cfg.decoder_channels,
        3,
    );
    climb(b, cfg, x)
}

fn build_plain_decoder(b: &mut Builder, cfg: &ModelConfig, bottleneck: usize) -> Result<usize> {
    climb(b, cfg, bottleneck)
}

/// Upsamples through every finer skip tap: deconv -> concat tap -> conv
/// block, finishing with a 1x1 conv to class logits at full resolution.
fn climb(b: &mut Builder, cfg: &ModelConfig, mut x: usize) -> Result<usize> {
    let finer: Vec<usize> = b
        .taps
        .keys()
        .copied()
        .filter(|&s| s > b.layers[x].size)
        .collect();
    for size in finer {
        let cur = b.layers[x].size;
        if size % cur != 0 {
            return Err(Error::config(
                "model",
                format!("tap {size} px is not a multiple of {cur} px"),
            ));
        }
        let finest = size == cfg.input_size;
        let width = if finest {
            cfg.base_channels
        } else {
            cfg.decoder_channels
        };
        let up = b.up_block(&format!("dec.up{size}"), x, width, size / cur)?;
        let tap = b.tap(size, "decoder")?;
        let merged = b.concat(&format!("dec.concat{size}"), vec![up, tap])?;
        x = if finest {
            merged
        } else {
            b.conv_block(&format!("dec.block{size}"), merged, cfg.decoder_channels, 3)
        };
    }
    Ok(b.conv("head", x, cfg.classes, 1, true))
}

/// A layer graph with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub graph: LayerGraph,
    pub params: ParamStore<T>,
}

/// Builds the graph and initialises parameters: Xavier weights from a
/// per-name generator, unit BN scale and running variance, zeros elsewhere.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
    let graph = LayerGraph::build(cfg)?;
    let mut params = ParamStore::new();
    for spec in graph.param_specs() {
        let tensor = match (spec.kind, spec.fans) {
            (ParamKind::Weight, Some((fan_in, fan_out))) => xavier_init(
                spec.shape,
                fan_in,
                fan_out,
                &mut param_rng(seed, &spec.name),
            )?,
            (ParamKind::BnScale | ParamKind::RunningVar, _) => Tensor::full(spec.shape, T::one()),
            _ => Tensor::zeros(spec.shape),
        };
        params.insert(spec.name.clone(), tensor, spec.kind)?;
    }
    Ok(Model {
        config: cfg.clone(),
        graph,
        params,
    })
}

impl<T: Scalar> Model<T> {
    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BnStats<T>], momentum: f64) -> Result<()> {
        for s in stats {
            let mean = self
                .params
                .tensor_mut(&format!("{}.running_mean", s.prefix))?;
            crate::ops::norm::update_running_stats(mean, &s.mean, momentum);
            let var = self
                .params
                .tensor_mut(&format!("{}.running_var", s.prefix))?;
            crate::ops::norm::update_running_stats(var, &s.var, momentum);
        }
        Ok(())
    }

    /// Eval-mode logits for a batch of images.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape);
        let x = tape.leaf(images.clone());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let acts = self.graph.forward(
            &mut tape,
            &bind,
            x,
            Mode::Eval,
            BatchNormConfig::default(),
            &mut rng,
        )?;
        Ok(tape.value(acts.logits()).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::checkpoint;

    fn forward_train(model: &Model<f32>, n: usize, seed: u64) -> (Vec<Shape>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let size = model.config.input_size;
        let x = Tensor::from_fn(Shape::new(n, 1, size, size), |_, _, _, _| {
            rng.gen_range(0.0..1.0)
        });
        let mut tape = Tape::new();
        let bind = model.params.bind(&mut tape);
        let xv = tape.leaf(x);
        let acts = model
            .graph
            .forward(
                &mut tape,
                &bind,
                xv,
                Mode::Train,
                BatchNormConfig::default(),
                &mut rng,
            )
            .unwrap();
        let shapes = acts.vars.iter().map(|&v| tape.shape(v)).collect();
        (shapes, tape.value(acts.logits()).clone())
    }

    #[test]
    fn default_graph_shape_walk() {
        let g = LayerGraph::build(&ModelConfig::default()).unwrap();
        assert_eq!(g.encoder_conv3x3_count(), 15);
        let b = &g.layers()[g.bottleneck()];
        assert_eq!((b.channels, b.size), (256, 9));
        let concat = g.layer_id("ms.concat").unwrap();
        let c = &g.layers()[concat];
        assert_eq!((c.channels, c.size), (128, 54));
        assert_eq!(c.inputs.len(), 4);
        let sizes: Vec<usize> = g
            .layers()
            .iter()
            .filter(|l| l.name.starts_with("dec.x"))
            .map(|l| l.size)
            .collect();
        assert!(sizes.contains(&27) && sizes.contains(&54));
        assert_eq!(
            g.taps().keys().copied().collect::<Vec<_>>(),
            vec![27, 54, 108]
        );
        let out = &g.layers()[g.output()];
        assert_eq!((out.channels, out.size), (3, 108));
    }

    #[test]
    fn ablation_presets_build_with_same_output() {
        let presets = [
            ModelConfig {
                ms_pooling: false,
                ..Default::default()
            },
            ModelConfig {
                ms_upsample_mode: UpsampleMode::Bilinear,
                ..Default::default()
            },
            ModelConfig {
                ms_upsample_mode: UpsampleMode::Deconv,
                ..Default::default()
            },
            ModelConfig::default(),
            ModelConfig {
                dense_decoder: false,
                ..Default::default()
            },
        ];
        for cfg in presets {
            let g = LayerGraph::build(&cfg).unwrap();
            assert_eq!(g.encoder_conv3x3_count(), 15);
            let out = &g.layers()[g.output()];
            assert_eq!((out.channels, out.size), (3, 108));
            assert_eq!(g.layers()[g.bottleneck()].size, 9);
        }
        let plain_pool = LayerGraph::build(&ModelConfig {
            ms_pooling: false,
            ..Default::default()
        })
        .unwrap();
        let pool = plain_pool.layer_id("enc1.pool").unwrap();
        assert_eq!(plain_pool.layers()[pool].channels, 64);
        assert_eq!(plain_pool.layers()[pool].size, 54);
    }

    #[test]
    fn upsample_mode_changes_params_not_shapes() {
        let shapes = |m: UpsampleMode| {
            let g = LayerGraph::build(&ModelConfig {
                ms_upsample_mode: m,
                ..Default::default()
            })
            .unwrap();
            let s: Vec<(usize, usize)> = g.layers().iter().map(|l| (l.channels, l.size)).collect();
            (s, g.parameter_count())
        };
        let (a, pa) = shapes(UpsampleMode::Bilinear);
        let (b, pb) = shapes(UpsampleMode::Deconv);
        let (c, pc) = shapes(UpsampleMode::GroupDeconv);
        assert_eq!(a, b);
        assert_eq!(b, c);
        assert!(pa < pc && pc < pb);
    }

    #[test]
    fn group_deconv_has_one_group_th_of_the_weights() {
        let count = |m: UpsampleMode| -> BTreeMap<String, usize> {
            let g = LayerGraph::build(&ModelConfig {
                ms_upsample_mode: m,
                ..Default::default()
            })
            .unwrap();
            g.param_specs()
                .iter()
                .filter(|p| p.name.starts_with("ms.") && p.name.ends_with(".up.weight"))
                .map(|p| (p.name.clone(), p.shape.numel()))
                .collect()
        };
        let dense = count(UpsampleMode::Deconv);
        let grouped = count(UpsampleMode::GroupDeconv);
        assert_eq!(dense.len(), 3);
        for (name, n) in &dense {
            assert_eq!(grouped[name] * 32, *n, "{name}");
        }
        assert!(count(UpsampleMode::Bilinear).is_empty());
    }

    #[test]
    fn plain_decoder_is_smaller() {
        let dense = LayerGraph::build(&ModelConfig::default()).unwrap();
        let plain = LayerGraph::build(&ModelConfig {
            dense_decoder: false,
            ..Default::default()
        })
        .unwrap();
        assert!(plain.parameter_count() < dense.parameter_count());
        let sizes: Vec<usize> = plain
            .layers()
            .iter()
            .filter(|l| l.name.starts_with("dec.") && matches!(l.kind, LayerKind::Deconv { .. }))
            .map(|l| l.size)
            .collect();
        assert_eq!(sizes, vec![27, 54, 108]);
    }

    #[test]
    fn degenerate_configs_build() {
        let single = ModelConfig {
            ms_subpath_ratios: vec![2],
            ..Default::default()
        };
        let g = LayerGraph::build(&single).unwrap();
        assert!(g.layer_id("ms.concat").is_none());
        assert!(!g
            .layers()
            .iter()
            .any(|l| l.name.starts_with("ms.") && l.name.ends_with(".up")));

        let ladder = ModelConfig {
            input_size: 96,
            encoder_pool_ratios: vec![2, 2, 2],
            ms_subpath_ratios: vec![2, 4, 8],
            dense_decoder_ratios: vec![2],
            ..Default::default()
        };
        let g = LayerGraph::build(&ladder).unwrap();
        let out = &g.layers()[g.output()];
        assert_eq!((out.channels, out.size), (3, 96));
    }

    #[test]
    fn every_concat_has_matching_inputs() {
        let g = LayerGraph::build(&ModelConfig::default()).unwrap();
        for l in g.layers().iter().filter(|l| l.kind == LayerKind::Concat) {
            assert!(l.inputs.len() >= 2);
            assert!(
                l.inputs.iter().all(|&i| g.layers()[i].size == l.size),
                "{}",
                l.name
            );
        }
    }

    #[test]
    fn toy_forward_matches_declared_shapes() {
        let model: Model<f32> = build_model(&ModelConfig::toy(), 1).unwrap();
        let (shapes, logits) = forward_train(&model, 2, 0);
        for (l, s) in model.graph.layers().iter().zip(&shapes) {
            assert_eq!(
                (s.n, s.c, s.h, s.w),
                (2, l.channels, l.size, l.size),
                "{}",
                l.name
            );
        }
        assert!(logits.all_finite());
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let a: Model<f32> = build_model(&ModelConfig::toy(), 7).unwrap();
        let b: Model<f32> = build_model(&ModelConfig::toy(), 7).unwrap();
        let c: Model<f32> = build_model(&ModelConfig::toy(), 8).unwrap();
        assert_eq!(
            checkpoint::encode(&a.params).unwrap(),
            checkpoint::encode(&b.params).unwrap()
        );
        assert_ne!(
            checkpoint::encode(&a.params).unwrap(),
            checkpoint::encode(&c.params).unwrap()
        );
        assert_eq!(a.graph.parameter_count(), c.graph.parameter_count());
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let model: Model<f32> = build_model(&ModelConfig::toy(), 3).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 1, 36, 36), |_, _, h, w| {
            ((h * 7 + w * 3) % 11) as f32 / 11.0
        });
        let a = model.predict(&x).unwrap();
        let b = model.predict(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn describe_marks_bottleneck() {
        let g = LayerGraph::build(&ModelConfig::default()).unwrap();
        let table = g.describe(1);
        let row = table.lines().find(|l| l.contains("(bottleneck)")).unwrap();
        assert!(row.contains("1x256x9x9"), "{row}");
        assert!(table.contains("total trainable parameters"));
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let model: Model<f32> = build_model(&ModelConfig::toy(), 3).unwrap();
        assert!(model
            .predict(&Tensor::zeros(Shape::new(1, 1, 30, 30)))
            .is_err());
    }
}
