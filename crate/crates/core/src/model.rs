//! Architecture presets and their parameter collections.
//!
//! Every layer maps onto ops with recordable backward rules, so any preset
//! can sit inside an unrolled inner loop. There is deliberately no max
//! pooling and no normalization layer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Tape, Tensor, Var};

/// Samples per forward chunk when evaluating without a tape.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Layer {
    /// Square convolution with bias.
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Sigmoid,
    /// Non-overlapping average pooling.
    AvgPool { size: usize },
    GlobalAvgPool,
    Flatten,
    /// Fully connected with bias; expects a flattened input.
    Dense { out: usize },
    /// `x + conv(relu(conv(x)))`, both convolutions `kernel x kernel`,
    /// same padding, channel count preserved.
    Residual { kernel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Image([usize; 3]),
    Flat(usize),
}

impl ModelSpec {
    /// `flatten -> dense(hidden) -> relu -> dense(classes)`.
    pub fn mlp(input_shape: [usize; 3], classes: usize, hidden: usize) -> Self {
        ModelSpec {
            name: "mlp-s".into(),
            input_shape,
            classes,
            layers: vec![
                Layer::Flatten,
                Layer::Dense { out: hidden },
                Layer::Relu,
                Layer::Dense { out: classes },
            ],
        }
    }

    /// Three blocks of `conv3x3 -> relu -> avgpool2`, then a dense head.
    pub fn convnet(input_shape: [usize; 3], classes: usize, width: usize) -> Self {
        let mut layers = Vec::new();
        for _ in 0..3 {
            layers.push(Layer::Conv {
                out_channels: width,
                kernel: 3,
                stride: 1,
                pad: 1,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::AvgPool { size: 2 });
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense { out: classes });
        ModelSpec {
            name: "convnet".into(),
            input_shape,
            classes,
            layers,
        }
    }

    /// `conv7x7/2 (64) -> relu -> residual 3x3 -> relu -> global avg pool
    /// -> dense`.
    pub fn tiny_resnet(input_shape: [usize; 3], classes: usize) -> Self {
        ModelSpec {
            name: "tiny-resnet".into(),
            input_shape,
            classes,
            layers: vec![
                Layer::Conv {
                    out_channels: 64,
                    kernel: 7,
                    stride: 2,
                    pad: 3,
                },
                Layer::Relu,
                Layer::Residual { kernel: 3 },
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Flatten,
                Layer::Dense { out: classes },
            ],
        }
    }

    /// Preset by name: `mlp-s` (hidden 128), `convnet` (width 64),
    /// `tiny-resnet`. `width` overrides the hidden size or channel width.
    pub fn preset(name: &str, input_shape: [usize; 3], classes: usize, width: Option<usize>) -> Result<Self> {
        match name {
            "mlp-s" => Ok(Self::mlp(input_shape, classes, width.unwrap_or(128))),
            "convnet" => Ok(Self::convnet(input_shape, classes, width.unwrap_or(64))),
            "tiny-resnet" => {
                if width.is_some() {
                    return Err(Error::Model("tiny-resnet has a fixed width".into()));
                }
                Ok(Self::tiny_resnet(input_shape, classes))
            }
            other => Err(Error::Model(format!(
                "unknown preset {other:?} (expected mlp-s, convnet or tiny-resnet)"
            ))),
        }
    }

    /// Parameter shapes in order, validating that layers compose.
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = Vec::new();
        let mut act = Activation::Image(self.input_shape);
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |what: &str| Error::Model(format!("layer {i} ({layer:?}): {what}"));
            act = match (layer, act) {
                (
                    Layer::Conv {
                        out_channels,
                        kernel,
                        stride,
                        pad,
                    },
                    Activation::Image([c, h, w]),
                ) => {
                    if *stride == 0 || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(bad("kernel does not fit"));
                    }
                    shapes.push(vec![*out_channels, c, *kernel, *kernel]);
                    shapes.push(vec![*out_channels]);
                    Activation::Image([
                        *out_channels,
                        (h + 2 * pad - kernel) / stride + 1,
                        (w + 2 * pad - kernel) / stride + 1,
                    ])
                }
                (Layer::Residual { kernel }, Activation::Image([c, h, w])) => {
                    if kernel % 2 == 0 {
                        return Err(bad("residual kernel must be odd"));
                    }
                    for _ in 0..2 {
                        shapes.push(vec![c, c, *kernel, *kernel]);
                        shapes.push(vec![c]);
                    }
                    Activation::Image([c, h, w])
                }
                (Layer::Relu | Layer::Sigmoid, a) => a,
                (Layer::AvgPool { size }, Activation::Image([c, h, w])) => {
                    if *size == 0 || h < *size || w < *size {
                        return Err(bad("pool window does not fit"));
                    }
                    Activation::Image([c, h / size, w / size])
                }
                (Layer::GlobalAvgPool, Activation::Image([c, _, _])) => Activation::Image([c, 1, 1]),
                (Layer::Flatten, Activation::Image([c, h, w])) => Activation::Flat(c * h * w),
                (Layer::Flatten, a @ Activation::Flat(_)) => a,
                (Layer::Dense { out }, Activation::Flat(n)) => {
                    shapes.push(vec![*out, n]);
                    shapes.push(vec![*out]);
                    Activation::Flat(*out)
                }
                _ => return Err(bad("input has the wrong rank")),
            };
        }
        match act {
            Activation::Flat(n) if n == self.classes => Ok(shapes),
            other => Err(Error::Model(format!(
                "output {other:?} does not match {} classes",
                self.classes
            ))),
        }
    }

    /// Logits `[B, classes]` for `x: [B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::shape(
                "predict",
                format!("input {s:?} does not match [B, {:?}]", self.input_shape),
            ));
        }
        let mut p = params.iter();
        let mut next = |what: &str| {
            p.next()
                .ok_or_else(|| Error::Model(format!("missing parameter for {what}")))
        };
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { stride, pad, .. } => {
                    let (w, b) = (next("conv weight")?, next("conv bias")?);
                    let y = tape.conv2d(&h, w, ConvGeom { stride: *stride, pad: *pad })?;
                    tape.add_bias(&y, b)?
                }
                Layer::Residual { kernel } => {
                    let geom = ConvGeom {
                        stride: 1,
                        pad: kernel / 2,
                    };
                    let (w1, b1) = (next("residual weight")?, next("residual bias")?);
                    let (w2, b2) = (next("residual weight")?, next("residual bias")?);
                    let y = tape.conv2d(&h, w1, geom)?;
                    let y = tape.add_bias(&y, b1)?;
                    let y = tape.relu(&y)?;
                    let y = tape.conv2d(&y, w2, geom)?;
                    let y = tape.add_bias(&y, b2)?;
                    tape.add(&h, &y)?
                }
                Layer::Relu => tape.relu(&h)?,
                Layer::Sigmoid => tape.sigmoid(&h)?,
                Layer::AvgPool { size } => tape.avg_pool(&h, *size, *size)?,
                Layer::GlobalAvgPool => {
                    let (hh, ww) = (h.shape()[2], h.shape()[3]);
                    tape.avg_pool(&h, hh, ww)?
                }
                Layer::Flatten => tape.flatten(&h)?,
                Layer::Dense { .. } => {
                    let (w, b) = (next("dense weight")?, next("dense bias")?);
                    let y = tape.matmul_t(&h, w, false, true)?;
                    tape.add_bias(&y, b)?
                }
            };
        }
        Ok(h)
    }

    /// Deterministic initialization: weights uniform in
    /// `+-sqrt(6 / fan_in)`, biases zero.
    pub fn build(&self, seed: u64) -> Result<ModelParams> {
        let shapes = self.param_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::from_parts(shape, data)
            })
            .collect();
        Ok(ModelParams {
            spec: self.clone(),
            seed,
            tensors,
        })
    }
}

/// Parameters of a built model, in layer order.
#[derive(Clone, Debug)]
pub struct ModelParams {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_tensors(spec: ModelSpec, seed: u64, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != tensors.len()
            || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape())
        {
            return Err(Error::Model("parameter shapes do not match the spec".into()));
        }
        Ok(ModelParams { spec, seed, tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        Self::from_tensors(self.spec.clone(), self.seed, tensors)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn constants(&self) -> Vec<Var> {
        self.tensors.iter().cloned().map(Var::constant).collect()
    }

    /// Logits for a batch. With a tape, parameters are registered as leaves
    /// and the forward pass is recorded on it.
    pub fn predict(&self, x: &Tensor, tape: Option<&mut Tape>) -> Result<Var> {
        match tape {
            Some(tape) => {
                let params = self.leaves(tape);
                self.spec.forward(tape, &params, &Var::constant(x.clone()))
            }
            None => {
                let mut scratch = Tape::new();
                self.spec.forward(&mut scratch, &self.constants(), &Var::constant(x.clone()))
            }
        }
    }

    /// Logits for every sample, evaluated in chunks.
    pub fn logits(&self, inputs: &Tensor) -> Result<Tensor> {
        let n = inputs.shape()[0];
        let mut data = Vec::with_capacity(n * self.spec.classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = inputs.slice_outer(start, (start + EVAL_CHUNK).min(n))?;
            data.extend_from_slice(self.predict(&chunk, None)?.value().data());
        }
        Tensor::new(vec![n, self.spec.classes], data)
    }

    /// Fraction of samples whose arg-max logit (lowest index on ties)
    /// equals the label.
    pub fn accuracy(&self, dataset: &RawDataset) -> Result<f64> {
        let logits = self.logits(dataset.inputs())?;
        Ok(accuracy_from_logits(&logits, dataset.labels()))
    }

    /// Mean soft cross-entropy of `target` under this model.
    pub fn loss(&self, x: &Tensor, target: &Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let logits = self.spec.forward(&mut tape, &self.constants(), &Var::constant(x.clone()))?;
        tape.soft_cross_entropy(&logits, &Var::constant(target.clone()))?
            .value()
            .item()
    }

    /// One plain gradient step on `soft_cross_entropy(f(x), target)`;
    /// returns the updated parameters and the loss before the step.
    pub fn sgd_update(&self, x: &Tensor, target: &Tensor, lr: f64) -> Result<(ModelParams, f64)> {
        let mut tape = Tape::new();
        let params = self.leaves(&mut tape);
        let logits = self.spec.forward(&mut tape, &params, &Var::constant(x.clone()))?;
        let loss = tape.soft_cross_entropy(&logits, &Var::constant(target.clone()))?;
        let grads = tape.grad(&loss, &params, false)?;
        let tensors = self
            .tensors
            .iter()
            .zip(&grads)
            .map(|(p, g)| p.zip_map(g.value(), |a, b| a - lr * b))
            .collect();
        Ok((
            ModelParams {
                spec: self.spec.clone(),
                seed: self.seed,
                tensors,
            },
            loss.value().item()?,
        ))
    }

    /// Bitwise equality of all parameters.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// Writes spec, seed and parameters as JSON; values round-trip exactly.
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            spec: self.spec.clone(),
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorFile {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_slice(&bytes)?;
        let tensors = file
            .tensors
            .into_iter()
            .map(|t| Tensor::new(t.shape, t.data))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_tensors(file.spec, file.seed, tensors)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorFile {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    spec: ModelSpec,
    seed: u64,
    tensors: Vec<TensorFile>,
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks_exact(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}
