use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvDims};
use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Stride and zero padding of a square-window 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        ConvGeom { stride: 1, pad: 0 }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul { trans_a: bool, trans_b: bool },
    Conv2d(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvWeightGrad(ConvGeom),
    Add,
    Sub,
    Mul,
    /// Tensor times a scalar tensor.
    Scale,
    ScaleConst(f64),
    Relu,
    Sigmoid,
    Exp,
    LogSoftmax,
    AvgPool { kh: usize, kw: usize },
    AvgPoolGrad { kh: usize, kw: usize },
    Reshape,
    /// `[n] -> [outer, n, inner]` by repetition.
    Expand { outer: usize, inner: usize },
    /// `[outer, n, inner] -> [n]` by summation.
    ReduceExpand { outer: usize, inner: usize },
    /// `y + expand(bias)` without materializing the expansion.
    AddBias { outer: usize, inner: usize },
    Sum,
    SoftCrossEntropy,
}

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn conv_dims(op: &'static str, x: &[usize], w: &[usize], geom: ConvGeom) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 {
        return Err(Error::shape(
            op,
            format!("expected 4-d input and weight, got {x:?} and {w:?}"),
        ));
    }
    if x[1] != w[1] {
        return Err(Error::shape(
            op,
            format!("input has {} channels, weight expects {}", x[1], w[1]),
        ));
    }
    if geom.stride == 0 {
        return Err(Error::shape(op, "stride must be positive"));
    }
    let (hp, wp) = (x[2] + 2 * geom.pad, x[3] + 2 * geom.pad);
    if hp < w[2] || wp < w[3] {
        return Err(Error::shape(
            op,
            format!("kernel {}x{} larger than padded input {hp}x{wp}", w[2], w[3]),
        ));
    }
    Ok(ConvDims {
        batch: x[0],
        in_ch: x[1],
        height: x[2],
        width: x[3],
        out_ch: w[0],
        kh: w[2],
        kw: w[3],
        stride: geom.stride,
        pad: geom.pad,
        out_h: (hp - w[2]) / geom.stride + 1,
        out_w: (wp - w[3]) / geom.stride + 1,
    })
}

fn expect_scalar(op: &'static str, v: &Var) -> Result<f64> {
    v.value()
        .item()
        .map_err(|_| Error::shape(op, format!("expected a scalar, got {:?}", v.shape())))
}

impl Tape {
    /// `op(a) * op(b)` for 2-d operands, with optional transposition.
    pub fn matmul_t(&mut self, a: &Var, b: &Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("expected 2-d operands, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {k} vs {k2} ({sa:?} x {sb:?})"),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            a.value().data(),
            trans_a,
            b.value().data(),
            trans_b,
            0.0,
            &mut out,
        );
        self.record(
            Op::MatMul { trans_a, trans_b },
            vec![a.clone(), b.clone()],
            Tensor::from_parts(vec![m, n], out),
        )
    }

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Cross-correlation of `x: [B, Ci, H, W]` with `w: [Co, Ci, kh, kw]`.
    pub fn conv2d(&mut self, x: &Var, w: &Var, geom: ConvGeom) -> Result<Var> {
        let d = conv_dims("conv2d", x.shape(), w.shape(), geom)?;
        let y = kernels::conv2d_forward(&d, x.value().data(), w.value().data());
        self.record(
            Op::Conv2d(geom),
            vec![x.clone(), w.clone()],
            Tensor::from_parts(vec![d.batch, d.out_ch, d.out_h, d.out_w], y),
        )
    }

    fn conv2d_input_grad(
        &mut self,
        g: &Var,
        w: &Var,
        geom: ConvGeom,
        input_shape: &[usize],
    ) -> Result<Var> {
        let d = conv_dims("conv2d_input_grad", input_shape, w.shape(), geom)?;
        if g.shape() != [d.batch, d.out_ch, d.out_h, d.out_w] {
            return Err(Error::shape(
                "conv2d_input_grad",
                format!("upstream gradient has shape {:?}", g.shape()),
            ));
        }
        let dx = kernels::conv2d_input_grad(&d, g.value().data(), w.value().data());
        self.record(
            Op::ConvInputGrad(geom),
            vec![g.clone(), w.clone()],
            Tensor::from_parts(input_shape.to_vec(), dx),
        )
    }

    fn conv2d_weight_grad(
        &mut self,
        x: &Var,
        g: &Var,
        geom: ConvGeom,
        weight_shape: &[usize],
    ) -> Result<Var> {
        let d = conv_dims("conv2d_weight_grad", x.shape(), weight_shape, geom)?;
        if g.shape() != [d.batch, d.out_ch, d.out_h, d.out_w] {
            return Err(Error::shape(
                "conv2d_weight_grad",
                format!("upstream gradient has shape {:?}", g.shape()),
            ));
        }
        let dw = kernels::conv2d_weight_grad(&d, x.value().data(), g.value().data());
        self.record(
            Op::ConvWeightGrad(geom),
            vec![x.clone(), g.clone()],
            Tensor::from_parts(weight_shape.to_vec(), dw),
        )
    }

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("add", a, b)?;
        let v = a.value().zip_map(b.value(), |x, y| x + y);
        self.record(Op::Add, vec![a.clone(), b.clone()], v)
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("sub", a, b)?;
        let v = a.value().zip_map(b.value(), |x, y| x - y);
        self.record(Op::Sub, vec![a.clone(), b.clone()], v)
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        same_shape("mul", a, b)?;
        let v = a.value().zip_map(b.value(), |x, y| x * y);
        self.record(Op::Mul, vec![a.clone(), b.clone()], v)
    }

    /// `x * s` for a one-element tensor `s`.
    pub fn scale(&mut self, x: &Var, s: &Var) -> Result<Var> {
        let factor = expect_scalar("scale", s)?;
        let v = x.value().map(|e| e * factor);
        self.record(Op::Scale, vec![x.clone(), s.clone()], v)
    }

    pub fn scale_const(&mut self, x: &Var, c: f64) -> Result<Var> {
        let v = x.value().map(|e| e * c);
        self.record(Op::ScaleConst(c), vec![x.clone()], v)
    }

    pub fn neg(&mut self, x: &Var) -> Result<Var> {
        self.scale_const(x, -1.0)
    }

    pub fn relu(&mut self, x: &Var) -> Result<Var> {
        let v = x.value().map(|e| if e > 0.0 { e } else { 0.0 });
        self.record(Op::Relu, vec![x.clone()], v)
    }

    pub fn sigmoid(&mut self, x: &Var) -> Result<Var> {
        let v = x.value().map(|e| 1.0 / (1.0 + (-e).exp()));
        self.record(Op::Sigmoid, vec![x.clone()], v)
    }

    pub fn exp(&mut self, x: &Var) -> Result<Var> {
        let v = x.value().map(f64::exp);
        self.record(Op::Exp, vec![x.clone()], v)
    }

    /// Log-softmax over the last axis of a 2-d tensor.
    pub fn log_softmax(&mut self, x: &Var) -> Result<Var> {
        if x.shape().len() != 2 {
            return Err(Error::shape(
                "log_softmax",
                format!("expected [rows, classes], got {:?}", x.shape()),
            ));
        }
        let cols = x.shape()[1];
        let v = kernels::log_softmax_rows(x.value().data(), cols);
        self.record(
            Op::LogSoftmax,
            vec![x.clone()],
            Tensor::from_parts(x.shape().to_vec(), v),
        )
    }

    /// Non-overlapping `kh x kw` average pooling of `[B, C, H, W]`.
    pub fn avg_pool(&mut self, x: &Var, kh: usize, kw: usize) -> Result<Var> {
        let s = x.shape();
        if s.len() != 4 || kh == 0 || kw == 0 || s[2] < kh || s[3] < kw {
            return Err(Error::shape(
                "avg_pool",
                format!("window {kh}x{kw} does not fit input {s:?}"),
            ));
        }
        let y = kernels::avg_pool(x.value().data(), s[0] * s[1], s[2], s[3], kh, kw);
        let shape = vec![s[0], s[1], s[2] / kh, s[3] / kw];
        self.record(
            Op::AvgPool { kh, kw },
            vec![x.clone()],
            Tensor::from_parts(shape, y),
        )
    }

    fn avg_pool_grad(&mut self, g: &Var, kh: usize, kw: usize, input_shape: &[usize]) -> Result<Var> {
        let s = input_shape;
        if g.shape() != [s[0], s[1], s[2] / kh, s[3] / kw] {
            return Err(Error::shape(
                "avg_pool_grad",
                format!("gradient {:?} does not match input {s:?}", g.shape()),
            ));
        }
        let dx = kernels::avg_pool_adjoint(g.value().data(), s[0] * s[1], s[2], s[3], kh, kw);
        self.record(
            Op::AvgPoolGrad { kh, kw },
            vec![g.clone()],
            Tensor::from_parts(s.to_vec(), dx),
        )
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let v = x.value().reshape(shape)?;
        self.record(Op::Reshape, vec![x.clone()], v)
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.is_empty() {
            return Err(Error::shape("flatten", "cannot flatten a scalar"));
        }
        let rest = s[1..].iter().product();
        self.reshape(x, &[s[0], rest])
    }

    /// Repeats the flattened `x` (`n` elements) into `[outer, n, inner]`,
    /// viewed as `out_shape`.
    pub fn expand(&mut self, x: &Var, outer: usize, inner: usize, out_shape: &[usize]) -> Result<Var> {
        let n = x.value().numel();
        if out_shape.iter().product::<usize>() != outer * n * inner {
            return Err(Error::shape(
                "expand",
                format!("{n} x {outer} x {inner} elements cannot fill {out_shape:?}"),
            ));
        }
        let src = x.value().data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for _ in 0..outer {
            for &e in src {
                out.extend(std::iter::repeat_n(e, inner));
            }
        }
        self.record(
            Op::Expand { outer, inner },
            vec![x.clone()],
            Tensor::from_parts(out_shape.to_vec(), out),
        )
    }

    /// Sums `[outer, n, inner]` down to `n` elements viewed as `out_shape`.
    pub fn reduce_expand(
        &mut self,
        x: &Var,
        outer: usize,
        inner: usize,
        out_shape: &[usize],
    ) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if outer * n * inner != x.value().numel() {
            return Err(Error::shape(
                "reduce_expand",
                format!("{:?} is not {outer} x {out_shape:?} x {inner}", x.shape()),
            ));
        }
        let src = x.value().data();
        let mut out = vec![0.0; n];
        for o in 0..outer {
            for (i, acc) in out.iter_mut().enumerate() {
                let base = (o * n + i) * inner;
                *acc += src[base..base + inner].iter().sum::<f64>();
            }
        }
        self.record(
            Op::ReduceExpand { outer, inner },
            vec![x.clone()],
            Tensor::from_parts(out_shape.to_vec(), out),
        )
    }

    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let v = Tensor::scalar(x.value().sum());
        self.record(Op::Sum, vec![x.clone()], v)
    }

    pub fn mean(&mut self, x: &Var) -> Result<Var> {
        let n = x.value().numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale_const(&s, 1.0 / n as f64)
    }

    /// Adds a bias vector along axis 1 of `[B, n]` or `[B, n, H, W]`.
    pub fn add_bias(&mut self, y: &Var, bias: &Var) -> Result<Var> {
        let s = y.shape().to_vec();
        if s.len() < 2 || bias.shape() != [s[1]] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} does not match axis 1 of {s:?}", bias.shape()),
            ));
        }
        let inner: usize = s[2..].iter().product();
        let mut v = y.value().data().to_vec();
        let b = bias.value().data();
        for (i, chunk) in v.chunks_mut(inner.max(1)).enumerate() {
            let add = b[i % s[1]];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        self.record(
            Op::AddBias { outer: s[0], inner },
            vec![y.clone(), bias.clone()],
            Tensor::from_parts(s, v),
        )
    }

    /// Mean over rows of `-sum_c target[c] * log_softmax(logits)[c]`. The
    /// target is used as given (no normalization), so the loss is linear in
    /// it and differentiable with respect to both arguments.
    pub fn soft_cross_entropy(&mut self, logits: &Var, target: &Var) -> Result<Var> {
        if logits.shape().len() != 2 {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("expected [rows, classes] logits, got {:?}", logits.shape()),
            ));
        }
        same_shape("soft_cross_entropy", logits, target)?;
        if !logits.value().all_finite() {
            return Err(Error::Numeric {
                op: "soft_cross_entropy",
                detail: "non-finite logits".into(),
            });
        }
        let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
        let ls = kernels::log_softmax_rows(logits.value().data(), cols);
        let total: f64 = ls
            .iter()
            .zip(target.value().data())
            .map(|(l, t)| -t * l)
            .sum();
        self.record(
            Op::SoftCrossEntropy,
            vec![logits.clone(), target.clone()],
            Tensor::scalar(total / rows.max(1) as f64),
        )
    }

    /// Shorthand for a constant of the given value.
    pub fn constant(&self, value: Tensor) -> Var {
        Var::constant(value)
    }
}

impl Op {
    /// Vector-Jacobian products for each input, expressed as tape operations
    /// so they are recorded whenever their operands are tracked.
    pub(crate) fn vjp(
        &self,
        tape: &mut Tape,
        inputs: &[Var],
        output: &Var,
        g: &Var,
        needs: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let mut out: Vec<Option<Var>> = vec![None; inputs.len()];
        match self {
            Op::Leaf => {}
            Op::MatMul { trans_a, trans_b } => {
                let (a, b) = (&inputs[0], &inputs[1]);
                if needs[0] {
                    out[0] = Some(match (trans_a, trans_b) {
                        (false, false) => tape.matmul_t(g, b, false, true)?,
                        (false, true) => tape.matmul_t(g, b, false, false)?,
                        (true, false) => tape.matmul_t(b, g, false, true)?,
                        (true, true) => tape.matmul_t(b, g, true, true)?,
                    });
                }
                if needs[1] {
                    out[1] = Some(match (trans_a, trans_b) {
                        (false, false) => tape.matmul_t(a, g, true, false)?,
                        (false, true) => tape.matmul_t(g, a, true, false)?,
                        (true, false) => tape.matmul_t(a, g, false, false)?,
                        (true, true) => tape.matmul_t(g, a, true, true)?,
                    });
                }
            }
            Op::Conv2d(geom) => {
                let (x, w) = (&inputs[0], &inputs[1]);
                if needs[0] {
                    out[0] = Some(tape.conv2d_input_grad(g, w, *geom, x.shape())?);
                }
                if needs[1] {
                    out[1] = Some(tape.conv2d_weight_grad(x, g, *geom, w.shape())?);
                }
            }
            Op::ConvInputGrad(geom) => {
                let (up, w) = (&inputs[0], &inputs[1]);
                if needs[0] {
                    out[0] = Some(tape.conv2d(g, w, *geom)?);
                }
                if needs[1] {
                    out[1] = Some(tape.conv2d_weight_grad(g, up, *geom, w.shape())?);
                }
            }
            Op::ConvWeightGrad(geom) => {
                let (x, up) = (&inputs[0], &inputs[1]);
                if needs[0] {
                    out[0] = Some(tape.conv2d_input_grad(up, g, *geom, x.shape())?);
                }
                if needs[1] {
                    out[1] = Some(tape.conv2d(x, g, *geom)?);
                }
            }
            Op::Add => {
                if needs[0] {
                    out[0] = Some(g.clone());
                }
                if needs[1] {
                    out[1] = Some(g.clone());
                }
            }
            Op::Sub => {
                if needs[0] {
                    out[0] = Some(g.clone());
                }
                if needs[1] {
                    out[1] = Some(tape.neg(g)?);
                }
            }
            Op::Mul => {
                if needs[0] {
                    out[0] = Some(tape.mul(g, &inputs[1])?);
                }
                if needs[1] {
                    out[1] = Some(tape.mul(g, &inputs[0])?);
                }
            }
            Op::Scale => {
                let (x, s) = (&inputs[0], &inputs[1]);
                if needs[0] {
                    out[0] = Some(tape.scale(g, s)?);
                }
                if needs[1] {
                    let prod = tape.mul(g, x)?;
                    let total = tape.sum(&prod)?;
                    out[1] = Some(tape.reshape(&total, s.shape())?);
                }
            }
            Op::ScaleConst(c) => {
                out[0] = Some(tape.scale_const(g, *c)?);
            }
            Op::Relu => {
                // Second-order term of relu is taken as zero: the mask is a constant.
                let mask = Var::constant(inputs[0].value().map(|e| if e > 0.0 { 1.0 } else { 0.0 }));
                out[0] = Some(tape.mul(g, &mask)?);
            }
            Op::Sigmoid => {
                let ones = Var::constant(Tensor::ones(output.shape()));
                let one_minus = tape.sub(&ones, output)?;
                let slope = tape.mul(output, &one_minus)?;
                out[0] = Some(tape.mul(g, &slope)?);
            }
            Op::Exp => {
                out[0] = Some(tape.mul(g, output)?);
            }
            Op::LogSoftmax => {
                let (rows, cols) = (output.shape()[0], output.shape()[1]);
                let probs = tape.exp(output)?;
                let row_sums = tape.reduce_expand(g, 1, cols, &[rows])?;
                let spread = tape.expand(&row_sums, 1, cols, &[rows, cols])?;
                let weighted = tape.mul(&probs, &spread)?;
                out[0] = Some(tape.sub(g, &weighted)?);
            }
            Op::AvgPool { kh, kw } => {
                out[0] = Some(tape.avg_pool_grad(g, *kh, *kw, inputs[0].shape())?);
            }
            Op::AvgPoolGrad { kh, kw } => {
                out[0] = Some(tape.avg_pool(g, *kh, *kw)?);
            }
            Op::Reshape => {
                out[0] = Some(tape.reshape(g, inputs[0].shape())?);
            }
            Op::Expand { outer, inner } => {
                out[0] = Some(tape.reduce_expand(g, *outer, *inner, inputs[0].shape())?);
            }
            Op::ReduceExpand { outer, inner } => {
                out[0] = Some(tape.expand(g, *outer, *inner, inputs[0].shape())?);
            }
            Op::AddBias { outer, inner } => {
                if needs[0] {
                    out[0] = Some(g.clone());
                }
                if needs[1] {
                    out[1] = Some(tape.reduce_expand(g, *outer, *inner, inputs[1].shape())?);
                }
            }
            Op::Sum => {
                let shape = inputs[0].shape().to_vec();
                let n = inputs[0].value().numel();
                out[0] = Some(tape.expand(g, 1, n, &shape)?);
            }
            Op::SoftCrossEntropy => {
                let (logits, target) = (&inputs[0], &inputs[1]);
                let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
                let coef = tape.scale_const(g, 1.0 / rows.max(1) as f64)?;
                let log_probs = tape.log_softmax(logits)?;
                if needs[0] {
                    // (softmax(z) * sum_c t_c - t) / rows
                    let probs = tape.exp(&log_probs)?;
                    let mass = tape.reduce_expand(target, 1, cols, &[rows])?;
                    let mass = tape.expand(&mass, 1, cols, &[rows, cols])?;
                    let pulled = tape.mul(&probs, &mass)?;
                    let diff = tape.sub(&pulled, target)?;
                    out[0] = Some(tape.scale(&diff, &coef)?);
                }
                if needs[1] {
                    let neg = tape.neg(&coef)?;
                    out[1] = Some(tape.scale(&log_probs, &neg)?);
                }
            }
        }
        Ok(out)
    }
}
