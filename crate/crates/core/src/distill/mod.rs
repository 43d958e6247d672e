//! Client-side distillation.
//!
//! A [`DistilledSet`] holds `K = k * C` learnable samples, soft labels and
//! per-sample learning rates. [`local_round`] improves it against a client's
//! raw data by differentiating the raw-batch loss of a model trained on the
//! distilled data through `K` unrolled SGD steps.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, RawDataset};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::tensor::{Tape, Tensor, Var};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};

/// Initial per-sample learning rate.
pub const INIT_LR: f64 = 0.01;

/// `(class, index within class)` of one distilled slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub class: usize,
    pub index: usize,
}

/// Interleaved slot order: slot `j` is `(j % C, j / C)`, so consecutive inner
/// steps cycle through the classes.
pub fn slot_map(classes: usize, k: usize) -> Vec<Slot> {
    (0..classes * k)
        .map(|j| Slot {
            class: j % classes,
            index: j / classes,
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct DistilledSet {
    input_shape: [usize; 3],
    classes: usize,
    k: usize,
    /// `[K, C, H, W]`
    samples: Tensor,
    /// `[K, classes]`
    soft_labels: Tensor,
    lrs: Vec<f64>,
    slots: Vec<Slot>,
}

/// A distilled set registered on a tape (or held as constants), one `Var`
/// per slot.
pub struct DistilledVars {
    /// Each `[1, C, H, W]`.
    pub samples: Vec<Var>,
    /// Each `[1, classes]`.
    pub soft_labels: Vec<Var>,
    /// Scalars.
    pub lrs: Vec<Var>,
}

impl DistilledVars {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn all(&self) -> Vec<Var> {
        self.samples
            .iter()
            .chain(&self.soft_labels)
            .chain(&self.lrs)
            .cloned()
            .collect()
    }
}

impl DistilledSet {
    pub fn new(
        input_shape: [usize; 3],
        classes: usize,
        k: usize,
        samples: Tensor,
        soft_labels: Tensor,
        lrs: Vec<f64>,
        slots: Vec<Slot>,
    ) -> Result<Self> {
        let big_k = classes * k;
        let mut sample_shape = vec![big_k];
        sample_shape.extend_from_slice(&input_shape);
        if k == 0 || classes == 0 {
            return Err(Error::Config("distilled set needs k >= 1 and C >= 1".into()));
        }
        if samples.shape() != sample_shape.as_slice()
            || soft_labels.shape() != [big_k, classes]
            || lrs.len() != big_k
            || slots.len() != big_k
        {
            return Err(Error::shape(
                "distilled_set",
                format!(
                    "samples {:?}, soft labels {:?}, {} rates, {} slots for K = {big_k}",
                    samples.shape(),
                    soft_labels.shape(),
                    lrs.len(),
                    slots.len()
                ),
            ));
        }
        let mut seen = vec![false; big_k];
        for s in &slots {
            if s.class >= classes || s.index >= k || std::mem::replace(&mut seen[s.class * k + s.index], true) {
                return Err(Error::Protocol(format!("slot map is not a bijection at {s:?}")));
            }
        }
        Ok(DistilledSet {
            input_shape,
            classes,
            k,
            samples,
            soft_labels,
            lrs,
            slots,
        })
    }

    /// Total number of slots `K`.
    pub fn len(&self) -> usize {
        self.lrs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lrs.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn per_class(&self) -> usize {
        self.k
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn samples(&self) -> &Tensor {
        &self.samples
    }

    pub fn soft_labels(&self) -> &Tensor {
        &self.soft_labels
    }

    pub fn lrs(&self) -> &[f64] {
        &self.lrs
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Sample `j` as a batch of one.
    pub fn sample(&self, j: usize) -> Result<Tensor> {
        self.samples.slice_outer(j, j + 1)
    }

    pub fn soft_label(&self, j: usize) -> Result<Tensor> {
        self.soft_labels.slice_outer(j, j + 1)
    }

    /// Same layout, new values.
    pub fn with_values(&self, samples: Tensor, soft_labels: Tensor, lrs: Vec<f64>) -> Result<Self> {
        Self::new(
            self.input_shape,
            self.classes,
            self.k,
            samples,
            soft_labels,
            lrs,
            self.slots.clone(),
        )
    }

    pub fn leaves(&self, tape: &mut Tape) -> Result<DistilledVars> {
        self.vars(|t| tape.leaf(t))
    }

    pub fn constants(&self) -> Result<DistilledVars> {
        self.vars(Var::constant)
    }

    fn vars(&self, mut make: impl FnMut(Tensor) -> Var) -> Result<DistilledVars> {
        let n = self.len();
        let mut out = DistilledVars {
            samples: Vec::with_capacity(n),
            soft_labels: Vec::with_capacity(n),
            lrs: Vec::with_capacity(n),
        };
        for j in 0..n {
            out.samples.push(make(self.sample(j)?));
        }
        for j in 0..n {
            out.soft_labels.push(make(self.soft_label(j)?));
        }
        for &lr in &self.lrs {
            out.lrs.push(make(Tensor::scalar(lr)));
        }
        Ok(out)
    }

    /// Bitwise equality of values and layout.
    pub fn bit_eq(&self, other: &DistilledSet) -> bool {
        self.slots == other.slots
            && self.samples.bit_eq(&other.samples)
            && self.soft_labels.bit_eq(&other.soft_labels)
            && self.lrs.len() == other.lrs.len()
            && self.lrs.iter().zip(&other.lrs).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute elementwise difference over samples, labels and rates.
    pub fn max_abs_diff(&self, other: &DistilledSet) -> f64 {
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        diff(self.samples.data(), other.samples.data())
            .max(diff(self.soft_labels.data(), other.soft_labels.data()))
            .max(diff(&self.lrs, &other.lrs))
    }
}

/// Shared starting point: samples standard normal, soft labels one-hot on
/// the slot's class, rates [`INIT_LR`].
pub fn init_distilled(spec: &ModelSpec, classes: usize, k: usize, seed: u64) -> Result<DistilledSet> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let slots = slot_map(classes, k);
    let big_k = slots.len();
    let [c, h, w] = spec.input_shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..big_k * c * h * w).map(|_| StandardNormal.sample(&mut rng)).collect();
    let samples = Tensor::new(vec![big_k, c, h, w], data)?;
    let soft_labels = one_hot(slots.iter().map(|s| s.class), big_k, classes);
    DistilledSet::new(spec.input_shape, classes, k, samples, soft_labels, vec![INIT_LR; big_k], slots)
}

/// `K` recorded SGD steps from `theta`, step `j` on `(S_j, Y_j)` with rate
/// `eta_j`, in slot order.
pub fn inner_unroll(tape: &mut Tape, spec: &ModelSpec, theta: &[Var], d: &DistilledVars) -> Result<Vec<Var>> {
    let mut theta = theta.to_vec();
    for j in 0..d.len() {
        let logits = spec.forward(tape, &theta, &d.samples[j])?;
        let loss = tape.soft_cross_entropy(&logits, &d.soft_labels[j])?;
        theta = tape.sgd_step(&theta, &loss, &d.lrs[j])?;
    }
    Ok(theta)
}

/// How a meta-gradient moves the distilled set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum OuterRule {
    /// `x <- x - gamma * g`.
    #[default]
    Sgd,
    /// Adam with step size `gamma`; moment estimates restart every round.
    /// Steps on the learning rates are multiplied by `rate_scale`.
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        #[serde(default = "unit_scale")]
        rate_scale: f64,
    },
}

impl OuterRule {
    pub fn adam() -> Self {
        Self::adam_scaled(1.0)
    }

    /// Adam with the usual moment constants and rate steps scaled by
    /// `rate_scale`.
    pub fn adam_scaled(rate_scale: f64) -> Self {
        OuterRule::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rate_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            OuterRule::Sgd => Ok(()),
            OuterRule::Adam {
                beta1,
                beta2,
                eps,
                rate_scale,
            } => {
                let unit = |b: f64| (0.0..1.0).contains(&b);
                if unit(beta1) && unit(beta2) && eps > 0.0 && eps.is_finite() && rate_scale >= 0.0 && rate_scale.is_finite() {
                    Ok(())
                } else {
                    Err(Error::Config(format!("invalid adam parameters {self:?}")))
                }
            }
        }
    }
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Outer learning rate for this round.
    pub gamma: f64,
    #[serde(default)]
    pub rule: OuterRule,
}

/// Adam moments over the flattened distilled set.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl AdamState {
    fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], beta1: f64, beta2: f64, eps: f64, gamma: impl Fn(usize) -> f64) {
        self.steps += 1;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            *p -= gamma(i) * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
        }
    }
}

fn flatten_set(d: &DistilledSet) -> Vec<f64> {
    let mut v = Vec::with_capacity(d.samples.numel() + d.soft_labels.numel() + d.lrs.len());
    v.extend_from_slice(d.samples.data());
    v.extend_from_slice(d.soft_labels.data());
    v.extend_from_slice(&d.lrs);
    v
}

fn unflatten_set(like: &DistilledSet, v: Vec<f64>) -> Result<DistilledSet> {
    let (ns, ny) = (like.samples.numel(), like.soft_labels.numel());
    let samples = Tensor::new(like.samples.shape().to_vec(), v[..ns].to_vec())?;
    let soft = Tensor::new(like.soft_labels.shape().to_vec(), v[ns..ns + ny].to_vec())?;
    like.with_values(samples, soft, v[ns + ny..].to_vec())
}

impl LocalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("invalid local config {self:?}")));
        }
        Ok(())
    }
}

/// Loss of the model trained on `d` (from `theta_init`) on one raw batch,
/// together with its gradient with respect to every element of `d`.
pub fn meta_gradient(
    spec: &ModelSpec,
    theta_init: &ModelParams,
    d: &DistilledSet,
    x: &Tensor,
    target: &Tensor,
) -> Result<(f64, DistilledSet)> {
    let mut tape = Tape::new();
    let theta = theta_init.leaves(&mut tape);
    let vars = d.leaves(&mut tape)?;
    let theta_k = inner_unroll(&mut tape, spec, &theta, &vars)?;
    let logits = spec.forward(&mut tape, &theta_k, &Var::constant(x.clone()))?;
    let loss = tape.soft_cross_entropy(&logits, &Var::constant(target.clone()))?;
    let loss_value = loss.value().item()?;
    if !loss_value.is_finite() {
        return Err(Error::Numeric {
            op: "meta_gradient",
            detail: format!("raw loss is {loss_value}"),
        });
    }
    let grads = tape.grad(&loss, &vars.all(), false)?;
    let n = d.len();
    let stack = |gs: &[Var]| Tensor::stack(&gs.iter().map(|g| g.value().clone()).collect::<Vec<_>>());
    let gs = stack(&grads[..n])?.reshape(d.samples.shape())?;
    let gy = stack(&grads[n..2 * n])?.reshape(d.soft_labels.shape())?;
    let geta = grads[2 * n..]
        .iter()
        .map(|g| g.value().item())
        .collect::<Result<Vec<_>>>()?;
    Ok((loss_value, d.with_values(gs, gy, geta)?))
}

/// Statistics of one [`local_round`].
#[derive(Clone, Debug, Default)]
pub struct RoundLog {
    /// Raw-batch loss per meta-step, in order.
    pub losses: Vec<f64>,
}

/// `epochs` passes over `raw` in seeded shuffled batches; each batch moves
/// every element of the distilled set by `-gamma` times its meta-gradient.
/// `round` only labels diagnostics.
pub fn local_round(
    raw: &RawDataset,
    d_in: &DistilledSet,
    theta_init: &ModelParams,
    cfg: &LocalConfig,
    seed: u64,
    round: usize,
) -> Result<(DistilledSet, RoundLog)> {
    cfg.validate()?;
    if raw.classes() != d_in.classes() {
        return Err(Error::Config(format!(
            "raw data has {} classes, distilled set {}",
            raw.classes(),
            d_in.classes()
        )));
    }
    if raw.sample_shape() != d_in.input_shape() {
        return Err(Error::shape(
            "local_round",
            format!("raw samples {:?} vs distilled {:?}", raw.sample_shape(), d_in.input_shape()),
        ));
    }
    let spec = theta_init.spec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..raw.len()).collect();
    let mut d = d_in.clone();
    let mut log = RoundLog::default();
    let mut adam = match cfg.rule {
        OuterRule::Adam { .. } => Some(AdamState::new(flatten_set(d_in).len())),
        OuterRule::Sgd => None,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = raw.batch(rows)?;
            let (loss, g) = match meta_gradient(spec, theta_init, &d, &x, &y) {
                Ok(r) => r,
                Err(Error::Numeric { .. }) => return Err(Error::Diverged { round, epoch, batch }),
                Err(e) => return Err(e),
            };
            log.losses.push(loss);
            let mut params = flatten_set(&d);
            let grads = flatten_set(&g);
            match (cfg.rule, adam.as_mut()) {
                (
                    OuterRule::Adam {
                        beta1,
                        beta2,
                        eps,
                        rate_scale,
                    },
                    Some(state),
                ) => {
                    let rates_from = params.len() - d.lrs.len();
                    state.step(&mut params, &grads, beta1, beta2, eps, |i| {
                        if i < rates_from {
                            cfg.gamma
                        } else {
                            cfg.gamma * rate_scale
                        }
                    });
                }
                _ => params.iter_mut().zip(&grads).for_each(|(p, g)| *p -= cfg.gamma * g),
            }
            d = unflatten_set(&d, params)?;
        }
    }
    let negative = d.lrs.iter().filter(|&&v| v < 0.0).count();
    if negative > 0 {
        log::warn!("round {round}: {negative} distilled learning rates are negative");
    }
    Ok((d, log))
}
