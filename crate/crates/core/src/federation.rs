//! Server-side orchestration of FLiP rounds and the FedAvg baseline.
//!
//! Clients are simulated in-process. Each round the server broadcasts the
//! shared initialization and the current aggregated distilled set; every
//! client answers with a [`ClientMessage`], and the server averages the
//! answers slot by slot.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::distill::{init_distilled, local_round, DistilledSet, LocalConfig, OuterRule};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};
use crate::tensor::Tensor;

/// Environment variable capping the number of client threads.
pub const THREADS_ENV: &str = "FLIP_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub clients: usize,
    pub rounds: usize,
    /// Distilled samples per class.
    pub k: usize,
    pub gamma0: f64,
    pub gamma_decay: f64,
    /// Rounds between decays.
    pub gamma_period: usize,
    /// Local distillation epochs per round.
    pub epochs: usize,
    pub batch_size: usize,
    /// Preset name, see [`ModelSpec::preset`].
    pub model: String,
    #[serde(default)]
    pub model_width: Option<usize>,
    pub seed: u64,
    /// Local SGD epochs per FedAvg round.
    #[serde(default = "default_fedavg_epochs")]
    pub fedavg_epochs: usize,
    #[serde(default = "default_fedavg_batch")]
    pub fedavg_batch_size: usize,
    /// Update rule for the distilled set.
    #[serde(default)]
    pub outer: OuterRule,
}

fn default_fedavg_epochs() -> usize {
    1
}

fn default_fedavg_batch() -> usize {
    32
}

impl FedConfig {
    /// Five clients, 100 rounds, `k = 10`, `gamma` from 0.01 halved every 40
    /// rounds, 30 local epochs, distillation batch 1024, `convnet`.
    pub fn reference_defaults() -> Self {
        FedConfig {
            clients: 5,
            rounds: 100,
            k: 10,
            gamma0: 0.01,
            gamma_decay: 0.5,
            gamma_period: 40,
            epochs: 30,
            batch_size: 1024,
            model: "convnet".into(),
            model_width: None,
            seed: 0,
            fedavg_epochs: default_fedavg_epochs(),
            fedavg_batch_size: default_fedavg_batch(),
            outer: OuterRule::Sgd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.into()));
        if self.clients == 0 {
            return bad("clients must be at least 1");
        }
        if self.rounds == 0 {
            return bad("rounds must be at least 1");
        }
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return bad("gamma0 must be positive");
        }
        if !(self.gamma_decay > 0.0 && self.gamma_decay.is_finite()) || self.gamma_period == 0 {
            return bad("gamma decay must be positive with a positive period");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.fedavg_epochs == 0 || self.fedavg_batch_size == 0 {
            return bad("epochs and batch sizes must be at least 1");
        }
        self.outer.validate()
    }

    /// `gamma0 * decay^floor(t / period)` for 0-based round `t`.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma0 * self.gamma_decay.powi((t / self.gamma_period) as i32)
    }

    pub fn model_spec(&self, input_shape: [usize; 3], classes: usize) -> Result<ModelSpec> {
        ModelSpec::preset(&self.model, input_shape, classes, self.model_width)
    }

    fn local(&self, t: usize) -> LocalConfig {
        LocalConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            gamma: self.gamma(t),
            rule: self.outer,
        }
    }
}

/// Deterministic seed derivation (splitmix64 over the tags).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut z = base;
    for &t in tags {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15 ^ t.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

const TAG_MODEL: u64 = 1;
const TAG_DISTILLED: u64 = 2;
const TAG_CLIENT: u64 = 3;

/// Everything a client may send to the server.
#[derive(Clone, Debug)]
pub enum ClientMessage {
    Distilled(DistilledSet),
}

impl ClientMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ClientMessage::Distilled(_) => "distilled",
        }
    }

    /// Number of `f64` values carried.
    pub fn payload_len(&self) -> usize {
        match self {
            ClientMessage::Distilled(d) => d.samples().numel() + d.soft_labels().numel() + d.lrs().len(),
        }
    }
}

/// What the server recorded about one received message.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MessageRecord {
    pub round: usize,
    pub client: usize,
    pub kind: &'static str,
    pub payload_len: usize,
}

/// Server-side snapshot after round `round` (0-based). Probe round `r`
/// (1-based) is `history[r - 1]`.
#[derive(Clone, Debug)]
pub struct RoundState {
    pub round: usize,
    pub gamma: f64,
    pub eval_acc: Option<f64>,
    pub seconds: f64,
    /// Aggregated distilled set (FLiP runs).
    pub distilled: Option<DistilledSet>,
    /// The model the protocol materializes at this round.
    pub model: ModelParams,
}

/// Per-element mean of equally long slices, summed in the order given.
/// Elements on which every input agrees are returned unchanged, so identical
/// inputs reproduce exactly.
fn elementwise_mean(parts: &[&[f64]]) -> Vec<f64> {
    let n = parts.len() as f64;
    let (first, rest) = parts.split_first().expect("at least one part");
    first
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if rest.iter().all(|p| p[i] == v) {
                v
            } else {
                rest.iter().fold(v, |acc, p| acc + p[i]) / n
            }
        })
        .collect()
}

/// Slot-wise mean, summing clients in the order given.
pub fn aggregate(sets: &[DistilledSet]) -> Result<DistilledSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Protocol("nothing to aggregate".into()))?;
    for (i, s) in sets.iter().enumerate().skip(1) {
        if s.slots() != first.slots() || s.samples().shape() != first.samples().shape() || s.classes() != first.classes() {
            return Err(Error::Protocol(format!("client {i} has a different slot map or shape")));
        }
    }
    let mean = |get: &dyn Fn(&DistilledSet) -> &[f64]| -> Vec<f64> {
        elementwise_mean(&sets.iter().map(get).collect::<Vec<_>>())
    };
    let samples = Tensor::new(first.samples().shape().to_vec(), mean(&|s| s.samples().data()))?;
    let soft = Tensor::new(first.soft_labels().shape().to_vec(), mean(&|s| s.soft_labels().data()))?;
    first.with_values(samples, soft, mean(&|s| s.lrs()))
}

/// `K` plain SGD steps from `theta_init`, one per distilled slot.
pub fn train_final(theta_init: &ModelParams, d: &DistilledSet) -> Result<ModelParams> {
    train_final_observed(theta_init, d, |_| {})
}

/// [`train_final`], calling `observe(j)` after step `j`.
pub fn train_final_observed(
    theta_init: &ModelParams,
    d: &DistilledSet,
    mut observe: impl FnMut(usize),
) -> Result<ModelParams> {
    let mut theta = theta_init.clone();
    for j in 0..d.len() {
        theta = theta.sgd_update(&d.sample(j)?, &d.soft_label(j)?, d.lrs()[j])?.0;
        observe(j);
    }
    Ok(theta)
}

/// Seeded shuffle, then contiguous equal parts; the last part takes the
/// remainder.
pub fn partition_iid(dataset: &RawDataset, n: usize, seed: u64) -> Result<Vec<RawDataset>> {
    if n == 0 || dataset.len() < n {
        return Err(Error::Config(format!(
            "cannot split {} samples across {n} clients",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = dataset.len() / n;
    (0..n)
        .map(|i| {
            let end = if i + 1 == n { order.len() } else { (i + 1) * size };
            dataset.select(&order[i * size..end])
        })
        .collect()
}

fn thread_cap(clients: usize) -> usize {
    let env = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    env.unwrap_or(hw).clamp(1, clients.max(1))
}

/// Runs `work(client)` for every client, at most `FLIP_THREADS` at a time;
/// results come back in client order.
pub(crate) fn fork_join<T: Send>(clients: usize, work: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let cap = thread_cap(clients);
    if cap == 1 {
        return (0..clients).map(&work).collect();
    }
    let mut out = Vec::with_capacity(clients);
    for wave in (0..clients).collect::<Vec<_>>().chunks(cap) {
        let results: Vec<Result<T>> = std::thread::scope(|s| {
            let work = &work;
            let handles: Vec<_> = wave.iter().map(|&c| s.spawn(move || work(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("client thread panicked".into()))))
                .collect()
        });
        for r in results {
            out.push(r?);
        }
    }
    Ok(out)
}

fn check_parts(parts: &[RawDataset], cfg: &FedConfig) -> Result<([usize; 3], usize)> {
    cfg.validate()?;
    if parts.len() != cfg.clients {
        return Err(Error::Config(format!(
            "{} partitions for {} clients",
            parts.len(),
            cfg.clients
        )));
    }
    let shape = parts[0].sample_shape();
    let classes = parts[0].classes();
    if parts.iter().any(|p| p.classes() != classes || p.sample_shape() != shape || p.is_empty()) {
        return Err(Error::Config("partitions disagree on classes or input shape".into()));
    }
    Ok((shape, classes))
}

/// Which protocol a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Flip,
    Fedavg,
}

/// The shared initialization θ_init every participant derives from `cfg.seed`.
pub fn initial_model(cfg: &FedConfig, input_shape: [usize; 3], classes: usize) -> Result<ModelParams> {
    cfg.model_spec(input_shape, classes)?.build(derive_seed(cfg.seed, &[TAG_MODEL]))
}

/// Result of [`run_flip`].
#[derive(Clone, Debug)]
pub struct FlipRun {
    pub theta_init: ModelParams,
    /// Final model of each client, trained from the last aggregated set.
    pub finals: Vec<ModelParams>,
    pub history: Vec<RoundState>,
    pub messages: Vec<MessageRecord>,
}

impl FlipRun {
    pub fn final_set(&self) -> &DistilledSet {
        self.history
            .last()
            .and_then(|r| r.distilled.as_ref())
            .expect("a FLiP run has at least one round")
    }
}

/// Full FLiP protocol over `cfg.rounds` rounds. When `eval` is given, every
/// round's model is scored on it.
pub fn run_flip(cfg: &FedConfig, parts: &[RawDataset], eval: Option<&RawDataset>) -> Result<FlipRun> {
    let (shape, classes) = check_parts(parts, cfg)?;
    let theta_init = initial_model(cfg, shape, classes)?;
    let spec = theta_init.spec().clone();
    let mut current = init_distilled(&spec, classes, cfg.k, derive_seed(cfg.seed, &[TAG_DISTILLED]))?;
    let mut history = Vec::with_capacity(cfg.rounds);
    let mut messages = Vec::new();
    for t in 0..cfg.rounds {
        let start = Instant::now();
        let local = cfg.local(t);
        let broadcast = &current;
        let replies = fork_join(cfg.clients, |c| {
            let seed = derive_seed(cfg.seed, &[TAG_CLIENT, t as u64, c as u64]);
            let (d, _) = local_round(&parts[c], broadcast, &theta_init, &local, seed, t)?;
            Ok(ClientMessage::Distilled(d))
        })?;
        let mut sets = Vec::with_capacity(replies.len());
        for (client, msg) in replies.into_iter().enumerate() {
            messages.push(MessageRecord {
                round: t,
                client,
                kind: msg.kind(),
                payload_len: msg.payload_len(),
            });
            let ClientMessage::Distilled(d) = msg;
            sets.push(d);
        }
        current = aggregate(&sets)?;
        let model = train_final(&theta_init, &current)?;
        let eval_acc = eval.map(|e| model.accuracy(e)).transpose()?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!(
            "flip round {}/{}: gamma {:.5}, acc {}, {seconds:.1}s",
            t + 1,
            cfg.rounds,
            local.gamma,
            eval_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        history.push(RoundState {
            round: t,
            gamma: local.gamma,
            eval_acc,
            seconds,
            distilled: Some(current.clone()),
            model,
        });
    }
    // every client holds the same initialization and aggregated set
    let finals = (0..cfg.clients)
        .map(|_| train_final(&theta_init, &current))
        .collect::<Result<Vec<_>>>()?;
    Ok(FlipRun {
        theta_init,
        finals,
        history,
        messages,
    })
}

/// `epochs` of mini-batch SGD (hard labels) over `data`, shuffled with
/// `seed`.
pub fn local_sgd(
    theta: &ModelParams,
    data: &RawDataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut theta = theta.clone();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(batch_size) {
            let (x, y) = data.batch(rows)?;
            theta = theta.sgd_update(&x, &y, lr)?.0;
        }
    }
    Ok(theta)
}

/// Equal-weight parameter mean, summed in the order given.
pub fn average_params(models: &[ModelParams]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Protocol("nothing to average".into()))?;
    if models.iter().any(|m| m.spec() != first.spec()) {
        return Err(Error::Protocol("cannot average models of different architectures".into()));
    }
    let tensors = (0..first.tensors().len())
        .map(|i| {
            let parts: Vec<&[f64]> = models.iter().map(|m| m.tensors()[i].data()).collect();
            Tensor::new(first.tensors()[i].shape().to_vec(), elementwise_mean(&parts))
        })
        .collect::<Result<Vec<_>>>()?;
    first.with_tensors(tensors)
}

/// Vanilla FedAvg: each round every client runs local SGD from the global
/// model at rate `gamma(t)`, and the server averages the parameters.
pub fn run_fedavg(
    cfg: &FedConfig,
    parts: &[RawDataset],
    eval: Option<&RawDataset>,
) -> Result<(ModelParams, Vec<RoundState>)> {
    let (shape, classes) = check_parts(parts, cfg)?;
    let mut global = initial_model(cfg, shape, classes)?;
    let mut history = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let start = Instant::now();
        let lr = cfg.gamma(t);
        let base = &global;
        let locals = fork_join(cfg.clients, |c| {
            let seed = derive_seed(cfg.seed, &[TAG_CLIENT, t as u64, c as u64]);
            local_sgd(base, &parts[c], cfg.fedavg_epochs, cfg.fedavg_batch_size, lr, seed)
        })?;
        global = average_params(&locals)?;
        let eval_acc = eval.map(|e| global.accuracy(e)).transpose()?;
        let seconds = start.elapsed().as_secs_f64();
        log::info!(
            "fedavg round {}/{}: lr {lr:.5}, acc {}, {seconds:.1}s",
            t + 1,
            cfg.rounds,
            eval_acc.map_or("-".into(), |a| format!("{a:.4}"))
        );
        history.push(RoundState {
            round: t,
            gamma: lr,
            eval_acc,
            seconds,
            distilled: None,
            model: global.clone(),
        });
    }
    Ok((global, history))
}

/// Round history as CSV with columns `t,gamma,eval_acc,seconds`; `t` is
/// 1-based. Missing accuracies are left empty.
pub fn write_history_csv(path: &Path, history: &[RoundState]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "t,gamma,eval_acc,seconds").expect("write to vec");
    for r in history {
        let acc = r.eval_acc.map_or(String::new(), |a| a.to_string());
        writeln!(out, "{},{},{},{:.3}", r.round + 1, r.gamma, acc, r.seconds).expect("write to vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_schedule() {
        let cfg = FedConfig::reference_defaults();
        assert_eq!(cfg.gamma(0), 0.01);
        assert_eq!(cfg.gamma(39), 0.01);
        assert_eq!(cfg.gamma(40), 0.005);
        assert_eq!(cfg.gamma(80), 0.0025);
    }

    #[test]
    fn validation() {
        let ok = FedConfig::reference_defaults();
        ok.validate().unwrap();
        for bad in [
            FedConfig { clients: 0, ..ok.clone() },
            FedConfig { rounds: 0, ..ok.clone() },
            FedConfig { gamma0: 0.0, ..ok.clone() },
            FedConfig { gamma_period: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[TAG_CLIENT, 0, 0]);
        assert_ne!(a, derive_seed(1, &[TAG_CLIENT, 0, 1]));
        assert_ne!(a, derive_seed(1, &[TAG_CLIENT, 1, 0]));
        assert_ne!(a, derive_seed(2, &[TAG_CLIENT, 0, 0]));
        assert_eq!(a, derive_seed(1, &[TAG_CLIENT, 0, 0]));
    }
}
