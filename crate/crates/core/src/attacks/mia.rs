//! Shadow-model membership inference.
//!
//! Shadows are trained by the same pipeline as the target on disjoint
//! in/out splits of an attacker-held pool. Per query the attacker sees the
//! model's sorted softmax probabilities plus the cross-entropy of the true
//! label, and a stump ensemble learns member versus non-member from the
//! shadows' (feature, membership) pairs, one ensemble per probed round.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_unit, AttackKind, AttackReport, StumpConfig, StumpEnsemble};
use crate::data::RawDataset;
use crate::error::{Error, Result};
use crate::federation::{derive_seed, fork_join, partition_iid, run_fedavg, run_flip, FedConfig, TrainMode};
use crate::model::ModelParams;

const TAG_SHADOW: u64 = 32;
const TAG_QUERY: u64 = 33;
const TAG_PARTITION: u64 = 34;

/// A federated training pipeline whose per-round models are observable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub mode: TrainMode,
    pub fed: FedConfig,
}

impl Pipeline {
    /// Splits `data` over the configured clients and returns the model
    /// released after each round. For FLiP that is `train_final` of the
    /// round's aggregated set.
    pub fn train(&self, data: &RawDataset, seed: u64) -> Result<Vec<ModelParams>> {
        let cfg = FedConfig {
            seed,
            ..self.fed.clone()
        };
        let parts = partition_iid(data, cfg.clients, derive_seed(seed, &[TAG_PARTITION]))?;
        let history = match self.mode {
            TrainMode::Flip => run_flip(&cfg, &parts, None)?.history,
            TrainMode::Fedavg => run_fedavg(&cfg, &parts, None)?.1,
        };
        Ok(history.into_iter().map(|r| r.model).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaConfig {
    /// Number of shadow models M.
    pub shadows: usize,
    /// Members (and, separately, non-members) per shadow.
    pub shadow_size: usize,
    /// Queried members, and the same number of non-members.
    pub queries: usize,
    /// 1-based rounds to attack.
    pub probe_rounds: Vec<usize>,
    #[serde(default)]
    pub stumps: StumpConfig,
    pub seed: u64,
}

impl MiaConfig {
    pub fn validate(&self, rounds: usize) -> Result<()> {
        if self.shadows < 2 {
            return Err(Error::Config(format!("need at least 2 shadow models, got {}", self.shadows)));
        }
        if self.shadow_size == 0 || self.queries == 0 {
            return Err(Error::Config("shadow_size and queries must be positive".into()));
        }
        if self.probe_rounds.is_empty() || self.probe_rounds.iter().any(|&r| r == 0 || r > rounds) {
            return Err(Error::Config(format!(
                "probe rounds {:?} must be non-empty and within 1..={rounds}",
                self.probe_rounds
            )));
        }
        Ok(())
    }
}

/// Trained shadows with the pool indices each one saw.
#[derive(Clone, Debug)]
pub struct ShadowEnsemble {
    /// `models[m][i]` is shadow `m` at `probe_rounds[i]`.
    pub models: Vec<Vec<ModelParams>>,
    /// Disjoint (member, non-member) pool indices per shadow.
    pub splits: Vec<(Vec<usize>, Vec<usize>)>,
    pub probe_rounds: Vec<usize>,
}

impl ShadowEnsemble {
    pub fn train(pool: &RawDataset, pipeline: &Pipeline, cfg: &MiaConfig) -> Result<Self> {
        cfg.validate(pipeline.fed.rounds)?;
        let need = 2 * cfg.shadows * cfg.shadow_size;
        if pool.len() < need {
            return Err(Error::Config(format!(
                "{} shadows of {} need {need} pool samples, have {}",
                cfg.shadows,
                cfg.shadow_size,
                pool.len()
            )));
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_SHADOW])));
        let splits: Vec<(Vec<usize>, Vec<usize>)> = order[..need]
            .chunks(2 * cfg.shadow_size)
            .map(|c| (c[..cfg.shadow_size].to_vec(), c[cfg.shadow_size..].to_vec()))
            .collect();
        let models = fork_join(cfg.shadows, |m| {
            let history = pipeline.train(&pool.select(&splits[m].0)?, derive_seed(cfg.seed, &[TAG_SHADOW, m as u64]))?;
            log::info!("shadow {}/{} trained", m + 1, cfg.shadows);
            probe_models(&history, &cfg.probe_rounds)
        })?;
        Ok(ShadowEnsemble {
            models,
            splits,
            probe_rounds: cfg.probe_rounds.clone(),
        })
    }
}

/// The entries of a per-round `history` at 1-based `rounds`.
pub fn probe_models(history: &[ModelParams], rounds: &[usize]) -> Result<Vec<ModelParams>> {
    rounds
        .iter()
        .map(|&r| {
            r.checked_sub(1)
                .and_then(|i| history.get(i))
                .cloned()
                .ok_or_else(|| Error::Config(format!("no model for round {r} in a {}-round history", history.len())))
        })
        .collect()
}

/// Per sample: softmax probabilities sorted descending, then the
/// cross-entropy of the true label.
pub fn attack_features(model: &ModelParams, data: &RawDataset) -> Result<Vec<Vec<f64>>> {
    let logits = model.logits(data.inputs())?;
    let classes = logits.shape()[1];
    Ok(logits
        .data()
        .chunks(classes)
        .zip(data.labels())
        .map(|(z, &y)| {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let mut row: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
            row.sort_by(|a, b| b.total_cmp(a));
            row.push(lse - z[y]);
            row
        })
        .collect())
}

fn balanced_queries(members: &RawDataset, non_members: &RawDataset, cfg: &MiaConfig) -> Result<(RawDataset, RawDataset)> {
    if members.len() < cfg.queries || non_members.len() < cfg.queries {
        return Err(Error::Config(format!(
            "unbalanced query set: {} members and {} non-members for {} queries per side",
            members.len(),
            non_members.len(),
            cfg.queries
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[TAG_QUERY]));
    let mut pick = |d: &RawDataset| {
        let mut rows: Vec<usize> = (0..d.len()).collect();
        rows.shuffle(&mut rng);
        d.select(&rows[..cfg.queries])
    };
    Ok((pick(members)?, pick(non_members)?))
}

/// Attacks the target's released models; `targets[i]` is the model after
/// round `cfg.probe_rounds[i]`.
pub fn membership_inference(
    targets: &[ModelParams],
    members: &RawDataset,
    non_members: &RawDataset,
    pool: &RawDataset,
    shadows: &ShadowEnsemble,
    cfg: &MiaConfig,
    echo: serde_json::Value,
) -> Result<AttackReport> {
    cfg.validate(usize::MAX)?;
    if targets.len() != cfg.probe_rounds.len() {
        return Err(Error::Config(format!(
            "{} target models for {} probe rounds",
            targets.len(),
            cfg.probe_rounds.len()
        )));
    }
    if shadows.probe_rounds != cfg.probe_rounds || shadows.models.len() != cfg.shadows {
        return Err(Error::Config("shadow ensemble was trained for a different configuration".into()));
    }
    let (q_in, q_out) = balanced_queries(members, non_members, cfg)?;
    let mut round_accs = Vec::with_capacity(cfg.probe_rounds.len());
    for (i, &round) in cfg.probe_rounds.iter().enumerate() {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (m, (inside, outside)) in shadows.splits.iter().enumerate() {
            let model = &shadows.models[m][i];
            for (rows, member) in [(inside, true), (outside, false)] {
                let f = attack_features(model, &pool.select(rows)?)?;
                labels.extend(std::iter::repeat_n(member, f.len()));
                features.extend(f);
            }
        }
        let classifier = StumpEnsemble::fit(&features, &labels, &cfg.stumps)?;
        let target = &targets[i];
        let mut q_features = attack_features(target, &q_in)?;
        q_features.extend(attack_features(target, &q_out)?);
        let mut q_labels = vec![true; q_in.len()];
        q_labels.extend(std::iter::repeat_n(false, q_out.len()));
        let acc = check_unit("attack accuracy", classifier.accuracy(&q_features, &q_labels))?;
        log::info!("mia round {round}: attack acc {acc:.4}");
        round_accs.push(acc);
    }
    Ok(AttackReport {
        attack: AttackKind::Mia,
        attack_acc: round_accs.iter().sum::<f64>() / round_accs.len() as f64,
        task_accs: None,
        rounds: cfg.probe_rounds.clone(),
        round_accs,
        config: echo,
    })
}
