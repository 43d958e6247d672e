//! Task-irrelevant attribute inference.
//!
//! Four binary FLiP tasks are run: (p1, s1), (p1, s2), (p2, s1), (p2, s2),
//! where `s` is the negative class and the attribute to infer. The attacker
//! trains ψ on the distilled samples broadcast during (p1, ·) and tests it on
//! those broadcast during (p2, ·).

use serde::{Deserialize, Serialize};

use super::{check_unit, fit_classifier, AttackKind, AttackReport, ClassifierConfig};
use crate::data::{synth_attr, Normalization, RawDataset};
use crate::distill::DistilledSet;
use crate::error::{Error, Result};
use crate::federation::{derive_seed, partition_iid, run_flip, FedConfig};
use crate::tensor::Tensor;

const TAG_AIR: u64 = 16;

/// One binary task: client partitions plus a held-out split for the task's
/// own accuracy. Label 1 is the primary class.
#[derive(Clone, Debug)]
pub struct AirTask {
    pub parts: Vec<RawDataset>,
    pub test: RawDataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeAttackSpec {
    /// `[p1, p2, s1, s2]`, all distinct.
    pub classes: [usize; 4],
    /// Shared by the four tasks; each task derives its own seed.
    pub fed: FedConfig,
    /// 1-based rounds whose aggregated sets are collected; `None` means all.
    #[serde(default)]
    pub rounds: Option<Vec<usize>>,
    #[serde(default)]
    pub psi: ClassifierConfig,
}

fn binary(data: &RawDataset, negative: usize, positive: usize) -> Result<RawDataset> {
    // subset relabels by position: negative -> 0, positive -> 1
    data.subset(&[negative, positive], None)
}

/// Tasks in the order (p1,s1), (p1,s2), (p2,s1), (p2,s2) from four classes
/// of a labelled dataset.
pub fn class_air_tasks(
    train: &RawDataset,
    test: &RawDataset,
    classes: [usize; 4],
    clients: usize,
    seed: u64,
) -> Result<[AirTask; 4]> {
    let [p1, p2, s1, s2] = classes;
    let mut seen = classes.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != 4 || classes.iter().any(|&c| c >= train.classes()) {
        return Err(Error::Config(format!(
            "attribute inference needs four distinct classes below {}, got {classes:?}",
            train.classes()
        )));
    }
    let make = |i: u64, p: usize, s: usize| -> Result<AirTask> {
        Ok(AirTask {
            parts: partition_iid(&binary(train, s, p)?, clients, derive_seed(seed, &[TAG_AIR, i]))?,
            test: binary(test, s, p)?,
        })
    };
    Ok([make(0, p1, s1)?, make(1, p1, s2)?, make(2, p2, s1)?, make(3, p2, s2)?])
}

/// Tasks from synth-attr: the primary attribute (shape) is the task, and the
/// texture is the hidden attribute. `p1` and `p2` are independent draws, so
/// the attacker's training and test runs share no images.
pub fn synth_air_tasks(n_per_cell: usize, test_per_cell: usize, clients: usize, seed: u64) -> Result<[AirTask; 4]> {
    let draw = |i: u64, n: usize| synth_attr(n, derive_seed(seed, &[TAG_AIR, 100 + i]));
    let (train_a, train_b) = (draw(0, n_per_cell)?, draw(1, n_per_cell)?);
    let test = draw(2, test_per_cell)?;
    let make = |i: u64, draw: &crate::data::SynthAttr, texture: usize| -> Result<AirTask> {
        Ok(AirTask {
            parts: partition_iid(&draw.with_texture(texture)?, clients, derive_seed(seed, &[TAG_AIR, i]))?,
            test: test.with_texture(texture)?,
        })
    };
    Ok([
        make(0, &train_a, 0)?,
        make(1, &train_a, 1)?,
        make(2, &train_b, 0)?,
        make(3, &train_b, 1)?,
    ])
}

fn psi_dataset(by_attr: [&[DistilledSet]; 2]) -> Result<RawDataset> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut shape = None;
    for (label, sets) in by_attr.into_iter().enumerate() {
        for d in sets {
            let s = d.input_shape();
            if *shape.get_or_insert(s) != s {
                return Err(Error::Protocol("collected sets disagree on input shape".into()));
            }
            rows.extend_from_slice(d.samples().data());
            labels.extend(std::iter::repeat_n(label, d.len()));
        }
    }
    let Some([c, h, w]) = shape else {
        return Err(Error::Config("no distilled sets collected for one of the attributes".into()));
    };
    let inputs = Tensor::new(vec![labels.len(), c, h, w], rows)?;
    RawDataset::new(inputs, labels, 2, Normalization::identity(c))
}

/// The attack proper. `collected[i]` holds the sets observed during task
/// `i` in the order of [`class_air_tasks`]; returns ψ's test accuracy.
pub fn air_attack_stage(collected: &[Vec<DistilledSet>; 4], psi: &ClassifierConfig) -> Result<f64> {
    let train = psi_dataset([&collected[0], &collected[1]])?;
    let test = psi_dataset([&collected[2], &collected[3]])?;
    let model = fit_classifier(&train, psi)?;
    check_unit("attack accuracy", model.accuracy(&test)?)
}

/// Runs FLiP on each task, collects the aggregated sets at `rounds`, and
/// attacks them.
pub fn attribute_inference_on(
    tasks: &[AirTask; 4],
    fed: &FedConfig,
    rounds: Option<&[usize]>,
    psi: &ClassifierConfig,
    echo: serde_json::Value,
) -> Result<AttackReport> {
    let probe: Vec<usize> = match rounds {
        Some(r) => r.to_vec(),
        None => (1..=fed.rounds).collect(),
    };
    if probe.is_empty() || probe.iter().any(|&r| r == 0 || r > fed.rounds) {
        return Err(Error::Config(format!(
            "collected rounds {probe:?} must be non-empty and within 1..={}",
            fed.rounds
        )));
    }
    let mut collected: [Vec<DistilledSet>; 4] = Default::default();
    let mut task_accs = Vec::with_capacity(4);
    for (i, task) in tasks.iter().enumerate() {
        let cfg = FedConfig {
            seed: derive_seed(fed.seed, &[TAG_AIR, i as u64]),
            ..fed.clone()
        };
        let run = run_flip(&cfg, &task.parts, None)?;
        task_accs.push(check_unit("task accuracy", run.finals[0].accuracy(&task.test)?)?);
        collected[i] = probe
            .iter()
            .map(|&r| run.history[r - 1].distilled.clone().expect("FLiP rounds carry distilled sets"))
            .collect();
        log::info!("air task {}/4: primary acc {:.4}", i + 1, task_accs[i]);
    }
    let attack_acc = air_attack_stage(&collected, psi)?;
    Ok(AttackReport {
        attack: AttackKind::Air,
        attack_acc,
        task_accs: Some(task_accs),
        rounds: probe,
        round_accs: Vec::new(),
        config: echo,
    })
}

/// [`attribute_inference_on`] over four classes of `train`/`test`.
pub fn attribute_inference(spec: &AttributeAttackSpec, train: &RawDataset, test: &RawDataset) -> Result<AttackReport> {
    let tasks = class_air_tasks(train, test, spec.classes, spec.fed.clients, spec.fed.seed)?;
    attribute_inference_on(&tasks, &spec.fed, spec.rounds.as_deref(), &spec.psi, serde_json::to_value(spec)?)
}
