//! Privacy assessment: task-irrelevant attribute inference over distilled
//! data, and shadow-model membership inference over released models.
//!
//! Both attacks are split into a simulation stage, which runs the protocol
//! to produce what a semi-honest participant would observe, and an attack
//! stage whose inputs are restricted to those observations
//! ([`DistilledSet`](crate::distill::DistilledSet)s and [`ModelParams`]).

mod air;
mod mia;
mod stumps;

use serde::{Deserialize, Serialize};

use crate::data::RawDataset;
use crate::error::{Error, Result};
use crate::federation::local_sgd;
use crate::model::{ModelParams, ModelSpec};

pub use air::{
    air_attack_stage, attribute_inference, attribute_inference_on, class_air_tasks, synth_air_tasks, AirTask,
    AttributeAttackSpec,
};
pub use mia::{attack_features, membership_inference, probe_models, MiaConfig, Pipeline, ShadowEnsemble};
pub use crate::federation::TrainMode;
pub use stumps::{Stump, StumpConfig, StumpEnsemble};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Air,
    Mia,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub attack_acc: f64,
    /// Primary accuracy of each auxiliary task (attribute inference only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_accs: Option<Vec<f64>>,
    /// 1-based rounds whose artifacts were attacked.
    pub rounds: Vec<usize>,
    /// Attack accuracy per probed round (membership inference only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub round_accs: Vec<f64>,
    pub config: serde_json::Value,
}

/// Plain supervised classifier used as the attribute attacker ψ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub model: String,
    #[serde(default)]
    pub width: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            model: "mlp-s".into(),
            width: None,
            epochs: 50,
            batch_size: 16,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Trains a fresh `cfg.model` on `data` with mini-batch SGD.
pub fn fit_classifier(data: &RawDataset, cfg: &ClassifierConfig) -> Result<ModelParams> {
    if data.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 || cfg.lr.is_nan() || cfg.lr <= 0.0 {
        return Err(Error::Config("classifier needs data, epochs, batch size and a positive rate".into()));
    }
    let spec = ModelSpec::preset(&cfg.model, data.sample_shape(), data.classes(), cfg.width)?;
    let theta = spec.build(cfg.seed)?;
    local_sgd(&theta, data, cfg.epochs, cfg.batch_size, cfg.lr, cfg.seed ^ 0x5eed)
}

fn check_unit(name: &str, v: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(Error::Numeric {
            op: "attack",
            detail: format!("{name} {v} outside [0, 1]"),
        })
    }
}
