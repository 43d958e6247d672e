//! Shadow-model membership inference against FedAvg and FLiP targets
//! trained on the same members.
//!
//! ```text
//! cargo run --release --example membership_inference
//! ```

use flip_core::attacks::{membership_inference, probe_models, MiaConfig, Pipeline, ShadowEnsemble, StumpConfig, TrainMode};
use flip_core::data::synth_blobs;
use flip_core::distill::OuterRule;
use flip_core::federation::FedConfig;

fn main() -> flip_core::Result<()> {
    let members = synth_blobs(20, 4, 8, 1)?;
    let non_members = synth_blobs(20, 4, 8, 2)?;
    let pool = synth_blobs(400, 4, 8, 3)?;
    let fed = FedConfig {
        clients: 2,
        rounds: 10,
        k: 2,
        gamma_period: 5,
        epochs: 3,
        batch_size: 16,
        model: "mlp-s".into(),
        model_width: Some(64),
        fedavg_epochs: 5,
        fedavg_batch_size: 8,
        outer: OuterRule::adam_scaled(0.1),
        ..FedConfig::reference_defaults()
    };
    let cfg = MiaConfig {
        shadows: 8,
        shadow_size: members.len(),
        queries: members.len(),
        probe_rounds: vec![1, 5, 10],
        stumps: StumpConfig {
            iterations: 2000,
            ..StumpConfig::default()
        },
        seed: 4,
    };
    for mode in [TrainMode::Fedavg, TrainMode::Flip] {
        let gamma0 = if mode == TrainMode::Fedavg { 0.05 } else { fed.gamma0 };
        let pipeline = Pipeline {
            mode,
            fed: FedConfig { gamma0, ..fed.clone() },
        };
        let history = pipeline.train(&members, 99)?;
        let targets = probe_models(&history, &cfg.probe_rounds)?;
        let shadows = ShadowEnsemble::train(&pool, &pipeline, &cfg)?;
        let report = membership_inference(&targets, &members, &non_members, &pool, &shadows, &cfg, serde_json::Value::Null)?;
        println!("{mode:?}: attack acc {:.3} per round {:?}", report.attack_acc, report.round_accs);
    }
    Ok(())
}
