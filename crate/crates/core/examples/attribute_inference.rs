//! Task-irrelevant attribute inference on synth-attr. Four FLiP runs learn
//! square versus circle; the attacker tries to tell, from the broadcast
//! distilled samples alone, which stripe texture the clients' images had.
//!
//! ```text
//! cargo run --release --example attribute_inference
//! ```

use flip_core::attacks::{attribute_inference_on, fit_classifier, synth_air_tasks, ClassifierConfig};
use flip_core::data::synth_attr;
use flip_core::distill::OuterRule;
use flip_core::federation::FedConfig;

fn main() -> flip_core::Result<()> {
    let psi = ClassifierConfig::default();
    let raw_train = synth_attr(200, 1)?.by_texture()?;
    let raw_test = synth_attr(100, 2)?.by_texture()?;
    let raw = fit_classifier(&raw_train, &psi)?.accuracy(&raw_test)?;

    let tasks = synth_air_tasks(100, 50, 2, 3)?;
    let fed = FedConfig {
        clients: 2,
        rounds: 20,
        k: 5,
        gamma_period: 8,
        epochs: 10,
        batch_size: 64,
        model: "mlp-s".into(),
        model_width: Some(32),
        outer: OuterRule::adam_scaled(0.1),
        ..FedConfig::reference_defaults()
    };
    let report = attribute_inference_on(&tasks, &fed, None, &psi, serde_json::json!({"dataset": "synth-attr"}))?;
    println!("texture from raw images:      {raw:.3}");
    println!("texture from distilled data:  {:.3}", report.attack_acc);
    println!("shape accuracy of the four tasks: {:?}", report.task_accs.unwrap_or_default());
    Ok(())
}
