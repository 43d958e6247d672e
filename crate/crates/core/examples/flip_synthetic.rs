//! The whole FLiP protocol on Gaussian blobs, small enough to finish in
//! seconds: three clients, four classes, two distilled samples per class.
//!
//! ```text
//! cargo run --release --example flip_synthetic
//! ```

use flip_core::data::synth_blobs;
use flip_core::distill::OuterRule;
use flip_core::federation::{partition_iid, run_flip, FedConfig};

fn main() -> flip_core::Result<()> {
    let train = synth_blobs(60, 4, 6, 1)?;
    let test = synth_blobs(30, 4, 6, 2)?;
    let cfg = FedConfig {
        clients: 3,
        rounds: 6,
        k: 2,
        gamma_period: 3,
        epochs: 4,
        batch_size: 32,
        model: "mlp-s".into(),
        model_width: Some(32),
        outer: OuterRule::adam_scaled(0.1),
        ..FedConfig::reference_defaults()
    };
    let parts = partition_iid(&train, cfg.clients, cfg.seed)?;
    let run = run_flip(&cfg, &parts, Some(&test))?;
    for r in &run.history {
        println!(
            "round {:>2}  gamma {:.4}  test acc {:.3}",
            r.round + 1,
            r.gamma,
            r.eval_acc.unwrap_or(f64::NAN)
        );
    }
    let bytes: usize = run.messages.iter().map(|m| m.payload_len * 8).sum();
    println!(
        "{} client messages, all of kind {:?}, {bytes} bytes of f64 payload in total",
        run.messages.len(),
        run.messages[0].kind
    );
    let d = run.final_set();
    println!("final set: {} samples, rates {:?}", d.len(), d.lrs());
    Ok(())
}
