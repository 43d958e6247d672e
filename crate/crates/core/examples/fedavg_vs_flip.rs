//! FedAvg and FLiP side by side on the same client partitions.
//!
//! ```text
//! cargo run --release --example fedavg_vs_flip
//! ```

use flip_core::data::synth_blobs;
use flip_core::distill::OuterRule;
use flip_core::federation::{partition_iid, run_fedavg, run_flip, FedConfig};

fn main() -> flip_core::Result<()> {
    let train = synth_blobs(80, 3, 6, 11)?;
    let test = synth_blobs(40, 3, 6, 12)?;
    let cfg = FedConfig {
        clients: 4,
        rounds: 8,
        k: 2,
        gamma_period: 4,
        epochs: 3,
        batch_size: 32,
        model: "mlp-s".into(),
        model_width: Some(32),
        outer: OuterRule::adam_scaled(0.1),
        ..FedConfig::reference_defaults()
    };
    let parts = partition_iid(&train, cfg.clients, cfg.seed)?;
    let flip = run_flip(&cfg, &parts, Some(&test))?;
    let fedavg_cfg = FedConfig { gamma0: 0.1, ..cfg.clone() };
    let (_, fedavg) = run_fedavg(&fedavg_cfg, &parts, Some(&test))?;
    println!("round  flip    fedavg");
    for (a, b) in flip.history.iter().zip(&fedavg) {
        println!("{:>5}  {:.3}   {:.3}", a.round + 1, a.eval_acc.unwrap_or(f64::NAN), b.eval_acc.unwrap_or(f64::NAN));
    }
    let shared_flip: usize = flip.messages.iter().map(|m| m.payload_len).sum();
    let model_len = flip.theta_init.num_params();
    println!(
        "values sent per round: flip {} vs fedavg {}",
        shared_flip / cfg.rounds,
        model_len * cfg.clients
    );
    Ok(())
}
