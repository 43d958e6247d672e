//! FLiP on an MNIST subset (digits 0-4): five clients share only distilled
//! data, and the final model is trained from the 25 aggregated samples.
//!
//! ```text
//! cargo run --release --example flip_mnist -- data/mnist
//! ```

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::path::PathBuf;

use flip_core::data::{load, DatasetId, DatasetName};
use flip_core::distill::OuterRule;
use flip_core::federation::{partition_iid, run_flip, FedConfig};

fn main() -> flip_core::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::args().nth(1).map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from);
    let id = DatasetId {
        root: Some(root),
        classes: Some(vec![0, 1, 2, 3, 4]),
        train_per_class: Some(1000),
        test_per_class: Some(500),
        ..DatasetId::named(DatasetName::Mnist)
    };
    let (train, test) = load(&id)?;
    let cfg = FedConfig {
        rounds: 20,
        k: 5,
        gamma_period: 8,
        epochs: 5,
        batch_size: 256,
        model_width: Some(32),
        outer: OuterRule::adam_scaled(0.1),
        ..FedConfig::reference_defaults()
    };
    let parts = partition_iid(&train, cfg.clients, cfg.seed)?;
    let run = run_flip(&cfg, &parts, Some(&test))?;
    let acc = run.finals[0].accuracy(&test)?;
    println!("final test accuracy with {} distilled samples: {acc:.4}", run.final_set().len());
    Ok(())
}
