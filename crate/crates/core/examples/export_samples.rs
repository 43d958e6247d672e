//! Distils synth-attr with a single client, writes the distilled set as a
//! checkpoint, and exports it as PGM images with the top soft labels.
//!
//! ```text
//! cargo run --release --example export_samples -- /tmp/flip_export
//! ```

use std::path::PathBuf;

use flip_core::cli::export_samples;
use flip_core::data::synth_attr;
use flip_core::distill::{read_checkpoint, write_checkpoint, OuterRule};
use flip_core::federation::{run_flip, FedConfig};

fn main() -> flip_core::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("flip_export"), PathBuf::from);
    let data = synth_attr(50, 7)?.data;
    let cfg = FedConfig {
        clients: 1,
        rounds: 5,
        k: 4,
        gamma_period: 5,
        epochs: 10,
        batch_size: 50,
        model: "convnet".into(),
        model_width: Some(8),
        outer: OuterRule::adam_scaled(0.1),
        ..FedConfig::reference_defaults()
    };
    let run = run_flip(&cfg, std::slice::from_ref(&data), None)?;
    std::fs::create_dir_all(&out).map_err(|e| flip_core::Error::Config(e.to_string()))?;
    let path = out.join("final.flipds");
    write_checkpoint(&path, run.final_set(), Some(data.normalization()))?;
    let n = export_samples(&read_checkpoint(&path)?, &out)?;
    println!("wrote {n} images and soft_labels.csv to {}", out.display());
    print!("{}", std::fs::read_to_string(out.join("soft_labels.csv")).unwrap_or_default());
    Ok(())
}
