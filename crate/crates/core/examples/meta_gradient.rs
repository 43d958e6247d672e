//! One meta-gradient: differentiate the raw-data loss through K unrolled
//! SGD steps on the distilled samples, and compare a rate's gradient with a
//! central difference.
//!
//! ```text
//! cargo run --release --example meta_gradient
//! ```

use flip_core::data::synth_blobs;
use flip_core::distill::{init_distilled, meta_gradient};
use flip_core::model::ModelSpec;

fn main() -> flip_core::Result<()> {
    let raw = synth_blobs(8, 2, 4, 0)?;
    let rows: Vec<usize> = (0..raw.len()).collect();
    let (x, y) = raw.batch(&rows)?;
    let spec = ModelSpec::mlp([1, 4, 4], 2, 8);
    let theta = spec.build(1)?;
    let d = init_distilled(&spec, 2, 2, 2)?;
    let d = d.with_values(d.samples().clone(), d.soft_labels().clone(), vec![0.1, 0.2, 0.05, 0.15])?;
    let (loss, grads) = meta_gradient(&spec, &theta, &d, &x, &y)?;
    println!("raw loss after {} steps: {loss:.6}", d.len());
    println!("dL/deta = {:?}", grads.lrs());

    let h = 1e-5;
    let at = |eta0: f64| -> flip_core::Result<f64> {
        let mut lrs = d.lrs().to_vec();
        lrs[0] = eta0;
        let shifted = d.with_values(d.samples().clone(), d.soft_labels().clone(), lrs)?;
        Ok(meta_gradient(&spec, &theta, &shifted, &x, &y)?.0)
    };
    let fd = (at(d.lrs()[0] + h)? - at(d.lrs()[0] - h)?) / (2.0 * h);
    println!("central difference for eta_0: {fd:.8} (autodiff {:.8})", grads.lrs()[0]);
    Ok(())
}
