//! Test-only oracles. Nothing here calls into the reverse-mode machinery
//! except through plain forward evaluation.
#![allow(dead_code)]

use flip_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Like `random_tensor` but keeps every element at least `gap` away from 0.
pub fn random_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64, gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-scale..scale);
            if v.abs() >= gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn perturbed(inputs: &[Tensor], which: usize, elem: usize, delta: f64) -> Vec<Tensor> {
    let mut out = inputs.to_vec();
    let mut data = out[which].data().to_vec();
    data[elem] += delta;
    out[which] = Tensor::new(out[which].shape().to_vec(), data).unwrap();
    out
}

/// Central finite differences of a scalar function of several tensors.
pub fn central_diff(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let grad = (0..t.numel())
                .map(|e| {
                    let up = f(&perturbed(inputs, i, e, h));
                    let down = f(&perturbed(inputs, i, e, -h));
                    (up - down) / (2.0 * h)
                })
                .collect();
            Tensor::new(t.shape().to_vec(), grad).unwrap()
        })
        .collect()
}

/// Elementwise relative error with a small absolute floor on the
/// denominator, so exact zeros compare sensibly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Raw-batch loss after `K` plain SGD steps on a distilled set given as
/// `[samples, soft_labels, lrs]`, with every step evaluated without a tape
/// recording its gradient. Finite differences of this are the meta-gradient
/// oracle.
pub fn unrolled_raw_loss(
    theta: &flip_core::model::ModelParams,
    d: &[Tensor],
    x: &Tensor,
    target: &Tensor,
) -> f64 {
    let (samples, soft, lrs) = (&d[0], &d[1], &d[2]);
    let mut p = theta.clone();
    for j in 0..lrs.numel() {
        let s = samples.slice_outer(j, j + 1).unwrap();
        let y = soft.slice_outer(j, j + 1).unwrap();
        p = p.sgd_update(&s, &y, lrs.data()[j]).unwrap().0;
    }
    p.loss(x, target).unwrap()
}
