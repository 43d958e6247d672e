mod common;

use common::{central_diff, max_rel_err, random_tensor, rng, unrolled_raw_loss};
use flip_core::data::{one_hot, Normalization, RawDataset};
use flip_core::distill::{init_distilled, inner_unroll, local_round, meta_gradient, LocalConfig, OuterRule};
use flip_core::model::{ModelParams, ModelSpec};
use flip_core::tensor::{Tape, Tensor};
use flip_core::Error;
use rand::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn tiny_mlp(seed: u64) -> ModelParams {
    ModelSpec::mlp([1, 2, 2], 2, 4).build(seed).unwrap()
}

#[test]
fn init_sizes_and_determinism() {
    let spec = ModelSpec::convnet([1, 28, 28], 10, 8);
    let d = init_distilled(&spec, 10, 10, 3).unwrap();
    assert_eq!(d.len(), 100);
    assert_eq!(d.samples().shape(), &[100, 1, 28, 28]);
    let mut counts = [0; 10];
    for s in d.slots() {
        counts[s.class] += 1;
    }
    assert_eq!(counts, [10; 10]);
    for (j, s) in d.slots().iter().enumerate() {
        let row = &d.soft_labels().data()[j * 10..(j + 1) * 10];
        assert_eq!(row[s.class], 1.0);
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }
    assert!(d.lrs().iter().all(|&v| v == 0.01));
    assert!(d.bit_eq(&init_distilled(&spec, 10, 10, 3).unwrap()));
    assert!(!d.bit_eq(&init_distilled(&spec, 10, 10, 4).unwrap()));
    assert!(matches!(init_distilled(&spec, 10, 0, 3), Err(Error::Config(_))));
}

#[test]
fn zero_rates_leave_theta_unchanged() {
    let theta = tiny_mlp(1);
    let d = init_distilled(theta.spec(), 2, 3, 2).unwrap();
    let d = d
        .with_values(d.samples().clone(), d.soft_labels().clone(), vec![0.0; 6])
        .unwrap();
    let mut tape = Tape::new();
    let th = theta.leaves(&mut tape);
    let vars = d.leaves(&mut tape).unwrap();
    let out = inner_unroll(&mut tape, theta.spec(), &th, &vars).unwrap();
    for (a, b) in out.iter().zip(theta.tensors()) {
        assert!(a.value().bit_eq(b));
    }
}

#[test]
fn single_step_matches_sgd_step() {
    // one inner step equals one recorded sgd_step on the sample's loss
    let theta = tiny_mlp(5);
    let d = init_distilled(theta.spec(), 2, 1, 9).unwrap();
    let d = d.with_values(d.samples().clone(), d.soft_labels().clone(), vec![0.3, 0.0]).unwrap();
    let (updated, _) = theta.sgd_update(&d.sample(0).unwrap(), &d.soft_label(0).unwrap(), 0.3).unwrap();
    let mut tape = Tape::new();
    let th = theta.leaves(&mut tape);
    let vars = d.leaves(&mut tape).unwrap();
    let out = inner_unroll(&mut tape, theta.spec(), &th, &vars).unwrap();
    for (a, b) in out.iter().zip(updated.tensors()) {
        assert!(a.value().data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-15));
    }
}

#[test]
fn meta_gradient_of_one_rate_matches_finite_differences() {
    let mut r = rng(11);
    let theta = tiny_mlp(3);
    let d = init_distilled(theta.spec(), 2, 2, 4).unwrap();
    let d = d.with_values(d.samples().clone(), d.soft_labels().clone(), vec![0.2, 0.1, 0.3, 0.15]).unwrap();
    let x = random_tensor(&mut r, &[6, 1, 2, 2], 1.5);
    let y = one_hot([0, 1, 1, 0, 1, 0].into_iter(), 6, 2);
    let (_, g) = meta_gradient(theta.spec(), &theta, &d, &x, &y).unwrap();
    let inputs = [d.samples().clone(), d.soft_labels().clone(), t(&[4], d.lrs())];
    let fd = central_diff(&|v| unrolled_raw_loss(&theta, v, &x, &y), &inputs, 1e-4);
    let ad = t(&[4], g.lrs());
    assert!(max_rel_err(&ad, &fd[2]) <= 1e-4, "ad {ad:?} fd {:?}", fd[2]);
    // every rate is live in the graph
    assert!(g.lrs().iter().all(|v| v.abs() > 0.0));
}

/// Closed-form two-pass arithmetic for a linear model on scalar inputs:
/// logits `z = w x + b`, one distilled sample `(s, y, eta)`.
struct ScalarOracle {
    w: [f64; 2],
    b: [f64; 2],
}

fn softmax2(z: [f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp()];
    [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])]
}

impl ScalarOracle {
    /// Returns the gradient of the raw loss w.r.t. (s, y, eta).
    fn grads(&self, s: f64, y: [f64; 2], eta: f64, raw: &[(f64, usize)]) -> (f64, [f64; 2], f64) {
        let z = [self.w[0] * s + self.b[0], self.w[1] * s + self.b[1]];
        let p = softmax2(z);
        let sigma = y[0] + y[1];
        let gz = [sigma * p[0] - y[0], sigma * p[1] - y[1]];
        let w2 = [self.w[0] - eta * gz[0] * s, self.w[1] - eta * gz[1] * s];
        let b2 = [self.b[0] - eta * gz[0], self.b[1] - eta * gz[1]];
        let (mut gw, mut gb) = ([0.0; 2], [0.0; 2]);
        for &(x, label) in raw {
            let q = softmax2([w2[0] * x + b2[0], w2[1] * x + b2[1]]);
            for c in 0..2 {
                let r = q[c] - if c == label { 1.0 } else { 0.0 };
                gw[c] += r * x / raw.len() as f64;
                gb[c] += r / raw.len() as f64;
            }
        }
        let a = [gw[0] * s + gb[0], gw[1] * s + gb[1]];
        let d_eta = -(gz[0] * a[0] + gz[1] * a[1]);
        // dgz_c/ds = sigma * sum_d (p_c delta_cd - p_c p_d) w_d
        let pw = p[0] * self.w[0] + p[1] * self.w[1];
        let dgz_ds = [sigma * p[0] * (self.w[0] - pw), sigma * p[1] * (self.w[1] - pw)];
        let d_s = -eta * (gw[0] * gz[0] + gw[1] * gz[1]) - eta * (a[0] * dgz_ds[0] + a[1] * dgz_ds[1]);
        let ap = a[0] * p[0] + a[1] * p[1];
        let d_y = [-eta * (ap - a[0]), -eta * (ap - a[1])];
        (d_s, d_y, d_eta)
    }
}

#[test]
fn one_batch_one_step_matches_hand_arithmetic() {
    let spec = ModelSpec {
        name: "linear".into(),
        input_shape: [1, 1, 1],
        classes: 2,
        layers: vec![flip_core::model::Layer::Flatten, flip_core::model::Layer::Dense { out: 2 }],
    };
    let (w, b) = ([0.7, -0.4], [0.1, 0.25]);
    let theta = ModelParams::from_tensors(spec.clone(), 0, vec![t(&[2, 1], &w), t(&[2], &b)]).unwrap();
    let raw = [(0.5, 0usize), (-1.2, 1), (2.0, 0), (0.3, 1)];
    let dataset = RawDataset::new(
        t(&[4, 1, 1, 1], &raw.iter().map(|r| r.0).collect::<Vec<_>>()),
        raw.iter().map(|r| r.1).collect(),
        2,
        Normalization::identity(1),
    )
    .unwrap();
    // K = 1 needs C = 1, so use k = 1, C = 2 and silence slot 1 with eta = 0.
    let d = init_distilled(&spec, 2, 1, 0).unwrap();
    let (s, y, eta) = (0.8, [0.9, 0.35], 0.6);
    let d = d.with_values(t(&[2, 1, 1, 1], &[s, 0.0]), t(&[2, 2], &[y[0], y[1], 0.0, 1.0]), vec![eta, 0.0]).unwrap();
    let gamma = 0.05;
    let cfg = LocalConfig {
        epochs: 1,
        batch_size: 4,
        gamma,
        rule: OuterRule::Sgd,
    };
    let (out, log) = local_round(&dataset, &d, &theta, &cfg, 1, 0).unwrap();
    assert_eq!(log.losses.len(), 1);
    let (ds, dy, de) = ScalarOracle { w, b }.grads(s, y, eta, &raw);
    let close = |a: f64, b: f64| assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    close(out.samples().data()[0], s - gamma * ds);
    close(out.soft_labels().data()[0], y[0] - gamma * dy[0]);
    close(out.soft_labels().data()[1], y[1] - gamma * dy[1]);
    close(out.lrs()[0], eta - gamma * de);
}

fn separable_toy(n_per_class: usize, seed: u64) -> RawDataset {
    let mut r = rng(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * n_per_class {
        let c = i % 2;
        let sign = if c == 0 { -1.0 } else { 1.0 };
        data.extend((0..4).map(|_| sign + r.random_range(-0.3..0.3)));
        labels.push(c);
    }
    RawDataset::new(t(&[2 * n_per_class, 1, 2, 2], &data), labels, 2, Normalization::identity(1)).unwrap()
}

#[test]
fn zero_gamma_is_identity() {
    let raw = separable_toy(10, 1);
    let theta = tiny_mlp(2);
    let d = init_distilled(theta.spec(), 2, 2, 3).unwrap();
    let cfg = LocalConfig {
        epochs: 2,
        batch_size: 6,
        gamma: 0.0,
        rule: OuterRule::Sgd,
    };
    let (out, _) = local_round(&raw, &d, &theta, &cfg, 4, 0).unwrap();
    assert!(out.bit_eq(&d));
}

#[test]
fn adam_rate_scale_controls_rate_steps() {
    let raw = separable_toy(10, 1);
    let theta = tiny_mlp(2);
    let d = init_distilled(theta.spec(), 2, 2, 3).unwrap();
    let run = |rule| {
        let cfg = LocalConfig {
            epochs: 1,
            batch_size: 20,
            gamma: 0.01,
            rule,
        };
        local_round(&raw, &d, &theta, &cfg, 1, 0).unwrap().0
    };
    let frozen = run(OuterRule::adam_scaled(0.0));
    assert_eq!(frozen.lrs(), d.lrs());
    assert_ne!(frozen.samples().data(), d.samples().data());
    // first Adam step moves every coordinate by gamma * scale
    let half = run(OuterRule::adam_scaled(0.5));
    for (a, b) in half.lrs().iter().zip(d.lrs()) {
        assert!(((a - b).abs() - 0.005).abs() < 1e-9, "{a} {b}");
    }
    assert_eq!(half.samples().data(), frozen.samples().data());
    assert!(OuterRule::adam_scaled(-1.0).validate().is_err());
}

#[test]
fn raw_loss_decreases_over_thirty_epochs() {
    let raw = separable_toy(20, 2);
    let theta = tiny_mlp(6);
    let d = init_distilled(theta.spec(), 2, 1, 7).unwrap();
    let cfg = LocalConfig {
        epochs: 30,
        batch_size: 10,
        gamma: 0.1,
        rule: OuterRule::Sgd,
    };
    let (out, log) = local_round(&raw, &d, &theta, &cfg, 8, 0).unwrap();
    let per_epoch = log.losses.len() / 30;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let first = mean(&log.losses[..per_epoch]);
    let last = mean(&log.losses[log.losses.len() - per_epoch..]);
    assert!(last < first, "first {first} last {last}");
    // shape preservation
    assert_eq!(out.slots(), d.slots());
    assert_eq!(out.samples().shape(), d.samples().shape());
    // no raw sample appears verbatim
    for i in 0..raw.len() {
        let x = raw.sample(i).unwrap();
        for j in 0..out.len() {
            assert!(!out.sample(j).unwrap().bit_eq(&x));
        }
    }
}

#[test]
fn round_is_seeded() {
    let raw = separable_toy(8, 3);
    let theta = tiny_mlp(1);
    let d = init_distilled(theta.spec(), 2, 1, 1).unwrap();
    let cfg = LocalConfig {
        epochs: 2,
        batch_size: 5,
        gamma: 0.05,
        rule: OuterRule::Sgd,
    };
    let a = local_round(&raw, &d, &theta, &cfg, 10, 0).unwrap().0;
    let b = local_round(&raw, &d, &theta, &cfg, 10, 0).unwrap().0;
    let c = local_round(&raw, &d, &theta, &cfg, 11, 0).unwrap().0;
    assert!(a.bit_eq(&b));
    assert!(!a.bit_eq(&c));
}

#[test]
fn divergence_reports_its_position() {
    let raw = separable_toy(4, 1);
    let theta = tiny_mlp(1);
    let d = init_distilled(theta.spec(), 2, 1, 1).unwrap();
    let huge = d.with_values(d.samples().map(|v| v * 1e300), d.soft_labels().clone(), vec![1e300; 2]).unwrap();
    let cfg = LocalConfig {
        epochs: 1,
        batch_size: 8,
        gamma: 0.1,
        rule: OuterRule::Sgd,
    };
    match local_round(&raw, &huge, &theta, &cfg, 0, 7) {
        Err(Error::Diverged { round, epoch, batch }) => assert_eq!((round, epoch, batch), (7, 0, 0)),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn class_count_mismatch_is_rejected() {
    let raw = separable_toy(4, 1);
    let spec = ModelSpec::mlp([1, 2, 2], 3, 4);
    let theta = spec.build(0).unwrap();
    let d = init_distilled(&spec, 3, 1, 1).unwrap();
    let cfg = LocalConfig {
        epochs: 1,
        batch_size: 8,
        gamma: 0.1,
        rule: OuterRule::Sgd,
    };
    assert!(matches!(local_round(&raw, &d, &theta, &cfg, 0, 0), Err(Error::Config(_))));
}
