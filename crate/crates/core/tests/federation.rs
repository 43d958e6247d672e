mod common;

use common::{random_tensor, rng};
use flip_core::data::{synth_blobs, RawDataset};
use flip_core::distill::{init_distilled, inner_unroll, local_round, DistilledSet, LocalConfig, OuterRule};
use flip_core::federation::{
    aggregate, average_params, local_sgd, partition_iid, run_fedavg, run_flip, train_final, train_final_observed,
    write_history_csv, FedConfig,
};
use flip_core::model::{ModelParams, ModelSpec};
use flip_core::tensor::{Tape, Tensor};
use flip_core::Error;
use proptest::prelude::*;
use rand::Rng;

fn random_sets(n: usize, seed: u64) -> Vec<DistilledSet> {
    let spec = ModelSpec::mlp([1, 3, 3], 3, 4);
    let base = init_distilled(&spec, 3, 2, 0).unwrap();
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let s = random_tensor(&mut r, base.samples().shape(), 2.0);
            let y = random_tensor(&mut r, base.soft_labels().shape(), 1.0);
            let lrs = (0..base.len()).map(|_| r.random_range(-0.05..0.05)).collect();
            base.with_values(s, y, lrs).unwrap()
        })
        .collect()
}

fn all_values(d: &DistilledSet) -> Vec<f64> {
    let mut v = d.samples().data().to_vec();
    v.extend_from_slice(d.soft_labels().data());
    v.extend_from_slice(d.lrs());
    v
}

#[test]
fn identical_sets_aggregate_exactly() {
    let d = random_sets(1, 3).pop().unwrap();
    let agg = aggregate(&vec![d.clone(); 4]).unwrap();
    assert!(agg.bit_eq(&d));
}

#[test]
fn rates_average() {
    let d = random_sets(1, 4).pop().unwrap();
    let mut a = d.lrs().to_vec();
    let mut b = d.lrs().to_vec();
    a[0] = 0.0;
    b[0] = 0.02;
    let sa = d.with_values(d.samples().clone(), d.soft_labels().clone(), a).unwrap();
    let sb = d.with_values(d.samples().clone(), d.soft_labels().clone(), b).unwrap();
    assert_eq!(aggregate(&[sa, sb]).unwrap().lrs()[0], 0.01);
}

#[test]
fn slot_map_mismatch_is_a_protocol_error() {
    let spec = ModelSpec::mlp([1, 3, 3], 3, 4);
    let a = init_distilled(&spec, 3, 2, 0).unwrap();
    let mut slots = a.slots().to_vec();
    slots.swap(0, 1);
    let b = DistilledSet::new(
        a.input_shape(),
        3,
        2,
        a.samples().clone(),
        a.soft_labels().clone(),
        a.lrs().to_vec(),
        slots,
    )
    .unwrap();
    assert!(matches!(aggregate(&[a, b]), Err(Error::Protocol(_))));
    assert!(matches!(aggregate(&[]), Err(Error::Protocol(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn aggregation_is_linear(seed in 0u64..10_000, a in -4.0f64..4.0) {
        let sets = random_sets(3, seed);
        let scaled: Vec<DistilledSet> = sets
            .iter()
            .map(|d| d.with_values(d.samples().map(|v| a * v), d.soft_labels().map(|v| a * v),
                d.lrs().iter().map(|v| a * v).collect()).unwrap())
            .collect();
        let lhs = all_values(&aggregate(&scaled).unwrap());
        let rhs = all_values(&aggregate(&sets).unwrap());
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!((l - a * r).abs() <= 1e-12);
        }
    }

    #[test]
    fn aggregation_is_permutation_symmetric(seed in 0u64..10_000) {
        let sets = random_sets(5, seed);
        let mut rev = sets.clone();
        rev.reverse();
        rev.swap(1, 3);
        let d = aggregate(&sets).unwrap().max_abs_diff(&aggregate(&rev).unwrap());
        prop_assert!(d <= 1e-12);
    }
}

#[test]
fn train_final_with_zero_rates_is_identity() {
    let theta = ModelSpec::mlp([1, 3, 3], 3, 4).build(1).unwrap();
    let d = random_sets(1, 5).pop().unwrap();
    let d = d.with_values(d.samples().clone(), d.soft_labels().clone(), vec![0.0; d.len()]).unwrap();
    assert!(train_final(&theta, &d).unwrap().bit_eq(&theta));
}

#[test]
fn train_final_takes_exactly_k_steps() {
    let theta = ModelSpec::mlp([1, 3, 3], 3, 4).build(1).unwrap();
    let d = random_sets(1, 6).pop().unwrap();
    let mut steps = Vec::new();
    train_final_observed(&theta, &d, |j| steps.push(j)).unwrap();
    assert_eq!(steps, (0..d.len()).collect::<Vec<_>>());
}

#[test]
fn train_final_matches_inner_unroll_values() {
    for seed in 0..3 {
        let theta = ModelSpec::convnet([1, 8, 8], 3, 4).build(seed).unwrap();
        let d = init_distilled(theta.spec(), 3, 3, seed + 10).unwrap();
        let plain = train_final(&theta, &d).unwrap();
        let mut tape = Tape::new();
        let th = theta.leaves(&mut tape);
        let vars = d.leaves(&mut tape).unwrap();
        let recorded = inner_unroll(&mut tape, theta.spec(), &th, &vars).unwrap();
        for (a, b) in recorded.iter().zip(plain.tensors()) {
            let diff = a.value().data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12, "diff {diff}");
        }
    }
}

#[test]
fn partitions() {
    let data = synth_blobs(25, 4, 2, 1).unwrap();
    let parts = partition_iid(&data, 5, 9).unwrap();
    assert_eq!(parts.iter().map(RawDataset::len).collect::<Vec<_>>(), vec![20; 5]);
    let again = partition_iid(&data, 5, 9).unwrap();
    for (a, b) in parts.iter().zip(&again) {
        assert!(a.inputs().bit_eq(b.inputs()));
    }
    // union equals the original multiset
    let key = |d: &RawDataset| {
        let mut rows: Vec<Vec<u64>> = (0..d.len())
            .map(|i| {
                let mut k: Vec<u64> = d.sample(i).unwrap().data().iter().map(|v| v.to_bits()).collect();
                k.push(d.labels()[i] as u64);
                k
            })
            .collect();
        rows.sort();
        rows
    };
    let union = RawDataset::concat(&parts).unwrap();
    assert_eq!(key(&union), key(&data));
    let uneven = partition_iid(&synth_blobs(11, 2, 2, 1).unwrap(), 5, 0).unwrap();
    assert_eq!(uneven.iter().map(RawDataset::len).collect::<Vec<_>>(), vec![4, 4, 4, 4, 6]);
    assert!(partition_iid(&data, 101, 0).is_err());
}

fn toy_config(clients: usize, rounds: usize) -> FedConfig {
    FedConfig {
        clients,
        rounds,
        k: 1,
        gamma0: 0.05,
        gamma_decay: 0.5,
        gamma_period: 2,
        epochs: 2,
        batch_size: 8,
        model: "mlp-s".into(),
        model_width: Some(6),
        seed: 21,
        fedavg_epochs: 1,
        fedavg_batch_size: 4,
        outer: OuterRule::Sgd,
    }
}

#[test]
fn single_client_single_round_is_one_local_round() {
    let data = synth_blobs(10, 3, 3, 2).unwrap();
    let cfg = toy_config(1, 1);
    let run = run_flip(&cfg, std::slice::from_ref(&data), None).unwrap();
    // rebuild the same inputs by hand: same init, the client's round seed
    let spec = cfg.model_spec(data.sample_shape(), 3).unwrap();
    assert!(run.theta_init.bit_eq(&spec.build(run.theta_init.seed()).unwrap()));
    let d0 = init_distilled(&spec, 3, 1, flip_core::federation::derive_seed(21, &[2])).unwrap();
    let seed = flip_core::federation::derive_seed(21, &[3, 0, 0]);
    let local = LocalConfig {
        epochs: 2,
        batch_size: 8,
        gamma: 0.05,
        rule: OuterRule::Sgd,
    };
    let (expected, _) = local_round(&data, &d0, &run.theta_init, &local, seed, 0).unwrap();
    assert!(run.final_set().bit_eq(&expected));
}

#[test]
fn run_flip_history_messages_and_finals() {
    let data = synth_blobs(12, 3, 3, 3).unwrap();
    let test = synth_blobs(10, 3, 3, 4).unwrap();
    let cfg = toy_config(3, 4);
    let parts = partition_iid(&data, 3, 0).unwrap();
    let run = run_flip(&cfg, &parts, Some(&test)).unwrap();
    assert_eq!(run.history.len(), 4);
    let gammas: Vec<f64> = run.history.iter().map(|r| r.gamma).collect();
    assert_eq!(gammas, vec![0.05, 0.05, 0.025, 0.025]);
    assert!(run.history.iter().all(|r| r.eval_acc.is_some_and(|a| (0.0..=1.0).contains(&a))));
    // the only client-to-server traffic is distilled data
    assert_eq!(run.messages.len(), 3 * 4);
    let k = run.final_set().len();
    let expected_len = k * (9 + 3 + 1);
    for (i, m) in run.messages.iter().enumerate() {
        assert_eq!(m.kind, "distilled");
        assert_eq!((m.round, m.client), (i / 3, i % 3));
        assert_eq!(m.payload_len, expected_len);
    }
    assert!(run.finals.iter().all(|f| f.bit_eq(&run.finals[0])));
    assert!(run.finals[0].bit_eq(&run.history[3].model));
    // thread count does not change results
    std::env::set_var("FLIP_THREADS", "1");
    let serial = run_flip(&cfg, &parts, None).unwrap();
    std::env::remove_var("FLIP_THREADS");
    assert!(serial.final_set().bit_eq(run.final_set()));
}

#[test]
fn fedavg_single_client_is_centralized_sgd() {
    let data = synth_blobs(10, 2, 3, 5).unwrap();
    let cfg = toy_config(1, 3);
    let (model, history) = run_fedavg(&cfg, std::slice::from_ref(&data), None).unwrap();
    let spec = cfg.model_spec(data.sample_shape(), 2).unwrap();
    let mut theta = spec.build(flip_core::federation::derive_seed(21, &[1])).unwrap();
    for t in 0..3 {
        let seed = flip_core::federation::derive_seed(21, &[3, t, 0]);
        theta = local_sgd(&theta, &data, 1, 4, cfg.gamma(t as usize), seed).unwrap();
    }
    assert!(model.bit_eq(&theta));
    assert_eq!(history.len(), 3);
    assert!(history[2].model.bit_eq(&model));
}

#[test]
fn averaging_identical_models_is_exact() {
    let m = ModelSpec::mlp([1, 2, 2], 2, 3).build(4).unwrap();
    assert!(average_params(&[m.clone(), m.clone(), m.clone()]).unwrap().bit_eq(&m));
    let zeros: Vec<Tensor> = m.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let z = m.with_tensors(zeros).unwrap();
    let half = average_params(&[m.clone(), z]).unwrap();
    for (h, t) in half.tensors().iter().zip(m.tensors()) {
        assert!(h.data().iter().zip(t.data()).all(|(a, b)| *a == b / 2.0));
    }
    let _: &ModelParams = &half;
}

#[test]
fn history_csv_columns() {
    let data = synth_blobs(6, 2, 2, 5).unwrap();
    let (_, history) = run_fedavg(&toy_config(1, 2), std::slice::from_ref(&data), Some(&data)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &history).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,gamma,eval_acc,seconds");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,0.05,"));
    assert_eq!(lines[2].split(',').count(), 4);
}
