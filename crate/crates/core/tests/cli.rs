use std::path::Path;

use flip_core::cli::{self, distilled_path, export_samples, ExperimentConfig};
use flip_core::data::{DatasetId, DatasetName, Normalization};
use flip_core::distill::{init_distilled, read_checkpoint, Checkpoint};
use flip_core::model::ModelSpec;
use serde_json::{json, Value};

fn toy_config(out: &Path) -> Value {
    json!({
        "dataset": {"name": "synth-blobs", "classes": [0, 1, 2], "synth_size": 30, "seed": 4},
        "fed": {
            "clients": 2, "rounds": 3, "k": 2, "gamma0": 0.01, "gamma_decay": 0.5, "gamma_period": 2,
            "epochs": 1, "batch_size": 16, "model": "mlp-s", "model_width": 8, "seed": 7
        },
        "out": out,
        "probe_rounds": [1, 3]
    })
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn flip(args: &[&str]) -> i32 {
    cli::run(std::iter::once("flip").chain(args.iter().copied()))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn train_writes_history_checkpoints_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), "c.json", &toy_config(&out));
    assert_eq!(flip(&["train", "--config", &config]), 0);
    let summary = read_json(&out.join("summary.json"));
    assert!(summary["final_acc"].as_f64().is_some_and(|a| (0.0..=1.0).contains(&a)));
    assert_eq!(summary["mode"], "flip");
    assert_eq!(summary["probe_rounds"], json!([1, 3]));
    assert_eq!(summary["round_accs"].as_array().unwrap().len(), 3);
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4);
    for r in [1, 3] {
        let ck = read_checkpoint(&distilled_path(&out, r)).unwrap();
        assert_eq!(ck.set.len(), 6);
        assert!(ck.normalization.is_some());
    }
    assert!(!distilled_path(&out, 2).exists());

    // rerun: byte-identical summary
    let first = std::fs::read(out.join("summary.json")).unwrap();
    assert_eq!(flip(&["train", "--config", &config]), 0);
    assert_eq!(std::fs::read(out.join("summary.json")).unwrap(), first);

    // eval of the last checkpoint reproduces the final accuracy
    let ck = distilled_path(&out, 3);
    let cfg = ExperimentConfig::from_json(&std::fs::read_to_string(&config).unwrap()).unwrap();
    let report = cli::eval(&cfg, &ck).unwrap();
    assert_eq!(report.accuracy, summary["final_acc"].as_f64().unwrap());
}

#[test]
fn mode_and_seed_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fedavg");
    let config = write_config(dir.path(), "c.json", &toy_config(&out));
    let out_arg = out.to_str().unwrap();
    assert_eq!(flip(&["train", "--config", &config, "--mode", "fedavg", "--seed", "3", "--out", out_arg]), 0);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["mode"], "fedavg");
    assert_eq!(summary["config"]["fed"]["seed"], 3);
    assert!(cli::model_path(&out, 1).is_file());
    assert!(cli::model_path(&out, 3).is_file());
    assert!(!distilled_path(&out, 1).exists());
}

#[test]
fn config_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = toy_config(&dir.path().join("x"));
    cfg["fed"]["surprise"] = json!(1);
    let config = write_config(dir.path(), "unknown.json", &cfg);
    assert_eq!(flip(&["train", "--config", &config]), 1);
    let mut cfg = toy_config(&dir.path().join("x"));
    cfg["probe_rounds"] = json!([4]);
    let config = write_config(dir.path(), "late.json", &cfg);
    assert_eq!(flip(&["train", "--config", &config]), 1);
    assert_eq!(flip(&["train", "--config", "/nonexistent/config.json"]), 1);
    assert_eq!(flip(&["bogus"]), 1);
}

#[test]
fn runtime_errors_exit_with_2_and_leave_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("diverge");
    let mut cfg = toy_config(&out);
    cfg["fed"]["gamma0"] = json!(1e200);
    let config = write_config(dir.path(), "c.json", &cfg);
    assert_eq!(flip(&["train", "--config", &config]), 2);
    let diag = std::fs::read_to_string(out.join("diagnostics.txt")).unwrap();
    assert!(diag.contains("non-finite"), "{diag}");
}

#[test]
fn air_attack_on_synth_attr() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("air");
    let mut cfg = toy_config(&out);
    cfg["attack"] = json!({"air": {"source": {"kind": "synth-attr", "n_per_cell": 6, "test_per_cell": 4},
        "psi": {"model": "mlp-s", "width": 8, "epochs": 5, "batch_size": 8, "lr": 0.05, "seed": 1}}});
    let config = write_config(dir.path(), "c.json", &cfg);
    assert_eq!(flip(&["attack", "--kind", "air", "--config", &config]), 0);
    let report = read_json(&out.join("attack_air.json"));
    assert_eq!(report["attack"], "air");
    assert!(report["attack_acc"].as_f64().is_some_and(|a| (0.0..=1.0).contains(&a)));
    assert_eq!(report["task_accs"].as_array().unwrap().len(), 4);
    assert_eq!(report["rounds"], json!([1, 2, 3]));
}

#[test]
fn mia_attack_with_two_shadows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mia");
    let mut cfg = toy_config(&out);
    cfg["attack"] = json!({"mia": {
        "shadow_pool": {"name": "synth-blobs", "classes": [0, 1, 2], "synth_size": 40, "seed": 99},
        "shadows": 2, "shadow_size": 20, "queries": 15,
        "stumps": {"iterations": 200, "learning_rate": 0.03, "borders": 32, "l2": 3.0}
    }});
    let config = write_config(dir.path(), "c.json", &cfg);
    // no target artifacts yet
    let parsed = ExperimentConfig::from_json(&std::fs::read_to_string(&config).unwrap()).unwrap();
    let err = cli::attack_mia(&parsed).unwrap_err().to_string();
    assert!(err.contains("distilled_round001.flipds"), "{err}");
    assert_eq!(flip(&["attack", "--kind", "mia", "--config", &config]), 1);

    assert_eq!(flip(&["train", "--config", &config]), 0);
    assert_eq!(flip(&["attack", "--kind", "mia", "--config", &config]), 0);
    let report = read_json(&out.join("attack_mia.json"));
    assert_eq!(report["attack"], "mia");
    assert_eq!(report["rounds"], json!([1, 3]));
    assert_eq!(report["round_accs"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["query_set"], json!({"members": 15, "non_members": 15}));
    assert!(report["attack_acc"].as_f64().is_some_and(|a| (0.0..=1.0).contains(&a)));
}

#[test]
fn mia_probe_defaults_are_echoed() {
    let mut cfg = ExperimentConfig::reference_defaults(DatasetId::named(DatasetName::Mnist));
    assert_eq!(cfg.echo()["probe_rounds"], json!([1, 25, 50, 75, 100]));
    cfg.probe_rounds = None;
    cfg.fed.rounds = 30;
    assert_eq!(cfg.probe_rounds(), vec![1, 25]);
    cfg.fed.rounds = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn export_writes_images_and_ranked_labels() {
    let spec = ModelSpec::mlp([1, 5, 4], 10, 4);
    let set = init_distilled(&spec, 10, 10, 3).unwrap();
    let norm = Normalization::mnist();
    let dir = tempfile::tempdir().unwrap();
    let n = export_samples(
        &Checkpoint {
            set: set.clone(),
            normalization: Some(norm.clone()),
        },
        dir.path(),
    )
    .unwrap();
    assert_eq!(n, 100);
    let csv = std::fs::read_to_string(dir.path().join("soft_labels.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 100);
    for row in &rows {
        let f: Vec<&str> = row.split(',').collect();
        let scores: Vec<f64> = [3, 5, 7].iter().map(|&i| f[i].parse().unwrap()).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]), "{row}");
    }
    // PGM pixels are the de-normalized samples within quantization error
    for j in [0, 57, 99] {
        let bytes = std::fs::read(dir.path().join(format!("sample_{j:03}.pgm"))).unwrap();
        let header = b"P5\n4 5\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        let mut expected = set.sample(j).unwrap().data().to_vec();
        norm.invert(&mut expected, 20);
        for (b, e) in bytes[header.len()..].iter().zip(&expected) {
            let e = e.clamp(0.0, 1.0);
            assert!((f64::from(*b) / 255.0 - e).abs() <= 1.0 / 255.0);
        }
    }
}

#[test]
fn export_samples_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let config = write_config(dir.path(), "c.json", &toy_config(&out));
    assert_eq!(flip(&["train", "--config", &config]), 0);
    let ck = distilled_path(&out, 3);
    let images = dir.path().join("images");
    assert_eq!(
        flip(&["export-samples", "--checkpoint", ck.to_str().unwrap(), "--out", images.to_str().unwrap()]),
        0
    );
    let pgms = std::fs::read_dir(&images)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm"))
        .count();
    assert_eq!(pgms, 6);
    assert_eq!(flip(&["export-samples", "--checkpoint", "/nonexistent.flipds", "--out", "/tmp/x"]), 1);
}

#[test]
fn binary_reports_usage_errors() {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_flip"))
        .args(["train"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_flip")).arg("--help").output().unwrap();
    assert_eq!(status.status.code(), Some(0));
}
