//! The `flip` experiment driver.
//!
//! Everything a run needs lives in one JSON [`ExperimentConfig`]. Exit codes:
//! 0 on success, 1 for configuration problems or missing artifacts, 2 for
//! failures during compute (a `diagnostics.txt` is left in the output
//! directory).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attacks::{
    attribute_inference_on, class_air_tasks, membership_inference, synth_air_tasks, AttackReport, ClassifierConfig,
    MiaConfig, Pipeline, ShadowEnsemble, StumpConfig,
};
use crate::data::{load, DatasetId, Normalization, RawDataset};
use crate::distill::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::federation::{
    initial_model, partition_iid, run_fedavg, run_flip, train_final, write_history_csv, FedConfig, TrainMode,
};
use crate::model::ModelParams;

/// Rounds probed when the config names none.
pub const DEFAULT_PROBE_ROUNDS: [usize; 5] = [1, 25, 50, 75, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetId,
    pub fed: FedConfig,
    #[serde(default)]
    pub mode: TrainMode,
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// 1-based rounds at which artifacts are written and attacked. Defaults
    /// to those of [`DEFAULT_PROBE_ROUNDS`] within the run.
    #[serde(default)]
    pub probe_rounds: Option<Vec<usize>>,
    #[serde(default)]
    pub attack: AttackSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default)]
    pub air: Option<AirSection>,
    #[serde(default)]
    pub mia: Option<MiaSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AirSource {
    /// Four classes `[p1, p2, s1, s2]` of the configured dataset.
    Dataset { classes: [usize; 4] },
    /// Shape tasks over synth-attr, with texture as the hidden attribute.
    SynthAttr { n_per_cell: usize, test_per_cell: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AirSection {
    pub source: AirSource,
    /// Collected rounds; `None` collects every round.
    #[serde(default)]
    pub rounds: Option<Vec<usize>>,
    #[serde(default)]
    pub psi: ClassifierConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiaSection {
    /// Output directory of the target's `train` run; defaults to `out`.
    #[serde(default)]
    pub target: Option<PathBuf>,
    /// Attacker-held data, disjoint from the target's training split.
    pub shadow_pool: DatasetId,
    pub shadows: usize,
    pub shadow_size: usize,
    pub queries: usize,
    #[serde(default)]
    pub stumps: StumpConfig,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Full-scale hyperparameters on `dataset`.
    pub fn reference_defaults(dataset: DatasetId) -> Self {
        ExperimentConfig {
            dataset,
            fed: FedConfig::reference_defaults(),
            mode: TrainMode::Flip,
            out: None,
            probe_rounds: Some(DEFAULT_PROBE_ROUNDS.to_vec()),
            attack: AttackSection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn probe_rounds(&self) -> Vec<usize> {
        match &self.probe_rounds {
            Some(r) => r.clone(),
            None => {
                let r: Vec<usize> = DEFAULT_PROBE_ROUNDS.into_iter().filter(|&r| r <= self.fed.rounds).collect();
                if r.is_empty() {
                    vec![self.fed.rounds]
                } else {
                    r
                }
            }
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.fed.validate()?;
        let probes = self.probe_rounds();
        if probes.is_empty() || probes.iter().any(|&r| r == 0 || r > self.fed.rounds) {
            return Err(Error::Config(format!(
                "probe rounds {probes:?} must be non-empty and within 1..={}",
                self.fed.rounds
            )));
        }
        if let Some(mia) = &self.attack.mia {
            self.mia_config(mia).validate(self.fed.rounds)?;
        }
        Ok(())
    }

    /// The config with defaults filled in, as echoed into reports.
    pub fn echo(&self) -> serde_json::Value {
        let mut resolved = self.clone();
        resolved.probe_rounds = Some(self.probe_rounds());
        serde_json::to_value(resolved).expect("config serializes")
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("no output directory: set `out` or pass --out".into()))
    }

    fn mia_config(&self, mia: &MiaSection) -> MiaConfig {
        MiaConfig {
            shadows: mia.shadows,
            shadow_size: mia.shadow_size,
            queries: mia.queries,
            probe_rounds: self.probe_rounds(),
            stumps: mia.stumps.clone(),
            seed: mia.seed,
        }
    }
}

pub fn distilled_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("distilled_round{round:03}.flipds"))
}

pub fn model_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("model_round{round:03}.json"))
}

/// Deterministic outcome of `train`; no timings, so reruns are
/// byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: TrainMode,
    pub final_acc: f64,
    pub round_accs: Vec<f64>,
    pub probe_rounds: Vec<usize>,
    pub config: serde_json::Value,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Runs FLiP or FedAvg as configured and writes `history.csv`, per-probe
/// artifacts and `summary.json` into the output directory.
pub fn train(cfg: &ExperimentConfig) -> Result<Summary> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let (train, test) = load(&cfg.dataset)?;
    let parts = partition_iid(&train, cfg.fed.clients, cfg.fed.seed)?;
    create_dir(out)?;
    let probes = cfg.probe_rounds();
    let (final_model, history) = match cfg.mode {
        TrainMode::Flip => {
            let run = run_flip(&cfg.fed, &parts, Some(&test))?;
            let norm = train.normalization();
            for &r in &probes {
                let set = run.history[r - 1].distilled.as_ref().expect("FLiP rounds carry distilled sets");
                write_checkpoint(&distilled_path(out, r), set, Some(norm))?;
            }
            (run.finals[0].clone(), run.history)
        }
        TrainMode::Fedavg => {
            let (model, history) = run_fedavg(&cfg.fed, &parts, Some(&test))?;
            for &r in &probes {
                history[r - 1].model.write_json(&model_path(out, r))?;
            }
            (model, history)
        }
    };
    write_history_csv(&out.join("history.csv"), &history)?;
    let summary = Summary {
        mode: cfg.mode,
        final_acc: final_model.accuracy(&test)?,
        round_accs: history.iter().filter_map(|r| r.eval_acc).collect(),
        probe_rounds: probes,
        config: cfg.echo(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing artifact {}", path.display())))
    }
}

/// The target's released model at each probe round, rebuilt from the
/// artifacts of a `train` run: for FLiP, `train_final` of the distilled
/// checkpoint; for FedAvg, the stored model.
pub fn target_models(cfg: &ExperimentConfig, dir: &Path, train: &RawDataset) -> Result<Vec<ModelParams>> {
    let probes = cfg.probe_rounds();
    match cfg.mode {
        TrainMode::Flip => {
            let theta_init = initial_model(&cfg.fed, train.sample_shape(), train.classes())?;
            probes
                .iter()
                .map(|&r| {
                    let path = distilled_path(dir, r);
                    require(&path)?;
                    train_final(&theta_init, &read_checkpoint(&path)?.set)
                })
                .collect()
        }
        TrainMode::Fedavg => probes
            .iter()
            .map(|&r| {
                let path = model_path(dir, r);
                require(&path)?;
                ModelParams::read_json(&path)
            })
            .collect(),
    }
}

pub fn attack_air(cfg: &ExperimentConfig) -> Result<AttackReport> {
    cfg.validate()?;
    let air = cfg
        .attack
        .air
        .as_ref()
        .ok_or_else(|| Error::Config("config has no attack.air section".into()))?;
    let tasks = match &air.source {
        AirSource::Dataset { classes } => {
            let (train, test) = load(&cfg.dataset)?;
            class_air_tasks(&train, &test, *classes, cfg.fed.clients, cfg.fed.seed)?
        }
        AirSource::SynthAttr {
            n_per_cell,
            test_per_cell,
        } => synth_air_tasks(*n_per_cell, *test_per_cell, cfg.fed.clients, cfg.fed.seed)?,
    };
    attribute_inference_on(&tasks, &cfg.fed, air.rounds.as_deref(), &air.psi, cfg.echo())
}

pub fn attack_mia(cfg: &ExperimentConfig) -> Result<AttackReport> {
    cfg.validate()?;
    let mia = cfg
        .attack
        .mia
        .as_ref()
        .ok_or_else(|| Error::Config("config has no attack.mia section".into()))?;
    let dir = match &mia.target {
        Some(d) => d.as_path(),
        None => cfg.out_dir()?,
    };
    let (members, non_members) = load(&cfg.dataset)?;
    let targets = target_models(cfg, dir, &members)?;
    let (pool, _) = load(&mia.shadow_pool)?;
    let mia_cfg = cfg.mia_config(mia);
    let pipeline = Pipeline {
        mode: cfg.mode,
        fed: cfg.fed.clone(),
    };
    let shadows = ShadowEnsemble::train(&pool, &pipeline, &mia_cfg)?;
    let mut echo = cfg.echo();
    echo["query_set"] = serde_json::json!({"members": mia.queries, "non_members": mia.queries});
    membership_inference(&targets, &members, &non_members, &pool, &shadows, &mia_cfg, echo)
}

/// Writes every distilled sample as a PGM (one channel) or PPM (three
/// channels) image, de-normalized and clamped to `[0, 255]`, plus
/// `soft_labels.csv` with the three largest soft-label entries of each
/// sample in descending order. Returns the number of images.
pub fn export_samples(checkpoint: &Checkpoint, dir: &Path) -> Result<usize> {
    let set = &checkpoint.set;
    let [c, h, w] = set.input_shape();
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("cannot export {c}-channel samples as images")));
    }
    let norm = checkpoint.normalization.clone().unwrap_or_else(|| Normalization::identity(c));
    create_dir(dir)?;
    let mut csv = String::from("sample,class,top1,score1,top2,score2,top3,score3\n");
    for j in 0..set.len() {
        let mut pixels = set.sample(j)?.data().to_vec();
        norm.invert(&mut pixels, h * w);
        let bytes: Vec<u8> = (0..h * w)
            .flat_map(|p| (0..c).map(move |ch| (ch, p)))
            .map(|(ch, p)| (pixels[ch * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        let (ext, magic) = if c == 1 { ("pgm", "P5") } else { ("ppm", "P6") };
        let path = dir.join(format!("sample_{j:03}.{ext}"));
        let mut file = format!("{magic}\n{w} {h}\n255\n").into_bytes();
        file.extend_from_slice(&bytes);
        std::fs::write(&path, file).map_err(|e| Error::io(&path, e))?;

        let label = set.soft_label(j)?;
        let mut ranked: Vec<(usize, f64)> = label.data().iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        csv.push_str(&format!("{j},{}", set.slots()[j].class));
        for (class, score) in ranked.iter().take(3) {
            csv.push_str(&format!(",{class},{score}"));
        }
        for _ in ranked.len()..3 {
            csv.push_str(",,");
        }
        csv.push('\n');
    }
    let path = dir.join("soft_labels.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(set.len())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub artifact: PathBuf,
}

/// Test accuracy of a stored artifact: a distilled checkpoint is turned into
/// a model with `train_final`, a model file is used as is.
pub fn eval(cfg: &ExperimentConfig, artifact: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    require(artifact)?;
    let (train, test) = load(&cfg.dataset)?;
    let model = if artifact.extension().is_some_and(|e| e == "json") {
        ModelParams::read_json(artifact)?
    } else {
        let theta_init = initial_model(&cfg.fed, train.sample_shape(), train.classes())?;
        train_final(&theta_init, &read_checkpoint(artifact)?.set)?
    };
    Ok(EvalReport {
        accuracy: model.accuracy(&test)?,
        artifact: artifact.to_path_buf(),
    })
}

#[derive(Parser, Debug)]
#[command(name = "flip", version, about = "Federated learning by sharing distilled data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AttackArg {
    Air,
    Mia,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Flip,
    Fedavg,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train with FLiP or FedAvg and write history, artifacts and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Run a privacy attack and write its report.
    Attack {
        #[arg(long, value_enum)]
        kind: AttackArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Write the samples of a distilled checkpoint as images.
    ExportSamples {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test accuracy of a distilled checkpoint or stored model.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: &Path, out: Option<&PathBuf>, seed: Option<u64>, mode: Option<ModeArg>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(out) = out {
        cfg.out = Some(out.clone());
    }
    if let Some(seed) = seed {
        cfg.fed.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = match mode {
            ModeArg::Flip => TrainMode::Flip,
            ModeArg::Fedavg => TrainMode::Fedavg,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Model(_) => 1,
        _ => 2,
    }
}

fn write_diagnostics(dir: Option<&Path>, command: &str, err: &Error) {
    let Some(dir) = dir else { return };
    let mut text = format!("command: {command}\nerror: {err}\n");
    let mut source = std::error::Error::source(err);
    while let Some(s) = source {
        text.push_str(&format!("caused by: {s}\n"));
        source = s.source();
    }
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join("diagnostics.txt"), text);
    }
}

fn dispatch(command: &Command, out_dir: &mut Option<PathBuf>) -> Result<()> {
    match command {
        Command::Train {
            config,
            out,
            seed,
            mode,
        } => {
            let cfg = read_config(config, out.as_ref(), *seed, *mode)?;
            *out_dir = cfg.out.clone();
            let summary = train(&cfg)?;
            println!("final accuracy {:.4}", summary.final_acc);
        }
        Command::Attack {
            kind,
            config,
            out,
            seed,
            mode,
        } => {
            let cfg = read_config(config, out.as_ref(), *seed, *mode)?;
            let dir = cfg.out_dir()?.to_path_buf();
            *out_dir = Some(dir.clone());
            let (report, name) = match kind {
                AttackArg::Air => (attack_air(&cfg)?, "attack_air.json"),
                AttackArg::Mia => (attack_mia(&cfg)?, "attack_mia.json"),
            };
            create_dir(&dir)?;
            write_json(&dir.join(name), &report)?;
            println!("attack accuracy {:.4}", report.attack_acc);
        }
        Command::ExportSamples { checkpoint, out } => {
            require(checkpoint)?;
            *out_dir = Some(out.clone());
            let n = export_samples(&read_checkpoint(checkpoint)?, out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Eval { config, artifact, out } => {
            let cfg = read_config(config, out.as_ref(), None, None)?;
            *out_dir = cfg.out.clone();
            let report = eval(&cfg, artifact)?;
            if let Some(dir) = &cfg.out {
                create_dir(dir)?;
                write_json(&dir.join("eval.json"), &report)?;
            }
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer(&mut stdout, &report)?;
            let _ = writeln!(stdout);
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command;
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut out_dir = None;
    match dispatch(&cli.command, &mut out_dir) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            let code = exit_code(&err);
            if code == 2 {
                write_diagnostics(out_dir.as_deref(), &format!("{:?}", cli.command), &err);
            }
            code
        }
    }
}
