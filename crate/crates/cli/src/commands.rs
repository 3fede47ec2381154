//! Subcommands of the `bnprepair` binary.

use std::fs;
use std::path::{Path, PathBuf};

use bnprepair::datamodel::{empirical_weights, segment, LabelledDatum, SubgroupKey};
use bnprepair::geometric::{fit_geometric, repair_geometric};
use bnprepair::ingest::{load_adult, read_labelled, read_labelled_column, write_labelled, AdultFeature};
use bnprepair::metrics::{damage, e_hat};
use bnprepair::rng::{seeded, RNG_NAME};
use bnprepair::simgen::{sample_labelled, MixtureModelSpec};
use bnprepair::snapshot::{Snapshot, SnapshotModel, StoppingReport};
use bnprepair::stopping::PriorSpec;
use bnprepair::transport::repair_batch;
use bnprepair::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{hex_sha256, ExperimentConfig, ExperimentId, PipelineConfig};
use crate::error::CliError;
use crate::experiments::{data_bounds, fresh_learners, run_experiment};
use crate::output::{csv_bytes, to_json_pretty, write_experiment, LOG_BASE};

#[derive(Debug, Parser)]
#[command(name = "bnprepair", version, about = "Fairness repair of a continuous feature via learned quantized transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn a repair model from labelled data (columns x,u,s).
    Fit(FitArgs),
    /// Repair labelled data with a fitted model.
    Repair(RepairArgs),
    /// Compare original and repaired data: fairness ratio and damage.
    Evaluate(EvaluateArgs),
    /// Run a Monte-Carlo experiment.
    Experiment(ExperimentArgs),
    /// Draw a labelled sample from a built-in model.
    Generate(GenerateArgs),
    /// Export one Adult feature as labelled CSV.
    Adult(AdultArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Transport,
    Geometric,
}

/// Overrides shared by the commands that learn or evaluate.
#[derive(Debug, Args, Default)]
pub struct PipelineArgs {
    /// JSON pipeline settings (nu0, prior, stopping, histogram).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub nu0: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
}

impl PipelineArgs {
    fn apply(&self, p: &mut PipelineConfig) {
        if let Some(e) = self.epsilon {
            p.stopping.epsilon = e;
        }
        if let Some(v) = self.nu0 {
            p.nu0 = v;
        }
        if let Some(b) = self.bins {
            p.histogram.bins = b;
        }
    }

    fn resolve(&self) -> Result<PipelineConfig, CliError> {
        let mut p = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid pipeline config: {e}")))?
            }
            None => PipelineConfig::default(),
        };
        self.apply(&mut p);
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for model.json and stopping.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "transport")]
    pub method: Method,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct RepairArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pre: PathBuf,
    /// Uses column x_repaired when present, x otherwise.
    #[arg(long)]
    pub post: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config (JSON); alternatively name one with --experiment.
    #[arg(long, conflicts_with = "experiment")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub experiment: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub nu0: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Adult feature(s) to run; repeatable.
    #[arg(long = "feature")]
    pub features: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Gaussian conditionals with Pr[U=0] set by --pr-u0.
    RepresentationBias,
    /// Gaussian and mixture conditionals with unequal weights.
    Intersectionality,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum, default_value = "intersectionality")]
    pub preset: Preset,
    #[arg(long, default_value_t = 0.5)]
    pub pr_u0: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdultArgs {
    /// adult.data file or a directory with adult.data and adult.test.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "age")]
    pub feature: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Provenance written next to a fitted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub input_sha256: String,
    pub config_hash: String,
    pub rows: usize,
    pub counts: [usize; 4],
    /// Rows each learner consumed before quenching (transport only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopping: Option<StoppingReport>,
    pub prior: Option<PriorSpec>,
    pub pipeline: PipelineConfig,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::file(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::file(path, e))
}

fn pipeline_hash(p: &PipelineConfig) -> String {
    hex_sha256(serde_json::to_string(p).expect("config serializes").as_bytes())
}

pub fn fit(args: &FitArgs) -> Result<(), CliError> {
    let pipeline = args.pipeline.resolve()?;
    let bytes = read_bytes(&args.input)?;
    let data = read_labelled(bytes.as_slice())?;
    let dataset = segment(&data)?;
    for k in SubgroupKey::ALL {
        if dataset.count(k) == 0 {
            return Err(Error::EmptySubgroup(k).into());
        }
    }
    let (snapshot, stopping, prior) = match args.method {
        Method::Geometric => (Snapshot::geometric(fit_geometric(&dataset)?), None, None),
        Method::Transport => {
            let prior = pipeline.prior_or(data_bounds(&dataset))?;
            let mut learners = fresh_learners(prior, pipeline.stopping)?;
            // File order within each subgroup.
            for k in SubgroupKey::ALL {
                learners[k.index()].absorb_until_quenched(dataset.features(k).iter().copied())?;
            }
            if let Some(l) = learners.iter().find(|l| !l.is_quenched()) {
                for k in SubgroupKey::ALL.iter().filter(|k| !learners[k.index()].is_quenched()) {
                    warn!("subgroup {k} ran out of rows before its learner stopped");
                }
                return Err(Error::NotStopped { absorbed: l.absorbed(), smoothed_kld: l.smoothed_kld() }.into());
            }
            let snap = Snapshot::transport(learners, empirical_weights(&dataset)?)?;
            let report = match &snap.model {
                SnapshotModel::Transport { stopping, .. } => stopping.clone(),
                SnapshotModel::Geometric { .. } => unreachable!("transport snapshot"),
            };
            for k in SubgroupKey::ALL {
                if report.representation_bias[k.index()] {
                    warn!("subgroup {k} has fewer rows than a sample of {} would need", report.total);
                }
            }
            (snap, Some(report), Some(prior))
        }
    };
    let report = FitReport {
        method: match args.method {
            Method::Transport => "transport".into(),
            Method::Geometric => "geometric".into(),
        },
        input_sha256: hex_sha256(&bytes),
        config_hash: pipeline_hash(&pipeline),
        rows: data.len(),
        counts: dataset.counts(),
        stopping,
        prior,
        pipeline,
    };
    fs::create_dir_all(&args.out).map_err(|e| CliError::file(&args.out, e))?;
    write_bytes(&args.out.join("model.json"), snapshot.to_json()?.as_bytes())?;
    write_bytes(&args.out.join("stopping.json"), &to_json_pretty(&report)?)?;
    info!("wrote model to {}", args.out.display());
    Ok(())
}

pub fn repair(args: &RepairArgs) -> Result<(), CliError> {
    let model_bytes = read_bytes(&args.model)?;
    let snap = Snapshot::from_json(std::str::from_utf8(&model_bytes).map_err(|e| Error::Snapshot(e.to_string()))?)?;
    let data = read_labelled(read_bytes(&args.input)?.as_slice())?;
    let repaired: Vec<f64> = match &snap.model {
        SnapshotModel::Transport { model, .. } => repair_batch(model, &data, args.seed)?.into_iter().map(|d| d.x).collect(),
        SnapshotModel::Geometric { model } => data.iter().map(|d| repair_geometric(model, d)).collect::<Result<_, _>>()?,
    };
    let headers: Vec<String> = ["x", "u", "s", "x_repaired"].iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = data
        .iter()
        .zip(&repaired)
        .map(|(d, r)| vec![d.x.to_string(), d.u.to_string(), d.s.to_string(), r.to_string()])
        .collect();
    let prov = [("model_sha256", hex_sha256(&model_bytes)), ("seed", args.seed.to_string()), ("rng", RNG_NAME.to_string())];
    write_bytes(&args.out, &csv_bytes(&prov, &headers, &rows)?)
}

fn read_post(bytes: &[u8]) -> Result<Vec<LabelledDatum>, CliError> {
    match read_labelled_column(bytes, "x_repaired") {
        Err(Error::Parse { line: 1, .. }) => Ok(read_labelled(bytes)?),
        r => Ok(r?),
    }
}

pub fn evaluate(args: &EvaluateArgs) -> Result<serde_json::Value, CliError> {
    let pipeline = args.pipeline.resolve()?;
    let pre_bytes = read_bytes(&args.pre)?;
    let post_bytes = read_bytes(&args.post)?;
    let pre = read_labelled(pre_bytes.as_slice())?;
    let post = read_post(&post_bytes)?;
    if pre.len() != post.len() {
        return Err(Error::Misaligned(format!("{} rows before repair, {} after", pre.len(), post.len())).into());
    }
    if let Some(i) = pre.iter().zip(&post).position(|(a, b)| a.key() != b.key()) {
        return Err(Error::Misaligned(format!("row {} changes its attributes", i + 1)).into());
    }
    let (pre, post) = (segment(&pre)?, segment(&post)?);
    let h = pipeline.histogram;
    let fairness = e_hat(&pre, &post, &h)?;
    let dmg = damage(&pre, &post, &h)?;
    let log_e = fairness.log_e_hat();
    let report = json!({
        "config_hash": pipeline_hash(&pipeline),
        "pre_sha256": hex_sha256(&pre_bytes),
        "post_sha256": hex_sha256(&post_bytes),
        "log_base": LOG_BASE,
        "estimator": { "kind": "histogram", "bins": h.bins, "smoothing": h.smoothing },
        "e_hat": fairness.e_hat,
        "log_e_hat": if log_e.is_finite() { json!(log_e) } else { json!(null) },
        "damage": dmg.total,
        "fairness": fairness,
        "damage_report": dmg,
    });
    if let Some(out) = &args.out {
        write_bytes(out, &to_json_pretty(&report)?)?;
    }
    Ok(report)
}

pub fn experiment(args: &ExperimentArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = match (&args.config, &args.experiment) {
        (Some(path), _) => ExperimentConfig::read(path)?,
        (None, Some(name)) => {
            let seed = args.seed.ok_or_else(|| CliError::Usage("--seed is required with --experiment".into()))?;
            ExperimentConfig::new(name.parse::<ExperimentId>()?, seed)
        }
        (None, None) => return Err(CliError::Usage("either --config or --experiment is required".into())),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    PipelineArgs { config: None, epsilon: args.epsilon, nu0: args.nu0, bins: args.bins }.apply(&mut cfg.pipeline);
    if !args.features.is_empty() {
        cfg.features = args
            .features
            .iter()
            .map(|f| f.parse::<AdultFeature>().map_err(|e| CliError::Usage(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("results").join(cfg.experiment.name()));
    let output = run_experiment(&cfg)?;
    if output.summary.failures > 0 {
        warn!("{} trial(s) failed; see records.jsonl", output.summary.failures);
    }
    write_experiment(&out_dir, &output)
}

pub fn generate(args: &GenerateArgs) -> Result<(), CliError> {
    let spec = match args.preset {
        Preset::RepresentationBias => MixtureModelSpec::representation_bias(args.pr_u0)?,
        Preset::Intersectionality => MixtureModelSpec::intersectionality(),
    };
    let data = sample_labelled(&spec, args.n, &mut seeded(args.seed));
    let mut buf = format!("# seed={}\n# rng={RNG_NAME}\n", args.seed).into_bytes();
    write_labelled(&mut buf, &data)?;
    write_bytes(&args.out, &buf)
}

pub fn adult(args: &AdultArgs) -> Result<(), CliError> {
    let feature: AdultFeature = args.feature.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let path = match &args.data {
        Some(p) => p.clone(),
        None => ExperimentConfig::new(ExperimentId::Adult, 0).adult_path(),
    };
    let data = load_adult(&path, feature)?;
    let mut buf = Vec::new();
    write_labelled(&mut buf, &data)?;
    write_bytes(&args.out, &buf)
}

/// Runs a parsed command line; `Ok` output goes to stdout.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Fit(a) => fit(a),
        Command::Repair(a) => repair(a),
        Command::Evaluate(a) => {
            let report = evaluate(a)?;
            if a.out.is_none() {
                print!("{}", String::from_utf8(to_json_pretty(&report)?).expect("json is utf-8"));
            }
            Ok(())
        }
        Command::Experiment(a) => {
            for p in experiment(a)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Generate(a) => generate(a),
        Command::Adult(a) => adult(a),
    }
}
