use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use apsel_core::eval::{evaluate, pr_csv, pr_curve, roc_csv, roc_curve, EvalOptions};
use apsel_core::graph::{GraphParams, ProximityOrder};
use apsel_core::io::{read_json, write_json, write_text};
use apsel_core::model::{predict as predict_links, EmbeddingCache, GnnModel, ModelConfig};
use apsel_core::scenario::{Point, Scenario, ScenarioConfig};
use apsel_core::trainer::{
    make_dataset, train_with, DatasetSpec, Sample, Split, StepMode, TrainConfig, TrainEvent, UeCount,
};
use clap::{Args, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Args, Debug, Clone, Serialize)]
pub struct GraphArgs {
    /// Nearest APs linked to each AP.
    #[arg(long, default_value_t = 5)]
    pub c_ap: usize,
    /// APs nearest the master offered to the classifier.
    #[arg(long, default_value_t = 10)]
    pub c_ue: usize,
    /// APs nearest the master whose RSRP the UE reports.
    #[arg(long, default_value_t = 2)]
    pub c_hat_ue: usize,
    /// Links within this many dB of the master are positive.
    #[arg(long, default_value_t = 10.0)]
    pub d_db: f64,
}

impl GraphArgs {
    fn params(&self) -> GraphParams {
        GraphParams {
            c_ap: self.c_ap,
            c_ue: self.c_ue,
            c_hat_ue: self.c_hat_ue,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GenScenarioArgs {
    /// Number of APs (L).
    #[arg(long, default_value_t = 100)]
    pub aps: usize,
    /// Side of the square deployment area.
    #[arg(long, default_value_t = 1.0)]
    pub side_km: f64,
    /// Shadowing standard deviation.
    #[arg(long, default_value_t = ScenarioConfig::DEFAULT_SIGMA_SH_DB)]
    pub sigma_db: f64,
    /// Distance at which shadowing correlation halves.
    #[arg(long, default_value_t = ScenarioConfig::DEFAULT_DECORRELATION_M)]
    pub decorrelation_m: f64,
    /// Shadowing grid spacing.
    #[arg(long, default_value_t = ScenarioConfig::DEFAULT_RESOLUTION_M)]
    pub resolution_m: f64,
    #[arg(long, default_value_t = 14)]
    pub seed: u64,
    #[arg(short, long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Validation,
    Test,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BuildDatasetArgs {
    #[arg(short, long)]
    #[serde(skip)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_graphs: usize,
    /// UEs per graph for the training split.
    #[arg(long, default_value_t = 100)]
    pub k_train: usize,
    /// Smallest UE count for validation/test graphs.
    #[arg(long, default_value_t = 50)]
    pub k_min: usize,
    /// Largest UE count for validation/test graphs.
    #[arg(long, default_value_t = 150)]
    pub k_max: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(short, long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StepModeArg {
    PerGraph,
    PerEdge,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[arg(short, long)]
    #[serde(skip)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub n_graphs: usize,
    #[arg(long, default_value_t = 100)]
    pub k_train: usize,
    /// Graphs used for early stopping (50–150 UEs each); 0 disables.
    #[arg(long, default_value_t = 20)]
    pub val_graphs: usize,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without validation-AP improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, value_enum, default_value_t = StepModeArg::PerGraph)]
    pub step_mode: StepModeArg,
    #[arg(long, default_value_t = ModelConfig::DEFAULT_FEATURE_SCALE)]
    pub feature_scale: f64,
    #[arg(long)]
    pub l2_normalize: bool,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Seeds UE drops, parameter initialization and graph order.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(short, long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvalArgs {
    #[arg(short, long)]
    #[serde(skip)]
    pub scenario: PathBuf,
    /// Checkpoint to evaluate (not needed with --baseline-only).
    #[arg(short = 'm', long)]
    #[serde(skip)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, default_value_t = 100)]
    pub n_graphs: usize,
    #[arg(long, default_value_t = 50)]
    pub k_min: usize,
    #[arg(long, default_value_t = 150)]
    pub k_max: usize,
    /// Proximity baselines: master plus the n APs nearest to it.
    #[arg(long, value_delimiter = ',', default_value = "1,3")]
    pub baselines: Vec<usize>,
    /// Only compute label statistics and proximity baselines.
    #[arg(long)]
    pub baseline_only: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(short, long)]
    #[serde(skip)]
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PredictArgs {
    #[arg(short, long)]
    #[serde(skip)]
    pub scenario: PathBuf,
    #[arg(short = 'm', long)]
    #[serde(skip)]
    pub model: PathBuf,
    /// JSON array of [x_km, y_km] UE positions.
    #[arg(long)]
    #[serde(skip)]
    pub ues: PathBuf,
    #[command(flatten)]
    pub graph: GraphArgs,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// AP-embedding cache file, created or refreshed as needed.
    #[arg(long)]
    #[serde(skip)]
    pub cache: Option<PathBuf>,
    /// Output file (default: stdout).
    #[arg(short, long)]
    #[serde(skip)]
    pub output: Option<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

struct LoadedScenario {
    scenario: Scenario,
    echo: Value,
}

fn load_scenario(path: &Path) -> Result<LoadedScenario> {
    let bytes = fs::read(path).with_context(|| format!("reading scenario {}", path.display()))?;
    let scenario = Scenario::load(path)?;
    let echo = json!({
        "sha256": sha256_hex(&bytes),
        "config": scenario.config(),
    });
    Ok(LoadedScenario { scenario, echo })
}

fn load_model(path: &Path, ap_count: usize) -> Result<GnnModel> {
    let model = GnnModel::load(path)?;
    if model.config().hidden_dim != ap_count {
        bail!(
            "checkpoint {} expects {} APs but the scenario has {ap_count}",
            path.display(),
            model.config().hidden_dim
        );
    }
    Ok(model)
}

fn model_id(model: &GnnModel) -> String {
    format!("{:016x}", model.fingerprint())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn config_echo(command: &str, args: &impl Serialize, extra: Value) -> Value {
    let mut v = json!({
        "command": command,
        "tool_version": env!("CARGO_PKG_VERSION"),
        "args": args,
    });
    if let (Value::Object(map), Value::Object(more)) = (&mut v, extra) {
        map.extend(more);
    }
    v
}

/// CSV with the producing configuration as a leading comment line.
fn csv_with_header(config: &Value, body: &str) -> String {
    format!("# config: {config}\n{body}")
}

pub fn gen_scenario(a: &GenScenarioArgs) -> Result<()> {
    let config = ScenarioConfig {
        ap_count: a.aps,
        side_length_km: a.side_km,
        sigma_sh_db: a.sigma_db,
        decorrelation_distance_m: a.decorrelation_m,
        grid_resolution_m: a.resolution_m,
        seed: a.seed,
    };
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            bail!("output directory {} does not exist", parent.display());
        }
    }
    let start = Instant::now();
    let scenario = Scenario::generate(&config)?;
    scenario.save(&a.output)?;
    info!("scenario generated in {:.2?}", start.elapsed());
    println!("{} APs, {:.1} APs/km²", scenario.ap_count(), scenario.density_per_km2());
    Ok(())
}

fn eval_count(k_min: usize, k_max: usize) -> UeCount {
    UeCount::Uniform { min: k_min, max: k_max }
}

pub fn build_dataset(a: &BuildDatasetArgs) -> Result<()> {
    let loaded = load_scenario(&a.scenario)?;
    let (split, ue_count) = match a.split {
        SplitArg::Train => (Split::Train, UeCount::Fixed(a.k_train)),
        SplitArg::Validation => (Split::Validation, eval_count(a.k_min, a.k_max)),
        SplitArg::Test => (Split::Test, eval_count(a.k_min, a.k_max)),
    };
    let spec = DatasetSpec {
        n_graphs: a.n_graphs,
        ue_count,
        d_db: a.graph.d_db,
        graph: a.graph.params(),
        seed: a.seed,
        split,
    };
    let data = make_dataset(&loaded.scenario, &spec)?;
    let config = config_echo("build-dataset", a, json!({ "scenario": loaded.echo, "dataset": spec }));
    create_dir(&a.output)?;
    write_json(&a.output.join("config.json"), &config)?;
    for (i, s) in data.iter().enumerate() {
        let file = json!({
            "config": config,
            "ue_positions": s.ue_positions,
            "graph": s.graph.to_file(Some(&s.labels)),
        });
        write_json(&a.output.join(format!("graph_{i:04}.json")), &file)?;
    }
    let ues: usize = data.iter().map(|s| s.graph.ue_count).sum();
    println!("{} graphs, {ues} UEs", data.len());
    Ok(())
}

fn write_checkpoint(model: &GnnModel, config: &Value, path: &Path) -> Result<()> {
    let mut ckpt = model.to_checkpoint();
    ckpt.run_config = Some(config.clone());
    write_json(path, &ckpt)?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let loaded = load_scenario(&a.scenario)?;
    let scenario = &loaded.scenario;
    let train_spec = DatasetSpec {
        n_graphs: a.n_graphs,
        ue_count: UeCount::Fixed(a.k_train),
        d_db: a.graph.d_db,
        graph: a.graph.params(),
        seed: a.seed,
        split: Split::Train,
    };
    let val_spec = DatasetSpec {
        n_graphs: a.val_graphs,
        ..DatasetSpec::validation(a.seed, a.val_graphs)
    };
    let val_spec = DatasetSpec {
        d_db: a.graph.d_db,
        graph: a.graph.params(),
        ..val_spec
    };
    let model_config = ModelConfig {
        feature_scale: a.feature_scale,
        l2_normalize: a.l2_normalize,
        ..ModelConfig::for_aps(scenario.ap_count())
    };
    let train_config = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        shuffle_seed: a.seed,
        patience: (a.patience > 0).then_some(a.patience),
        step_mode: match a.step_mode {
            StepModeArg::PerGraph => StepMode::PerGraph,
            StepModeArg::PerEdge => StepMode::PerEdge,
        },
        threshold: a.threshold,
    };
    let config = config_echo(
        "train",
        a,
        json!({
            "scenario": loaded.echo,
            "train_dataset": train_spec,
            "validation_dataset": (a.val_graphs > 0).then_some(&val_spec),
            "model": model_config,
            "training": train_config,
            "init_seed": a.seed,
        }),
    );

    let start = Instant::now();
    let train_set = make_dataset(scenario, &train_spec)?;
    let val_set: Vec<Sample> = if a.val_graphs > 0 {
        make_dataset(scenario, &val_spec)?
    } else {
        Vec::new()
    };
    info!("datasets built in {:.2?}", start.elapsed());

    let ckpt_dir = a.output.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_json(&a.output.join("config.json"), &config)?;
    let mut trace = String::from("step,epoch,graph_id,loss\n");
    let mut model = GnnModel::new(model_config, a.seed)?;
    let start = Instant::now();
    let result = train_with(
        &mut model,
        &train_set,
        (!val_set.is_empty()).then_some(val_set.as_slice()),
        &train_config,
        &mut |event| {
            match event {
                TrainEvent::Step(r) => {
                    let _ = writeln!(trace, "{},{},{},{}", r.step, r.epoch, r.graph_id, r.loss);
                }
                TrainEvent::Epoch(summary, m) => {
                    let ap = summary.validation.as_ref().and_then(|v| v.average_precision);
                    info!(
                        "epoch {} mean loss {:.4} validation AP {} ({:.1?})",
                        summary.epoch,
                        summary.mean_loss,
                        ap.map_or("-".into(), |v| format!("{v:.4}")),
                        start.elapsed()
                    );
                    let path = ckpt_dir.join(format!("step_{}.json", m.step_count()));
                    write_checkpoint(m, &config, &path)
                        .map_err(|e| apsel_core::Error::InvalidArgument(format!("{e:#}")))?;
                }
            }
            Ok(())
        },
    );
    write_text(&a.output.join("trace.csv"), &csv_with_header(&config, &trace))?;
    let report = match result {
        Ok(r) => r,
        Err(e) => {
            if e.is_numeric() {
                let path = ckpt_dir.join(format!("step_{}.json", model.step_count()));
                write_checkpoint(&model, &config, &path)?;
                warn!("training aborted; last good parameters saved to {}", path.display());
            }
            return Err(e.into());
        }
    };
    write_checkpoint(&model, &config, &a.output.join("final.json"))?;

    let proximity = ProximityOrder::new(scenario.ap_positions());
    let validation = if val_set.is_empty() {
        None
    } else {
        let options = EvalOptions {
            threshold: a.threshold,
            baselines: vec![1, 3],
            checkpoint: Some(model_id(&model)),
        };
        Some(evaluate(Some(&model), &val_set, &proximity, &options)?.report)
    };
    let summary = json!({
        "config": config,
        "checkpoint": model_id(&model),
        "training_step_count": model.step_count(),
        "best_epoch": report.best_epoch,
        "stopped_early": report.stopped_early,
        "epochs": report.epochs,
        "validation": validation,
    });
    write_json(&a.output.join("report.json"), &summary)?;
    let last = report.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    println!(
        "trained {} epochs ({} steps), best epoch {}, final mean loss {last:.4}",
        report.epochs.len(),
        model.step_count(),
        report.best_epoch
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let loaded = load_scenario(&a.scenario)?;
    let scenario = &loaded.scenario;
    let model = match (&a.model, a.baseline_only) {
        (_, true) => None,
        (Some(path), false) => Some(load_model(path, scenario.ap_count())?),
        (None, false) => bail!("--model is required unless --baseline-only is given"),
    };
    let spec = DatasetSpec {
        n_graphs: a.n_graphs,
        ue_count: eval_count(a.k_min, a.k_max),
        d_db: a.graph.d_db,
        graph: a.graph.params(),
        seed: a.seed,
        split: Split::Test,
    };
    let checkpoint = model.as_ref().map(model_id);
    let config = config_echo(
        "eval",
        a,
        json!({ "scenario": loaded.echo, "dataset": spec, "checkpoint": checkpoint }),
    );
    let start = Instant::now();
    let data = make_dataset(scenario, &spec)?;
    let proximity = ProximityOrder::new(scenario.ap_positions());
    let options = EvalOptions {
        threshold: a.threshold,
        baselines: a.baselines.clone(),
        checkpoint,
    };
    let mut evaluation = evaluate(model.as_ref(), &data, &proximity, &options)?;
    info!("evaluated {} graphs in {:.2?}", data.len(), start.elapsed());
    evaluation.report.config = config.clone();
    let r = &evaluation.report;

    create_dir(&a.output)?;
    write_json(&a.output.join("report.json"), r)?;
    write_text(
        &a.output.join("metrics.csv"),
        &csv_with_header(&config, &r.metrics_csv()),
    )?;
    if model.is_some() {
        let scores = evaluation.scores();
        write_text(
            &a.output.join("roc_curve.csv"),
            &csv_with_header(&config, &roc_csv(&roc_curve(&scores)?)),
        )?;
        write_text(
            &a.output.join("pr_curve.csv"),
            &csv_with_header(&config, &pr_csv(&pr_curve(&scores)?)),
        )?;
    }

    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    if model.is_some() {
        println!(
            "precision {} recall {} (in-cluster {}) auc {} ap {}",
            fmt(r.precision),
            fmt(r.recall),
            fmt(r.in_cluster_recall),
            fmt(r.auc),
            fmt(r.average_precision)
        );
    }
    println!("cluster recall ceiling {}", fmt(r.cluster_recall_ceiling));
    for b in &r.baselines {
        println!(
            "closest-{}: positive fraction {:.3} precision {:.3} recall {:.3}",
            b.n_closest, b.positive_fraction, b.precision, b.recall
        );
    }
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let loaded = load_scenario(&a.scenario)?;
    let scenario = &loaded.scenario;
    let model = load_model(&a.model, scenario.ap_count())?;
    let ues: Vec<Point> = read_json(&a.ues)?;
    if ues.is_empty() {
        bail!("{} holds no UE positions", a.ues.display());
    }
    let sample = Sample::build(
        scenario,
        &ProximityOrder::new(scenario.ap_positions()),
        ues,
        &a.graph.params(),
        a.graph.d_db,
    )?;
    let graph = &sample.graph;

    let start = Instant::now();
    let cache = match &a.cache {
        None => None,
        Some(path) => {
            let existing = if path.exists() {
                match EmbeddingCache::load(path) {
                    Ok(c) => match c.check(graph, &model) {
                        Ok(()) => {
                            info!("embedding cache hit: {}", path.display());
                            Some(c)
                        }
                        Err(e) => {
                            warn!("{e}; regenerating {}", path.display());
                            None
                        }
                    },
                    Err(e) => {
                        warn!("unreadable embedding cache ({e}); regenerating {}", path.display());
                        None
                    }
                }
            } else {
                info!("embedding cache miss: {}", path.display());
                None
            };
            match existing {
                Some(c) => Some(c),
                None => {
                    let c = EmbeddingCache::build(graph, &model)?;
                    c.save(path)?;
                    Some(c)
                }
            }
        }
    };
    let predictions = predict_links(graph, &model, cache.as_ref(), a.threshold)?;
    info!("scored {} UEs in {:.2?}", graph.ue_count, start.elapsed());

    let config = config_echo(
        "predict",
        a,
        json!({ "scenario": loaded.echo, "checkpoint": model_id(&model) }),
    );
    let per_ue: Vec<Value> = predictions
        .iter()
        .map(|p| {
            json!({
                "ue": p.ue,
                "position": sample.ue_positions[p.ue],
                "master_ap": p.master_ap,
                "candidate_cluster": p.candidate_cluster,
                "links": p.links,
                "selected_aps": p.selected_aps(),
            })
        })
        .collect();
    let out = json!({ "config": config, "predictions": per_ue });
    match &a.output {
        Some(path) => write_json(path, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out)?),
    }
    Ok(())
}
