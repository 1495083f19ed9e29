//! `fulm` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format, 3 protocol or round
//! failure, 4 training divergence.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use fulm_core::container::{self, Container};
use fulm_core::eval::{run_experiment, EXPERIMENTS};
use fulm_core::protocol::{run_round, DataSelection, RetentionMode, RoundConfig, SimulationSpec, TransportKind};
use fulm_core::similarity::{cluster, similarity_matrix_labeled};
use fulm_core::toy::{gen_task, pretrain, train_adapter, LoraConfig, Objective, PretrainConfig, SyntheticTask, TaskSpec, ToyModel, TrainConfig, TrainingSets};
use fulm_core::{merge, DeltaEntry, Error, ErrorCode, MergeReport, MergeStrategy, Result, TiesConfig};

#[derive(Parser)]
#[command(name = "fulm", version, about = "Hierarchical federated unlearning over LoRA adapter deltas")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task (and optionally its pretrained base model).
    GenData(GenDataArgs),
    /// Train one LoRA adapter on a slice of a generated task.
    TrainAdapter(TrainAdapterArgs),
    /// Pairwise cosine similarity of adapter deltas.
    Similarity(SimilarityArgs),
    /// Merge adapter deltas into one.
    Merge(MergeArgs),
    /// Run one federated round from a simulation spec.
    Simulate(SimulateArgs),
    /// Run a named toy-scale experiment.
    Eval(EvalArgs),
    /// Summarize a container file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec seed; also seeds pretraining.
    #[arg(long)]
    seed: Option<u64>,
    /// Pretraining config JSON (defaults apply when omitted).
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Generated task JSON.
    #[arg(long)]
    out: PathBuf,
    /// Pretrained base model container.
    #[arg(long)]
    base_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainAdapterArgs {
    /// Task JSON written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Base model container.
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    domain: String,
    /// Train config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Train on iid shard `i/n` of the domain.
    #[arg(long, value_parser = parse_shard, conflicts_with = "fraction")]
    shard: Option<(usize, usize)>,
    /// Train on a random fraction of the domain.
    #[arg(long)]
    fraction: Option<f32>,
    /// Retain domain for the GD objective.
    #[arg(long)]
    retain_domain: Option<String>,
    /// LoRA config JSON (defaults apply when omitted).
    #[arg(long)]
    lora: Option<PathBuf>,
    #[arg(long, default_value = "client")]
    client_id: String,
    /// Overrides the train config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimilarityArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Matrix CSV; printed to stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Matrix (and clustering, with --xi) as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Also cluster at this threshold.
    #[arg(long)]
    xi: Option<f32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Avg,
    Sum,
    Ties,
    Hier,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum)]
    strategy: StrategyArg,
    #[arg(long, default_value_t = fulm_core::similarity::DEFAULT_XI)]
    xi: f32,
    #[arg(long, default_value_t = fulm_core::merge::DEFAULT_DENSITY)]
    density: f32,
    #[arg(long)]
    out: PathBuf,
    /// JSON merge report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum RetentionArg {
    Additive,
    Clustered,
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation spec JSON.
    #[arg(long)]
    clients: PathBuf,
    #[arg(long, default_value_t = fulm_core::similarity::DEFAULT_XI)]
    xi: f32,
    #[arg(long, default_value_t = fulm_core::merge::DEFAULT_DENSITY)]
    density: f32,
    #[arg(long, value_enum, default_value = "inproc")]
    transport: TransportArg,
    /// Listen address for the TCP transport.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Per-phase timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    /// Overrides the spec's retention mode.
    #[arg(long, value_enum)]
    retention_mode: Option<RetentionArg>,
    /// Overrides the task, pretraining and LoRA-init seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "list")]
    experiment: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Report CSV; printed to stdout when omitted.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// List experiment names.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
    /// Emit JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_shard(s: &str) -> std::result::Result<(usize, usize), String> {
    let (i, n) = s.split_once('/').ok_or("expected i/n")?;
    let i = i.trim().parse().map_err(|e| format!("shard index: {e}"))?;
    let n = n.trim().parse().map_err(|e| format!("shard count: {e}"))?;
    Ok((i, n))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::ClientFailed { .. } => 3,
        Error::InvalidThreshold(_) | Error::InvalidConfig(_) | Error::UnknownExperiment(_) => 1,
        Error::TrainingDiverged { .. } => 4,
        other => match other.code() as i32 {
            30..=39 => 3,
            _ => 2,
        },
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut spec: TaskSpec = read_json(&a.spec)?;
    let mut pre: PretrainConfig = a.pretrain.as_deref().map(read_json).transpose()?.unwrap_or_default();
    if let Some(seed) = a.seed {
        spec.seed = seed;
        pre.seed = seed;
    }
    println!("effective seed: task {} pretrain {}", spec.seed, pre.seed);
    let task = gen_task(&spec)?;
    write_json(&a.out, &task)?;
    if let Some(path) = a.base_out {
        let model = pretrain(&task.pretrain, spec.num_classes, &pre)?;
        container::save_params(&path, &model.to_params()?)?;
        info!("wrote base model to {}", path.display());
    }
    Ok(())
}

fn train_adapter_cmd(a: TrainAdapterArgs) -> Result<()> {
    let task: SyntheticTask = read_json(&a.data)?;
    let base = container::load_params(&a.base)?;
    let mut cfg: TrainConfig = read_json(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let lora: LoraConfig = a.lora.as_deref().map(read_json).transpose()?.unwrap_or_default();
    println!("effective seed: train {} lora-init {} split {}", cfg.seed, lora.init_seed, task.spec.seed);
    let select = match (a.shard, a.fraction) {
        (Some((index, parts)), _) => DataSelection::Shard { index, parts },
        (None, Some(fraction)) => DataSelection::Fraction { fraction },
        (None, None) => DataSelection::All,
    };
    let data = select.select(task.train_split(&a.domain)?, task.spec.seed)?;
    let retain = match (&cfg.objective, &a.retain_domain) {
        (Objective::Gd { .. }, None) => {
            return Err(Error::InvalidConfig("the GD objective needs --retain-domain".into()))
        }
        (_, Some(r)) => Some(task.train_split(r)?.clone()),
        _ => None,
    };
    let model = ToyModel::from_params(&base, lora)?;
    let sets = TrainingSets {
        data: vec![data],
        retain,
    };
    let delta = train_adapter(&model, &sets, &cfg, &a.domain, &a.client_id)?;
    container::save_delta(&a.out, &delta)?;
    println!("wrote {} ({}, norm {:.6})", a.out.display(), delta.metadata.label(), delta.l2_norm()?);
    Ok(())
}

fn load_deltas(paths: &[PathBuf]) -> Result<Vec<fulm_core::AdapterDelta>> {
    paths.iter().map(container::load_delta).collect()
}

fn similarity_cmd(a: SimilarityArgs) -> Result<()> {
    let deltas = load_deltas(&a.inputs)?;
    let labels = deltas.iter().map(|d| d.metadata.label()).collect();
    let matrix = similarity_matrix_labeled(&deltas, labels)?;
    let clustering = a.xi.map(|xi| cluster(&matrix, xi)).transpose()?;
    match &a.csv {
        Some(path) => fs::write(path, matrix.to_csv())?,
        None => print!("{}", matrix.to_csv()),
    }
    if let Some(c) = &clustering {
        let groups: Vec<Vec<&str>> = c
            .clusters
            .iter()
            .map(|m| m.iter().map(|&i| matrix.labels[i].as_str()).collect())
            .collect();
        eprintln!("clusters at xi {}: {groups:?}", c.xi);
    }
    if let Some(path) = &a.json {
        write_json(path, &json!({ "matrix": matrix, "clustering": clustering }))?;
    }
    Ok(())
}

fn merge_cmd(a: MergeArgs) -> Result<()> {
    let deltas = load_deltas(&a.inputs)?;
    let strategy = match a.strategy {
        StrategyArg::Avg => MergeStrategy::Avg,
        StrategyArg::Sum => MergeStrategy::Sum,
        StrategyArg::Ties => MergeStrategy::Ties(TiesConfig::new(a.density)?),
        StrategyArg::Hier => MergeStrategy::Hierarchical {
            xi: a.xi,
            ties: TiesConfig::new(a.density)?,
        },
    };
    let outcome = merge(&deltas, strategy)?;
    let report = MergeReport::new(&deltas, &outcome)?;
    container::save_delta(&a.out, &outcome.delta)?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    println!("merged {} adapters with {} into {}", deltas.len(), report.strategy, a.out.display());
    if let Some(clusters) = &report.clusters {
        println!("clusters: {clusters:?}");
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut spec: SimulationSpec = read_json(&a.clients)?;
    if let Some(seed) = a.seed {
        spec.reseed(seed);
    }
    if let Some(mode) = a.retention_mode {
        spec.retention_mode = match mode {
            RetentionArg::Additive => RetentionMode::Additive,
            RetentionArg::Clustered => RetentionMode::Clustered,
        };
    }
    println!(
        "effective seed: task {} pretrain {} lora-init {}",
        spec.task.seed, spec.pretrain.seed, spec.lora.init_seed
    );
    let sim = spec.build()?;
    let cfg = RoundConfig {
        xi: a.xi,
        density: a.density,
        server_retention: sim.server_retention,
        retention_mode: sim.retention_mode,
        transport: match a.transport {
            TransportArg::Inproc => TransportKind::InProcess,
            TransportArg::Tcp => TransportKind::Tcp(a.listen),
        },
        timeout: Duration::from_secs(a.timeout),
    };
    let (model, report) = run_round(&sim.base, &sim.clients, &cfg)?;
    container::save_params(&a.out_model, &model)?;
    write_json(&a.report, &report)?;
    println!("round complete: {} clients, model digest {}", report.clients.len(), report.model_digest);
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if a.list {
        EXPERIMENTS.iter().for_each(|e| println!("{e}"));
        return Ok(());
    }
    let name = a.experiment.expect("required unless --list");
    println!("effective seeds: {:?}", a.seeds);
    let report = run_experiment(&name, &a.seeds)?;
    match &a.csv {
        Some(path) => fs::write(path, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    if let Some(path) = &a.json {
        fs::write(path, report.to_json()? + "\n")?;
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.path)?;
    let summary = match container::decode(&bytes)? {
        Container::Delta(delta) => {
            let tensors: Vec<_> = delta
                .entries
                .iter()
                .map(|(name, entry)| {
                    let norm = match entry {
                        DeltaEntry::Dense(t) => t.l2_norm(),
                        DeltaEntry::Lora(f) => f.to_dense(name)?.l2_norm(),
                    };
                    Ok(match entry {
                        DeltaEntry::Dense(t) => json!({
                            "name": name, "kind": "dense", "shape": t.shape(), "norm": norm,
                        }),
                        DeltaEntry::Lora(f) => json!({
                            "name": name, "kind": "lora", "shape": f.dense_shape(),
                            "down_shape": f.down.shape(), "up_shape": f.up.shape(),
                            "rank": f.rank, "alpha": f.alpha, "norm": norm,
                        }),
                    })
                })
                .collect::<Result<_>>()?;
            json!({
                "kind": "delta",
                "metadata": delta.metadata,
                "tensors": tensors,
                "num_coords": delta.num_coords(),
                "norm": delta.l2_norm()?,
                "digest": container::delta_digest(&delta)?,
            })
        }
        Container::Params(params) => {
            let tensors: Vec<_> = params
                .entries
                .iter()
                .map(|(name, t)| json!({ "name": name, "kind": "dense", "shape": t.shape(), "norm": t.l2_norm() }))
                .collect();
            let norm = params.entries.values().map(|t| t.l2_norm().powi(2)).sum::<f64>().sqrt();
            json!({
                "kind": "params",
                "tensors": tensors,
                "norm": norm,
                "digest": container::params_digest(&params)?,
            })
        }
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }
    println!("{}: {} container, {} bytes", a.path.display(), summary["kind"].as_str().unwrap_or("?"), bytes.len());
    if let Some(m) = summary.get("metadata") {
        let field = |k: &str| m[k].as_str().unwrap_or("").to_string();
        println!("  role {} domain {} client {}", field("role"), field("domain"), field("client_id"));
    }
    for t in summary["tensors"].as_array().into_iter().flatten() {
        let lora = match (t.get("rank"), t.get("alpha")) {
            (Some(r), Some(al)) => format!(" rank {r} alpha {al}"),
            _ => String::new(),
        };
        println!("  {} {} {}{lora} norm {:.6}", t["name"].as_str().unwrap_or(""), t["kind"].as_str().unwrap_or(""), t["shape"], t["norm"].as_f64().unwrap_or(0.0));
    }
    println!("  total norm {:.6}", summary["norm"].as_f64().unwrap_or(0.0));
    println!("  digest {}", summary["digest"].as_str().unwrap_or(""));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainAdapter(a) => train_adapter_cmd(a),
        Command::Similarity(a) => similarity_cmd(a),
        Command::Merge(a) => merge_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FULM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            debug_assert_ne!(e.code(), ErrorCode::Ok);
            ExitCode::from(exit_code(&e))
        }
    }
}
