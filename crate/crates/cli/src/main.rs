use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use elicit_core::data::{generate_synthetic, load_dataset, save_dataset, split_entities, SplitSpec, SyntheticConfig};
use elicit_core::eval::{
    run_experiment, subgroup_filter, write_artifacts, AnswerOracle, ExperimentSetup, Subgroup, TrialConfig,
};
use elicit_core::gateway::{RemoteModel, RemoteModelConfig};
use elicit_core::policy::{MctsConfig, PolicyConfig, PolicyKind};
use elicit_core::theory::{audit_greedy_bound, audit_simulator_bound, InstanceSpec, DEFAULT_PROBE_CHECKS};
use elicit_core::PredictiveModel;
use elicit_server::ServerConfig;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "elicit", version, about = "Adaptive question selection by expected information gain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, validate and split datasets.
    #[command(subcommand)]
    Data(DataCommand),
    /// Run evaluation experiments.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Brute-force audits of the greedy and simulator bounds.
    Theory(TheoryArgs),
    /// Serve live sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a synthetic clustered corpus.
    Gen(GenArgs),
    /// Load a dataset and print a summary.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Print a seeded entity split.
    Split(SplitArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    entities: usize,
    #[arg(long, default_value_t = 60)]
    questions: usize,
    #[arg(long, default_value_t = 4)]
    alphabet: usize,
    #[arg(long, default_value_t = 6)]
    clusters: usize,
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.70)]
    train: f64,
    #[arg(long, default_value_t = 0.15)]
    val: f64,
    #[arg(long, default_value_t = 0.15)]
    test: f64,
    /// Also write the split to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Seeded trials with one policy; writes report.json, records.csv and
    /// reliability.csv.
    Run(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Tabular,
    Remote,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Recorded,
    Generative,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "tabular")]
    model: ModelArg,
    #[arg(long, default_value = "greedy")]
    policy: PolicyKind,
    #[arg(long, default_value_t = 20)]
    candidates: usize,
    #[arg(long, default_value_t = 5)]
    targets: usize,
    #[arg(long, default_value_t = 8)]
    rounds: usize,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    #[arg(long, default_value = "all")]
    subgroup: Subgroup,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Additive smoothing when fitting the tabular model.
    #[arg(long, default_value_t = 1.0)]
    smoothing: f64,
    #[arg(long, value_enum, default_value = "recorded")]
    oracle: OracleArg,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long)]
    remote_url: Option<String>,
    #[arg(long)]
    remote_cache: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    mcts_top_k: usize,
    #[arg(long, default_value_t = 8)]
    mcts_rollouts: usize,
    #[arg(long, default_value_t = 3)]
    mcts_depth: usize,
    /// Run trials on all cores; output is identical either way.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 500)]
    greedy_instances: usize,
    #[arg(long, default_value_t = 100)]
    simulator_pairs: usize,
    #[arg(long, default_value_t = DEFAULT_PROBE_CHECKS)]
    probe_checks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full per-instance report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Overrides ELICIT_BIND.
    #[arg(long)]
    bind: Option<String>,
    /// Dataset path or `demo:r1`; overrides ELICIT_DATASET.
    #[arg(long)]
    dataset: Option<String>,
    /// `tabular` or `remote`; overrides ELICIT_MODEL.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    log_dir: Option<PathBuf>,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn data(cmd: DataCommand) -> Result<Value> {
    match cmd {
        DataCommand::Gen(a) => {
            let ds = generate_synthetic(&SyntheticConfig {
                n_entities: a.entities,
                n_questions: a.questions,
                alphabet_size: a.alphabet,
                n_latent_clusters: a.clusters,
                noise: a.noise,
                seed: a.seed,
            })?;
            save_dataset(&ds, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
            Ok(json!({
                "out": a.out,
                "entities": ds.entities().len(),
                "questions": ds.catalog().len(),
            }))
        }
        DataCommand::Validate { dataset } => {
            let ds = load_dataset(&dataset).with_context(|| format!("loading {}", dataset.display()))?;
            let answers: usize = ds.entities().iter().map(|e| e.answers.len()).sum();
            let cells = ds.entities().len() * ds.catalog().len();
            Ok(json!({
                "valid": true,
                "entities": ds.entities().len(),
                "questions": ds.catalog().len(),
                "answers": answers,
                "coverage": if cells > 0 { answers as f64 / cells as f64 } else { 0.0 },
            }))
        }
        DataCommand::Split(a) => {
            let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
            let split = split_entities(
                &ds,
                &SplitSpec {
                    train: a.train,
                    val: a.val,
                    test: a.test,
                    seed: a.seed,
                },
            )?;
            if let Some(out) = &a.out {
                let mut s = serde_json::to_string_pretty(&split)?;
                s.push('\n');
                std::fs::write(out, s)?;
            }
            Ok(serde_json::to_value(&split)?)
        }
    }
}

fn eval(cmd: EvalCommand) -> Result<Value> {
    let EvalCommand::Run(a) = cmd;
    let ds = load_dataset(&a.dataset).with_context(|| format!("loading {}", a.dataset.display()))?;
    let split = split_entities(
        &ds,
        &SplitSpec {
            seed: a.split_seed,
            ..SplitSpec::default()
        },
    )?;
    let table = ds.fit(&split.train, a.smoothing)?;
    let filter = subgroup_filter(&ds, &split.train, a.subgroup)?;
    let mut policy = PolicyConfig::new(a.policy);
    policy.mcts = MctsConfig {
        top_k: a.mcts_top_k,
        n_rollouts: a.mcts_rollouts,
        depth: a.mcts_depth,
        ..MctsConfig::default()
    };
    policy.seed = a.seed;
    let config = TrialConfig {
        n_candidates: a.candidates,
        n_targets: a.targets,
        rounds: a.rounds,
        policy,
        subgroup: a.subgroup,
        seed: a.seed,
    };
    let (model, name): (Arc<dyn PredictiveModel>, &str) = match a.model {
        ModelArg::Tabular => (Arc::new(table.clone()), "tabular"),
        ModelArg::Remote => {
            let Some(url) = a.remote_url.clone() else {
                bail!("--model remote needs --remote-url");
            };
            let mut rc = RemoteModelConfig::new(url);
            rc.cache_path = a.remote_cache.clone();
            (Arc::new(RemoteModel::new(rc, ds.catalog_arc().clone())?), "remote")
        }
    };
    let setup = ExperimentSetup {
        dataset: &ds,
        test_ids: &split.test,
        filter: &filter,
        oracle: match a.oracle {
            OracleArg::Recorded => AnswerOracle::Recorded,
            OracleArg::Generative => AnswerOracle::Generative(&table),
        },
        model_name: name.into(),
        parallel: a.parallel,
    };
    let (report, trials) = run_experiment(&setup, model.as_ref(), &config, a.trials)?;
    write_artifacts(&a.out, &report, &trials)?;
    let last = report.metrics.per_step.last().map(|s| &s.metrics);
    Ok(json!({
        "out": a.out,
        "completed": report.completed,
        "failed": report.failures.len(),
        "flagged": report.flagged,
        "final_accuracy": last.map(|m| m.accuracy),
        "final_perplexity": last.map(|m| m.perplexity),
    }))
}

fn theory(a: TheoryArgs) -> Result<Value> {
    let greedy = audit_greedy_bound(a.greedy_instances, a.seed, &InstanceSpec::default(), a.probe_checks)?;
    let sim = audit_simulator_bound(a.simulator_pairs, a.seed)?;
    if let Some(out) = &a.out {
        let mut s = serde_json::to_string_pretty(&json!({ "greedy": greedy, "simulator": sim }))?;
        s.push('\n');
        std::fs::write(out, s)?;
    }
    let summary = json!({
        "greedy": {
            "instances": greedy.instances,
            "probe_passed": greedy.probe_passed,
            "asserted_violations": greedy.asserted_violations,
            "unasserted_holding": greedy.unasserted_holding,
            "unasserted_failing": greedy.unasserted_failing,
            "min_asserted_slack": greedy.min_asserted_slack,
        },
        "simulator": {
            "pairs": sim.pairs,
            "holding": sim.holding,
            "vacuous": sim.vacuous,
            "min_slack": sim.min_slack,
        },
    });
    if greedy.asserted_violations > 0 || sim.holding < sim.pairs {
        println!("{}", serde_json::to_string_pretty(&summary)?);
        bail!("bound violated");
    }
    Ok(summary)
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut c = ServerConfig::from_env()?;
    if let Some(b) = a.bind {
        c.bind = b.parse().with_context(|| format!("bad --bind `{b}`"))?;
    }
    if let Some(d) = a.dataset {
        c.dataset = d;
    }
    if let Some(m) = a.model {
        c.model = m;
    }
    if a.log_dir.is_some() {
        c.log_dir = a.log_dir;
    }
    if a.static_dir.is_some() {
        c.static_dir = a.static_dir;
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(elicit_server::serve(c))?;
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let summary = match Cli::parse().command {
        Command::Data(c) => data(c)?,
        Command::Eval(c) => eval(c)?,
        Command::Theory(a) => theory(a)?,
        Command::Serve(a) => return serve(a),
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
