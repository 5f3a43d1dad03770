//! Batch front end: build or load graphs, run the pass pipeline under a
//! chosen strategy, emit reports, comparisons, DOT exports and verification
//! runs.
//!
//! Exit codes: 0 success, 1 parse/validation error, 2 pipeline error,
//! 3 interpretation cap exceeded, 4 verification mismatch.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use remat_core::dot::{export_dot, DotHighlights};
use remat_core::graph::{Dtype, Graph};
use remat_core::interp::{self, ExecEnv, DEFAULT_ELEM_CAP};
use remat_core::ops::{default_registry, Registry};
use remat_core::pipeline::{run_pipeline, run_values, PipelineError, PipelineResult};
use remat_core::recompute::{stashed_edges, Strategy, StrategyConfig};
use remat_core::zoo::{self, ZooSpec};

use report::{AnalyzeReport, CompareRow};

#[derive(Parser)]
#[command(name = "remat", version, about = "Selective recomputation analyzer for training graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Zoo model name (see `build-model --list`)
    #[arg(long)]
    model: Option<String>,
    /// Model parameters as comma-separated K=V pairs, e.g. "T=64,N=256"
    #[arg(long, default_value = "")]
    params: String,
    /// Graph document to load instead of a zoo model
    #[arg(long)]
    input: Option<PathBuf>,
    /// Element dtype for zoo models
    #[arg(long, default_value = "f32")]
    dtype: String,
}

#[derive(Args, Clone)]
struct StrategyArgs {
    /// baseline | mirror | echo
    #[arg(long, default_value = "echo")]
    strategy: String,
    /// Bytes multiplier for trainable placeholders (weight + gradient +
    /// optimizer states)
    #[arg(long, default_value_t = 4)]
    weight_multiplier: u64,
    /// Disable dead-node handling of compute-heavy gradients
    #[arg(long)]
    no_dead_node: bool,
    /// Disable 1-bit feature-map binarization
    #[arg(long)]
    no_binarization: bool,
    /// Override the compute-heavy op set (comma-separated op names)
    #[arg(long)]
    compute_heavy: Option<String>,
    /// Treat nodes with at least this many flops as compute-heavy
    #[arg(long)]
    flop_threshold: Option<u64>,
    /// Config file with the same keys; command-line flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline under one strategy and report memory and cost
    Analyze {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Machine-readable JSON instead of a table
        #[arg(long)]
        json: bool,
        /// Write the report to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Side-by-side comparison of two or more strategies
    Compare {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Strategies to compare (at least two); ratios are versus the first
        #[arg(long, value_delimiter = ',', default_value = "baseline,mirror,echo")]
        strategies: Vec<String>,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute baseline and transformed graphs and check they agree
    Verify {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Seed for placeholder bindings and dropout masks
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Element-count cap for interpretation
        #[arg(long, default_value_t = DEFAULT_ELEM_CAP)]
        cap: u64,
        /// Negative control: corrupt one recomputed buffer and expect failure
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Emit a zoo model as a graph document
    BuildModel {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// List available models
        #[arg(long)]
        list: bool,
    },
    /// Emit the (optionally transformed) graph as DOT text
    ExportDot {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Transform the graph before export instead of exporting as loaded
        #[arg(long)]
        transformed: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Input(String),
    Pipeline(String),
    Cap(String),
    Mismatch(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Pipeline(_) => 2,
            CliError::Cap(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Pipeline(m) | CliError::Cap(m) | CliError::Mismatch(m) => m,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            let kind = e.kind();
            let _ = e.print();
            return if matches!(kind, ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    let registry = default_registry();
    match run(cli, &registry) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}

fn parse_dtype(s: &str) -> Result<Dtype, CliError> {
    match s {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(CliError::Input(format!("unsupported dtype `{}`", other))),
    }
}

fn parse_params(s: &str) -> Result<BTreeMap<String, u64>, CliError> {
    let mut map = BTreeMap::new();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Input(format!("bad parameter `{}` (want K=V)", part)))?;
        let v: u64 = v
            .parse()
            .map_err(|_| CliError::Input(format!("parameter `{}` is not an integer", part)))?;
        map.insert(k.trim().to_string(), v);
    }
    Ok(map)
}

fn load_graph(input: &InputArgs, registry: &Registry) -> Result<Graph, CliError> {
    match (&input.model, &input.input) {
        (Some(_), Some(_)) => Err(CliError::Input("--model and --input are exclusive".into())),
        (None, None) => Err(CliError::Input("one of --model or --input is required".into())),
        (Some(name), None) => {
            let params = parse_params(&input.params)?;
            let dt = parse_dtype(&input.dtype)?;
            let spec = ZooSpec::from_name(name, &params, dt)
                .map_err(|e| CliError::Input(e.to_string()))?;
            zoo::build(&spec, registry).map_err(|e| CliError::Input(e.to_string()))
        }
        (None, Some(path)) => {
            let bytes = std::fs::read(path)
                .map_err(|e| CliError::Input(format!("cannot read {}: {}", path.display(), e)))?;
            let g = remat_core::serialize::deserialize(&bytes, registry)
                .map_err(|e| CliError::Input(e.to_string()))?;
            g.validate(registry).map_err(|e| CliError::Input(e.to_string()))?;
            Ok(g)
        }
    }
}

#[derive(serde::Deserialize, Default)]
struct FileConfig {
    strategy: Option<String>,
    weight_multiplier: Option<u64>,
    dead_node: Option<bool>,
    binarization: Option<bool>,
    compute_heavy: Option<Vec<String>>,
    flop_threshold: Option<u64>,
    seed: Option<u64>,
}

struct Resolved {
    config: StrategyConfig,
    weight_multiplier: u64,
    seed: u64,
}

fn resolve_config(args: &StrategyArgs, cli_seed: Option<u64>) -> Result<Resolved, CliError> {
    let file: FileConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("cannot read {}: {}", path.display(), e)))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Input(format!("bad config file: {}", e)))?
        }
        None => FileConfig::default(),
    };
    // flags override the config file
    let strategy_name = if args.strategy != "echo" {
        args.strategy.clone()
    } else {
        file.strategy.unwrap_or_else(|| args.strategy.clone())
    };
    let strategy: Strategy =
        strategy_name.parse().map_err(|e: String| CliError::Input(e))?;
    let mut config = StrategyConfig::for_strategy(strategy);
    if let Some(v) = file.dead_node {
        config.enable_dead_node = v;
    }
    if let Some(v) = file.binarization {
        config.enable_binarization = v;
    }
    if args.no_dead_node {
        config.enable_dead_node = false;
    }
    if args.no_binarization {
        config.enable_binarization = false;
    }
    if let Some(list) = &file.compute_heavy {
        config.compute_heavy_ops = Some(list.iter().cloned().collect::<BTreeSet<_>>());
    }
    if let Some(csv) = &args.compute_heavy {
        config.compute_heavy_ops =
            Some(csv.split(',').map(|s| s.trim().to_string()).collect::<BTreeSet<_>>());
    }
    config.flop_threshold_override = args.flop_threshold.or(file.flop_threshold);
    let weight_multiplier = if args.weight_multiplier != 4 {
        args.weight_multiplier
    } else {
        file.weight_multiplier.unwrap_or(args.weight_multiplier)
    };
    let seed = cli_seed.or(file.seed).unwrap_or(0);
    Ok(Resolved { config, weight_multiplier, seed })
}

fn analyze_one(
    graph: &Graph,
    registry: &Registry,
    resolved: &Resolved,
    strategy: Strategy,
) -> Result<(PipelineResult, AnalyzeReport), CliError> {
    let mut config = resolved.config.clone();
    config.strategy = strategy;
    let result = run_pipeline(graph, registry, &config, resolved.weight_multiplier)?;
    let report = AnalyzeReport::new(strategy, &result);
    Ok((result, report))
}

fn emit(text: String, out: &Option<PathBuf>) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::Input(format!("cannot write {}: {}", path.display(), e))),
        None => {
            println!("{}", text);
            Ok(())
        }
    }
}

fn run(cli: Cli, registry: &Registry) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze { input, strategy, json, out } => {
            let graph = load_graph(&input, registry)?;
            let resolved = resolve_config(&strategy, None)?;
            let (_, report) = analyze_one(&graph, registry, &resolved, resolved.config.strategy)?;
            let text = if json { report.to_json() } else { report.to_table() };
            emit(text, &out)
        }
        Command::Compare { input, strategy, strategies, json, out } => {
            if strategies.len() < 2 {
                return Err(CliError::Input("compare needs at least two strategies".into()));
            }
            let graph = load_graph(&input, registry)?;
            let resolved = resolve_config(&strategy, None)?;
            let mut rows = Vec::new();
            for name in &strategies {
                let s: Strategy = name.parse().map_err(|e: String| CliError::Input(e))?;
                let (_, report) = analyze_one(&graph, registry, &resolved, s)?;
                rows.push(CompareRow::from_report(&report));
            }
            let text = if json {
                report::compare_json(&rows)
            } else {
                report::compare_table(&rows)
            };
            emit(text, &out)
        }
        Command::Verify { input, strategy, seed, cap, corrupt } => {
            let graph = load_graph(&input, registry)?;
            let resolved = resolve_config(&strategy, Some(seed))?;
            verify(&graph, registry, &resolved, cap, corrupt)
        }
        Command::BuildModel { input, out, list } => {
            if list {
                let text = ZooSpec::all_names().join("\n");
                return emit(text, &out);
            }
            let graph = load_graph(&input, registry)?;
            emit(remat_core::serialize::serialize_string(&graph), &out)
        }
        Command::ExportDot { input, strategy, transformed, out } => {
            let graph = load_graph(&input, registry)?;
            let text = if transformed {
                let resolved = resolve_config(&strategy, None)?;
                let (result, _) =
                    analyze_one(&graph, registry, &resolved, resolved.config.strategy)?;
                let highlights =
                    DotHighlights { feature_map_edges: stashed_edges(&result.graph) };
                export_dot(&result.graph, Some(&highlights))
            } else {
                export_dot(&graph, None)
            };
            emit(text, &out)
        }
    }
}

fn verify(
    graph: &Graph,
    registry: &Registry,
    resolved: &Resolved,
    cap: u64,
    corrupt: bool,
) -> Result<(), CliError> {
    let elems = interp::total_elements(graph, registry)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    if elems > cap {
        return Err(CliError::Cap(format!(
            "graph has {} interpreted elements, cap is {}",
            elems, cap
        )));
    }

    let baseline_cfg = StrategyConfig::for_strategy(Strategy::Baseline);
    let base =
        run_pipeline(graph, registry, &baseline_cfg, resolved.weight_multiplier)?;
    let subject = run_pipeline(graph, registry, &resolved.config, resolved.weight_multiplier)?;

    let env = ExecEnv::random_for(graph, resolved.seed);
    let base_vals = run_values(&base, registry, &env, resolved.weight_multiplier)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;
    let mut subject_env = env.clone();
    if corrupt {
        // perturb the first recomputed buffer (or the loss if none exists)
        let target = subject
            .graph
            .nodes()
            .find(|n| n.kind == remat_core::graph::NodeKind::Mirror)
            .map(|n| remat_core::graph::EdgeRef::new(n.id, 0))
            .unwrap_or(subject.graph.outputs[0]);
        subject_env.corrupt_edge = Some(target);
    }
    let subject_vals = run_values(&subject, registry, &subject_env, resolved.weight_multiplier)
        .map_err(|e| CliError::Pipeline(e.to_string()))?;

    let is_f64 = graph
        .placeholder_ids()
        .any(|id| graph.placeholder_info(id).unwrap().dtype == Dtype::F64);
    let close = |a: &remat_core::interp::TensorValue, b: &remat_core::interp::TensorValue| {
        if is_f64 {
            a.bit_eq(b)
        } else {
            a.max_rel_diff(b) <= 1e-6
        }
    };
    for (i, (a, b)) in base_vals.outputs.iter().zip(&subject_vals.outputs).enumerate() {
        if !close(a, b) {
            return Err(CliError::Mismatch(format!(
                "output {} differs between baseline and {} (max rel diff {:.3e})",
                i,
                resolved.config.strategy,
                a.max_rel_diff(b)
            )));
        }
    }
    for (name, a) in &base_vals.placeholder_grads {
        let b = &subject_vals.placeholder_grads[name];
        if !close(a, b) {
            return Err(CliError::Mismatch(format!(
                "gradient of `{}` differs (max rel diff {:.3e})",
                name,
                a.max_rel_diff(b)
            )));
        }
    }
    // measured liveness must agree with the analytical plan, both runs
    if base_vals.live_bytes != base.memory.timeline
        || subject_vals.live_bytes != subject.memory.timeline
    {
        return Err(CliError::Mismatch(
            "measured live bytes do not match the planner timeline".into(),
        ));
    }
    println!(
        "verify {}: outputs, gradients and live-bytes traces match baseline ({} steps)",
        resolved.config.strategy,
        subject.schedule.steps.len()
    );
    Ok(())
}
