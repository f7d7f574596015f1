//! `apg`: generate PrereqWorld domains, solve them, sample transitions, build
//! abstracted policy graphs, query them, and run the evaluation experiments.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use apg_core::apg::{build_graph, divide_abstract_states, Apg, ApgError};
use apg_core::dot::to_dot;
use apg_core::eval::sampling::{exhaustive_transitions, sample_trajectories, sample_transition_set};
use apg_core::eval::{
    run_generalization, run_nhop, run_size, write_csv, EvalError, ExperimentConfig, ExperimentKind,
    GENERATION_RETRIES,
};
use apg_core::formats::{check_schema_version, FormatError, SolutionFile, SCHEMA_VERSION};
use apg_core::manifest::RunManifest;
use apg_core::mdp::{validate_transition_set, MdpError, Outcome, State, TransitionTuple};
use apg_core::prereqworld::{generate_instance, DomainError, GenerationOptions, PrereqWorld};
use apg_core::seed::SeedStream;
use apg_core::solver::{min_action_gap, solve, SolverConfig, SolverError};

#[derive(Debug, Parser)]
#[command(name = "apg", version, about = "Abstracted policy graphs for binary-feature MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a random PrereqWorld instance.
    GenerateDomain {
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 0.0)]
        rho: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a domain; writes the greedy policy and its values.
    Solve {
        #[arg(long)]
        domain: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample on-policy transition tuples.
    #[command(group(ArgGroup::new("mode").required(true).args(["coverage", "trajectories", "exhaustive"])))]
    Sample {
        #[arg(long)]
        domain: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        /// One tuple from each of this fraction of non-terminal states.
        #[arg(long)]
        coverage: Option<f64>,
        /// Tuples collected from episodes with uniform starts.
        #[arg(long)]
        trajectories: Option<usize>,
        /// One tuple from every non-terminal state.
        #[arg(long)]
        exhaustive: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an abstracted policy graph from sampled transitions.
    BuildApg {
        #[arg(long)]
        transitions: PathBuf,
        /// Solution file written by `solve`.
        #[arg(long)]
        policy: PathBuf,
        /// Split threshold; defaults to the solution's smallest action gap.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the node, relevant features and summary for a state.
    Explain {
        #[arg(long)]
        apg: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        state: String,
    },
    /// Print the distribution of the action taken n steps ahead.
    Predict {
        #[arg(long)]
        apg: PathBuf,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        state: String,
        #[arg(long)]
        n: usize,
    },
    /// Render a graph as Graphviz DOT.
    ExportDot {
        #[arg(long)]
        apg: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an evaluation experiment and write CSV results.
    Experiment {
        kind: Kind,
        /// JSON object overriding the experiment defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Summary CSV; per-instance rows go to `<stem>.instances.csv`.
        #[arg(long)]
        out: PathBuf,
        /// m = 15, 100 instances, 1000 evaluation states.
        #[arg(long)]
        full_scale: bool,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    Generalization,
    Nhop,
    Size,
}

impl From<Kind> for ExperimentKind {
    fn from(kind: Kind) -> Self {
        match kind {
            Kind::Generalization => ExperimentKind::Generalization,
            Kind::Nhop => ExperimentKind::Nhop,
            Kind::Size => ExperimentKind::Size,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Version { path: PathBuf, source: FormatError },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Apg(#[from] ApgError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl CliError {
    /// 2 is reserved for usage errors reported by the argument parser.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Eval(EvalError::Io(_)) => 3,
            CliError::Parse { .. } => 4,
            CliError::Version { .. } | CliError::Eval(EvalError::Format(_)) => 5,
            CliError::Invalid(_) | CliError::Mdp(_) | CliError::Eval(EvalError::Mdp(_)) => 6,
            CliError::Domain(_) | CliError::Eval(EvalError::Domain(_)) => 7,
            CliError::Solver(_) | CliError::Eval(EvalError::Solver(_)) => 8,
            CliError::Apg(_) | CliError::Eval(EvalError::Apg(_)) => 9,
            CliError::Eval(EvalError::Config(_)) => 10,
            CliError::Eval(EvalError::Csv(_)) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_error(path: &Path, e: serde_json::Error) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

/// Reads a JSON file, checking `schema_version` before the typed decode so
/// that files from another major version fail with a version error.
fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    check_version(path, &text)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e))
}

/// Syntax check with line context, then the major-version check.
fn check_version(path: &Path, text: &str) -> CliResult<()> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| parse_error(path, e))?;
    match value.get("schema_version") {
        Some(version) => check_schema_version(version.as_str().unwrap_or_default()).map_err(|source| {
            CliError::Version {
                path: path.to_path_buf(),
                source,
            }
        }),
        None => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    write_text(path, &(text + "\n"))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn instances_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.instances.csv"))
}

/// Records the run next to `out` after the artifact has been written.
fn write_manifest(mut manifest: RunManifest, inputs: &[&Path], out: &Path) -> CliResult<()> {
    for input in inputs {
        manifest.add_input(input).map_err(|source| CliError::Io {
            path: input.to_path_buf(),
            source,
        })?;
    }
    manifest.finish();
    let path = manifest_path(out);
    manifest.write(&path).map_err(|source| CliError::Io { path, source })
}

fn parse_state(text: &str, width: usize) -> CliResult<State> {
    let state: State = text.parse()?;
    if state.width() != width {
        return Err(CliError::Invalid(format!(
            "state {text} has {} features, the graph has {width}",
            state.width()
        )));
    }
    Ok(state)
}

fn generate_domain(m: usize, rho: f64, seed: u64, out: &Path, manifest: RunManifest) -> CliResult<()> {
    let stream = SeedStream::new(seed);
    let mut last = None;
    for retry in 0..GENERATION_RETRIES {
        let mut rng = stream.rng("domain", retry);
        match generate_instance(m, rho, &mut rng, &GenerationOptions::default()) {
            Ok(domain) => {
                log::info!("generated m={m} with {} edges after {retry} retries", domain.num_edges());
                write_json(out, &domain)?;
                return write_manifest(manifest.with_seed(seed), &[], out);
            }
            Err(e @ DomainError::GenerationExhausted { .. }) => {
                log::debug!("generation retry {retry}: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(last.expect("at least one attempt").into())
}

fn solve_domain(domain_path: &Path, gamma: f64, out: &Path, manifest: RunManifest) -> CliResult<()> {
    let domain: PrereqWorld = read_json(domain_path)?;
    let solution = solve(&domain, &SolverConfig::with_gamma(gamma))?;
    let gap = min_action_gap(&solution.q).ok();
    log::info!("solved in {} sweeps, min action gap {gap:?}", solution.sweeps);
    let file = SolutionFile {
        schema_version: SCHEMA_VERSION.to_string(),
        gamma,
        min_action_gap: gap,
        policy: solution.policy,
        value: solution.values,
    };
    write_json(out, &file)?;
    write_manifest(manifest, &[domain_path], out)
}

#[allow(clippy::too_many_arguments)]
fn sample(
    domain_path: &Path,
    policy_path: &Path,
    coverage: Option<f64>,
    trajectories: Option<usize>,
    exhaustive: bool,
    seed: u64,
    out: &Path,
    manifest: RunManifest,
) -> CliResult<()> {
    let domain: PrereqWorld = read_json(domain_path)?;
    let solution: SolutionFile = read_json(policy_path)?;
    let mut rng = SeedStream::new(seed).rng("sample", 0);
    let tuples = if let Some(c) = coverage {
        if !(c > 0.0 && c <= 1.0) {
            return Err(CliError::Invalid(format!("coverage {c} outside (0, 1]")));
        }
        sample_transition_set(&domain, &solution.policy, c, &mut rng)?
    } else if let Some(n) = trajectories {
        sample_trajectories(&domain, &solution.policy, n, &mut rng)?
    } else {
        debug_assert!(exhaustive);
        exhaustive_transitions(&domain, &solution.policy, &mut rng)?
    };
    log::info!("sampled {} tuples", tuples.len());
    write_json(out, &tuples)?;
    write_manifest(manifest.with_seed(seed), &[domain_path, policy_path], out)
}

fn build_apg(
    transitions_path: &Path,
    policy_path: &Path,
    epsilon: Option<f64>,
    out: &Path,
    manifest: RunManifest,
) -> CliResult<()> {
    let tuples: Vec<TransitionTuple> = read_json(transitions_path)?;
    let solution: SolutionFile = read_json(policy_path)?;
    let width = tuples.first().ok_or(ApgError::EmptySet)?.s.width();
    validate_transition_set(&tuples, width, width)?;
    let epsilon = match epsilon.or(solution.min_action_gap) {
        Some(e) => e,
        None => {
            return Err(CliError::Invalid(
                "the solution has no action gap; pass --epsilon".into(),
            ))
        }
    };
    let values = &solution.value;
    let mut missing = None;
    let division = divide_abstract_states(
        &tuples,
        &solution.policy,
        |s| match values.value(s) {
            Some(v) => v,
            None => {
                missing.get_or_insert(*s);
                f64::NAN
            }
        },
        epsilon,
    );
    if let Some(s) = missing {
        return Err(CliError::Invalid(format!("solution has no value for state {s}")));
    }
    let division = division?;
    let apg = build_graph(&division, &solution.policy)?;
    println!("epsilon {epsilon}: {} nodes from {} tuples", apg.num_nodes(), tuples.len());
    write_json(out, &apg)?;
    write_manifest(manifest, &[transitions_path, policy_path], out)
}

fn explain(apg_path: &Path, policy_path: &Path, state: &str) -> CliResult<()> {
    let apg: Apg = read_json(apg_path)?;
    let solution: SolutionFile = read_json(policy_path)?;
    let s = parse_state(state, apg.num_features())?;
    let id = apg.classify_state(&s, &solution.policy)?;
    let features = apg.relevant_features(&s, &solution.policy)?;
    let summary = apg.summarize_node(id)?;
    println!("state {s} is in node b{id}");
    let listed: Vec<String> = features.iter().map(|f| format!("f_{f}")).collect();
    if listed.is_empty() {
        println!("relevant features: none");
    } else {
        println!("relevant features: {}", listed.join(", "));
    }
    println!("summary: {summary}");
    println!("shared by all {} members: {}", summary.count, summary.shared_description());
    Ok(())
}

fn predict(apg_path: &Path, policy_path: &Path, state: &str, n: usize) -> CliResult<()> {
    let apg: Apg = read_json(apg_path)?;
    let solution: SolutionFile = read_json(policy_path)?;
    let s = parse_state(state, apg.num_features())?;
    let dist = apg.predict_action_distribution(&s, n, &solution.policy)?;
    let mut entries: Vec<(Outcome, f64)> = dist.actions.iter().map(|(&a, &p)| (Outcome::Act(a), p)).collect();
    entries.push((Outcome::Terminated, dist.terminated));
    entries.retain(|&(_, p)| p > 0.0);
    entries.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    for (outcome, p) in entries {
        println!("{outcome}\t{p:.6}");
    }
    Ok(())
}

fn export_dot(apg_path: &Path, out: &Path, manifest: RunManifest) -> CliResult<()> {
    let apg: Apg = read_json(apg_path)?;
    write_text(out, &to_dot(&apg))?;
    write_manifest(manifest, &[apg_path], out)
}

fn experiment(
    kind: Kind,
    config_path: Option<&Path>,
    out: &Path,
    full_scale: bool,
    seed: Option<u64>,
    manifest: RunManifest,
) -> CliResult<()> {
    let kind = ExperimentKind::from(kind);
    let mut config = match config_path {
        Some(path) => {
            let text = read_text(path)?;
            check_version(path, &text)?;
            ExperimentConfig::from_json(kind, &text)?
        }
        None => ExperimentConfig::defaults(kind),
    };
    if full_scale {
        config = config.full_scale();
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config.validate()?;
    let instances = instances_path(out);
    match kind {
        ExperimentKind::Generalization => {
            let result = run_generalization(&config)?;
            write_csv(&result.summary, out)?;
            write_csv(&result.instances, &instances)?;
        }
        ExperimentKind::Nhop => {
            let result = run_nhop(&config)?;
            write_csv(&result.summary, out)?;
            write_csv(&result.instances, &instances)?;
        }
        ExperimentKind::Size => {
            let result = run_size(&config)?;
            write_csv(&result.summary, out)?;
            write_csv(&result.instances, &instances)?;
        }
    }
    println!("wrote {} and {}", out.display(), instances.display());
    let inputs: Vec<&Path> = config_path.into_iter().collect();
    write_manifest(manifest.with_seed(config.seed).with_config(&config), &inputs, out)
}

fn run(cli: Cli) -> CliResult<()> {
    let manifest = RunManifest::start(std::env::args().collect());
    match cli.command {
        Command::GenerateDomain { m, rho, seed, out } => generate_domain(m, rho, seed, &out, manifest),
        Command::Solve { domain, gamma, out } => solve_domain(&domain, gamma, &out, manifest),
        Command::Sample {
            domain,
            policy,
            coverage,
            trajectories,
            exhaustive,
            seed,
            out,
        } => sample(&domain, &policy, coverage, trajectories, exhaustive, seed, &out, manifest),
        Command::BuildApg {
            transitions,
            policy,
            epsilon,
            out,
        } => build_apg(&transitions, &policy, epsilon, &out, manifest),
        Command::Explain { apg, policy, state } => explain(&apg, &policy, &state),
        Command::Predict { apg, policy, state, n } => predict(&apg, &policy, &state, n),
        Command::ExportDot { apg, out } => export_dot(&apg, &out, manifest),
        Command::Experiment {
            kind,
            config,
            out,
            full_scale,
            seed,
        } => experiment(kind, config.as_deref(), &out, full_scale, seed, manifest),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
