//! `vreg` — voltage-regulation OPF experiments on radial feeders.
//!
//! Subcommands: `generate` a synthetic feeder, `partition` it into
//! subtrees, `certify` a step size, `run` a scenario with the central
//! and/or hierarchical solver, and `compare` the two drivers iteration by
//! iteration. Exit codes: 0 success, 1 usage, 2 validation or runtime
//! failure, 3 divergence detected.

use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use vreg_core::central::StopCriterion;
use vreg_core::harness::scenario::build_problem;
use vreg_core::harness::{
    auto_partition, generate_feeder, preset, read_feeder_file, run_scenario, write_feeder_file,
    write_partition_file, EpsilonChoice, FeederSource, GeneratorSpec, HeadTarget, PartitionSource,
    ScenarioConfig, ScenarioSummary, SolverChoice, VoltageModel,
};
use vreg_core::opf::certify_stepsize;

#[derive(Parser)]
#[command(
    name = "vreg",
    version,
    about = "Voltage-regulation OPF on radial feeders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random radial feeder file.
    Generate(GenerateArgs),
    /// Pick disjoint subtrees of a feeder and write a partition file.
    Partition(PartitionArgs),
    /// Print the step-size certificate for a feeder's dispatch problem.
    Certify(ProblemArgs),
    /// Run a scenario and write traces, profiles, and a report.
    Run(RunArgs),
    /// Run both solvers in lockstep and report the iterate deviation.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of non-slack nodes.
    #[arg(long)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    max_branching: usize,
    /// Generator seed (generation is deterministic per seed).
    #[arg(long)]
    seed: u64,
    /// Line resistance range, p.u., as lo:hi.
    #[arg(long, value_parser = parse_range, default_value = "0.005:0.02")]
    r: (f64, f64),
    /// Line reactance range, p.u., as lo:hi.
    #[arg(long, value_parser = parse_range, default_value = "0.01:0.04")]
    x: (f64, f64),
    /// Background active injection range (negative = load), as lo:hi.
    #[arg(long, value_parser = parse_range, default_value = "-0.03:-0.01")]
    p0: (f64, f64),
    /// Background reactive injection range, as lo:hi.
    #[arg(long, value_parser = parse_range, default_value = "-0.015:-0.005")]
    q0: (f64, f64),
    #[arg(long, default_value_t = 1.0)]
    v0: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    feeder: PathBuf,
    /// Number of subtrees for the greedy heuristic.
    #[arg(long, conflicts_with = "roots")]
    k: Option<usize>,
    /// Explicit subtree roots, comma-separated node ids.
    #[arg(long, value_delimiter = ',')]
    roots: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

/// Flags shared by certify/run/compare that shape the dispatch problem.
#[derive(Args, Clone)]
struct ProblemArgs {
    #[arg(long, required_unless_present = "preset")]
    feeder: Option<PathBuf>,
    /// Named preset scenario (undervoltage-chain-20, equivalence-60x3).
    #[arg(long)]
    preset: Option<String>,
    /// Dual regularization weight.
    #[arg(long)]
    phi: Option<f64>,
    /// Head-cost weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Head-power target as a fraction of the initial head power.
    #[arg(long, conflicts_with = "p0_hat")]
    p0_hat_frac: Option<f64>,
    /// Absolute head-power target.
    #[arg(long)]
    p0_hat: Option<f64>,
    /// Uniform lower voltage bound, p.u.
    #[arg(long)]
    v_lo: Option<f64>,
    /// Uniform upper voltage bound, p.u.
    #[arg(long)]
    v_hi: Option<f64>,
    /// Device cost weight on active deviation (rule-built devices).
    #[arg(long)]
    cp: Option<f64>,
    #[arg(long)]
    cq: Option<f64>,
    /// Curtailable fraction of each node's background load.
    #[arg(long)]
    curtail_frac: Option<f64>,
    /// Reactive capability as a fraction of the background load.
    #[arg(long)]
    q_frac: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Partition file for the hierarchical solver.
    #[arg(long)]
    partition: Option<PathBuf>,
    /// Auto-partition into this many subtrees.
    #[arg(long, conflicts_with = "partition")]
    auto_k: Option<usize>,
    /// Explicit subtree roots.
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["partition", "auto_k"])]
    roots: Vec<usize>,
    /// Which driver(s) to run (presets carry their own default).
    #[arg(long, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long, value_enum)]
    voltage_source: Option<VoltageArg>,
    /// Constant step size, or "auto" for the certified step.
    #[arg(long)]
    epsilon: Option<String>,
    /// Fraction of the certified bound used when epsilon is auto.
    #[arg(long, default_value_t = 0.9)]
    epsilon_fraction: f64,
    /// Stopping tolerance.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, value_enum)]
    stop: Option<StopArg>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long)]
    partition: Option<PathBuf>,
    #[arg(long, conflicts_with = "partition")]
    auto_k: Option<usize>,
    #[arg(long, value_delimiter = ',', conflicts_with_all = ["partition", "auto_k"])]
    roots: Vec<usize>,
    /// Fixed iteration horizon for the lockstep comparison.
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, value_enum)]
    voltage_source: Option<VoltageArg>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    epsilon_fraction: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Central,
    Hierarchical,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum VoltageArg {
    Linear,
    Nonlinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum StopArg {
    FixedPoint,
    HeadPower,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| format!("expected lo:hi, got {s:?}"))?;
    let lo: f64 = lo.parse().map_err(|_| format!("bad number {lo:?}"))?;
    let hi: f64 = hi.parse().map_err(|_| format!("bad number {hi:?}"))?;
    Ok((lo, hi))
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        let code = match err.downcast_ref::<vreg_core::Error>() {
            Some(vreg_core::Error::Divergence { .. }) => 3,
            _ => 2,
        };
        std::process::exit(code);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => generate(args),
        Command::Partition(args) => partition(args),
        Command::Certify(args) => certify(args),
        Command::Run(args) => run(args),
        Command::Compare(args) => compare(args),
    }
}

fn generate(args: GenerateArgs) -> Result<()> {
    let spec = GeneratorSpec {
        nodes: args.nodes,
        max_branching: args.max_branching,
        r_range: args.r,
        x_range: args.x,
        p0_range: args.p0,
        q0_range: args.q0,
        v0: args.v0,
    };
    let model = generate_feeder(&spec, args.seed)?;
    write_feeder_file(&args.out, &model, &[], None)?;
    println!(
        "wrote {} ({} nodes, {} lines, seed {})",
        args.out.display(),
        model.node_count(),
        model.lines().len(),
        args.seed
    );
    Ok(())
}

fn partition(args: PartitionArgs) -> Result<()> {
    let file = read_feeder_file(&args.feeder)
        .with_context(|| format!("reading {}", args.feeder.display()))?;
    let partition = if !args.roots.is_empty() {
        vreg_core::hierarchy::Partition::from_roots(&file.model, &args.roots)?
    } else {
        let k = args
            .k
            .ok_or_else(|| anyhow!("either --k or --roots is required"))?;
        auto_partition(&file.model, k)?
    };
    write_partition_file(&args.out, &partition)?;
    println!(
        "wrote {} ({} subtrees, {} unclustered nodes)",
        args.out.display(),
        partition.ag_count(),
        partition.unclustered().len()
    );
    Ok(())
}

/// Applies the shared problem flags onto a base scenario config.
fn apply_problem_args(config: &mut ScenarioConfig, args: &ProblemArgs) -> Result<()> {
    if let Some(path) = &args.feeder {
        config.feeder = FeederSource::File(path.clone());
    }
    if let Some(phi) = args.phi {
        config.phi = phi;
    }
    if let Some(alpha) = args.alpha {
        config.alpha = alpha;
    }
    if let Some(f) = args.p0_hat_frac {
        config.head_target = HeadTarget::FractionOfInitial(f);
    }
    if let Some(v) = args.p0_hat {
        config.head_target = HeadTarget::Absolute(v);
    }
    match (args.v_lo, args.v_hi, config.bounds) {
        (None, None, _) => {}
        (lo, hi, old) => {
            let (dl, dh) = old.unwrap_or((0.95, 1.05));
            config.bounds = Some((lo.unwrap_or(dl), hi.unwrap_or(dh)));
        }
    }
    let rule = &mut config.device_rule;
    if let Some(cp) = args.cp {
        rule.cp = cp;
    }
    if let Some(cq) = args.cq {
        rule.cq = cq;
    }
    if let Some(c) = args.curtail_frac {
        rule.curtail_frac = c;
    }
    if let Some(qf) = args.q_frac {
        rule.q_frac = qf;
    }
    Ok(())
}

fn base_config(problem: &ProblemArgs) -> Result<ScenarioConfig> {
    let mut config = match &problem.preset {
        Some(name) => preset(name).ok_or_else(|| anyhow!("unknown preset {name:?}"))?,
        None => ScenarioConfig::default(),
    };
    apply_problem_args(&mut config, problem)?;
    Ok(config)
}

fn parse_epsilon(epsilon: &str, fraction: f64) -> Result<EpsilonChoice> {
    if epsilon == "auto" {
        Ok(EpsilonChoice::Auto { fraction })
    } else {
        let value: f64 = epsilon
            .parse()
            .map_err(|_| anyhow!("--epsilon must be \"auto\" or a number, got {epsilon:?}"))?;
        Ok(EpsilonChoice::Fixed(value))
    }
}

fn certify(args: ProblemArgs) -> Result<()> {
    let config = base_config(&args)?;
    let (_, prob, sens) = build_problem(&config)?;
    let cert = certify_stepsize(&prob, &sens)?;
    println!("nodes {}", prob.node_count());
    println!("monotonicity_m {}", cert.m);
    println!("lipschitz_l {}", cert.l);
    println!("step_bound {}", cert.step_bound());
    println!("suggested_epsilon {}", cert.suggested_epsilon());
    Ok(())
}

fn partition_source(
    partition: &Option<PathBuf>,
    auto_k: &Option<usize>,
    roots: &[usize],
) -> Option<PartitionSource> {
    if let Some(path) = partition {
        Some(PartitionSource::File(path.clone()))
    } else if let Some(k) = auto_k {
        Some(PartitionSource::Auto { k: *k })
    } else if !roots.is_empty() {
        Some(PartitionSource::Roots(roots.to_vec()))
    } else {
        None
    }
}

fn print_summary(summary: &ScenarioSummary) {
    println!("nodes {}", summary.node_count);
    println!("epsilon {}", summary.epsilon);
    println!("initial_v_min {}", summary.v_min_initial);
    if let Some(run) = &summary.central {
        println!(
            "central: converged {} in {} iterations, final v in [{:.6}, {:.6}]",
            run.converged, run.iterations, run.v_min_final, run.v_max_final
        );
    }
    if let Some(run) = &summary.hierarchical {
        println!(
            "hierarchical: converged {} in {} iterations, final v in [{:.6}, {:.6}]",
            run.converged, run.iterations, run.v_min_final, run.v_max_final
        );
    }
    if let Some(dev) = summary.max_iterate_deviation {
        println!("max_iterate_deviation {dev:e}");
    }
}

fn run(args: RunArgs) -> Result<()> {
    let mut config = base_config(&args.problem)?;
    if let Some(src) = partition_source(&args.partition, &args.auto_k, &args.roots) {
        config.partition = Some(src);
    }
    if let Some(solver) = args.solver {
        config.solver = match solver {
            SolverArg::Central => SolverChoice::Central,
            SolverArg::Hierarchical => SolverChoice::Hierarchical,
            SolverArg::Both => SolverChoice::Both,
        };
    }
    if let Some(voltage) = args.voltage_source {
        config.voltage = match voltage {
            VoltageArg::Linear => VoltageModel::Linear,
            VoltageArg::Nonlinear => VoltageModel::Nonlinear,
        };
    }
    if let Some(epsilon) = &args.epsilon {
        config.epsilon = parse_epsilon(epsilon, args.epsilon_fraction)?;
    }
    if let Some(sigma) = args.sigma {
        config.sigma = sigma;
    }
    if let Some(max_iter) = args.max_iter {
        config.max_iter = max_iter;
    }
    if let Some(stop) = args.stop {
        config.stop = match stop {
            StopArg::FixedPoint => StopCriterion::FixedPoint,
            StopArg::HeadPower => StopCriterion::HeadPower,
        };
    }
    let summary = run_scenario(&config, &args.out_dir)?;
    print_summary(&summary);
    println!("artifacts in {}", args.out_dir.display());
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let mut config = base_config(&args.problem)?;
    config.partition =
        partition_source(&args.partition, &args.auto_k, &args.roots).or(config.partition.take());
    if config.partition.is_none() {
        bail!("compare needs a partition (--partition, --auto-k, or --roots)");
    }
    config.solver = SolverChoice::Both;
    if let Some(voltage) = args.voltage_source {
        config.voltage = match voltage {
            VoltageArg::Linear => VoltageModel::Linear,
            VoltageArg::Nonlinear => VoltageModel::Nonlinear,
        };
    }
    if let Some(epsilon) = &args.epsilon {
        config.epsilon = parse_epsilon(epsilon, args.epsilon_fraction)?;
    }
    config.sigma = 0.0;
    config.max_iter = args.iters;
    let summary = run_scenario(&config, &args.out_dir)?;
    print_summary(&summary);
    let dev = summary
        .max_iterate_deviation
        .expect("both solvers ran with recorded iterates");
    println!(
        "comparison over {} iterations: max relative deviation {dev:e}",
        args.iters
    );
    println!("artifacts in {}", args.out_dir.display());
    Ok(())
}
