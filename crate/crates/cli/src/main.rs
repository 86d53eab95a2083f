use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use feeder_opf::central::{solve_central, CentralOptions};
use feeder_opf::certificates::{certify_snapshots, snapshots_from_traces, CertificateRun};
use feeder_opf::coordinator::{run_endico, CoordinatorError, Objective, ProtocolOptions, RunResult, Variant};
use feeder_opf::network::{generate_line_feeder, generate_tree_feeder, load_feeder, FeederModel, GeneratorConfig, TreeShape};
use feeder_opf::trace::{parse_trace, write_certificate_csv, write_trace_csv, CertificateSummary, Comparison, RunSummary};

const EXIT_NOT_CONVERGED: u8 = 1;
const EXIT_INPUT: u8 = 2;

#[derive(Parser)]
#[command(name = "feeder-opf", version, about = "Distributed optimal power flow on radial feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the message-passing protocol and write its trace.
    Run(RunArgs),
    /// Run the protocol and the central solver and compare them.
    Compare(RunArgs),
    /// Evaluate convergence conditions on a recorded trace.
    Certify(CertifyArgs),
    /// Write a synthetic feeder.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveArg {
    Loss,
    Dv,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum VariantArg {
    Plain,
    Delta,
}

#[derive(Args, Serialize)]
struct RunArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long, value_enum, default_value = "loss")]
    objective: ObjectiveArg,
    #[arg(long, value_enum, default_value = "plain")]
    variant: VariantArg,
    #[arg(long, default_value_t = 1.5)]
    delta0: f64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_rounds: usize,
    /// Recorded in the configuration echo; runs are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write certificate reports.
    #[arg(long)]
    certify: bool,
}

impl RunArgs {
    fn options(&self) -> ProtocolOptions {
        ProtocolOptions {
            tol: self.tol,
            max_rounds: self.max_rounds,
            variant: match self.variant {
                VariantArg::Plain => Variant::Plain,
                VariantArg::Delta => Variant::Delta { delta0: self.delta0 },
            },
            objective: self.objective(),
            record_certificates: self.certify,
            ..ProtocolOptions::default()
        }
    }

    fn objective(&self) -> Objective {
        match self.objective {
            ObjectiveArg::Loss => Objective::Loss,
            ObjectiveArg::Dv => Objective::VoltageDeviation,
        }
    }
}

#[derive(Args)]
struct CertifyArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    feeder: PathBuf,
    /// Run summary; when absent, convergence is inferred from the trace.
    #[arg(long)]
    summary: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(subcommand)]
    shape: ShapeArg,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value_t = 1.0)]
    der_density: f64,
    #[arg(long, global = true, default_value_t = 0.0)]
    spread: f64,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ShapeArg {
    /// Path feeder.
    Line {
        #[arg(long)]
        buses: usize,
    },
    /// Complete tree (`--branching` and `--levels`) or random tree (`--buses`).
    Tree {
        #[arg(long, requires = "levels", conflicts_with = "buses")]
        branching: Option<usize>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        buses: Option<usize>,
    },
}

enum Failure {
    Input(anyhow::Error),
    Run(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => EXIT_INPUT,
            Failure::Run(_) => EXIT_NOT_CONVERGED,
        }
    }
}

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn runtime<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Run(e.into())
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(input)
}

fn load(path: &Path) -> Result<FeederModel, Failure> {
    load_feeder(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(input)
}

fn write_certificates(dir: &Path, run: &CertificateRun) -> Result<(), Failure> {
    write(&dir.join("certificates.csv"), &write_certificate_csv(run))?;
    let summary = serde_json::to_string_pretty(&CertificateSummary::new(run)).expect("serializable");
    write(&dir.join("certificates.json"), &summary)
}

/// Runs the protocol and writes trace and summary, also for aborted runs.
fn execute(args: &RunArgs, model: &FeederModel) -> Result<(RunResult, serde_json::Value), Failure> {
    let opts = args.options();
    let config = serde_json::to_value(args).expect("serializable");
    let (result, failure) = match run_endico(model, &opts) {
        Ok(r) => (r, None),
        Err(CoordinatorError::SolveFailed { round, bus, source, partial }) => {
            (*partial, Some(anyhow!("round {round}: bus {bus}: {source}")))
        }
        Err(e @ CoordinatorError::InvalidOptions(_)) => return Err(input(e)),
        Err(e) => return Err(runtime(e)),
    };
    prepare_out(&args.out)?;
    write(&args.out.join("trace.csv"), &write_trace_csv(model, &result, &config))?;
    write(&args.out.join("summary.json"), &RunSummary::new(&result, config.clone()).to_json())?;
    if args.certify {
        let snaps = snapshots_from_traces(model, &result.traces, result.v_root_sq);
        write_certificates(&args.out, &certify_snapshots(model, &snaps, result.converged, opts.eps_v))?;
    }
    if let Some(e) = failure {
        return Err(Failure::Run(e));
    }
    Ok((result, config))
}

fn report(result: &RunResult) -> Result<(), Failure> {
    if result.converged {
        println!("converged in {} rounds, objective {:.6e}", result.rounds, result.final_objective());
        Ok(())
    } else {
        Err(Failure::Run(anyhow!("not converged after {} rounds", result.rounds)))
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let model = load(&args.feeder)?;
    let (result, _) = execute(args, &model)?;
    report(&result)
}

fn cmd_compare(args: &RunArgs) -> Result<(), Failure> {
    let model = load(&args.feeder)?;
    let (result, config) = execute(args, &model)?;
    let central = solve_central(&model, args.objective(), &CentralOptions::default()).map_err(runtime)?;
    let cmp = Comparison::new(&model, &result, &central, config);
    write(&args.out.join("comparison.json"), &serde_json::to_string_pretty(&cmp).expect("serializable"))?;
    println!(
        "distributed {:.6e}, central {:.6e}, relative gap {:.3e}, max voltage difference {:.3e} pu",
        cmp.distributed.objective, cmp.central.objective, cmp.relative_gap, cmp.max_voltage_diff
    );
    report(&result)
}

fn cmd_certify(args: &CertifyArgs) -> Result<(), Failure> {
    let model = load(&args.feeder)?;
    let text = fs::read_to_string(&args.trace)
        .with_context(|| format!("reading {}", args.trace.display()))
        .map_err(input)?;
    let table = parse_trace(&text).map_err(input)?;
    let snaps = table.snapshots(&model).map_err(input)?;
    let converged = match &args.summary {
        Some(p) => {
            let s = fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(input)?;
            serde_json::from_str::<RunSummary>(&s).map_err(input)?.converged
        }
        None => {
            let tol = table.config.get("tol").and_then(|t| t.as_f64()).unwrap_or(1e-3);
            table.rows.last().is_some_and(|r| {
                r.residual_max < tol && r.delta.values().all(|&d| d == 1.0)
            })
        }
    };
    let run = certify_snapshots(&model, &snaps, converged, ProtocolOptions::default().eps_v);
    prepare_out(&args.out)?;
    write_certificates(&args.out, &run)?;
    let failing: usize = run
        .rounds
        .iter()
        .flat_map(|r| r.per_node.values().flatten())
        .filter(|c| !c.holds)
        .count();
    println!(
        "{} rounds evaluated, single-step margin {} everywhere, {failing} conditions not certified",
        run.rounds.len(),
        if run.theorem1_all() { "positive" } else { "not positive" }
    );
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<(), Failure> {
    let cfg = GeneratorConfig {
        seed: args.seed,
        der_density: args.der_density,
        spread: args.spread,
        ..GeneratorConfig::default()
    };
    let model = match args.shape {
        ShapeArg::Line { buses } => generate_line_feeder(buses, &cfg),
        ShapeArg::Tree { branching: Some(branching), levels: Some(levels), .. } => {
            generate_tree_feeder(TreeShape::Full { branching, levels }, &cfg)
        }
        ShapeArg::Tree { buses: Some(buses), .. } => generate_tree_feeder(TreeShape::Random { buses }, &cfg),
        ShapeArg::Tree { .. } => return Err(input(anyhow!("tree needs --branching and --levels, or --buses"))),
    }
    .map_err(input)?;
    match &args.out {
        Some(p) => {
            model.save(p).with_context(|| format!("writing {}", p.display())).map_err(runtime)?;
            info!("wrote {} buses to {}", model.len(), p.display());
        }
        None => println!("{}", model.to_json()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEEDER_OPF_LOG", "warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = f.code();
            match f {
                Failure::Input(e) => eprintln!("error: {e:#}"),
                Failure::Run(e) => warn!("{e:#}"),
            }
            if code == EXIT_NOT_CONVERGED {
                eprintln!("not converged");
            }
            ExitCode::from(code)
        }
    }
}
