use std::fs;
use std::io::BufReader;
use std::path::PathBuf;
use std::process::ExitCode;

use bpsim_core::scenario_io::{load_scenario, save_scenario};
use bpsim_core::sim::read_trace_csv;
use bpsim_core::{
    generate_scenario, run_experiment, verify_trace, Error, ExperimentConfig, GeneratorParams, ScenarioSource, SchemeKind,
    VerifyOptions,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bpsim", version, about = "Distributed MDB control of CDMA multi-hop networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random disc network and write it as a scenario file.
    Generate {
        /// Generator parameters: n=<nodes> B=<mean arrival> seed=<s>, plus
        /// optional K, theta, cap, noise, radius.
        #[arg(required = true)]
        params: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one or more schemes on common arrivals.
    Run(RunArgs),
    /// Check the drift machinery on a recorded per-queue trace.
    Verify {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        directions: usize,
        #[arg(long, default_value_t = 1.0)]
        epsilon0: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (as echoed into an output directory); flags below
    /// are ignored except --out.
    #[arg(long, conflicts_with_all = ["scenario", "generate"])]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "generate")]
    scenario: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    generate: Option<Vec<String>>,
    /// Reuse the layout of run 0 for every run of a generated scenario.
    #[arg(long)]
    shared_layout: bool,
    #[arg(long, value_delimiter = ',', value_parser = parse_scheme)]
    scheme: Vec<SchemeKind>,
    #[arg(long, default_value_t = 1000)]
    slots: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Add per-queue backlog and rate columns to the trace files.
    #[arg(long)]
    per_queue: bool,
}

fn parse_scheme(s: &str) -> Result<SchemeKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_generator(tokens: &[String]) -> Result<GeneratorParams, Error> {
    let mut nodes = None;
    let mut mean = None;
    let mut seed = None;
    let mut p = GeneratorParams::new(0, 0.0, 0);
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, found '{t}'")))?;
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad value for {k}: '{v}'")));
        match k {
            "n" => nodes = Some(v.parse().map_err(|_| Error::Config(format!("bad node count '{v}'")))?),
            "B" => mean = Some(num(v)?),
            "seed" => seed = Some(v.parse().map_err(|_| Error::Config(format!("bad seed '{v}'")))?),
            "K" => p.processing_gain = num(v)?,
            "theta" => p.self_interference = num(v)?,
            "cap" => p.power_cap = num(v)?,
            "noise" => p.noise = num(v)?,
            "radius" => p.radius_factor = num(v)?,
            _ => return Err(Error::Config(format!("unknown generator key '{k}'"))),
        }
    }
    p.nodes = nodes.ok_or_else(|| Error::Config("generator needs n=<nodes>".into()))?;
    p.arrival_mean = mean.ok_or_else(|| Error::Config("generator needs B=<mean>".into()))?;
    p.seed = seed.unwrap_or(1);
    Ok(p)
}

fn experiment_config(a: &RunArgs) -> Result<ExperimentConfig, Error> {
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        return ExperimentConfig::from_toml(&text);
    }
    let source = match (&a.scenario, &a.generate) {
        (Some(path), None) => ScenarioSource::File { path: path.clone() },
        (None, Some(tokens)) => ScenarioSource::Generate(parse_generator(tokens)?),
        _ => return Err(Error::Config("one of --scenario, --generate or --config is required".into())),
    };
    let mut c = ExperimentConfig::new(source);
    if !a.scheme.is_empty() {
        c.schemes = a.scheme.clone();
    }
    c.slots = a.slots;
    c.runs = a.runs;
    c.seed = a.seed;
    c.layout_per_run = !a.shared_layout;
    c.per_queue = a.per_queue;
    if let Some(i) = a.iterations {
        c.iterations_per_slot = i;
    }
    if let Some(s) = a.step {
        c.iterative_initial_step = s;
    }
    Ok(c)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { params, out } => {
            let scenario = generate_scenario::<f64>(&parse_generator(&params)?)?;
            save_scenario(&scenario, &out)?;
            println!("wrote {} ({} nodes, {} links)", out.display(), scenario.model.node_count(), scenario.model.links().len());
        }
        Command::Run(args) => {
            let config = experiment_config(&args)?;
            let result = run_experiment(&config, Some(&args.out))?;
            println!("{:<10} {:>16} {:>10} {:>12}", "scheme", "last-half mean", "ascent", "queue-bound");
            for s in &result.schemes {
                println!(
                    "{:<10} {:>16.3} {:>10} {:>12}",
                    s.scheme.to_string(),
                    s.mean_last_half(),
                    s.checks.ascent_violations,
                    s.checks.queue_bound_violations
                );
            }
            println!("outputs in {}", args.out.display());
        }
        Command::Verify {
            trace,
            scenario,
            out,
            directions,
            epsilon0,
            seed,
        } => {
            let scenario = load_scenario(&scenario)?;
            let file = fs::File::open(&trace)
                .map_err(|e| Error::Config(format!("cannot read trace {}: {e}", trace.display())))?;
            let table = read_trace_csv(BufReader::new(file))?;
            let options = VerifyOptions {
                directions,
                epsilon0,
                seed,
                ..VerifyOptions::default()
            };
            let report = verify_trace(&scenario, &table, &options)?;
            report.write_csv(fs::File::create(&out)?)?;
            if let Some(d) = &report.drift {
                let c = &d.constants;
                println!("epsilon = {:.6e}, lambda = {:.6e}, Omega = {:.6e}", c.epsilon, c.lambda, c.omega);
            }
            println!(
                "{} slots, {} outside W0, {} drift-condition violations, {} pathwise bound violations",
                report.rows.len(),
                report.drift_condition_checked(),
                report.drift_condition_violations(),
                report.bound_violations()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric { .. } => 3,
        Error::Slot { source, .. } => exit_code(source),
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("BPSIM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("bpsim: cannot size thread pool: {e}");
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("bpsim: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
