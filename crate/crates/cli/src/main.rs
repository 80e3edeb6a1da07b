use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context, Result};
use autochain::scenario::{bundled, bundled_names, run_scenario, ConfigError, ScenarioConfig, ScenarioReport};
use autochain::simnet::Trace;
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_EXPECTATION: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(name = "autochain", version, about = "Simulate the vehicular overlay ledger and score scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and print its report.
    Run(RunArgs),
    /// Check a scenario file without running it.
    Validate { config: PathBuf },
    /// Recompute the report from a saved trace.
    Report {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Plain)]
        format: Format,
    },
    /// List bundled scenarios.
    List,
    /// Run several scenarios in parallel; defaults to every bundled one.
    Batch {
        /// Scenario files; bundled names are accepted too.
        scenarios: Vec<String>,
        #[arg(long, value_enum, default_value_t = Format::Plain)]
        format: Format,
        /// Directory for one `<name>.jsonl` trace per scenario.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Path to a TOML scenario file.
    #[arg(required_unless_present = "bundled", conflicts_with = "bundled")]
    config: Option<PathBuf>,
    /// Name of a bundled scenario instead of a file.
    #[arg(long)]
    bundled: Option<String>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the JSON-lines trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Plain)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Plain,
    Json,
}

fn render(report: &ScenarioReport, format: Format) -> String {
    match format {
        Format::Plain => report.render_plain(),
        Format::Json => report.render_json() + "\n",
    }
}

fn load(source: &str) -> Result<std::result::Result<ScenarioConfig, ConfigError>> {
    if let Some(parsed) = bundled(source) {
        return Ok(parsed);
    }
    let path = Path::new(source);
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ScenarioConfig::from_toml(&text))
}

fn config_failure(source: &str, err: &ConfigError) -> ExitCode {
    eprintln!("{source}: invalid scenario: {err}");
    ExitCode::from(EXIT_CONFIG)
}

fn outcome(passed: bool) -> ExitCode {
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_EXPECTATION)
    }
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let source = match (&args.bundled, &args.config) {
        (Some(name), _) => {
            if bundled(name).is_none() {
                bail!("no bundled scenario named {name:?}; try `autochain list`");
            }
            name.clone()
        }
        (None, Some(path)) => path.display().to_string(),
        (None, None) => unreachable!("clap requires one of them"),
    };
    let mut cfg = match load(&source)? {
        Ok(cfg) => cfg,
        Err(e) => return Ok(config_failure(&source, &e)),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    log::info!("running {} with seed {}", cfg.name, cfg.seed);
    let run = match run_scenario(&cfg) {
        Ok(run) => run,
        Err(e) => return Ok(config_failure(&source, &e)),
    };
    log::info!("{} events, simulated time {:.2}", run.outcome.events_dispatched, run.outcome.end_time.0);
    if let Some(path) = &args.trace {
        fs::write(path, run.trace.to_jsonl()).with_context(|| format!("writing trace to {}", path.display()))?;
    }
    print!("{}", render(&run.report, args.format));
    Ok(outcome(run.report.passed()))
}

fn validate(path: &Path) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match ScenarioConfig::from_toml(&text) {
        Ok(cfg) => {
            println!("{}: ok ({} directives)", cfg.name, cfg.script.len());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => Ok(config_failure(&path.display().to_string(), &e)),
    }
}

fn report(path: &Path, format: Format) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = Trace::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
    let report = ScenarioReport::from_trace(&trace).with_context(|| format!("scoring {}", path.display()))?;
    print!("{}", render(&report, format));
    Ok(outcome(report.passed()))
}

fn batch(scenarios: Vec<String>, format: Format, trace_dir: Option<PathBuf>) -> Result<ExitCode> {
    let sources: Vec<String> =
        if scenarios.is_empty() { bundled_names().map(String::from).collect() } else { scenarios };
    let mut configs = Vec::new();
    for source in &sources {
        match load(source)? {
            Ok(cfg) => configs.push(cfg),
            Err(e) => return Ok(config_failure(source, &e)),
        }
    }
    if let Some(dir) = &trace_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let results: Vec<_> = thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|cfg| s.spawn(move || run_scenario(cfg))).collect();
        handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
    });
    let mut all_passed = true;
    for (source, result) in sources.iter().zip(results) {
        let run = match result {
            Ok(run) => run,
            Err(e) => return Ok(config_failure(source, &e)),
        };
        if let Some(dir) = &trace_dir {
            let path = dir.join(format!("{}.jsonl", run.report.name));
            fs::write(&path, run.trace.to_jsonl()).with_context(|| format!("writing {}", path.display()))?;
        }
        all_passed &= run.report.passed();
        match format {
            Format::Plain => {
                let failed: Vec<&str> =
                    run.report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
                if failed.is_empty() {
                    println!("pass  {}", run.report.name);
                } else {
                    println!("FAIL  {} ({})", run.report.name, failed.join(", "));
                }
            }
            Format::Json => println!("{}", serde_json::to_string(&run.report).expect("report serializes")),
        }
    }
    Ok(outcome(all_passed))
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { config } => validate(&config),
        Command::Report { trace, format } => report(&trace, format),
        Command::List => {
            for name in bundled_names() {
                let cfg = bundled(name).expect("listed").expect("bundled scenarios are valid");
                println!("{name:<22} {}", cfg.description);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Batch { scenarios, format, trace_dir } => batch(scenarios, format, trace_dir),
    }
}
