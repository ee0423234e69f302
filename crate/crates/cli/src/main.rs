//! `riemoc`: run necessary-condition checks on a scenario file or the
//! built-in example and emit JSON/CSV reports.
//!
//! Exit codes: 0 ran (verdict produced when the command yields one),
//! 2 invalid scenario or invocation, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::Parser;
use riemoc_core::exec::Execution;
use riemoc_core::pipeline::{self, Command, Outcome, Overrides, PipelineError, RunOptions};
use riemoc_core::report::{self, Report};
use riemoc_core::scenario::{self, Scenario, ScenarioError, BUILTIN_EXAMPLE};

const EXIT_INVALID: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "riemoc", version, about = "Necessary-condition checks for multi-objective optimal control on Riemannian manifolds")]
struct Cli {
    /// geometry-probe | simulate | multipliers | check1 | singular | check2 | check2-free | certify | exg
    #[arg(value_parser = parse_command)]
    command: Command,

    /// scenario JSON file
    #[arg(long, conflicts_with_all = ["builtin", "batch"])]
    scenario: Option<PathBuf>,

    /// built-in scenario name
    #[arg(long, conflicts_with = "batch")]
    builtin: Option<String>,

    /// run every `*.json` scenario in a directory
    #[arg(long)]
    batch: Option<PathBuf>,

    /// horizon length override
    #[arg(long = "T", id = "T")]
    horizon: Option<f64>,

    /// total grid steps (even)
    #[arg(long)]
    steps: Option<usize>,

    /// JSON report path; a directory in batch mode; stdout when omitted
    #[arg(long)]
    report: Option<PathBuf>,

    /// CSV time-series path; in batch mode any value writes `<stem>.csv` beside each report
    #[arg(long)]
    csv: Option<PathBuf>,

    /// tolerance for the transversality, first-order and singular checks
    #[arg(long)]
    tol: Option<f64>,

    /// multiplier samples for the certificate
    #[arg(long)]
    samples: Option<usize>,

    /// sampling seed
    #[arg(long)]
    seed: Option<u64>,

    /// chart point for geometry-probe, comma separated
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    point: Option<Vec<f64>>,

    /// evaluate the certificate sweep on one thread
    #[arg(long)]
    sequential: bool,
}

fn parse_command(s: &str) -> Result<Command, String> {
    s.parse()
}

enum Failure {
    Invalid(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.exit_code() == i32::from(EXIT_NUMERICAL) {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Invalid(e.to_string())
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Invalid(format!("{e:#}"))
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        Overrides {
            horizon: self.horizon,
            steps: self.steps,
            samples: self.samples,
            tol: self.tol,
            seed: self.seed,
        }
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            execution: if self.sequential { Execution::Sequential } else { Execution::Parallel },
            point: self.point.clone(),
        }
    }

    fn scenario(&self) -> Result<Scenario, Failure> {
        match (&self.scenario, &self.builtin) {
            (Some(path), _) => Ok(scenario::load_scenario(path)?),
            (None, Some(name)) => Ok(scenario::builtin(name, self.horizon)?),
            (None, None) if self.command == Command::Exg => Ok(scenario::builtin(BUILTIN_EXAMPLE, self.horizon)?),
            (None, None) => Err(Failure::Invalid("one of --scenario, --builtin or --batch is required".into())),
        }
    }
}

fn run_one(cli: &Cli, scenario: Scenario) -> Result<(Report, Outcome), Failure> {
    let start = Instant::now();
    let (scenario, outcome) = pipeline::run_scenario(cli.command, scenario, &cli.overrides(), &cli.options())?;
    let report = Report::new(&scenario, &outcome, start.elapsed().as_secs_f64() * 1e3);
    Ok((report, outcome))
}

fn summarize(name: &str, report: &Report, outcome: &Outcome) {
    let verdict = report.value["verdict"].as_str().unwrap_or("-");
    eprintln!("{name}: {} verdict={verdict} hash={}", outcome.command, report.content_hash());
    if let Some(cert) = outcome.section("certificate") {
        for ray in cert["rays"].as_array().into_iter().flatten() {
            eprintln!("  ray {} sup {}", ray["multiplier"], ray["sup"]);
        }
        eprintln!("  min sup {} at {}", cert["min_sup"], cert["minimizer"]);
    }
}

fn write_outputs(report: &Report, outcome: &Outcome, json: Option<&Path>, csv: Option<&Path>) -> anyhow::Result<()> {
    match json {
        Some(path) => report.write(path).with_context(|| format!("cannot write report {}", path.display()))?,
        None => println!("{}", report.to_json()),
    }
    if let Some(path) = csv {
        report::write_csv(&outcome.series, path).with_context(|| format!("cannot write csv {}", path.display()))?;
    }
    Ok(())
}

fn single(cli: &Cli) -> Result<(), Failure> {
    let scenario = cli.scenario()?;
    let name = if scenario.name.is_empty() { "scenario".to_string() } else { scenario.name.clone() };
    let (report, outcome) = run_one(cli, scenario)?;
    summarize(&name, &report, &outcome);
    write_outputs(&report, &outcome, cli.report.as_deref(), cli.csv.as_deref())?;
    Ok(())
}

fn batch(cli: &Cli, dir: &Path) -> Result<u8, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json") && !p.to_string_lossy().ends_with(".report.json"))
        .collect();
    files.sort();
    let out_dir = cli.report.clone().unwrap_or_else(|| dir.to_path_buf());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
    let job = |path: &PathBuf| -> (String, Result<(), Failure>) {
        let stem = path.file_stem().map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned());
        let result = (|| {
            let scenario = scenario::load_scenario(path)?;
            let (report, outcome) = run_one(cli, scenario)?;
            summarize(&stem, &report, &outcome);
            let json = out_dir.join(format!("{stem}.report.json"));
            let csv = cli.csv.as_ref().map(|_| out_dir.join(format!("{stem}.csv")));
            write_outputs(&report, &outcome, Some(&json), csv.as_deref())?;
            Ok(())
        })();
        (stem, result)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<(String, Result<(), Failure>)> = if cli.sequential {
        files.iter().map(job).collect()
    } else {
        use rayon::prelude::*;
        files.par_iter().map(job).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<(String, Result<(), Failure>)> = files.iter().map(job).collect();
    let mut code = 0;
    for (stem, r) in results {
        if let Err(f) = r {
            eprintln!("{stem}: error: {}", f.message());
            code = code.max(f.code());
        }
    }
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.batch {
        Some(dir) => batch(&cli, dir),
        None => single(&cli).map(|_| 0),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
