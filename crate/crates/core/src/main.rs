use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use softcluster::config::{parse_config, Algorithm};
use softcluster::runner::run_all;
use softcluster::verify::run_checks;

/// Environment variable that overrides the default output directory.
const OUT_ENV: &str = "SOFTCLUSTER_OUT";

#[derive(Parser, Debug)]
#[command(version, about = "Soft clustered federated learning simulator")]
struct Cli {
    /// Run configuration file
    #[arg(short, long, required_unless_present_any = ["verify"])]
    config: Option<PathBuf>,
    /// Output directory (default: $SOFTCLUSTER_OUT, then ./results)
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Algorithm to run, overriding the config's `algorithm`
    #[arg(long, value_enum)]
    mode: Option<Algorithm>,
    /// Sets all three seeds as the config's `seed` key does
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    selection_seed: Option<u64>,
    /// Print the fully defaulted config of every run and exit
    #[arg(long)]
    echo_config: bool,
    /// Run the built-in property checks and exit
    #[arg(long)]
    verify: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.verify {
        let checks = run_checks();
        let mut failed = 0;
        for c in &checks {
            println!("[{}] {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            failed += usize::from(!c.passed);
        }
        println!("{} of {} checks passed", checks.len() - failed, checks.len());
        return if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE };
    }

    let path = cli.config.expect("clap enforces --config");
    let mut parsed = match parse_config(&path) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    for point in &mut parsed.points {
        let spec = &mut point.spec;
        if let Some(mode) = cli.mode {
            spec.algorithm = mode;
        }
        let seeds = &mut spec.experiment.seeds;
        if let Some(s) = cli.seed {
            *seeds = softcluster::Seeds::all(s);
        }
        if let Some(s) = cli.data_seed {
            seeds.data = s;
        }
        if let Some(s) = cli.init_seed {
            seeds.init = s;
        }
        if let Some(s) = cli.selection_seed {
            seeds.selection = s;
        }
        if let Err(e) = spec.validate() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    if cli.echo_config {
        for point in &parsed.points {
            if !point.overrides.is_empty() {
                println!("# {}", point.label());
            }
            print!("{}", point.spec.echo());
        }
        return ExitCode::SUCCESS;
    }

    let out = cli
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("results"));
    match run_all(&parsed, &out) {
        Ok(summaries) => {
            let mut interrupted = false;
            for s in &summaries {
                if let Some(err) = &s.error {
                    eprintln!("run stopped after {} rounds: {err}", s.rounds_completed);
                    interrupted = true;
                }
            }
            println!("wrote {} run(s) to {}", summaries.len(), out.display());
            if interrupted {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
