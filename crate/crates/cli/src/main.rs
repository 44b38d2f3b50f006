use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cmdp_lab::env::{generate, GenSpec};
use cmdp_lab::harness::{self, output_dir, write_text, ExperimentConfig, Format, SweepConfig};
use cmdp_lab::schema::save_cmdp;
use cmdp_lab::{verify, LabError};

/// Contextual MDP learning lab.
#[derive(Debug, Parser)]
#[command(name = "cmdp-lab", version)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// JSON config document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (instance seed for `generate`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides CMDP_LAB_OUT and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format: json or csv.
    #[arg(long, global = true)]
    format: Option<Format>,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Build an instance from a generator spec and save it as JSON.
    Generate,
    /// Run an experiment and write its report.
    Run,
    /// Run one experiment per grid value and write a combined CSV.
    Sweep,
    /// Run the invariant suites.
    Verify,
}

enum Outcome {
    Pass,
    Fail,
}

fn require_config(cli: &Cli) -> Result<&Path, LabError> {
    cli.config
        .as_deref()
        .ok_or_else(|| LabError::Config("--config PATH is required".into()))
}

fn generate_cmd(cli: &Cli) -> Result<Outcome, LabError> {
    let path = require_config(cli)?;
    let text = std::fs::read_to_string(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
    // Accept a bare spec or the `env` section of an experiment config.
    let mut spec: GenSpec = match serde_json::from_str(&text) {
        Ok(spec) => spec,
        Err(_) => ExperimentConfig::from_json(&text)?.env,
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let env = generate(&spec)?;
    let dir = output_dir(cli.out.as_deref(), None);
    std::fs::create_dir_all(&dir)?;
    let file = dir.join("cmdp.json");
    save_cmdp(env.cmdp(), BufWriter::new(File::create(&file)?))?;
    println!("wrote {}", file.display());
    Ok(Outcome::Pass)
}

fn run_cmd(cli: &Cli) -> Result<Outcome, LabError> {
    let mut cfg = ExperimentConfig::load(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    let format = cli.format.unwrap_or(cfg.format);
    let report = harness::run(&cfg)?;
    let dir = output_dir(cli.out.as_deref(), cfg.output.as_deref());
    let file = write_text(&dir, "report", format, &report.render(format)?)?;
    let agg = &report.aggregate;
    println!(
        "{} seeds={} pass_rate={:.3} [{:.3}, {:.3}] mean_episodes={:.0} mean_suboptimality={} threshold={} -> {}",
        report.algorithm,
        agg.n_seeds,
        agg.pass.rate,
        agg.pass.lower,
        agg.pass.upper,
        agg.mean_episodes,
        agg.mean_suboptimality.map_or("n/a".to_string(), |g| format!("{g:.4}")),
        report.threshold,
        if report.passed { "PASS" } else { "FAIL" }
    );
    println!("wrote {}", file.display());
    Ok(if report.passed { Outcome::Pass } else { Outcome::Fail })
}

fn sweep_cmd(cli: &Cli) -> Result<Outcome, LabError> {
    let mut sweep = SweepConfig::load(require_config(cli)?)?;
    if let Some(seed) = cli.seed {
        sweep.base.master_seed = seed;
    }
    let reports = harness::sweep(&sweep.base, &sweep.param, &sweep.values)?;
    let dir = output_dir(cli.out.as_deref(), sweep.base.output.as_deref());
    let table = harness::sweep_csv(&sweep.param, &sweep.values, &reports)?;
    let file = write_text(&dir, "sweep", Format::Csv, &table)?;
    if cli.format.unwrap_or(sweep.base.format) == Format::Json {
        write_text(&dir, "sweep", Format::Json, &serde_json::to_string_pretty(&reports)?)?;
    }
    print!("{table}");
    println!("wrote {}", file.display());
    Ok(if reports.iter().all(|r| r.passed) {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}

fn verify_cmd(cli: &Cli) -> Result<Outcome, LabError> {
    let checks = verify::run_suites(cli.seed.unwrap_or(0))?;
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    let dir = output_dir(cli.out.as_deref(), None);
    let doc = serde_json::json!({"schema": harness::SCHEMA, "checks": checks});
    write_text(&dir, "verify", Format::Json, &serde_json::to_string_pretty(&doc)?)?;
    Ok(if checks.iter().all(|c| c.passed) {
        Outcome::Pass
    } else {
        Outcome::Fail
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.verb {
        Verb::Generate => generate_cmd(&cli),
        Verb::Run => run_cmd(&cli),
        Verb::Sweep => sweep_cmd(&cli),
        Verb::Verify => verify_cmd(&cli),
    };
    match result {
        Ok(Outcome::Pass) => ExitCode::SUCCESS,
        Ok(Outcome::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
