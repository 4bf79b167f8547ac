//! Command-line front end: validate scenario configs, run scenarios and emit
//! artifacts, and summarize finished runs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dmpc_landing::artifacts::{self, CertificationReport, RunSummary};
use dmpc_landing::config::ScenarioConfig;
use dmpc_landing::coordinator::{run_scenario, write_run_artifacts};

#[derive(Parser)]
#[command(
    name = "dmpc-landing",
    about = "Distributed-MPC simulator for multi-quadrotor landing on a moving platform",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigSource {
    /// Path to a scenario TOML file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Name of a shipped preset (currently: hex6).
    #[arg(long)]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ScenarioConfig, String> {
        match (&self.config, &self.preset) {
            (Some(path), None) => {
                ScenarioConfig::from_path(path).map_err(|e| e.to_string())
            }
            (None, Some(name)) if name == "hex6" => Ok(ScenarioConfig::preset_hex6()),
            (None, Some(name)) => Err(format!("unknown preset '{name}'; available: hex6")),
            (None, None) => Err("either --config or --preset is required".into()),
            (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse a config and run the full invariant sweep.
    Validate {
        #[command(flatten)]
        source: ConfigSource,
    },
    /// Run a scenario and write artifacts into the output directory.
    Run {
        #[command(flatten)]
        source: ConfigSource,
        /// Output directory for run artifacts.
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the configured step cap.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Print a human-readable summary of a finished run directory.
    Report {
        /// Run directory containing the emitted artifacts.
        #[arg(long)]
        run: PathBuf,
    },
}

fn cmd_validate(source: &ConfigSource) -> ExitCode {
    let cfg = match source.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match cfg.validate() {
        Ok(advisory) => {
            println!("config ok: {}", cfg.name);
            if let Some(n0) = advisory.n0 {
                println!("horizon advisory: N = {}, N_0 = {n0:.4}", advisory.horizon);
            }
            for note in &advisory.notes {
                println!("note: {note}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("invalid config:\n{e}");
            ExitCode::from(1)
        }
    }
}

fn cmd_run(source: &ConfigSource, out: &PathBuf, seed: Option<u64>, steps: Option<usize>) -> ExitCode {
    let mut cfg = match source.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = seed {
        cfg.seed = Some(seed);
    }
    if let Some(steps) = steps {
        cfg.step_cap = steps;
    }
    let output = match run_scenario(cfg.clone()) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("run failed: {e}");
            return ExitCode::from(1);
        }
    };
    let summary = match write_run_artifacts(out, &cfg, &output) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("failed to write artifacts: {e}");
            return ExitCode::from(1);
        }
    };
    println!(
        "status: {} | steps: {} | latched: {}/{}",
        summary.status,
        summary.steps_executed,
        summary.latch_times.len(),
        cfg.follower_count()
    );
    println!("artifacts written to {}", out.display());
    ExitCode::from(summary.exit_code as u8)
}

fn cmd_report(run: &PathBuf) -> ExitCode {
    let summary: RunSummary = match artifacts::read_json(&run.join(artifacts::SUMMARY_FILE)) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("cannot read run summary in {}: {e}", run.display());
            return ExitCode::from(1);
        }
    };
    let cert: CertificationReport =
        match artifacts::read_json(&run.join(artifacts::CERTIFICATE_FILE)) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("cannot read certificate in {}: {e}", run.display());
                return ExitCode::from(1);
            }
        };

    println!("run:            {} (schema {})", summary.name, summary.schema);
    println!("status:         {} after {} steps", summary.status, summary.steps_executed);
    let latches: Vec<String> =
        summary.latch_times.iter().map(|(id, t)| format!("f{id}@t={t}")).collect();
    println!(
        "latched:        {} [{}]",
        if summary.all_latched { "all" } else { "not all" },
        latches.join(", ")
    );
    println!(
        "collision-free: {} (min h_C = {:.6}, min h_ij = {})",
        if cert.collision.pass { "yes" } else { "NO" },
        summary.min_h_c,
        summary.min_h_ij.map_or("n/a".into(), |v| format!("{v:.6}")),
    );
    println!(
        "safety gate:    {} (lambda_max {:.4} vs threshold {:.4})",
        if cert.gate_pass { "pass" } else { "FAIL" },
        cert.max_lambda,
        cert.gate_threshold
    );
    match cert.rho_hat {
        Some(rho) => println!("rho_hat:        {rho:.6}"),
        None => println!("rho_hat:        n/a"),
    }
    println!(
        "lyapunov:       {} violation(s) over {} step(s) ({})",
        cert.lyapunov_violations, cert.lyapunov_steps_checked, cert.cost_convention
    );
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Validate { source } => cmd_validate(source),
        Command::Run { source, out, seed, steps } => cmd_run(source, out, *seed, *steps),
        Command::Report { run } => cmd_report(run),
    }
}
