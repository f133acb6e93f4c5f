//! Argument handling for the `credit-spde` binary. Progress goes to stderr,
//! results to the run directory; stdout only carries the run directory (or
//! the validation report) so that scripts can pick it up.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use credit_spde::config::RunConfig;
use credit_spde::error::Error;
use credit_spde::orchestrator::{execute, Command};
use credit_spde::util::with_workers;

#[derive(Debug, Parser)]
#[command(name = "credit-spde", version, about = "Particle and limit-SPDE credit loss simulations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Simulate the finite portfolio on each market path.
    SimulateParticles(Common),
    /// Solve the conditional one-dimensional equation.
    SolveSpde1d(Common),
    /// Solve the two-dimensional limit equation.
    SolveSpde2d(Common),
    /// Particles against the limit on one market path, with the convergence table.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Portfolio sizes of the convergence table, comma separated.
        #[arg(long, value_delimiter = ',')]
        n_ladder: Option<Vec<usize>>,
    },
    /// Smoothing ladder of the variance density.
    SmoothDiagnostics(Common),
    /// Tranche payoff of the limit loss over independent market paths.
    PriceTranche(Common),
    /// Check the config and print the coefficient diagnostics.
    Validate(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override a config key, dotted path, value parsed as JSON when possible.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker threads; the machine's parallelism when absent.
    #[arg(long, value_name = "N")]
    pub workers: Option<usize>,
    /// Directory receiving the run directory.
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Master seed (same as --set seeds.master=N).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Accept Feller-only coefficients (same as --set validation=permissive).
    #[arg(long)]
    pub permissive: bool,
}

impl Sub {
    fn parts(&self) -> (Command, &Common, Option<&[usize]>) {
        match self {
            Sub::SimulateParticles(c) => (Command::SimulateParticles, c, None),
            Sub::SolveSpde1d(c) => (Command::SolveSpde1d, c, None),
            Sub::SolveSpde2d(c) => (Command::SolveSpde2d, c, None),
            Sub::Compare { common, n_ladder } => (Command::Compare, common, n_ladder.as_deref()),
            Sub::SmoothDiagnostics(c) => (Command::SmoothDiagnostics, c, None),
            Sub::PriceTranche(c) => (Command::PriceTranche, c, None),
            Sub::Validate(c) => (Command::Validate, c, None),
        }
    }
}

/// The overrides in application order; dedicated flags come last and win.
pub fn overrides(common: &Common, n_ladder: Option<&[usize]>) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for s in &common.set {
        let (k, v) =
            s.split_once('=').ok_or_else(|| Error::validation(s.clone(), "override must look like KEY=VALUE"))?;
        out.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(seed) = common.seed {
        out.push(("seeds.master".into(), seed.to_string()));
    }
    if common.permissive {
        out.push(("validation".into(), "\"permissive\"".into()));
    }
    if let Some(sizes) = n_ladder {
        out.push(("n_ladder".into(), serde_json::to_string(sizes).unwrap_or_default()));
    }
    Ok(out)
}

pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<RunConfig, Error> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::validation("config", format!("{}: {e}", path.display())))?;
    RunConfig::from_json(&text, overrides)
}

fn exit_code(e: &Error) -> i32 {
    if e.is_input() {
        1
    } else {
        2
    }
}

fn dispatch(sub: &Sub) -> Result<String, Error> {
    let (cmd, common, ladder) = sub.parts();
    let cfg = load_config(&common.config, &overrides(common, ladder)?)?;
    log::info!("{} with config {} (run {})", cmd.name(), common.config.display(), cfg.run_name());
    let run = || execute(&cfg, cmd, &common.out);
    let outcome = match common.workers {
        Some(0) => return Err(Error::validation("workers", "need at least one worker")),
        Some(n) => with_workers(n, run)?,
        None => run()?,
    };
    if cmd == Command::Validate {
        let mut text = serde_json::to_string_pretty(&outcome.report).map_err(|e| Error::Io(e.to_string()))?;
        text.push('\n');
        return Ok(text);
    }
    log::info!("wrote {}", outcome.dir.display());
    Ok(format!("{}\n", outcome.dir.display()))
}

/// Runs one invocation; returns the exit code (0 ok, 1 bad input, 2 solver
/// failure) and what belongs on stdout.
pub fn run<I, T>(argv: I) -> (i32, String)
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return (code, String::new());
        }
    };
    match dispatch(&cli.command) {
        Ok(text) => (0, text),
        Err(e) => {
            log::error!("{e}");
            (exit_code(&e), String::new())
        }
    }
}
