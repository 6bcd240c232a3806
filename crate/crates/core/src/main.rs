use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hypext::runner::{self, Command, ExperimentConfig, Overrides, CONFIG_SCHEMA};

#[derive(Parser)]
#[command(name = "hypext", version, about = "Hyperbolic extensions and cut-limit diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Residuals of the hyperbolic trigonometry identities.
    VerifyIdentities(Common),
    /// Spherical and normalized cuts of one family member.
    Cut(Common),
    /// Closed-form extension cuts against the pullback oracle.
    ExtendCut(Common),
    /// Convergence scan of the normalized extension cuts.
    Converge(Common),
    /// Cauchy scan over consecutive parameter pairs.
    Cauchy(Common),
    /// Threshold angle and uniformity near the S^{n-1} boundary.
    Beta1(Common),
    /// Positive-definiteness of the boundary limits.
    Boundary(Common),
    /// Runs the command named inside a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the JSON schema of config files.
    Schema,
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// hyperbolic, euclidean, bump or oscillating.
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Grid points per chart axis.
    #[arg(long)]
    grid_points: Option<usize>,
    /// Cap on grid points per chart.
    #[arg(long)]
    grid_cap: Option<usize>,
}

fn resolve(command: Command, c: Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let cfg = ExperimentConfig::from_path(path)?;
            anyhow::ensure!(
                cfg.command == command,
                "command: config names `{}` but `{}` was invoked",
                cfg.command.as_str(),
                command.as_str()
            );
            cfg
        }
        None => ExperimentConfig::new(command),
    };
    cfg.apply(&Overrides {
        family: c.family,
        theta: c.theta,
        n: c.n,
        k: c.k,
        out: c.out,
        grid_points: c.grid_points,
        grid_cap: c.grid_cap,
    })?;
    Ok(cfg)
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("HYPEXT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HYPEXT_THREADS: `{v}` is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn real_main() -> anyhow::Result<u8> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print()?;
            return Ok(code);
        }
    };
    configure_threads()?;
    let cfg = match cli.command {
        Cmd::Schema => {
            print!("{CONFIG_SCHEMA}");
            return Ok(0);
        }
        Cmd::Run { config, out } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            cfg.apply(&Overrides { out, ..Overrides::default() })?;
            cfg
        }
        Cmd::VerifyIdentities(c) => resolve(Command::VerifyIdentities, c)?,
        Cmd::Cut(c) => resolve(Command::Cut, c)?,
        Cmd::ExtendCut(c) => resolve(Command::ExtendCut, c)?,
        Cmd::Converge(c) => resolve(Command::Converge, c)?,
        Cmd::Cauchy(c) => resolve(Command::Cauchy, c)?,
        Cmd::Beta1(c) => resolve(Command::Beta1, c)?,
        Cmd::Boundary(c) => resolve(Command::Boundary, c)?,
    };
    let outcome = runner::run(&cfg)?;
    for f in &outcome.files {
        println!("{}", f.display());
    }
    println!("{}: {}", cfg.command.as_str(), if outcome.passed { "pass" } else { "fail" });
    Ok(outcome.exit_code())
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
