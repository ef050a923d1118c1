mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use wcip_core::Error;

/// Time-domain electromagnetic coefficient inversion on hybrid FE/FD meshes.
#[derive(Parser, Debug)]
#[command(name = "wcip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the phantom and write the top-boundary trace.
    Forward(Overrides),
    /// Simulate on a finer mesh and add multiplicative noise.
    Generate(Overrides),
    /// Conjugate gradient reconstruction on the configured mesh.
    Invert(Overrides),
    /// Conjugate gradient reconstruction with adaptive refinement.
    InvertAdaptive(Overrides),
    /// Compare the adjoint gradient with finite differences of the functional.
    Gradcheck(Overrides),
}

#[derive(Args, Debug, Clone)]
pub struct Overrides {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Observation file to invert.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Noise level δ.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    /// Number of refinements of the adaptive loop.
    #[arg(long)]
    levels: Option<usize>,
    /// Marking threshold for both coefficients.
    #[arg(long)]
    beta_tilde: Option<f64>,
    #[arg(long)]
    allow_inverse_crime: bool,
    /// Write a |E| snapshot every this many steps.
    #[arg(long)]
    snapshot_every: Option<usize>,
}

impl Overrides {
    fn apply(&self) -> wcip_core::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        } else {
            cfg.output.dir = cfg.resolve(&cfg.output.dir);
        }
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
        }
        if let Some(d) = self.noise {
            cfg.noise.delta = d;
        }
        if let Some(w) = self.omega {
            cfg.source.omega = w;
        }
        if let Some(n) = self.levels {
            cfg.inversion.max_refinements = n;
        }
        if let Some(b) = self.beta_tilde {
            cfg.inversion.beta_tilde_eps = vec![b];
            cfg.inversion.beta_tilde_sigma = vec![b];
        }
        if self.allow_inverse_crime {
            cfg.data.allow_inverse_crime = true;
        }
        if let Some(k) = self.snapshot_every {
            cfg.output.snapshot_every = Some(k);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::InverseCrime { .. }) => 3,
        Some(Error::Checksum { .. }) => 4,
        Some(Error::Instability { .. } | Error::NonFiniteObjective { .. }) => 5,
        _ => 1,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("WCIP_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("WCIP_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("WCIP_THREADS must be positive".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Forward(o) => commands::forward(&o.apply()?),
        Command::Generate(o) => commands::generate(&o.apply()?),
        Command::Invert(o) => commands::invert(&o.apply()?, o.obs.as_deref(), false),
        Command::InvertAdaptive(o) => commands::invert(&o.apply()?, o.obs.as_deref(), true),
        Command::Gradcheck(o) => commands::gradcheck(&o.apply()?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wcip: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
