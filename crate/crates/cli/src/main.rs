use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use striavae_cli::{CliError, CliResult, Config, Runner, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Command {
    PhantomGen,
    Preprocess,
    Train,
    Encode,
    Features,
    Regress,
    Cv,
    Shap,
    Manifold,
    Pipeline,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::PhantomGen => Stage::PhantomGen,
            Command::Preprocess => Stage::Preprocess,
            Command::Train => Stage::Train,
            Command::Encode => Stage::Encode,
            Command::Features => Stage::Features,
            Command::Regress => Stage::Regress,
            Command::Cv => Stage::Cv,
            Command::Shap => Stage::Shap,
            Command::Manifold => Stage::Manifold,
            Command::Pipeline => return None,
        })
    }
}

/// Latent-space modelling of striatal uptake volumes.
#[derive(Debug, Parser)]
#[command(name = "striavae", version)]
struct Args {
    /// Stage to run; `pipeline` runs all of them in order.
    #[arg(value_enum)]
    command: Option<Command>,
    /// Same as the positional command.
    #[arg(long, value_enum)]
    stage: Option<Command>,
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory, overriding the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(args: Args) -> CliResult<()> {
    let command = match (args.command, args.stage) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::Config(format!("conflicting stages {a:?} and {b:?}")));
        }
        (a, b) => a.or(b).unwrap_or(Command::Pipeline),
    };
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let mut config = match &args.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(d) = args.out_dir {
        config.out_dir = d;
    }
    let runner = Runner::new(config).with_progress(|m| eprintln!("{m}"));
    eprintln!("config {} -> {}", &runner.config_hash()[..12], runner.out_dir().display());
    match command.stage() {
        Some(stage) => runner.run(stage).map(|_| ()),
        None => runner.run_pipeline().map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
