use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctraj_cli::{CliError, Overrides, Pipeline, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "ctraj", version, about = "Counterfactual trajectory concept discovery pipeline")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run identifier, overrides the config.
    #[arg(long, global = true)]
    run_id: Option<String>,
    /// Override any config key, e.g. `--set vae.weights.w_kld=0.01`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Data,
    /// Per-class color statistics.
    AuditBias,
    /// Train the target classifier.
    TrainClassifier,
    /// Train the latent autoencoder.
    TrainCodec,
    /// Train the latent diffusion model and its undertrained counterpart.
    TrainDiffusion,
    /// Counterfactuals on test images for the four compared variants.
    GenCf,
    /// Counterfactual trajectories on training images.
    GenTrajectories,
    /// L1, L2, FID and flip ratio of the generated counterfactuals.
    EvalCf,
    /// Train the VAE on counterfactual trajectory images.
    TrainVae,
    /// Rank latent dimensions per class.
    Discover,
    /// Montages and difference maps for the top report entries.
    Montage,
    /// Serve the explorer endpoints.
    Serve,
    /// Every stage except serve.
    All,
    /// Print the effective configuration and its fingerprint.
    ShowConfig,
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Data => Stage::Data,
        Command::AuditBias => Stage::AuditBias,
        Command::TrainClassifier => Stage::TrainClassifier,
        Command::TrainCodec => Stage::TrainCodec,
        Command::TrainDiffusion => Stage::TrainDiffusion,
        Command::GenCf => Stage::GenCf,
        Command::GenTrajectories => Stage::GenTrajectories,
        Command::EvalCf => Stage::EvalCf,
        Command::TrainVae => Stage::TrainVae,
        Command::Discover => Stage::Discover,
        Command::Montage => Stage::Montage,
        Command::Serve => Stage::Serve,
        Command::All | Command::ShowConfig => return None,
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let overrides = Overrides { seed: cli.seed, run_id: cli.run_id, set: cli.set };
    let config = RunConfig::load(cli.config.as_deref(), &overrides)?;
    if let Command::ShowConfig = cli.command {
        let text = format!("# fingerprint {}\n{}", config.fingerprint(), config.to_toml());
        // A closed pipe (e.g. `| head`) is not an error here.
        let _ = std::io::stdout().lock().write_all(text.as_bytes());
        return Ok(());
    }
    let pipeline = Pipeline::new(config);
    match stage_of(&cli.command) {
        Some(stage) => {
            pipeline.run(stage)?;
        }
        None => {
            pipeline.run_all()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.body()).expect("error body serializes"));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
