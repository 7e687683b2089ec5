use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use buff::config::{parse_config_with_env, KEYS, SEED_ENV};
use buff::pipeline::{run_stage, Stage};

#[derive(Parser, Debug)]
#[command(name = "buff", version, about = "Uncertainty-guided diffusion super-resolution")]
struct Cli {
    /// Stage to run.
    #[arg(
        value_parser = ["train-bayes", "make-masks", "train-diff", "infer", "eval", "selfcheck", "all"],
        required_unless_present = "list_keys"
    )]
    stage: Option<String>,

    /// File of `key=value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Overrides applied after the config file, e.g. `diffusion.T=50`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print every configuration key with its description and exit.
    #[arg(long)]
    list_keys: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if cli.list_keys {
        let defaults = buff::config::RunConfig::default();
        for (k, doc) in KEYS {
            println!("{k}={}\t# {doc}", defaults.get(k).unwrap_or_default());
        }
        return ExitCode::SUCCESS;
    }
    let stage = cli.stage.as_deref().unwrap_or_default();
    match run(&cli, stage) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("buff {stage}: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli, stage: &str) -> buff::Result<()> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| buff::BuffError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = parse_config_with_env(&text, &cli.overrides, env_seed.as_deref())?;
    if stage == "all" {
        return buff::pipeline::run_pipeline(&cfg);
    }
    run_stage(stage.parse::<Stage>()?, &cfg)
}
