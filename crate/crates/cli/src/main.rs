use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use smoothcert::experiment::config::{ExperimentConfig, Profile};
use smoothcert::experiment::{
    cmd_attack, cmd_certify, cmd_evaluate, cmd_generate, cmd_kde, cmd_scale_sweep, cmd_train,
};
use smoothcert::joint::PipelineKind;
use smoothcert::Error;

#[derive(Parser)]
#[command(name = "smoothcert", version, about = "Certified OOD detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Quick,
    Full,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's `profile` key.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the ID and OOD datasets.
    Generate(Common),
    /// Train pipelines and write their manifests.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train a single pipeline instead of `eval.pipelines`.
        #[arg(long)]
        pipeline: Option<String>,
    },
    /// Smoothing certificates for `certify.pipeline`.
    Certify(Common),
    /// Attack the OOD evaluation points of every pipeline.
    Attack(Common),
    /// Full metric report.
    Evaluate(Common),
    /// Confidence along scaled inputs.
    ScaleSweep(Common),
    /// Density of certified scores.
    Kde(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Invariant(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> smoothcert::Result<()> {
    let load = |c: &Common| {
        let profile = c.profile.map(|p| match p {
            ProfileArg::Quick => Profile::Quick,
            ProfileArg::Full => Profile::Full,
        });
        ExperimentConfig::load(&c.config, profile)
    };
    let print = |paths: &[PathBuf]| paths.iter().for_each(|p| println!("{}", p.display()));
    match cli.command {
        Command::Generate(c) => print(&cmd_generate(&load(&c)?)?),
        Command::Train { common, pipeline } => {
            let kind = match pipeline {
                Some(p) => Some(PipelineKind::parse(&p).ok_or_else(|| Error::Config {
                    key: "--pipeline".into(),
                    message: format!("unknown pipeline `{p}`"),
                })?),
                None => None,
            };
            print(&cmd_train(&load(&common)?, kind)?)
        }
        Command::Certify(c) => print(&[cmd_certify(&load(&c)?)?]),
        Command::Attack(c) => print(&cmd_attack(&load(&c)?)?),
        Command::Evaluate(c) => {
            let cfg = load(&c)?;
            let report = cmd_evaluate(&cfg)?;
            print!("{}", report.to_markdown());
        }
        Command::ScaleSweep(c) => print(&[cmd_scale_sweep(&load(&c)?)?]),
        Command::Kde(c) => print(&[cmd_kde(&load(&c)?)?]),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
