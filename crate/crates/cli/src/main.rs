use std::error::Error as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use popdg::pipeline;

/// Music-conditioned dance generation: training, sampling, evaluation and
/// dataset curation.
///
/// Log verbosity follows the POPDG_LOG environment variable (error, warn,
/// info, debug, trace).
#[derive(Debug, Parser)]
#[command(name = "popdg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a pipeline config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample a motion for a music feature file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        music: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output motion; `.json` writes JSON, anything else binary POPM.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = pipeline::GENERATE_STEPS)]
        steps: usize,
    },
    /// Score a directory of motions against same-named music features.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        music: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score video statistics and keep the popular ones.
    Curate {
        #[arg(long)]
        input: PathBuf,
        /// Popularity model JSON; the built-in coefficients when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset described by a spec file.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> popdg::Result<String> {
    Ok(match cmd {
        Command::Train { config } => pipeline::cmd_train(&config)?.to_string(),
        Command::Generate {
            checkpoint,
            music,
            seed,
            out,
            steps,
        } => pipeline::cmd_generate(&checkpoint, &music, seed, &out, steps)?.to_string(),
        Command::Evaluate {
            generated,
            reference,
            music,
            report,
        } => pipeline::cmd_evaluate(&generated, reference.as_deref(), &music, &report)?.to_string(),
        Command::Curate { input, model, out } => pipeline::cmd_curate(&input, model.as_deref(), &out)?.to_string(),
        Command::Synth { spec, out } => pipeline::cmd_synth(&spec, &out)?.to_string(),
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("POPDG_LOG", "warn")).init();
    let cli = Cli::parse();
    info!("{:?}", cli.command);
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut causes = Vec::new();
            let mut src = e.source();
            while let Some(s) = src {
                causes.push(s.to_string());
                src = s.source();
            }
            let report = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
                "causes": causes,
            });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
