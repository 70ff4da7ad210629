use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use posedepth::refiner::RefinerMode;
use posedepth_cli::commands;
use posedepth_cli::config::{Overrides, Run, RunConfig};

#[derive(Parser)]
#[command(name = "posedepth", version, about = "Multimodal-depth 3D pose lifting on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<Run> {
        Run::load(
            &self.config,
            &Overrides {
                seed: self.seed,
                out: self.out.clone(),
            },
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and the out-of-domain set.
    Synth(Common),
    /// Label every 3D pose of a JSON-lines file with its FBI matrix.
    Label {
        /// Poses to label, one JSON object per line.
        #[arg(long)]
        input: PathBuf,
        /// Destination file; defaults to `<out>/fbi_labels.jsonl`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Run configuration; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pre-train the generator's depth and FBI heads.
    TrainGen(Common),
    /// Adversarially fine-tune the depth head.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Generator checkpoint; defaults to `<out>/generator.json`.
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Train the final pose regressor.
    TrainRefiner {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "final")]
        mode: RefinerMode,
    },
    /// Evaluate trained refiners on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Number of test poses to render as SVG.
        #[arg(long, default_value_t = 0)]
        renders: usize,
    },
    /// Finite-difference audit of every network and the loss derivative.
    Gradcheck(Common),
    /// Print the built-in default configuration as JSON.
    DefaultConfig {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// synth, train-gen, finetune, train-refiner (both modes) and eval in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        renders: usize,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => commands::cmd_synth(&c.load()?),
        Command::Label {
            input,
            output,
            config,
            out,
        } => {
            let overrides = Overrides { seed: None, out };
            let run = match config {
                Some(path) => Run::load(&path, &overrides)?,
                None => Run::from_config(RunConfig::with_seed(0), std::path::Path::new("."), &overrides)?,
            };
            let output = output.unwrap_or_else(|| run.out("fbi_labels.jsonl"));
            commands::cmd_label(&run, &input, &output).map(drop)
        }
        Command::TrainGen(c) => commands::cmd_train_gen(&c.load()?).map(drop),
        Command::Finetune { common, generator } => {
            commands::cmd_finetune(&common.load()?, generator.as_deref()).map(drop)
        }
        Command::TrainRefiner { common, mode } => commands::cmd_train_refiner(&common.load()?, mode).map(drop),
        Command::Eval { common, renders } => commands::cmd_eval(&common.load()?, renders).map(drop),
        Command::Gradcheck(c) => commands::cmd_gradcheck(&c.load()?).map(drop),
        Command::DefaultConfig { seed } => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::with_seed(seed))?);
            Ok(())
        }
        Command::Pipeline { common, renders } => commands::cmd_pipeline(&common.load()?, renders),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
