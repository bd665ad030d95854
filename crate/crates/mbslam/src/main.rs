use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbslam::commands::{self, Context, Logger};
use mbslam::{CliError, ExperimentConfig, Result};

/// Multibody SLAM on simulated dynamic scenes.
#[derive(Parser)]
#[command(name = "mbslam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for the scene and every randomized stage.
    #[arg(long)]
    seed: u64,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: the config's `output`, else `out`].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Stage {
    #[command(flatten)]
    common: Common,
    /// Directory holding the previous stage's artifacts [default: --out].
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    seed: u64,
    /// One configuration per ablation row; repeat at least twice.
    #[arg(long = "config", required = true)]
    configs: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene to scene.json.
    Simulate(Common),
    /// Motion segmentation: scene.json to labels.json.
    Segment(Stage),
    /// Trajectory initialization: labels.json to init.json.
    Init(Stage),
    /// Bundle adjustment: init.json to refined.json and costs.csv.
    Refine(Stage),
    /// Trajectory errors: refined.json to evaluation.json.
    Evaluate(Stage),
    /// Every stage in one process, ending with report.json.
    Run(Common),
    /// CSV and PPM exports under plots/.
    ExportPlot(Stage),
    /// Several configurations on one scene, compared in comparison.json.
    Ablate(Ablate),
}

fn context(common: Common, from: Option<PathBuf>) -> Result<Context> {
    let config = ExperimentConfig::load_or_default(common.config.as_deref())?;
    Context::new(config, common.seed, common.out, from, Logger::stderr())
}

fn execute(command: Command) -> Result<PathBuf> {
    type StageFn = fn(&Context) -> Result<PathBuf>;
    let (stage, f): (Stage, StageFn) = match command {
        Command::Simulate(c) => return commands::simulate(&context(c, None)?),
        Command::Run(c) => return commands::run(&context(c, None)?),
        Command::Ablate(a) => {
            let configs = a
                .configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<Result<Vec<_>>>()?;
            return commands::ablate(&configs, a.seed, &a.out, &Logger::stderr()).map(|(p, _)| p);
        }
        Command::Segment(s) => (s, commands::segment),
        Command::Init(s) => (s, commands::init),
        Command::Refine(s) => (s, commands::refine),
        Command::Evaluate(s) => (s, commands::evaluate),
        Command::ExportPlot(s) => (s, commands::export_plot),
    };
    f(&context(stage.common, stage.from)?)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Config(e.to_string().trim_end().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(2);
        }
    };
    match execute(cli.command) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
