use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use robust_kd::config::RunConfig;
use robust_kd::pipeline::{
    cmd_ablate, cmd_distill, cmd_eval, cmd_pretrain, cmd_report, cmd_train_teacher, experiment_dirs, DistillInputs,
    StageError, StageKind, StageOutput,
};

#[derive(Parser)]
#[command(name = "robust-kd", version, about = "Robustness distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set distill.mode=apt`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, StageError> {
        let loaded = match &self.config {
            Some(path) => RunConfig::load(path, &self.overrides),
            None => RunConfig::parse("", &self.overrides),
        };
        loaded.map_err(|e| StageError::new(StageKind::Config, e))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the student and the small teacher on clean data.
    Pretrain(ConfigArgs),
    /// Fine-tune the small teacher on the augmented data.
    TrainTeacher(ConfigArgs),
    /// Distill into the multi-head student.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        /// Robust teacher checkpoint (default: the train-teacher stage output).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Base student checkpoint (default: the pretrain stage output).
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Evaluate a distilled checkpoint.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate (default: the distill stage output).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the mode x fraction x selector sweep.
    Ablate(ConfigArgs),
    /// Tabulate reports from run directories.
    Report {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directories; every run of the configured experiment when empty.
        dirs: Vec<PathBuf>,
        /// Print JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
    /// Print the effective configuration as TOML.
    ShowConfig(ConfigArgs),
}

fn print_stage(name: &str, out: &StageOutput) {
    println!("{name}: {}{}", out.dir.root.display(), if out.cached { " (cached)" } else { "" });
    for a in &out.artifacts {
        println!("  {}", a.display());
    }
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::Pretrain(args) => print_stage("pretrain", &cmd_pretrain(&args.load()?)?),
        Command::TrainTeacher(args) => print_stage("train-teacher", &cmd_train_teacher(&args.load()?)?),
        Command::Distill { config, teacher, base } => {
            let inputs = DistillInputs {
                teacher: teacher.as_deref(),
                base: base.as_deref(),
            };
            print_stage("distill", &cmd_distill(&config.load()?, &inputs)?);
        }
        Command::Eval { config, checkpoint } => print_stage("eval", &cmd_eval(&config.load()?, checkpoint.as_deref())?),
        Command::Ablate(args) => {
            let (out, table) = cmd_ablate(&args.load()?)?;
            print_stage("ablate", &out);
            print!("{}", table.to_text());
        }
        Command::Report { config, dirs, json } => {
            let dirs = if dirs.is_empty() {
                experiment_dirs(&config.load()?).map_err(|e| StageError::new(StageKind::Evaluation, e))?
            } else {
                dirs
            };
            let table = cmd_report(&dirs)?;
            if json {
                println!("{}", table.to_json());
            } else {
                print!("{}", table.to_text());
            }
        }
        Command::ShowConfig(args) => print!("{}", args.load()?.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
