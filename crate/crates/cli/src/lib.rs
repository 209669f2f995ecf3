//! Command-line front end: every subcommand reads and writes artifacts in
//! one run directory and leaves a manifest of what it used and produced.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

mod commands;
mod workspace;

pub use workspace::Run;

#[derive(Parser, Debug)]
#[command(name = "vitask", version, about = "Task-specific visual instruction tuning on a toy VLM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Config file of `key = value` lines [default: <out>/config.conf, else built-in defaults]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory; all outputs are written here
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Vitask,
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ep {
    None,
    Cls,
    All,
    Rep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    ClassLikelihood,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic task (or ingest a feature table) and write splits, corpora and vocabulary
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// Feature table `sample_id,dataset_id,label,f0,...` to use instead of the synthetic task
        #[arg(long, value_name = "CSV")]
        features: Option<PathBuf>,
    },
    /// Train the task-specific model
    TrainTsm {
        #[command(flatten)]
        common: Common,
    },
    /// Train one VITask stage, or the vanilla baseline; runs the warm-up first if needed
    Train {
        #[command(flatten)]
        common: Common,
        /// VITask stage (required for --method vitask)
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: Option<u8>,
        #[arg(long, value_enum, default_value_t = Method::Vitask)]
        method: Method,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint name in the run directory, or a .json path
        #[arg(long, default_value = "stage2")]
        checkpoint: String,
        /// Exemplar prompting at inference
        #[arg(long, value_enum, default_value_t = Ep::None)]
        ep: Ep,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        /// Use instructions without the class list
        #[arg(long)]
        incomplete: bool,
        /// TSM to use for exemplars [default: the one the checkpoint records]
        #[arg(long, value_name = "PATH")]
        tsm: Option<PathBuf>,
    },
    /// Response-probability densities of correct vs mismatched images for up to three checkpoints
    Density {
        #[command(flatten)]
        common: Common,
        /// Checkpoint names or .json paths
        #[arg(long = "checkpoint", num_args = 1..=3, default_values = ["warmup", "vanilla", "stage2"])]
        checkpoints: Vec<String>,
        #[arg(long, value_enum, default_value_t = Ep::None)]
        ep: Ep,
    },
    /// Plug a TSM trained on a mean-shifted task into a tuned checkpoint and compare
    SwapTsm {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "stage2")]
        checkpoint: String,
        /// Replacement TSM [default: fine-tune the original on the shifted task]
        #[arg(long, value_name = "PATH")]
        tsm: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
    },
    /// Train vanilla and VITask on full and incomplete instructions and report the F1 drop
    Robustness {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
    },
}

/// Runs one command line. Returns the process exit code: 0 on success, 1 on
/// usage errors, 2 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(usage) => {
                let _ = usage.print();
                1
            }
            None => {
                eprintln!("error: {e:#}");
                2
            }
        },
    }
}

fn usage_error(msg: &str) -> anyhow::Error {
    Cli::command().error(ErrorKind::MissingRequiredArgument, msg).into()
}

fn opts<const N: usize>(pairs: [(&str, String); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::PrepareData { common, features } => {
            let o = opts([("features", features.as_ref().map_or(String::new(), |p| p.display().to_string()))]);
            commands::prepare_data(Run::new("prepare-data", &common, o)?, features)
        }
        Command::TrainTsm { common } => commands::train_tsm(Run::new("train-tsm", &common, BTreeMap::new())?),
        Command::Train { common, stage, method } => {
            let name = match (method, stage) {
                (Method::Vanilla, _) => "train-vanilla".to_string(),
                (Method::Vitask, Some(s)) => format!("train-stage{s}"),
                (Method::Vitask, None) => return Err(usage_error("--stage 1 or --stage 2 is required with --method vitask")),
            };
            let o = opts([("method", format!("{method:?}").to_lowercase()), ("stage", format!("{stage:?}"))]);
            commands::train(Run::new(&name, &common, o)?, method, stage.unwrap_or(0))
        }
        Command::Eval { common, checkpoint, ep, mode, incomplete, tsm } => {
            let o = opts([
                ("checkpoint", checkpoint.clone()),
                ("ep", commands::ep_variant(ep).to_string()),
                ("mode", commands::decode_mode(mode).to_string()),
                ("incomplete", incomplete.to_string()),
                ("tsm", tsm.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ]);
            let tag = commands::eval_tag(&checkpoint, ep, mode, incomplete);
            commands::eval(Run::new(&format!("eval-{tag}"), &common, o)?, &checkpoint, ep, mode, incomplete, tsm, &tag)
        }
        Command::Density { common, checkpoints, ep } => {
            let o = opts([("checkpoints", checkpoints.join(",")), ("ep", commands::ep_variant(ep).to_string())]);
            commands::density(Run::new("density", &common, o)?, &checkpoints, ep)
        }
        Command::SwapTsm { common, checkpoint, tsm, mode } => {
            let o = opts([
                ("checkpoint", checkpoint.clone()),
                ("tsm", tsm.as_ref().map_or(String::new(), |p| p.display().to_string())),
                ("mode", commands::decode_mode(mode).to_string()),
            ]);
            commands::swap_tsm(Run::new("swap-tsm", &common, o)?, &checkpoint, tsm, mode)
        }
        Command::Robustness { common, mode } => {
            let o = opts([("mode", commands::decode_mode(mode).to_string())]);
            commands::robustness(Run::new("robustness", &common, o)?, mode)
        }
    }
}
