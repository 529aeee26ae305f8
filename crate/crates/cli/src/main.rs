mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{categorize, Category};

#[derive(Parser, Debug)]
#[command(name = "canlm", version, about = "Tokenize decoded CAN logs, pretrain a transformer encoder and fine-tune it")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Root seed; overrides the seed of a config file.
    #[arg(long, global = true, env = "CANLM_SEED")]
    pub seed: Option<u64>,
    /// TOML file holding the stage's full configuration.
    #[arg(long, global = true, env = "CANLM_CONFIG")]
    pub config: Option<PathBuf>,
    /// Run data-parallel work on a single thread.
    #[arg(long, global = true, env = "CANLM_DETERMINISTIC")]
    pub deterministic: bool,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Collision,
    Impact,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    Mlm,
    Classifier,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SentinelArg {
    PerFeature,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic decoded trips and collision labels.
    Generate {
        /// Schema document; the reference schema when omitted.
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        vehicles: usize,
        #[arg(long, default_value_t = 5)]
        trips: usize,
        #[arg(long, default_value_t = 300)]
        seconds: usize,
        #[arg(long, default_value_t = 0.0)]
        collision_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate empirical bounds, temporal variation and bin counts.
    Calibrate {
        #[arg(long)]
        trips: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Vehicles sampled for calibration (all when omitted).
        #[arg(long)]
        sample_vehicles: Option<usize>,
        /// Trips sampled per vehicle (all when omitted).
        #[arg(long)]
        sample_trips: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize trips into a data directory usable by later stages.
    Tokenize {
        #[arg(long)]
        trips: PathBuf,
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        /// Labels file copied next to the tokens.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SentinelArg::PerFeature)]
        sentinels: SentinelArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a token file back to frames and a readable token listing.
    Detokenize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-language-model pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a pretrained checkpoint, or train the same shape from scratch.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Negatives per positive for the collision task.
        #[arg(long, default_value_t = 10.0)]
        ratio: f64,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        data: PathBuf,
        /// Seed of the trip split, shared by every training seed.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a fine-tuned checkpoint on one split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long, default_value_t = 10.0)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Model name used in the report table.
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer-gain table from fine-tuning run directories.
    Report {
        /// Pretrained-arm and scratch-arm directories, each a run or a
        /// parent of runs.
        #[arg(long, num_args = 2, value_names = ["PRETRAINED", "SCRATCH"], required = true)]
        compare: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = HeadArg::Both)]
        head: HeadArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Every stage end to end on synthetic data.
    Demo {
        /// Built-in configuration: `smoke` or `standard`.
        #[arg(long, default_value = "standard")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn report_error(category: Category, message: &str) {
    let line = serde_json::json!({
        "error": category.name(),
        "exit_code": category.exit_code(),
        "message": message,
    });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            report_error(Category::Usage, e.kind().to_string().as_str());
            return ExitCode::from(Category::Usage.exit_code() as u8);
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CANLM_LOG", level)).init();
    if cli.global.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = categorize(&e);
            report_error(category, &format!("{e:#}"));
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
