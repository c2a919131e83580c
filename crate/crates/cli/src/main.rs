mod bundle;
mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "ctrec", version, about = "Continuous-time recommendation: ingest, train, evaluate")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving outputs and the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads for batch scoring.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

/// Overrides for training keys. Values are validated by the config layer.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub d_t: Option<String>,
    #[arg(long)]
    pub epsilon: Option<String>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    /// last | mean
    #[arg(long)]
    pub aggregation: Option<String>,
    /// bochner | projection | position
    #[arg(long)]
    pub time_variant: Option<String>,
    /// dsacf | sum
    #[arg(long)]
    pub attention: Option<String>,
    #[arg(long)]
    pub use_short_term: Option<String>,
    /// most_recent | uniform
    #[arg(long)]
    pub sampling: Option<String>,
    /// silu | relu | tanh | identity
    #[arg(long)]
    pub activation: Option<String>,
    /// f32 | f64
    #[arg(long)]
    pub precision: Option<String>,
    /// Keep only the latest fraction of the training partition.
    #[arg(long)]
    pub train_proportion: Option<String>,
    /// Train/val/test ratios, e.g. 0.8,0.1,0.1
    #[arg(long)]
    pub split: Option<String>,
    /// full | no-short | sum | position | mean | 2l
    #[arg(long)]
    pub variant: Option<String>,
}

impl ModelFlags {
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 18] = [
            ("d", &self.d),
            ("d_t", &self.d_t),
            ("epsilon", &self.epsilon),
            ("layers", &self.layers),
            ("heads", &self.heads),
            ("lr", &self.lr),
            ("lambda", &self.lambda),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("aggregation", &self.aggregation),
            ("time_variant", &self.time_variant),
            ("attention", &self.attention),
            ("use_short_term", &self.use_short_term),
            ("sampling", &self.sampling),
            ("activation", &self.activation),
            ("precision", &self.precision),
            ("train_proportion", &self.train_proportion),
            ("split", &self.split),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }
}

/// Overrides for evaluation keys.
#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// Sampled negatives per event, or "all".
    #[arg(long)]
    pub negatives: Option<String>,
    /// Comma-separated cutoffs, e.g. 10,20
    #[arg(long)]
    pub k: Option<String>,
    /// val | test
    #[arg(long)]
    pub partition: Option<String>,
    /// Score the partition without replaying earlier partitions first.
    #[arg(long)]
    pub no_warm_replay: bool,
    /// Record wall-clock seconds in the metrics file.
    #[arg(long)]
    pub timings: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert an interaction CSV into a dataset bundle.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        /// jodie | generic
        #[arg(long, default_value = "jodie")]
        format: String,
    },
    /// Generate a synthetic dataset bundle.
    Synth {
        /// periodic | shift
        #[arg(long)]
        kind: String,
        #[arg(long)]
        users: usize,
        #[arg(long)]
        items: usize,
        #[arg(long)]
        events_per_user: usize,
        /// Cycle length (periodic).
        #[arg(long)]
        period: Option<usize>,
        /// Number of item clusters (shift).
        #[arg(long)]
        clusters: Option<usize>,
    },
    /// Train a model on a bundle and write a checkpoint.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate a checkpoint (or a reference scorer) on a bundle.
    Eval {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// model | oracle | random
        #[arg(long, default_value = "model")]
        scorer: String,
        /// Also write per-event ranks to ranks.csv.
        #[arg(long)]
        per_event: bool,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Train and evaluate each ablation variant, then tabulate.
    Ablate {
        #[arg(long)]
        bundle: PathBuf,
        /// Comma-separated subset of variants (default: all).
        #[arg(long)]
        variants: Option<String>,
        #[command(flatten)]
        eval: EvalFlags,
        #[command(flatten)]
        model: ModelFlags,
    },
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
        }
    }
}

impl From<ctrec::Error> for CliError {
    fn from(e: ctrec::Error) -> Self {
        if e.is_numeric_error() {
            CliError::Numeric(e.to_string())
        } else if matches!(e, ctrec::Error::Config(_) | ctrec::Error::InvalidArgument(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("usage error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    let result = match cli.command {
        Command::Ingest { input, format } => commands::ingest(&cli.common, &input, &format),
        Command::Synth {
            kind,
            users,
            items,
            events_per_user,
            period,
            clusters,
        } => commands::synth(&cli.common, &kind, users, items, events_per_user, period, clusters),
        Command::Train { bundle, model } => commands::train(&cli.common, &bundle, &model),
        Command::Eval {
            bundle,
            checkpoint,
            scorer,
            per_event,
            eval,
            model,
        } => commands::eval(&cli.common, &bundle, checkpoint.as_deref(), &scorer, per_event, &eval, &model),
        Command::Ablate {
            bundle,
            variants,
            eval,
            model,
        } => commands::ablate(&cli.common, &bundle, variants.as_deref(), &eval, &model),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
