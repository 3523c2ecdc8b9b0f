//! `advwasm` command-line front end.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage error (bad flags) |
//! | 3 | input binary cannot be parsed or instrumented |
//! | 4 | invalid configuration value |
//! | 5 | corpus problem (empty, single class, duplicate id) |
//! | 6 | model file incompatible or of the wrong shape |
//! | 7 | file system error |
//! | 8 | `--strict` attack did not reach tau |
//! | 9 | external runtime or optimizer command failed |

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use advwasm::attack::{AttackConfig, ClampMode};
use advwasm::gadgets::GadgetKind;
use advwasm::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "advwasm", version, about = "Gadget instrumentation and adversarial crafting for Wasm binaries")]
struct Cli {
    /// Seed for every random choice; recorded in each report.
    #[arg(long, global = true, env = "MADVEX_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Insert gadgets into one binary and write its payload map.
    Instrument(InstrumentArgs),
    /// Train one model or k fold models on a corpus.
    Train(TrainArgs),
    /// Score binaries with a trained model.
    Classify(ClassifyArgs),
    /// Instrument a binary and craft adversarial payloads against a model.
    Attack(AttackArgs),
    /// Transfer rates of substitute-crafted binaries against a target model.
    Evaluate(EvaluateArgs),
    /// Size and runtime overhead of instrumentation per density.
    Bench(BenchArgs),
    /// Generate a synthetic benign/malicious corpus.
    Synth(SynthArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Gadget {
    Se,
    Or,
}

impl From<Gadget> for GadgetKind {
    fn from(g: Gadget) -> Self {
        match g {
            Gadget::Se => GadgetKind::Se,
            Gadget::Or => GadgetKind::Or,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Clamp {
    Unit,
    Reachable,
}

#[derive(Copy, Clone, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

#[derive(Args, Debug)]
struct CorpusArgs {
    /// Directory of binaries below `benign/` and `malicious/` subdirectories.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    corpus: Option<PathBuf>,
    /// JSON-lines manifest of `{"path", "label", "source"}` entries.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttackFlags {
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-13)]
    tau: f64,
    #[arg(long = "max-iter", default_value_t = 10_000)]
    max_iter: usize,
    /// Interval crafting pixels are clamped to.
    #[arg(long, value_enum, default_value_t = Clamp::Unit)]
    clamp: Clamp,
    /// Stop after this many iterations without logit progress.
    #[arg(long)]
    patience: Option<usize>,
    /// Class the crafted binary should be assigned.
    #[arg(long, default_value_t = 0)]
    target_class: u8,
}

impl AttackFlags {
    fn config(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            tau: self.tau,
            max_iterations: self.max_iter,
            target_class: self.target_class,
            clamp: match self.clamp {
                Clamp::Unit => ClampMode::Unit,
                Clamp::Reachable => ClampMode::Reachable,
            },
            patience: self.patience,
            ..AttackConfig::default()
        }
    }
}

#[derive(Args, Debug)]
struct InstrumentArgs {
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Gadget::Se)]
    gadget: Gadget,
    #[arg(long, default_value_t = 0.02)]
    density: f64,
    /// Optimizer to run on the instrumented binary; `{in}` and `{out}` are
    /// replaced by paths, otherwise ` {in} -o {out}` is appended.
    #[arg(long = "optimizer-cmd", env = "MADVEX_OPTIMIZER_CMD")]
    optimizer_cmd: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Number of folds; 1 trains a single model on everything.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Relabel the corpus with this model's predictions before training.
    #[arg(long)]
    label_with: Option<PathBuf>,
    /// Duplicate minority-class samples until the classes are even.
    #[arg(long)]
    balance: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// CSV destination; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = Gadget::Se)]
    gadget: Gadget,
    #[arg(long, default_value_t = 0.02)]
    density: f64,
    #[command(flatten)]
    attack: AttackFlags,
    /// Exit with code 8 when tau is not reached.
    #[arg(long)]
    strict: bool,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Substitute models; each counts as one fold for mean and std.
    #[arg(long = "substitute", required = true, num_args = 1..)]
    substitutes: Vec<PathBuf>,
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [0.005, 0.01, 0.02, 0.05, 0.1])]
    density: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Gadget::Se])]
    gadget: Vec<Gadget>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Attack at most this many malicious samples.
    #[arg(long)]
    max_samples: Option<usize>,
    #[command(flatten)]
    attack: AttackFlags,
}

#[derive(Args, Debug)]
struct BenchArgs {
    input: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.005, 0.01, 0.02, 0.05, 0.1])]
    density: Vec<f64>,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [Gadget::Se, Gadget::Or])]
    gadget: Vec<Gadget>,
    /// Runtime used to execute a binary; `{}` is replaced by its path,
    /// otherwise the path is appended.
    #[arg(long = "runtime-cmd", env = "MADVEX_RUNTIME_CMD")]
    runtime_cmd: Option<String>,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    /// Modules per class.
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 60_000)]
    min_size: usize,
    #[arg(long, default_value_t = 200_000)]
    max_size: usize,
}

/// Every flag that influenced a run, embedded in each report.
#[derive(Debug, Clone, Serialize, Default)]
pub struct RunConfig {
    pub subcommand: &'static str,
    pub tool_version: &'static str,
    pub inputs: Vec<PathBuf>,
    pub output: Option<PathBuf>,
    pub densities: Vec<f64>,
    pub gadgets: Vec<GadgetKind>,
    pub seed: u64,
    pub epochs: Option<usize>,
    pub k: Option<usize>,
    pub attack: Option<AttackConfig>,
    pub runtime_cmd: Option<String>,
    pub optimizer_cmd: Option<String>,
    pub strict: bool,
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl RunConfig {
    fn new(subcommand: &'static str, seed: u64) -> Self {
        Self {
            subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            ..Self::default()
        }
    }
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub enum Failure {
    Core(Error),
    TauNotReached,
    External(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e {
                Error::MalformedEncoding { .. }
                | Error::InvalidModule(_)
                | Error::MalformedModule { .. }
                | Error::UnsupportedOpcode { .. }
                | Error::NotInstrumentable(_)
                | Error::EmptyBinary => 3,
                Error::InvalidDensity(_)
                | Error::InvalidConfig(_)
                | Error::InvalidTarget(_)
                | Error::InvalidFolds(_)
                | Error::NothingEditable
                | Error::MaskViolation { .. } => 4,
                Error::EmptyCorpus | Error::DegenerateDataset(_) | Error::DuplicateId(_) => 5,
                Error::IncompatibleModel(_) | Error::ShapeMismatch { .. } => 6,
                Error::Io { .. } | Error::Json(_) => 7,
            },
            Failure::TauNotReached => 8,
            Failure::External(_) => 9,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::TauNotReached => f.write_str("attack did not reach tau"),
            Failure::External(msg) => write!(f, "external command failed: {msg}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Instrument(a) => commands::instrument(a, seed),
        Command::Train(a) => commands::train(a, seed),
        Command::Classify(a) => commands::classify(a, seed),
        Command::Attack(a) => commands::attack(a, seed),
        Command::Evaluate(a) => commands::evaluate(a, seed),
        Command::Bench(a) => commands::bench(a, seed),
        Command::Synth(a) => commands::synth(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
