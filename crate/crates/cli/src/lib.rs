//! `mmchat`: preprocess → train → eval → build-index → serve → aggregate.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod config;
pub mod files;
mod inspect;
mod pipeline;
mod service;

pub use config::RunConfig;
pub use files::RunManifest;

#[derive(Debug, Parser)]
#[command(
    name = "mmchat",
    version,
    about = "Image-augmented dialogue pipeline",
    arg_required_else_help = true
)]
pub struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Retriever,
    Generator,
}

impl From<TaskArg> for mmchat_core::trainer::Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Retriever => mmchat_core::trainer::Task::Retriever,
            TaskArg::Generator => mmchat_core::trainer::Task::Generator,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Greedy,
    Nucleus,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean raw PhotoChat splits and write samples, vocabulary and stats.
    Preprocess(PreprocessArgs),
    /// Train a retriever or generator.
    Train(TrainArgs),
    /// Score a checkpoint on a processed split.
    Eval(EvalArgs),
    /// Embed candidate images with a retriever checkpoint.
    BuildIndex(BuildIndexArgs),
    /// Run the chat service.
    Serve(ServeArgs),
    /// Per-model means of collected human evaluations.
    Aggregate(AggregateArgs),
    /// Gradient checks and metric oracles.
    Selftest,
    /// Retriever queries and indexing.
    #[command(subcommand)]
    Retriever(RetrieverCommand),
    /// Generator decoding and training.
    #[command(subcommand)]
    Generator(GeneratorCommand),
}

#[derive(Debug, Subcommand)]
pub enum RetrieverCommand {
    /// Rank indexed images for a dialogue history.
    Rank(RankArgs),
    BuildIndex(BuildIndexArgs),
}

#[derive(Debug, Subcommand)]
pub enum GeneratorCommand {
    /// Decode a response to a dialogue history.
    Generate(GenerateArgs),
    Train(TrainArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of `<split>.json` files, or a single train file.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Image manifest used to drop dialogues whose image is missing.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_freq: usize,
    #[arg(long, default_value_t = 8192)]
    pub max_vocab: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// TOML or JSON; missing keys take the task defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long)]
    pub print_config: bool,
    /// Output of `preprocess`.
    #[arg(long, required_unless_present = "print_config")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_config")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: TaskArg,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Prebuilt candidate index; by default the split's gold images.
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub ks: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub eval_batch: usize,
    #[arg(long, default_value_t = 40)]
    pub max_new_tokens: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Restrict candidates to the gold images of a retriever JSONL file.
    #[arg(long)]
    pub only: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub retriever: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// JSON array of turns, or one utterance per line starting with the user.
    #[arg(long)]
    pub history: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub history: PathBuf,
    /// Conditioning image id; the dummy image when absent.
    #[arg(long)]
    pub image: Option<String>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "nucleus")]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0.1)]
    pub top_p: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub max_new_tokens: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Retriever checkpoint whose image tower built `--index`.
    #[arg(long)]
    pub retriever: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Generator checkpoint per `--variant`, in the same order.
    #[arg(long, required = true)]
    pub generator: Vec<PathBuf>,
    /// unimodal | unimodal_retriever | multimodal_retriever
    #[arg(long, required = true)]
    pub variant: Vec<String>,
    #[arg(long, default_value_t = 0.15)]
    pub threshold: f32,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    pub top_p: f64,
    #[arg(long, default_value_t = 40)]
    pub max_new_tokens: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Web frontend assets.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
    /// Overrides MMCHAT_DATA_DIR.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Overrides MMCHAT_PORT.
    #[arg(long)]
    pub port: Option<u16>,
}

#[derive(Debug, Args)]
pub struct AggregateArgs {
    /// Session files; defaults to the sessions directory under MMCHAT_DATA_DIR.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

/// Resolves paths against `--workdir`.
#[derive(Clone, Debug)]
pub struct Ctx {
    pub workdir: PathBuf,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.workdir.join(p)
        }
    }
}

/// Parse `argv` and run the command. Usage errors give 2, failures 1.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let ctx = Ctx {
        workdir: cli.workdir.clone(),
    };
    match dispatch(&ctx, cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            1
        }
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn dispatch(ctx: &Ctx, command: Command) -> anyhow::Result<i32> {
    match command {
        Command::Preprocess(a) => pipeline::preprocess(ctx, &a),
        Command::Train(a) => pipeline::train(ctx, &a),
        Command::Generator(GeneratorCommand::Train(mut a)) => {
            if a.task == Some(TaskArg::Retriever) {
                anyhow::bail!("`generator train` trains the generator; use `train --task retriever`");
            }
            a.task = Some(TaskArg::Generator);
            pipeline::train(ctx, &a)
        }
        Command::Eval(a) => pipeline::eval(ctx, &a),
        Command::BuildIndex(a) | Command::Retriever(RetrieverCommand::BuildIndex(a)) => inspect::build_index(ctx, &a),
        Command::Retriever(RetrieverCommand::Rank(a)) => inspect::rank(ctx, &a),
        Command::Generator(GeneratorCommand::Generate(a)) => inspect::generate(ctx, &a),
        Command::Serve(a) => service::serve(ctx, &a),
        Command::Aggregate(a) => service::aggregate(ctx, &a),
        Command::Selftest => {
            let report = mmchat_core::selftest::run()?;
            print!("{}", report.render());
            Ok(if report.passed() { 0 } else { 1 })
        }
    }
}
