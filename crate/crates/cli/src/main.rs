mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::CliConfig;

#[derive(Parser)]
#[command(
    name = "docloc",
    version,
    about = "Document question answering with answer localization"
)]
struct Cli {
    /// JSON file with default settings; flags and environment override it.
    #[arg(long, global = true, env = "DOCLOC_CONFIG")]
    config: Option<PathBuf>,

    /// Print the resolved settings as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus in the unified format.
    Synth(SynthArgs),
    /// Answer one question about one image.
    Ask(AskArgs),
    /// Run a pipeline over a corpus and score it.
    Eval(EvalArgs),
    /// Score a predictions file against a corpus.
    Score(ScoreArgs),
    /// Run the OCR-free default and both ablations side by side.
    Ablate(EvalArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Number of documents.
    #[arg(long)]
    pub n: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Rendering noise: none or jitter.
    #[arg(long, default_value = "none")]
    pub noise: String,
}

#[derive(Args, Default)]
pub struct DataArgs {
    #[arg(long, env = "DOCLOC_DATASET_ROOT")]
    pub dataset_root: Option<PathBuf>,
    /// funsd, cord, sroie, docvqa, unified or synthetic.
    #[arg(long, env = "DOCLOC_FORMAT")]
    pub format: Option<String>,
    #[arg(long, env = "DOCLOC_SPLIT")]
    pub split: Option<String>,
}

#[derive(Args, Default)]
pub struct PipelineArgs {
    /// ocr-dep or ocr-free.
    #[arg(long, env = "DOCLOC_MODE")]
    pub mode: Option<String>,
    /// none, 1 or 2.
    #[arg(long, env = "DOCLOC_ABLATION")]
    pub ablation: Option<String>,
    /// Model backend: mock, http or oracle.
    #[arg(long, env = "DOCLOC_BACKEND")]
    pub backend: Option<String>,
    /// Scripted replies for the mock backend.
    #[arg(long, env = "DOCLOC_MOCK_SCRIPT")]
    pub mock_script: Option<PathBuf>,
    /// Chat-completions endpoint for the http backend; the key is read from MODEL_API_KEY.
    #[arg(long, env = "MODEL_ENDPOINT")]
    pub endpoint: Option<String>,
    #[arg(long, env = "DOCLOC_MODEL_ID")]
    pub model_id: Option<String>,
    /// Prompt set JSON replacing the bundled one.
    #[arg(long, env = "DOCLOC_PROMPTS")]
    pub prompts: Option<PathBuf>,
    /// reference, ground-truth, or a detections.jsonl file.
    #[arg(long, env = "DOCLOC_DETECTOR")]
    pub detector: Option<String>,
    /// Word table (words.jsonl) serving as the recognizer.
    #[arg(long, env = "DOCLOC_WORDS")]
    pub words: Option<PathBuf>,
    #[arg(long)]
    pub noise_substitution: Option<f64>,
    #[arg(long)]
    pub noise_deletion: Option<f64>,
    #[arg(long)]
    pub noise_seed: Option<u64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    #[arg(long)]
    pub per_minute: Option<u32>,
    #[arg(long)]
    pub timeout_secs: Option<u64>,
}

#[derive(Args, Default)]
pub struct RunArgs {
    #[arg(long, env = "DOCLOC_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, env = "DOCLOC_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
    #[arg(long, env = "DOCLOC_OUT_DIR")]
    pub out_dir: Option<PathBuf>,
    /// Continue an interrupted run in --out-dir.
    #[arg(long)]
    pub resume: bool,
    /// ungated or text-gated.
    #[arg(long, env = "DOCLOC_GATING")]
    pub gating: Option<String>,
}

#[derive(Args)]
pub struct AskArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub question: String,
    /// Question id used in request tags.
    #[arg(long, default_value = "q0")]
    pub question_id: String,
    /// Document id; defaults to the image file stem.
    #[arg(long)]
    pub doc_id: Option<String>,
    /// Write the image with the answer box drawn on it.
    #[arg(long)]
    pub annotate_out: Option<PathBuf>,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Predictions file to score.
    #[arg(long)]
    pub pred: PathBuf,
    /// Write the report JSON here instead of standard output.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, env = "DOCLOC_GATING")]
    pub gating: Option<String>,
}

impl DataArgs {
    fn layer(&self) -> CliConfig {
        CliConfig {
            dataset_root: self.dataset_root.clone(),
            format: self.format.clone(),
            split: self.split.clone(),
            ..CliConfig::default()
        }
    }
}

impl PipelineArgs {
    fn layer(&self) -> CliConfig {
        CliConfig {
            mode: self.mode.clone(),
            ablation: self.ablation.clone(),
            backend: self.backend.clone(),
            mock_script: self.mock_script.clone(),
            endpoint: self.endpoint.clone(),
            model_id: self.model_id.clone(),
            prompts: self.prompts.clone(),
            detector: self.detector.clone(),
            words: self.words.clone(),
            noise_substitution: self.noise_substitution,
            noise_deletion: self.noise_deletion,
            noise_seed: self.noise_seed,
            max_in_flight: self.max_in_flight,
            per_minute: self.per_minute,
            timeout_secs: self.timeout_secs,
            ..CliConfig::default()
        }
    }
}

impl RunArgs {
    fn layer(&self) -> CliConfig {
        CliConfig {
            workers: self.workers,
            cache_dir: self.cache_dir.clone(),
            out_dir: self.out_dir.clone(),
            resume: self.resume.then_some(true),
            gating: self.gating.clone(),
            ..CliConfig::default()
        }
    }
}

impl Command {
    fn layer(&self) -> CliConfig {
        match self {
            Command::Synth(_) => CliConfig::default(),
            Command::Ask(a) => a.pipeline.layer(),
            Command::Eval(a) | Command::Ablate(a) => a.data.layer().over(a.pipeline.layer()).over(a.run.layer()),
            Command::Score(a) => a.data.layer().over(CliConfig {
                gating: a.gating.clone(),
                ..CliConfig::default()
            }),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = CliConfig::resolve(cli.command.layer(), cli.config.as_deref())?;
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(ExitCode::SUCCESS);
    }
    match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Ask(a) => commands::ask(&a, &cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Score(a) => commands::score(&a, &cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
    }
}
