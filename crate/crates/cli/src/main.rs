use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kcm::kcha::KernelParams;
use kcm::pipeline::{self, PruneOptions, SynthOptions, DEFAULT_NUM_SAMPLES};
use kcm::ranker::Strategy;
use kcm::tensorstore::{read_container, read_token_batch};
use kcm::Error;

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "kcm", version, about = "Gradient-free FFN filter pruning for transformer encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank, select, rescale and compact FFN filters under a FLOPs budget.
    Prune(PruneArgs),
    /// Compare a pruned model against its original.
    Eval(EvalArgs),
    /// Write a synthetic model container and token batch.
    Synth(SynthArgs),
    /// Sweep strategies over a grid of FLOPs budgets and emit CSV.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct RankingArgs {
    /// Gaussian kernel width.
    #[arg(long, default_value_t = 1.0)]
    kernel_width: f64,
    /// Relative-change stopping threshold for the kernel iteration.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    /// Use the first N sequences of the sample file.
    #[arg(long, default_value_t = DEFAULT_NUM_SAMPLES)]
    num_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sequence length for the FLOPs model [default: longest sample].
    #[arg(long)]
    seq_len: Option<usize>,
    /// Ridge strength for the scale fit.
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
    /// Max-normalize representative scores per layer before merging.
    #[arg(long)]
    normalize_r2: bool,
}

impl RankingArgs {
    fn options(&self, flops: f64, strategy: Strategy) -> PruneOptions {
        PruneOptions {
            flops,
            strategy,
            kernel: KernelParams {
                width: self.kernel_width,
                alpha: self.alpha,
                max_iters: self.max_iters,
                ..Default::default()
            },
            num_samples: self.num_samples,
            seed: self.seed,
            ridge: self.ridge,
            seq_len: self.seq_len,
            normalize_r2: self.normalize_r2,
        }
    }
}

#[derive(Args)]
struct PruneArgs {
    model: PathBuf,
    samples: PathBuf,
    /// Target fraction of dense FLOPs.
    #[arg(long)]
    flops: f64,
    #[arg(long, default_value = "r2d2", value_parser = parse_strategy)]
    strategy: Strategy,
    #[command(flatten)]
    ranking: RankingArgs,
    /// Output directory for the pruned container.
    #[arg(long)]
    out: PathBuf,
    /// Path for the JSON report [default: stdout].
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the score table and fitted mask under this directory.
    #[arg(long)]
    save_artifacts: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    original: PathBuf,
    pruned: PathBuf,
    samples: PathBuf,
    /// Path for the JSON result [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    filters: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 100)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    max_seq_len: usize,
    /// Fraction of filters that duplicate another filter.
    #[arg(long, default_value_t = 0.0)]
    redundancy: f64,
    #[arg(long, default_value_t = 64)]
    num_sequences: usize,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    model: PathBuf,
    samples: PathBuf,
    /// Comma-separated FLOPs budgets.
    #[arg(long, value_delimiter = ',', default_value = "0.9,0.8,0.7,0.6")]
    flops_grid: Vec<f64>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy,
          default_value = "r2d2,r2_only,d2_only,weight_magnitude,output_magnitude")]
    strategies: Vec<Strategy>,
    #[command(flatten)]
    ranking: RankingArgs,
    /// Path for the CSV [default: stdout].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn emit(text: &str, path: Option<&Path>) -> kcm::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> kcm::Result<()> {
    match cli.command {
        Command::Prune(a) => {
            let opts = a.ranking.options(a.flops, a.strategy);
            let report = pipeline::prune_files(
                &a.model,
                &a.samples,
                &opts,
                &a.out,
                a.report.as_deref(),
                a.save_artifacts.as_deref(),
            )?;
            if a.report.is_none() {
                print!("{}", report.to_json());
            }
            Ok(())
        }
        Command::Eval(a) => {
            let report = pipeline::evaluate_files(&a.original, &a.pruned, &a.samples)?;
            emit(&report.to_json(), a.out.as_deref())
        }
        Command::Synth(a) => {
            let opts = SynthOptions {
                seed: a.seed,
                layers: a.layers,
                dim: a.dim,
                filters: a.filters,
                heads: a.heads,
                vocab: a.vocab,
                max_seq_len: a.max_seq_len,
                redundancy: a.redundancy,
                num_sequences: a.num_sequences,
                seq_len: a.seq_len,
            };
            let (model, samples) = pipeline::synth_files(&opts, &a.out)?;
            println!("{}", model.display());
            println!("{}", samples.display());
            Ok(())
        }
        Command::Ablate(a) => {
            let bundle = read_container(&a.model)?;
            let batch = read_token_batch(&a.samples)?;
            let opts = a.ranking.options(1.0, Strategy::R2d2);
            let rows = pipeline::ablate(&bundle, &batch, &a.flops_grid, &a.strategies, &opts)?;
            emit(&pipeline::ablation_csv(&rows), a.out.as_deref())
        }
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::InfeasibleBudget { .. } => EXIT_INFEASIBLE,
        _ => EXIT_VALIDATION,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("KCM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("KCM_THREADS must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_VALIDATION);
    }
    // clap exits with 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
