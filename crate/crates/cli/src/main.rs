use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use alora_core::adapters::{load_adapter, save_adapter, AdapterMode, AdapterShape, AdapterSpec};
use alora_core::bench::{run_bench, BenchPlan};
use alora_core::cost::{speedup_report, write_csv};
use alora_core::engine::Engine;
use alora_core::error::exit;
use alora_core::exec::Exec;
use alora_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelWeights};
use alora_core::trainer::{
    make_synthetic_task, read_jsonl, train, write_metrics, Precision, TaskKind, TaskLayout,
    TaskSizes, TrainConfig,
};
use alora_core::verify::{run_verify, VerifyOptions};
use alora_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "alora",
    version,
    about = "Toy transformer engine with activated low-rank adapters"
)]
struct Cli {
    /// Run independent work items on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random-weight checkpoint.
    GenModel(GenModelArgs),
    /// Run the cache-equivalence invariant suite.
    Verify(VerifyArgs),
    /// Measure first-token cost with and without base-cache reuse; emits CSV.
    Bench(BenchArgs),
    /// Fine-tune an adapter on a synthetic or JSONL task.
    Train(TrainArgs),
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 256)]
    vocab_size: usize,
    #[arg(long, default_value_t = 8192)]
    max_positions: usize,
    #[arg(long, default_value_t = 10_000.0)]
    rope_theta: f64,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Check a saved activated adapter instead of random ones.
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Flip one pre-invocation verdict per trial; the suite should then fail.
    #[arg(long, hide = true)]
    mutate: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [256, 1024, 4096])]
    prompt_lengths: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    answer_tokens: usize,
    #[arg(long, default_value_t = 16)]
    eval_tokens: usize,
    #[arg(long, default_value_t = 16)]
    new_tokens: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 5])]
    n_adapters: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    lora_rank: usize,
    #[arg(long, default_value_t = 32)]
    alora_rank: usize,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    CopyKey,
    ClassifyMarker,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Alora,
    Lora,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Adapter file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Task::CopyKey)]
    task: Task,
    /// JSONL training set; replaces the synthetic task.
    #[arg(long)]
    data: Option<PathBuf>,
    /// JSONL held-out set; defaults to a fresh synthetic split.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    examples: usize,
    #[arg(long, default_value_t = 200)]
    eval_examples: usize,
    #[arg(long, default_value_t = 8)]
    distractors: usize,
    #[arg(long, default_value_t = 8)]
    n_values: usize,
    #[arg(long, value_enum, default_value_t = Mode::Alora)]
    mode: Mode,
    #[arg(long, default_value_t = 8)]
    rank: usize,
    #[arg(long, default_value_t = 32.0)]
    alpha: f32,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Stop once held-out exact match reaches this value.
    #[arg(long)]
    target_exact_match: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "ALORA_PRECISION", default_value = "f32")]
    precision: String,
}

fn load_engine(path: &PathBuf) -> Result<Engine> {
    let (config, weights) = load_checkpoint(path)?;
    Engine::new(config, weights)
}

fn gen_model(a: GenModelArgs) -> Result<i32> {
    if a.n_heads == 0 || !a.d_model.is_multiple_of(a.n_heads) {
        return Err(Error::Config(format!(
            "d_model {} is not divisible into {} heads",
            a.d_model, a.n_heads
        )));
    }
    let config = ModelConfig {
        n_layers: a.n_layers,
        n_heads: a.n_heads,
        d_model: a.d_model,
        d_head: a.d_model / a.n_heads,
        vocab_size: a.vocab_size,
        max_positions: a.max_positions,
        rope_theta: a.rope_theta,
    };
    config.validate()?;
    let weights = ModelWeights::random(&config, a.seed)?;
    save_checkpoint(&config, &weights, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(exit::SUCCESS)
}

fn verify(a: VerifyArgs, exec: Exec) -> Result<i32> {
    let engine = load_engine(&a.checkpoint)?;
    let mut options = VerifyOptions::new(a.trials, a.seed);
    options.exec = exec;
    options.mutate = a.mutate;
    options.adapter = a.adapter.map(load_adapter).transpose()?;
    let report = run_verify(&engine, &options)?;
    print!("{report}");
    Ok(if report.passed() {
        exit::SUCCESS
    } else {
        exit::VERIFICATION_FAILED
    })
}

fn bench(a: BenchArgs, exec: Exec) -> Result<i32> {
    let engine = load_engine(&a.checkpoint)?;
    let plan = BenchPlan {
        prompt_lengths: a.prompt_lengths,
        answer_tokens: a.answer_tokens,
        eval_tokens: a.eval_tokens,
        new_tokens: a.new_tokens,
        n_adapters: a.n_adapters,
        lora_rank: a.lora_rank,
        alora_rank: a.alora_rank,
        repetitions: a.repetitions,
        seed: a.seed,
    };
    let out = run_bench(&engine, &plan, exec)?;
    match &a.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            write_csv(&out.rows, file)?;
        }
        None => write_csv(&out.rows, std::io::stdout().lock())?,
    }
    let report = speedup_report(&out.measurements)?;
    for d in &report.diagnostics {
        eprintln!("note: {d}");
    }
    for r in &report.rows {
        eprintln!(
            "T_cache={} T_new={} N={}: lora/alora first-token flops {:.3} (predicted {:.3})",
            r.t_cache, r.t_new, r.n_adapters, r.measured_ratio, r.predicted_ratio
        );
    }
    Ok(exit::SUCCESS)
}

fn train_cmd(a: TrainArgs, exec: Exec) -> Result<i32> {
    let engine = load_engine(&a.checkpoint)?;
    let config = engine.config().clone();
    let layout = TaskLayout::new(config.vocab_size, a.n_values)?;
    let sizes = TaskSizes {
        examples: a.examples,
        distractors: a.distractors,
        n_values: a.n_values,
    };
    let kind = match a.task {
        Task::CopyKey => TaskKind::CopyKey,
        Task::ClassifyMarker => TaskKind::ClassifyMarker,
    };
    let dataset = match &a.data {
        Some(p) => read_jsonl(p)?,
        None => make_synthetic_task(kind, &sizes, &layout, a.seed)?,
    };
    let held_out = match &a.eval_data {
        Some(p) => read_jsonl(p)?,
        None => {
            let eval_sizes = TaskSizes {
                examples: a.eval_examples,
                ..sizes
            };
            make_synthetic_task(kind, &eval_sizes, &layout, a.seed.wrapping_add(1))?
        }
    };
    let invocation = dataset
        .first()
        .map(|e| e.invocation.clone())
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    let mode = match a.mode {
        Mode::Alora => AdapterMode::Alora,
        Mode::Lora => AdapterMode::Lora,
    };
    let shape = AdapterShape::new(1, mode, a.rank)
        .with_alpha(a.alpha)
        .with_invocation(invocation);
    let initial = AdapterSpec::for_training(&config, shape, a.seed)?;
    let train_config = TrainConfig {
        learning_rate: a.lr,
        steps: a.steps,
        batch_size: a.batch_size,
        dropout: a.dropout,
        seed: a.seed,
        precision: a.precision.parse::<Precision>()?,
        eval_every: a.eval_every,
        target_exact_match: a.target_exact_match,
    };
    let outcome = train(&engine, &initial, &dataset, &held_out, &train_config, exec)?;
    save_adapter(&outcome.adapter, &a.out)?;
    if let Some(path) = &a.metrics {
        write_metrics(&outcome.history, path)?;
    }
    println!(
        "steps {} final exact-match {:.4}",
        outcome.steps_run, outcome.exact_match
    );
    Ok(exit::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    let result = match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::Verify(a) => verify(a, exec),
        Command::Bench(a) => bench(a, exec),
        Command::Train(a) => train_cmd(a, exec),
    };
    let code = result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
