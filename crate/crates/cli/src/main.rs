//! `hrnn`: dataset building, training, evaluation, sampling, throughput
//! benchmarks and the self-check suite.
//!
//! Machine-readable results go to stdout as `key=value` lines; logs go to
//! stderr. Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hrnn::audio::{
    build_dataset, synth_generate, write_wav, Encoding, QuantizedDataset, SynthKind,
};
use hrnn::infer::{bench_throughput, generate, SampleOptions};
use hrnn::model::{CheckpointBundle, ModelConfig, ParamSet, RunConfig};
use hrnn::selftest::run_selftest;
use hrnn::train::{evaluate_checkpoint, train};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "hrnn",
    version,
    about = "Gated linear-recurrent autoregressive model for 8-bit audio"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a WAV directory or a synthetic corpus into a dataset file.
    Dataset(DatasetArgs),
    /// Train a model and write checkpoints plus a metric log.
    Train(TrainArgs),
    /// Teacher-forced NLL of a checkpoint on a dataset, raw and EMA weights.
    Eval(EvalArgs),
    /// Sample audio from a checkpoint into WAV files.
    Sample(SampleArgs),
    /// Time autoregressive generation.
    Bench(BenchArgs),
    /// Run the fast invariant suite.
    Selftest,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["input", "synth"])))]
struct DatasetArgs {
    /// Directory of 16-bit PCM WAV files.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Synthetic corpus: sine-mix, random-walk or digit-like-chirps.
    #[arg(long)]
    synth: Option<String>,
    /// Number of synthetic sequences.
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value = "mulaw")]
    encoding: String,
    #[arg(long)]
    seq_len: usize,
    /// Window stride; defaults to the sequence length.
    #[arg(long)]
    hop: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample rate of synthetic corpora.
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Overrides `grad_shards` from the config.
    #[arg(long)]
    grad_shards: Option<usize>,
    /// Overrides `scan_workers` from the config.
    #[arg(long)]
    scan_workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1)]
    num: usize,
    #[arg(long)]
    len: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for `sample_NNN.wav`.
    #[arg(long)]
    out: PathBuf,
    /// Sample from the EMA weights instead of the raw ones.
    #[arg(long)]
    ema: bool,
    /// Codec used to decode codes; read from `--data` when given.
    #[arg(long, default_value = "mulaw")]
    encoding: String,
    #[arg(long, default_value_t = 16000)]
    sample_rate: u32,
    /// Dataset whose codec and sample rate to use.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("model").required(true).args(["checkpoint", "config"])))]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Benchmark freshly initialized weights for this config instead.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 16000)]
    len: usize,
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Also time the same network without pooling and report the ratio.
    #[arg(long)]
    compare_unpooled: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn write_manifest(dir: &Path, command: &str, seed: u64, config: &str) -> hrnn::Result<()> {
    fs::create_dir_all(dir)?;
    let text = format!("command={command}\nversion={VERSION}\nseed={seed}\n{config}");
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> hrnn::Result<()> {
    let encoding: Encoding = a.encoding.parse()?;
    let data = match (&a.input, &a.synth) {
        (Some(dir), _) => build_dataset(dir, encoding, a.seq_len, a.hop, a.seed)?,
        (None, Some(kind)) => synth_generate(
            kind.parse::<SynthKind>()?,
            a.count,
            a.seq_len,
            a.seed,
            encoding,
            a.sample_rate,
        )?,
        (None, None) => unreachable!("clap enforces a source"),
    };
    data.save(&a.out)?;
    println!("sequences={}", data.len());
    println!("tokens={}", data.total_tokens());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> hrnn::Result<()> {
    let mut run = RunConfig::load(&a.config)?;
    if let Some(n) = a.grad_shards {
        run.train.grad_shards = n;
    }
    if let Some(n) = a.scan_workers {
        run.model.scan_workers = n;
    }
    let data = QuantizedDataset::load(&a.data)?;
    let resume = a
        .resume
        .as_deref()
        .map(CheckpointBundle::load)
        .transpose()?;
    write_manifest(&a.out, "train", run.train.seed, &run.to_text())?;
    fs::write(a.out.join("config.txt"), run.to_text())?;
    let outcome = train(&run, &data, &a.out, resume)?;
    if let Some(last) = outcome.log.last() {
        println!("{}", last.deterministic_part());
    }
    println!("final_step={}", outcome.bundle.step);
    println!(
        "checkpoint={}",
        hrnn::train::checkpoint_path(&a.out, outcome.bundle.step).display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> hrnn::Result<()> {
    let bundle = CheckpointBundle::load(&a.checkpoint)?;
    let data = QuantizedDataset::load(&a.data)?;
    let rep = evaluate_checkpoint(&bundle, &data, a.batch_size, a.workers)?;
    println!("nll_bits={}", rep.raw);
    println!("nll_bits_ema={}", rep.ema);
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> hrnn::Result<()> {
    let bundle = CheckpointBundle::load(&a.checkpoint)?;
    let (encoding, sample_rate) = match &a.data {
        Some(path) => {
            let d = QuantizedDataset::load(path)?;
            (d.encoding, d.sample_rate)
        }
        None => (a.encoding.parse()?, a.sample_rate),
    };
    let params = if a.ema { &bundle.ema } else { &bundle.params };
    let opts = SampleOptions {
        num_samples: a.num,
        length: a.len,
        temperature: a.temperature,
        seed: a.seed,
    };
    let audio = generate(params, &bundle.config, &opts, encoding, sample_rate)?;
    write_manifest(&a.out, "sample", a.seed, &bundle.config.to_text())?;
    for (i, clip) in audio.iter().enumerate() {
        let path = a.out.join(format!("sample_{i:03}.wav"));
        fs::write(&path, write_wav(clip))?;
    }
    println!("written={}", audio.len());
    Ok(())
}

/// Median throughput over the requested repeats.
fn bench_config(params: &ParamSet, cfg: &ModelConfig, a: &BenchArgs) -> hrnn::Result<f64> {
    let mut rates = Vec::with_capacity(a.repeats.max(1));
    for r in 0..a.repeats.max(1) {
        let rep = bench_throughput(params, cfg, a.batch, a.len, a.seed + r as u64)?;
        log::info!("run {r}: tokens={} seconds={:.3}", rep.tokens, rep.seconds);
        rates.push(rep.ktok_per_s());
    }
    rates.sort_by(f64::total_cmp);
    Ok(rates[rates.len() / 2])
}

fn cmd_bench(a: BenchArgs) -> hrnn::Result<()> {
    let (cfg, params) = match (&a.checkpoint, &a.config) {
        (Some(path), _) => {
            let b = CheckpointBundle::load(path)?;
            (b.config, b.params)
        }
        (None, Some(path)) => {
            let run = RunConfig::load(path)?;
            let params = ParamSet::build(&run.model, run.train.seed)?;
            (run.model, params)
        }
        (None, None) => unreachable!("clap enforces a model source"),
    };
    let ktok = bench_config(&params, &cfg, &a)?;
    println!("tokens={}", a.batch * a.len);
    println!("ktok_per_s={ktok:.3}");
    if a.compare_unpooled {
        let flat = cfg.unpooled();
        let flat_params = ParamSet::build(&flat, a.seed)?;
        let flat_ktok = bench_config(&flat_params, &flat, &a)?;
        println!("unpooled_ktok_per_s={flat_ktok:.3}");
        println!("pooled_over_unpooled={:.3}", ktok / flat_ktok);
    }
    Ok(())
}

fn cmd_selftest() -> hrnn::Result<bool> {
    let outcomes = run_selftest();
    for o in &outcomes {
        println!(
            "check={} status={} {}",
            o.name,
            if o.passed { "pass" } else { "fail" },
            o.detail
        );
    }
    match outcomes.iter().find(|o| !o.passed) {
        Some(first) => {
            eprintln!(
                "error: self-test failed at `{}`: {}",
                first.name, first.detail
            );
            Ok(false)
        }
        None => Ok(true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Dataset(a) => cmd_dataset(a).map(|()| true),
        Command::Train(a) => cmd_train(a).map(|()| true),
        Command::Eval(a) => cmd_eval(a).map(|()| true),
        Command::Sample(a) => cmd_sample(a).map(|()| true),
        Command::Bench(a) => cmd_bench(a).map(|()| true),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
