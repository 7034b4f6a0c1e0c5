//! `gtc`: corpus generation, training, evaluation, decoding and latency
//! benchmarks for the guided CTC recognizer.

mod config;

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gtc_core::dataset::{generate_corpus, load_corpus, manifest_path, read_manifest, read_pgm, Sample, Split};
use gtc_core::trainer::{bench_decode, evaluate, parse_echo, Checkpoint, Head, MetricsCsv, Mode, Trainer};

use config::CliConfig;

#[derive(Parser)]
#[command(name = "gtc", version, about = "Guided CTC text recognizer")]
struct Cli {
    /// Config file of `[section]` / `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    /// Seed for both corpus generation and training.
    #[arg(long, global = true, env = "GTC_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and its split manifest.
    Gen(GenArgs),
    /// Train a model on the train split.
    Train(TrainArgs),
    /// Print accuracy, normalized edit distance and latency as CSV.
    Eval(EvalArgs),
    /// Decode one PGM image.
    Decode(DecodeArgs),
    /// Compare per-image latency of the two decoders.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    alphabet: Option<String>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Where the checkpoint is written.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where the per-step metrics CSV is written.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Continue from this checkpoint with its stored configuration;
    /// `--steps` may raise the step budget. Metrics are appended.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Fill the ms_per_image column (makes the CSV non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Decoder to evaluate; defaults to the mode's inference head.
    #[arg(long)]
    head: Option<Head>,
}

#[derive(Args)]
struct DecodeArgs {
    /// Binary PGM image.
    image: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    head: Option<Head>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Timed decodes per head; the median is reported.
    #[arg(long, default_value_t = 100)]
    n: usize,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

/// Applies the config file, `--seed` and the subcommand's flags.
fn resolve(cli: &Cli) -> Result<CliConfig> {
    let mut c = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = cli.seed {
        c.corpus.seed = seed;
        c.train.seed = seed;
    }
    match &cli.command {
        Command::Gen(a) => {
            let s = &mut c.corpus;
            set(&mut s.alphabet, a.alphabet.clone());
            set(&mut s.count, a.count);
            set(&mut s.min_len, a.min_len);
            set(&mut s.max_len, a.max_len);
            set(&mut s.noise, a.noise);
        }
        Command::Train(a) => {
            let t = &mut c.train;
            set(&mut t.mode, a.mode);
            set(&mut t.max_steps, a.steps);
            set(&mut t.lr, a.lr);
            set(&mut t.batch_size, a.batch_size);
            set(&mut t.eval_interval, a.eval_interval);
            set(&mut c.paths.corpus, a.corpus.clone());
            set(&mut c.paths.checkpoint, a.checkpoint.clone());
            set(&mut c.paths.metrics, a.metrics.clone());
            t.validate()?;
        }
        Command::Eval(a) => {
            set(&mut c.paths.checkpoint, a.checkpoint.clone());
            set(&mut c.paths.corpus, a.corpus.clone());
        }
        Command::Decode(a) => set(&mut c.paths.checkpoint, a.checkpoint.clone()),
        Command::Bench(a) => {
            set(&mut c.paths.checkpoint, a.checkpoint.clone());
            set(&mut c.paths.corpus, a.corpus.clone());
        }
    }
    Ok(c)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn load_split(path: &Path, split: Split) -> Result<(String, Vec<Sample>)> {
    let corpus = load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))?;
    let manifest_file = manifest_path(path);
    let manifest =
        read_manifest(&manifest_file).with_context(|| format!("reading manifest {}", manifest_file.display()))?;
    Ok((corpus.alphabet.as_string(), corpus.select(split, &manifest)))
}

fn load_trainer(path: &Path) -> Result<Trainer<f64>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Trainer::from_checkpoint(&ckpt)?)
}

fn check_alphabet(model: &str, corpus: &str) -> Result<()> {
    if model != corpus {
        bail!("corpus alphabet {corpus:?} differs from the model's {model:?}");
    }
    Ok(())
}

fn cmd_gen(c: &CliConfig, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&c.corpus, out).with_context(|| format!("writing corpus {}", out.display()))?;
    let manifest = read_manifest(&manifest_path(out))?;
    let count = |s| manifest.iter().filter(|(_, m)| *m == s).count();
    println!(
        "{} samples written to {} ({} train, {} val, {} test)",
        corpus.samples.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
    );
    Ok(())
}

fn cmd_train(c: &CliConfig, a: &TrainArgs) -> Result<()> {
    let (alphabet, train) = load_split(&c.paths.corpus, Split::Train)?;
    let (_, val) = load_split(&c.paths.corpus, Split::Val)?;
    if train.is_empty() {
        bail!("corpus {} has no training samples", c.paths.corpus.display());
    }
    let mut trainer: Trainer<f64> = match &a.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let (model, mut train_cfg) = parse_echo(&ckpt.config_echo)?;
            set(&mut train_cfg.max_steps, a.steps);
            check_alphabet(&model.alphabet, &alphabet)?;
            Trainer::restore(&model, &train_cfg, &ckpt)?
        }
        None => {
            let mut model = c.model.clone();
            model.alphabet = alphabet;
            Trainer::new(&model, &c.train, train.len())?
        }
    };
    let metrics_path = &c.paths.metrics;
    let file = if a.resume.is_some() {
        OpenOptions::new().append(true).create(true).open(metrics_path)
    } else {
        File::create(metrics_path)
    }
    .with_context(|| format!("opening metrics {}", metrics_path.display()))?;
    let mut csv = MetricsCsv::new(BufWriter::new(file), a.timing);
    if a.resume.is_none() {
        csv.header()?;
    }
    let ckpt_path = &c.paths.checkpoint;
    let mut last = None;
    trainer.fit(&train, &val, |t, report, metrics| {
        csv.row(report, metrics)?;
        if let Some(m) = metrics {
            log::info!("step {}: val acc {:.4} ned {:.4}", report.step, m.accuracy, m.ned);
            last = Some(m.accuracy);
        }
        if metrics.is_some() || t.is_done() {
            csv.flush()?;
            t.checkpoint().save(ckpt_path)?;
        }
        Ok(())
    })?;
    csv.flush()?;
    // Covers a resume that had nothing left to do.
    trainer.checkpoint().save(ckpt_path)?;
    let val = last.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
    println!(
        "trained {} to step {}; val accuracy {val}; checkpoint {}",
        trainer.config.mode,
        trainer.step(),
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(c: &CliConfig, a: &EvalArgs) -> Result<()> {
    let trainer = load_trainer(&c.paths.checkpoint)?;
    let model = &trainer.model;
    let (alphabet, samples) = load_split(&c.paths.corpus, a.split)?;
    check_alphabet(&model.alphabet.as_string(), &alphabet)?;
    let head = a.head.unwrap_or(model.mode.eval_head());
    let m = evaluate(model, &samples, head)?;
    println!("split,head,count,acc,ned,ms_per_image");
    println!(
        "{},{},{},{},{},{}",
        a.split.as_str(),
        head.as_str(),
        m.count,
        m.accuracy,
        m.ned,
        m.ms_per_image
    );
    Ok(())
}

fn cmd_decode(c: &CliConfig, a: &DecodeArgs) -> Result<()> {
    let trainer = load_trainer(&c.paths.checkpoint)?;
    let model = &trainer.model;
    let image = read_pgm(&a.image).with_context(|| format!("reading image {}", a.image.display()))?;
    let height = model.config.encoder.height;
    let image = if image.height == height { image } else { image.resize_to_height(height) };
    let label = model.decode(&image, a.head.unwrap_or(model.mode.eval_head()))?;
    println!("{}", model.alphabet.render(&label));
    Ok(())
}

fn cmd_bench(c: &CliConfig, a: &BenchArgs) -> Result<()> {
    let trainer = load_trainer(&c.paths.checkpoint)?;
    let (_, samples) = load_split(&c.paths.corpus, a.split)?;
    let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
    let b = bench_decode(&trainer.model, &images, a.n)?;
    println!("head,ms_per_image");
    println!("ctc,{}", b.ctc_ms_per_image);
    println!("attention,{}", b.attention_ms_per_image);
    println!("ratio,{}", b.ratio);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let c = resolve(cli)?;
    if cli.dump_config {
        print!("{}", c.to_ini());
        return Ok(());
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(&c, &a.output),
        Command::Train(a) => cmd_train(&c, a),
        Command::Eval(a) => cmd_eval(&c, a),
        Command::Decode(a) => cmd_decode(&c, a),
        Command::Bench(a) => cmd_bench(&c, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
