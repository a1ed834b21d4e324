use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mvcc_core::data::{generate_parallel, write_dataset, GenerateOptions};
use mvcc_core::maskguide::diff_cd_baseline;
use mvcc_core::metrics::evaluate_corpus;
use mvcc_core::raster::{BinaryMask, Raster};
use mvcc_core::train::{load_trained, run, RunConfig};
use mvcc_core::{encoder::BiTemporalPair, Error, Result};

#[derive(Parser)]
#[command(name = "mvcc", version, about = "Mask-guided change captioning for bi-temporal image pairs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CaptionMask {
    /// The true change mask, read from --mask-path.
    Oracle,
    /// Thresholded image difference.
    Baseline,
    /// No guidance.
    None,
    /// Any mask file, read from --mask-path.
    File,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "on")]
        distractors: Toggle,
        /// Validation instances (default: a tenth of n).
        #[arg(long)]
        val: Option<usize>,
        /// Test instances (default: a tenth of n).
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train, keep the best-validation epoch and evaluate on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Caption one image pair.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, num_args = 2, value_names = ["A", "B"])]
        pair: Vec<PathBuf>,
        #[arg(long, value_enum)]
        mask: CaptionMask,
        /// PGM at image or token-grid resolution, for --mask oracle|file.
        #[arg(long)]
        mask_path: Option<PathBuf>,
        #[arg(long, default_value_t = 0.2)]
        threshold: f64,
        #[arg(long, default_value_t = 8)]
        min_blob: usize,
    },
    /// Score candidate captions against references.
    Eval {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn threads() -> Result<usize> {
    match std::env::var("MVCC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("MVCC_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn gen_data(out: &Path, opts: GenerateOptions) -> Result<()> {
    if opts.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    if opts.val + opts.test > opts.n {
        return Err(Error::Config(format!("--val {} and --test {} exceed --n {}", opts.val, opts.test, opts.n)));
    }
    let instances = generate_parallel(&opts, threads()?);
    write_dataset(out, &instances)?;
    println!("wrote {} instances to {}", instances.len(), out.display());
    Ok(())
}

fn train(config: &Path) -> Result<()> {
    threads()?;
    let cfg = RunConfig::load(config)?;
    let (outcome, report) = run(&cfg)?;
    let best = outcome.log.best().expect("at least one epoch");
    println!("best epoch {} (val BLEU-4 {:.2}); checkpoint {}", best.epoch, best.val_bleu4, cfg.checkpoint.display());
    println!("{}", report.to_json());
    Ok(())
}

fn caption(
    checkpoint: &Path,
    pair: &[PathBuf],
    mask: CaptionMask,
    mask_path: Option<&Path>,
    threshold: f64,
    min_blob: usize,
) -> Result<()> {
    let (model, vocab) = load_trained(checkpoint)?;
    let pair = BiTemporalPair::new(Raster::read_ppm(&pair[0])?, Raster::read_ppm(&pair[1])?)?;
    let change: Option<BinaryMask> = match mask {
        CaptionMask::None => None,
        CaptionMask::Baseline => Some(diff_cd_baseline(&pair, threshold, min_blob)),
        CaptionMask::Oracle | CaptionMask::File => {
            let p = mask_path.ok_or_else(|| Error::Config("--mask oracle|file needs --mask-path".into()))?;
            Some(BinaryMask::read_pgm(p)?)
        }
    };
    let coarse = model.coarse_mask(change.as_ref())?;
    let ids = model.caption_pair(&pair, &coarse)?;
    println!("{}", vocab.decode(ids.words()));
    Ok(())
}

fn eval(candidates: &Path, references: &Path, out: Option<&Path>) -> Result<()> {
    let report = evaluate_corpus(candidates, references)?;
    let json = report.to_json();
    if let Some(p) = out {
        std::fs::write(p, &json).map_err(|e| Error::io(p, e))?;
    }
    println!("{json}");
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 4,
        Error::Ingestion(_) | Error::Io { .. } | Error::DegenerateMemory(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { out, n, seed, distractors, val, test } => {
            let mut opts = GenerateOptions::new(n, seed);
            opts.distractors = matches!(distractors, Toggle::On);
            opts.val = val.unwrap_or(opts.val);
            opts.test = test.unwrap_or(opts.test);
            gen_data(&out, opts)
        }
        Command::Train { config } => train(&config),
        Command::Caption { checkpoint, pair, mask, mask_path, threshold, min_blob } => {
            caption(&checkpoint, &pair, mask, mask_path.as_deref(), threshold, min_blob)
        }
        Command::Eval { candidates, references, out } => eval(&candidates, &references, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
