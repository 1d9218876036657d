//! `msnc`: data generation, training, compression and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure.

mod config;
mod selftest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use msnc_core::data::{
    read_corpus, read_msi, split_train_test, synth_generate, write_corpus, write_msi, MultiSpectralImage, SampleType,
};
use msnc_core::metrics::{psnr, rd_csv};
use msnc_core::train::{evaluate, monotonicity_inversions, train, Start};
use msnc_core::{Codec, CodecModel, Tensor};

use config::Manifest;
use selftest::Suite;

#[derive(Parser)]
#[command(name = "msnc", version, about = "Multi-spectral neural image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic solar-like corpus as .msim files.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 9)]
        spectral: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the checkpoint is rewritten after every epoch.
    Train {
        /// TOML manifest; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Corpus directory; a synthetic corpus is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        swin_baseline: bool,
        #[arg(long)]
        uniform_shift: bool,
        /// Per-step training log as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Compress one .msim image.
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from an .msnc file.
    Decompress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// RD points of one or more checkpoints over a corpus.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        ckpt: Vec<PathBuf>,
        /// λ each checkpoint was trained with, in the same order.
        #[arg(long, num_args = 1..)]
        lambda: Vec<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, value_enum, default_value_t = Part::All)]
        split: Part,
    },
    /// Run built-in consistency checks.
    Selftest {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Part {
    All,
    Train,
    Test,
}

const SPLIT: f64 = 8.0 / 12.0;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use msnc_core::Error as E;
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Usage(_) | E::Shape(_) => 1,
                E::Format(_) | E::Corrupt(_) | E::Io(_) => 2,
                E::Numeric(_) | E::NonFinite(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn load_codec(path: &Path) -> Result<Codec> {
    let model = CodecModel::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(Codec::new(model)?)
}

fn pick(images: Vec<MultiSpectralImage>, part: Part) -> Result<Vec<Tensor>> {
    let keep: Vec<usize> = match part {
        Part::All => (0..images.len()).collect(),
        Part::Train => split_train_test(images.len(), SPLIT)?.train,
        Part::Test => split_train_test(images.len(), SPLIT)?.test,
    };
    let mut images: Vec<Option<MultiSpectralImage>> = images.into_iter().map(Some).collect();
    Ok(keep.iter().map(|&i| images[i].take().expect("indices are distinct").into_pixels()).collect())
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenData { seed, n, size, spectral, out } => {
            let imgs = synth_generate(seed, n, size, size, spectral)?;
            write_corpus(&out, &imgs)?;
            println!("wrote {n} images of {size}x{size}x{spectral} to {}", out.display());
        }
        Command::Train {
            config,
            lambda,
            out_ckpt,
            data,
            epochs,
            steps,
            seed,
            swin_baseline,
            uniform_shift,
            log,
        } => {
            let manifest = match &config {
                Some(p) => Manifest::load(p)?,
                None => Manifest::default_manifest(),
            };
            let mut cfg = manifest.train_config()?;
            if let Some(v) = lambda {
                cfg.lambda = v;
            }
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if steps.is_some() {
                cfg.max_steps = steps;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            cfg.swin_baseline |= swin_baseline;
            cfg.uniform_shift |= uniform_shift;

            let d = &manifest.data;
            let corpus = match data.or_else(|| d.dir.clone()) {
                Some(dir) => read_corpus(&dir)?,
                None => {
                    let size = d.size.unwrap_or(cfg.patch);
                    synth_generate(d.synth_seed.unwrap_or(0), d.synth_n.unwrap_or(200), size, size, cfg.model.spectral)?
                }
            };
            if corpus[0].spectral() != cfg.model.spectral {
                bail!(msnc_core::Error::Usage(format!(
                    "corpus has {} channels, model expects {}",
                    corpus[0].spectral(),
                    cfg.model.spectral
                )));
            }
            let split = split_train_test(corpus.len(), d.split.unwrap_or(SPLIT))?;
            let images: Vec<Tensor> = split.train.iter().map(|&i| corpus[i].pixels().clone()).collect();
            println!(
                "training on {} images, {} steps, lambda {}",
                images.len(),
                cfg.total_steps(images.len()),
                cfg.lambda
            );
            let (model, tlog) = train(&cfg, &images, Start::Fresh, |epoch, m| {
                m.save(&out_ckpt)?;
                eprintln!("epoch {epoch} saved to {}", out_ckpt.display());
                Ok(())
            })?;
            if let Some(path) = log {
                std::fs::write(&path, tlog.to_csv())?;
            }
            let last = tlog.steps.last().expect("at least one step");
            println!(
                "final loss {:.4} (bpp {:.4}, mse {:.6}), digest {:016x}",
                last.loss,
                last.bpp,
                last.mse,
                model.digest()
            );
        }
        Command::Compress { ckpt, input, out } => {
            let codec = load_codec(&ckpt)?;
            let img = read_msi(&input)?;
            let enc = codec.compress(img.pixels())?;
            std::fs::write(&out, &enc.bytes)?;
            println!(
                "{} bytes, {:.4} bpp, psnr {:.3} dB (model estimate {:.1} bits)",
                enc.bytes.len(),
                enc.bpp(),
                psnr(img.pixels(), &enc.x_hat)?,
                enc.estimated_bits
            );
        }
        Command::Decompress { ckpt, input, out } => {
            let codec = load_codec(&ckpt)?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let dec = codec.decompress(&bytes)?;
            let img = MultiSpectralImage::with_default_labels(dec.x_hat, 0)?;
            write_msi(&out, &img, SampleType::U16)?;
            println!("wrote {}x{}x{} image to {}", img.height(), img.width(), img.spectral(), out.display());
        }
        Command::Eval { ckpt, lambda, data, csv, split } => {
            if !lambda.is_empty() && lambda.len() != ckpt.len() {
                bail!(msnc_core::Error::Usage(format!(
                    "{} checkpoints but {} lambda values",
                    ckpt.len(),
                    lambda.len()
                )));
            }
            let images = pick(read_corpus(&data)?, split)?;
            let mut points = Vec::with_capacity(ckpt.len());
            for (i, path) in ckpt.iter().enumerate() {
                let codec = load_codec(path)?;
                let l = lambda.get(i).copied().unwrap_or(f64::NAN);
                let (p, _) = evaluate(&codec, l, &images)?;
                println!("{}: {}", path.display(), p.csv_row());
                points.push(p);
            }
            std::fs::write(&csv, rd_csv(&points))?;
            if points.len() > 1 && !lambda.is_empty() {
                println!("monotonicity inversions: {}", monotonicity_inversions(&points));
            }
        }
        Command::Selftest { suite } => {
            let checks = selftest::run(suite)?;
            let mut failed = 0;
            for c in &checks {
                println!("{} {:<32} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", checks.len());
                return Ok(3);
            }
        }
    }
    Ok(0)
}
