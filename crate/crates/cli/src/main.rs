//! `cfwd`: train, apply and inspect the wavelet-domain diffusion enhancer.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cfwd_core::imaging::{load_image, save_image};
use cfwd_core::pipeline::{enhance, evaluate, TrainConfig, Trainer};
use cfwd_core::vlg::{Embedder, PretrainedEmbedder, StubEmbedder, VlgError};
use cfwd_core::wavelet::{check_divisible, decompose, export_bands};
use cfwd_core::{Image, Model, PairedDataset};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "cfwd", version, about = "Low-light enhancement by wavelet-domain conditional diffusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedderKind {
    /// Deterministic hand-crafted features; needs no weights.
    Stub,
    /// Convolutional encoder loaded from `--embedder-weights`.
    Pretrained,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a paired dataset (`<root>/low`, `<root>/high`).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "stub")]
        embedder: EmbedderKind,
        /// Weight file for `--embedder pretrained`.
        #[arg(long)]
        embedder_weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Enhance one image or every PNG/JPEG in a directory.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a checkpoint on a paired dataset; writes CSV plus a text table.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write every wavelet band of an image as PNGs.
    Decompose {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        levels: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_embedder(kind: EmbedderKind, weights: Option<&Path>) -> Result<Box<dyn Embedder<f32>>> {
    Ok(match kind {
        EmbedderKind::Stub => Box::new(StubEmbedder),
        EmbedderKind::Pretrained => {
            let path = weights.ok_or_else(|| VlgError::MissingWeights("no --embedder-weights given".into()))?;
            Box::new(PretrainedEmbedder::<f32>::load(path)?)
        }
    })
}

/// Grayscale inputs are replicated to three channels.
fn load_rgb(path: &Path) -> Result<Image> {
    let img: Image = load_image(path).with_context(|| format!("reading {}", path.display()))?;
    if img.channels() == 1 {
        let (h, w, _) = img.dims();
        return Ok(Image::from_fn(h, w, 3, |y, x, _| img.get(y, x, 0)));
    }
    Ok(img)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn train(config: &Path, data: &Path, kind: EmbedderKind, weights: Option<&Path>, out: &Path) -> Result<()> {
    let config = TrainConfig::load(config)?;
    let dataset = PairedDataset::open(data)?;
    let embedder = load_embedder(kind, weights)?;
    let total = config.iterations;
    let report_every = (total / 100).max(1) as u64;
    eprintln!("training on {} pairs for {total} iterations", dataset.len());
    let mut trainer = Trainer::new(config, dataset, embedder.as_ref())?;
    let trail = trainer.run(out, |it, b| {
        if it % report_every == 0 {
            eprintln!(
                "iter {it:>7}  total {:.5}  diff {:.5}  vlg {:.5}  spectral {:.5}  content {:.5}",
                b.total, b.diffusion, b.vlg, b.spectral, b.content
            );
        }
    })?;
    for p in &trail {
        println!("{}", p.display());
    }
    Ok(())
}

fn enhance_cmd(ckpt: &Path, input: &Path, out: &Path, seed: u64) -> Result<()> {
    let model = Model::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    std::fs::create_dir_all(out)?;
    let inputs = if input.is_dir() {
        image_files(input)?
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        bail!("no PNG or JPEG files in {}", input.display());
    }
    for (i, path) in inputs.iter().enumerate() {
        let img = load_rgb(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let result = enhance(&img, &model, &mut rng)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = out.join(format!("{stem}.png"));
        save_image(&result, &dest)?;
        println!("{}", dest.display());
    }
    Ok(())
}

fn evaluate_cmd(ckpt: &Path, data: &Path, out: &Path, seed: u64) -> Result<()> {
    let model = Model::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let dataset = PairedDataset::open(data)?;
    let report = evaluate(&dataset, &model, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, report.to_csv())?;
    let table = report.to_table();
    std::fs::write(out.with_extension("txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn decompose_cmd(input: &Path, levels: usize, out: &Path) -> Result<()> {
    let img = load_rgb(input)?;
    check_divisible(img.height(), img.width(), levels)?;
    let pyramid = decompose(&img, levels)?;
    export_bands(&pyramid, out)?;
    println!("{}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train {
            config,
            data,
            embedder,
            embedder_weights,
            out,
        } => train(config, data, *embedder, embedder_weights.as_deref(), out),
        Command::Enhance { ckpt, input, out, seed } => enhance_cmd(ckpt, input, out, *seed),
        Command::Evaluate { ckpt, data, out, seed } => evaluate_cmd(ckpt, data, out, *seed),
        Command::Decompose { input, levels, out } => decompose_cmd(input, *levels, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
