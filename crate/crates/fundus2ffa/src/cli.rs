//! Command-line surface: preprocess, synth, saliency, train, translate,
//! evaluate. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
//! fault.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::data::{self, AlignedPair, RoiMode};
use crate::error::{Error, Result};
use crate::metrics::{self, SsimMode, SsimParams};
use crate::raster::io;
use crate::saliency::{self, SaliencyConfig};
use crate::trainer::{translate_with_checkpoint, Trainer};

#[derive(Parser)]
#[command(
    name = "fundus2ffa",
    version,
    about = "Saliency-guided adversarial translation of fundus photographs to angiography-like images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest aligned pairs, split per category, extract (optionally
    /// ROI-masked) patches and write train/test trees plus a manifest.
    Preprocess {
        /// Root of <category>/<id>_struct.png + <id>_ffa.png trees.
        #[arg(long)]
        pairs_dir: PathBuf,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
        /// Patch size in pixels, square ("512") or WxH ("360x288").
        #[arg(long, default_value = "512")]
        patch: String,
        /// Patch grid stride, square or WxH; defaults to the patch size
        /// (non-overlapping).
        #[arg(long)]
        stride: Option<String>,
        /// ROI handling: none, or circle with diameter = patch width.
        #[arg(long, value_enum, default_value = "none")]
        roi: RoiMode,
        /// Train share of each category.
        #[arg(long, default_value_t = 0.8)]
        split_ratio: f64,
        /// Split shuffle seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional file of source ids to exclude, one per line.
        #[arg(long)]
        exclude: Option<PathBuf>,
    },
    /// Generate synthetic phantom pairs into an ingestible tree.
    Synth {
        /// Number of pairs.
        #[arg(long, default_value_t = 8)]
        n: usize,
        /// Square image size in pixels (>= 64).
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset root.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the local saliency map of one image; writes a mid-gray
    /// anchored visualization and optionally the raw signed map.
    Saliency {
        /// Input image (PNG; collapsed to grayscale).
        #[arg(long)]
        input: PathBuf,
        /// Output visualization PNG.
        #[arg(long)]
        out: PathBuf,
        /// Contrast factor a.
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        /// Median (background) kernel size.
        #[arg(long, default_value_t = 51)]
        median: usize,
        /// Gaussian (denoise) kernel size.
        #[arg(long, default_value_t = 7)]
        gaussian: usize,
        /// Also export the raw signed map (u32 width, u32 height, then f32
        /// row-major data, all little-endian).
        #[arg(long)]
        raw: Option<PathBuf>,
        /// Render with a blue-white-red diverging ramp instead of grayscale.
        #[arg(long, default_value_t = false)]
        color: bool,
    },
    /// Train on a dataset tree.
    Train {
        /// Dataset root; uses <data>/train and <data>/test when present,
        /// otherwise ingests <data> directly with no validation split.
        #[arg(long)]
        data: PathBuf,
        /// TOML run configuration; omitted fields use built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for config snapshot, logs, checkpoints, samples.
        #[arg(long)]
        out_dir: PathBuf,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run the generator from a checkpoint on one structure image.
    Translate {
        /// Training checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input structure image (PNG).
        #[arg(long)]
        input: PathBuf,
        /// Output PNG (single-channel).
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM evaluation of matching filenames across two directories.
    Evaluate {
        /// Directory of predicted images.
        #[arg(long)]
        pred_dir: PathBuf,
        /// Directory of reference images.
        #[arg(long)]
        ref_dir: PathBuf,
        /// SSIM statistics: global (whole-image moments) or windowed
        /// (11x11 Gaussian).
        #[arg(long, value_enum, default_value = "global")]
        ssim_mode: SsimMode,
        /// Write the per-image CSV report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Preprocess {
            pairs_dir,
            out,
            patch,
            stride,
            roi,
            split_ratio,
            seed,
            exclude,
        } => cmd_preprocess(
            &pairs_dir,
            &out,
            &patch,
            stride.as_deref(),
            roi,
            split_ratio,
            seed,
            exclude.as_deref(),
        ),
        Command::Synth { n, size, seed, out } => cmd_synth(n, size, seed, &out),
        Command::Saliency {
            input,
            out,
            a,
            median,
            gaussian,
            raw,
            color,
        } => cmd_saliency(&input, &out, a, median, gaussian, raw.as_deref(), color),
        Command::Train {
            data,
            config,
            out_dir,
            resume,
        } => cmd_train(&data, config.as_deref(), &out_dir, resume.as_deref()),
        Command::Translate {
            checkpoint,
            input,
            out,
        } => cmd_translate(&checkpoint, &input, &out),
        Command::Evaluate {
            pred_dir,
            ref_dir,
            ssim_mode,
            report,
        } => cmd_evaluate(&pred_dir, &ref_dir, ssim_mode, report.as_deref()),
    }
}

/// "512" or "360x288" -> (w, h).
fn parse_size(text: &str) -> Result<(usize, usize)> {
    let parse_one = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Parameter(format!("invalid size {text:?}")))
    };
    match text.split_once(['x', 'X']) {
        Some((w, h)) => Ok((parse_one(w)?, parse_one(h)?)),
        None => {
            let n = parse_one(text)?;
            Ok((n, n))
        }
    }
}

#[derive(serde::Serialize)]
struct PreprocessManifest {
    seed: u64,
    patch_width: usize,
    patch_height: usize,
    stride_x: usize,
    stride_y: usize,
    roi: RoiMode,
    split_ratio: f64,
    excluded: Vec<String>,
    warnings: Vec<String>,
    categories: BTreeMap<String, CategoryCounts>,
}

#[derive(serde::Serialize, Default)]
struct CategoryCounts {
    train_sources: usize,
    test_sources: usize,
    train_patches: usize,
    test_patches: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_preprocess(
    pairs_dir: &Path,
    out: &Path,
    patch: &str,
    stride: Option<&str>,
    roi: RoiMode,
    split_ratio: f64,
    seed: u64,
    exclude: Option<&Path>,
) -> Result<()> {
    let (pw, ph) = parse_size(patch)?;
    let (sx, sy) = match stride {
        Some(s) => parse_size(s)?,
        None => (pw, ph),
    };
    let exclusions: BTreeSet<String> = match exclude {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::io(path, e))?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        None => BTreeSet::new(),
    };

    let report = data::ingest_pairs_with_exclusions(pairs_dir, &exclusions)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.pairs.is_empty() {
        return Err(Error::Data(format!(
            "no pairs found under {}",
            pairs_dir.display()
        )));
    }
    let (split, split_warnings) = data::split_dataset(report.pairs, split_ratio, seed)?;
    for w in &split_warnings {
        eprintln!("warning: {w}");
    }

    let mut manifest = PreprocessManifest {
        seed,
        patch_width: pw,
        patch_height: ph,
        stride_x: sx,
        stride_y: sy,
        roi,
        split_ratio,
        excluded: exclusions.into_iter().collect(),
        warnings: report
            .warnings
            .iter()
            .chain(&split_warnings)
            .cloned()
            .collect(),
        categories: BTreeMap::new(),
    };

    for (side, pairs) in [("train", &split.train), ("test", &split.test)] {
        for pair in pairs {
            let counts = manifest
                .categories
                .entry(pair.category.dir_name().to_string())
                .or_default();
            let patches = data::preprocess_pair(pair, pw, ph, sx, sy, roi)?;
            let dir = out.join(side).join(pair.category.dir_name());
            for p in &patches {
                io::save_png(&dir.join(format!("{}_struct.png", p.source_id)), &p.structure)?;
                io::save_png(&dir.join(format!("{}_ffa.png", p.source_id)), &p.angiography)?;
            }
            if side == "train" {
                counts.train_sources += 1;
                counts.train_patches += patches.len();
            } else {
                counts.test_sources += 1;
                counts.test_patches += patches.len();
            }
        }
    }

    let toml = toml::to_string(&manifest)
        .map_err(|e| Error::Data(format!("serializing manifest: {e}")))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("manifest.toml"), toml)
        .map_err(|e| Error::io(out.join("manifest.toml"), e))?;
    println!(
        "preprocessed {} train / {} test sources into {}",
        split.train.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct SynthManifest {
    n: usize,
    size: usize,
    seed: u64,
    with_blob: usize,
    category: String,
}

fn cmd_synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let detailed = data::synth_phantom_detailed(n, size, seed)?;
    let dir = out.join("synthetic");
    let mut with_blob = 0;
    for (pair, layout) in &detailed {
        if layout.blob.is_some() {
            with_blob += 1;
        }
        io::save_png(&dir.join(format!("{}_struct.png", pair.source_id)), &pair.structure)?;
        io::save_png(&dir.join(format!("{}_ffa.png", pair.source_id)), &pair.angiography)?;
    }
    let manifest = SynthManifest {
        n,
        size,
        seed,
        with_blob,
        category: "synthetic".into(),
    };
    let toml = toml::to_string(&manifest)
        .map_err(|e| Error::Data(format!("serializing manifest: {e}")))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::fs::write(out.join("manifest.toml"), toml)
        .map_err(|e| Error::io(out.join("manifest.toml"), e))?;
    println!(
        "wrote {n} phantom pairs ({with_blob} with leakage blobs) to {}",
        out.display()
    );
    Ok(())
}

fn cmd_saliency(
    input: &Path,
    out: &Path,
    a: f64,
    median: usize,
    gaussian: usize,
    raw: Option<&Path>,
    color: bool,
) -> Result<()> {
    let img = io::load_png_gray(input)?;
    let cfg = SaliencyConfig {
        median_kernel: median,
        gaussian_kernel: gaussian,
        a,
        ..SaliencyConfig::default()
    };
    let map = saliency::compute_saliency(&img, &cfg)?;
    io::save_png(out, &saliency::saliency_to_visual(&map, color))?;
    if let Some(raw_path) = raw {
        saliency::write_raw_map(raw_path, &map)?;
    }
    Ok(())
}

fn load_dataset(root: &Path) -> Result<(Vec<AlignedPair>, Vec<AlignedPair>)> {
    let train_dir = root.join("train");
    if train_dir.is_dir() {
        let train = data::ingest_pairs(&train_dir)?;
        for w in &train.warnings {
            eprintln!("warning: {w}");
        }
        let test_dir = root.join("test");
        let val = if test_dir.is_dir() {
            data::ingest_pairs(&test_dir)?.pairs
        } else {
            Vec::new()
        };
        Ok((train.pairs, val))
    } else {
        let report = data::ingest_pairs(root)?;
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        Ok((report.pairs, Vec::new()))
    }
}

fn cmd_train(
    data_dir: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let run_cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    run_cfg.validate()?;
    let (train, val) = load_dataset(data_dir)?;
    if train.is_empty() {
        return Err(Error::Data(format!(
            "no training pairs found under {}",
            data_dir.display()
        )));
    }

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    std::fs::write(out_dir.join("config.toml"), run_cfg.snapshot_toml()?)
        .map_err(|e| Error::io(out_dir.join("config.toml"), e))?;

    let mut trainer = match resume {
        Some(ckpt) => Trainer::resume(ckpt, &run_cfg.train, &run_cfg.features)?,
        None => Trainer::new(
            &run_cfg.train,
            &run_cfg.generator,
            &run_cfg.discriminator,
            &run_cfg.features,
        )?,
    };
    let outcome = trainer.fit(&train, &val, Some(out_dir))?;
    println!(
        "trained {} iterations over {} epoch rows; logs in {}",
        outcome.run_log.iterations.len(),
        outcome.run_log.epochs.len(),
        out_dir.display()
    );
    Ok(())
}

fn cmd_translate(checkpoint: &Path, input: &Path, out: &Path) -> Result<()> {
    let img = io::load_png_rgb(input)?;
    let translated = translate_with_checkpoint(checkpoint, &img)?;
    io::save_png(out, &translated)
}

fn cmd_evaluate(
    pred_dir: &Path,
    ref_dir: &Path,
    ssim_mode: SsimMode,
    report_path: Option<&Path>,
) -> Result<()> {
    let params = SsimParams {
        mode: ssim_mode,
        ..SsimParams::default()
    };
    let report = metrics::evaluate_dataset(pred_dir, ref_dir, &params)?;
    if let Some(path) = report_path {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    print!("{}", report.summary());
    if !report.errors.is_empty() {
        return Err(Error::Data(format!(
            "{} pair(s) failed evaluation",
            report.errors.len()
        )));
    }
    Ok(())
}
