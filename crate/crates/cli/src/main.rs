//! `mdc`: train, encode, decode, evaluate and channel-simulate the
//! two-description image codec.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mdc_core::bitstream::{CodingMode, EncodedDescription};
use mdc_core::harness::{self, ChannelConfig, Codec, DecodeMode};
use mdc_core::training::{self, Dataset, TrainConfig};
use mdc_core::{kv, Image};

#[derive(Parser)]
#[command(name = "mdc", version, about = "Learned multiple-description image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes train_log.csv, validation.csv and checkpoint.mdck.
    Train(TrainArgs),
    /// Encode a PNG into two description files.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_a: PathBuf,
        #[arg(long)]
        out_b: PathBuf,
        /// Fixed-width packing instead of arithmetic coding.
        #[arg(long)]
        raw: bool,
    },
    /// Decode from whichever descriptions are present.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        a: Option<PathBuf>,
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Size of the gray fallback image when no description is given.
        #[arg(long, value_name = "HxW", value_parser = parse_size)]
        size: Option<(usize, usize)>,
    },
    /// Rate-distortion table and plots for a directory of PNGs.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        plots: Option<PathBuf>,
    },
    /// Monte-Carlo erasure channel on one image.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        img: PathBuf,
        /// Loss probability of each description.
        #[arg(long, default_value_t = 0.1)]
        p: f64,
        /// Override for description A.
        #[arg(long)]
        p_a: Option<f64>,
        /// Override for description B.
        #[arg(long)]
        p_b: Option<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic training textures as PNGs.
    Textures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` file; unspecified keys take the toy defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Training PNGs. Synthetic textures are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    textures: usize,
    /// Held-out PNGs for periodic validation.
    #[arg(long)]
    val_dir: Option<PathBuf>,
    /// Synthetic held-out textures when no --val-dir is given (0 disables).
    #[arg(long, default_value_t = 20)]
    val_textures: usize,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Continue from checkpoint.mdck in the output directory.
    #[arg(long)]
    resume: bool,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h = h.trim().parse().map_err(|e| format!("height: {e}"))?;
    let w = w.trim().parse().map_err(|e| format!("width: {e}"))?;
    Ok((h, w))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::toy(),
    };
    let mut pairs = Vec::new();
    for o in &args.overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    cfg.apply_pairs(&pairs)?;
    cfg.validate()?;
    if cfg.validate_every == 0 {
        cfg.validate_every = 50;
    }
    let size = cfg.crop_size;
    let data = match &args.data {
        Some(dir) => Dataset::load_dir(dir)?,
        None => Dataset::from_images(training::textures(args.textures, size, size, cfg.seed.wrapping_add(1)))?,
    };
    let val = match &args.val_dir {
        Some(dir) => Some(Dataset::load_dir(dir)?),
        None if args.val_textures > 0 => {
            Some(Dataset::from_images(training::textures(args.val_textures, size, size, cfg.seed.wrapping_add(2)))?)
        }
        None => None,
    };
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.txt"), kv::format(&cfg.to_pairs()))?;
    let trainer = training::train_loop(cfg, &data, val.as_ref(), &args.out, args.resume)?;
    println!("trained {} steps, checkpoint {}", trainer.step, args.out.join("checkpoint.mdck").display());
    Ok(())
}

fn load_png(path: &Path) -> Result<Image> {
    Image::load_png(path).with_context(|| format!("reading {}", path.display()))
}

fn load_desc(path: &Option<PathBuf>) -> Result<Option<EncodedDescription>> {
    path.as_ref()
        .map(|p| EncodedDescription::load(p).with_context(|| format!("reading {}", p.display())))
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(args)?,
        Command::Encode { model, input, out_a, out_b, raw } => {
            let codec = Codec::load(&model)?;
            let x = load_png(&input)?;
            let mode = if raw { CodingMode::Raw } else { CodingMode::Arithmetic };
            let [a, b] = codec.encode_image(&x, mode)?;
            a.save(&out_a)?;
            b.save(&out_b)?;
            let bits = a.total_bits() + b.total_bits();
            println!("{} bits ({:.4} bpp incl. headers)", bits, bits as f64 / x.pixels() as f64);
        }
        Command::Decode { model, a, b, out, size } => {
            let codec = Codec::load(&model)?;
            let (a, b) = (load_desc(&a)?, load_desc(&b)?);
            let (y, mode) = codec.decode_any(a.as_ref(), b.as_ref(), size)?;
            y.save_png(&out)?;
            println!("mode {}", mode.name());
        }
        Command::Eval { model, dir, csv, plots } => {
            let codec = Codec::load(&model)?;
            let points = harness::evaluate_dataset(&codec, &dir)?;
            harness::write_rd_csv(&csv, &points)?;
            if let Some(m) = harness::RdPoint::mean(&points) {
                println!(
                    "{} images: bpp {:.4}, side MS-SSIM {:.4}, central MS-SSIM {:.4}",
                    points.len(),
                    m.bpp,
                    m.side_ms_ssim,
                    m.central_ms_ssim
                );
            }
            if let Some(plots) = plots {
                for f in harness::plot_rd(&csv, &plots)? {
                    println!("wrote {}", f.display());
                }
            }
        }
        Command::Simulate { model, img, p, p_a, p_b, trials, seed } => {
            let codec = Codec::load(&model)?;
            let x = load_png(&img)?;
            let ch = ChannelConfig { p_loss_a: p_a.unwrap_or(p), p_loss_b: p_b.unwrap_or(p), trials, seed };
            let r = harness::simulate_channel(&codec, &x, &ch)?;
            println!("mode,count,frequency,expected_frequency,mr_ssim_mean,mr_ssim_se,ms_ssim_mean,ms_ssim_se");
            for (mode, prob) in DecodeMode::ALL.into_iter().zip(ch.mode_probabilities()) {
                let (mr, ms) = (&r.mr[mode.index()], &r.ms[mode.index()]);
                println!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    mode.name(),
                    mr.count,
                    r.frequency(mode),
                    prob,
                    mr.mean(),
                    mr.std_error(),
                    ms.mean(),
                    ms.std_error()
                );
            }
            println!(
                "distortion (1 - MR-SSIM): empirical {:.6} ± {:.6}, closed form {:.6}",
                r.distortion.mean(),
                r.distortion.std_error(),
                r.expected()
            );
        }
        Command::Textures { out, count, size, seed } => {
            if size == 0 {
                bail!("size must be positive");
            }
            let files = training::write_textures(&out, count, size, seed)?;
            println!("wrote {} textures to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
