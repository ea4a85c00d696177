use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use coordfill::ablation;
use coordfill::bench::{self, BenchConfig};
use coordfill::checkpoint;
use coordfill::coord_query::inpaint_at_resolution;
use coordfill::image_io::{read_image, read_mask, write_image};
use coordfill::model::Decoder;
use coordfill::param_gen::MaskedImage;
use coordfill::train::{evaluate, load_data, write_history, TrainConfig, Trainer};
use coordfill::Error;

#[derive(Parser)]
#[command(name = "coordfill", version, about = "Coordinate-query image inpainting")]
struct Cli {
    /// Seed for anything random; falls back to COORDFILL_SEED, then 0.
    #[arg(long, global = true, env = "COORDFILL_SEED")]
    seed: Option<u64>,
    /// Worker threads for the pixel-query phase.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fill the masked region of an image.
    Inpaint {
        #[arg(long)]
        input: PathBuf,
        /// White pixels mark the hole.
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Decode the full image at HxW instead of the input size.
        #[arg(long, value_name = "HxW")]
        out_res: Option<String>,
    },
    /// Train on procedural images or an image manifest; writes checkpoints
    /// and losses.csv.
    Train {
        /// JSON training config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Time parameter generation and pixel querying; writes CSV.
    Bench {
        /// Checkpoint to time; a fresh default model if omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "256,512,1024")]
        resolutions: String,
        #[arg(long, default_value = "0.05,0.15,0.25")]
        mask_ratios: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value = "bench.csv")]
        output: PathBuf,
    },
    /// Train and score model variants; writes ablation.csv.
    Ablate {
        /// masked_prediction, decoder, block, injection, all, or a
        /// comma-separated list of variant names.
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of training seeds per variant.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Json(_) | Error::Shape(_) => 2,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> coordfill::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> coordfill::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> coordfill::Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| usage(format!("bad {what} '{v}'"))))
        .collect()
}

fn run(cli: Cli) -> coordfill::Result<()> {
    let workers = cli.workers.max(1);
    match cli.cmd {
        Cmd::Inpaint {
            input,
            mask,
            checkpoint,
            output,
            out_res,
        } => {
            let image = read_image(&input)?;
            let mask = read_mask(&mask)?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(usage(format!(
                    "mask is {}x{} but image is {}x{}",
                    mask.shape()[1],
                    mask.shape()[2],
                    image.shape()[1],
                    image.shape()[2]
                )));
            }
            let (model, store) = checkpoint::load(&checkpoint)?;
            let masked = MaskedImage::new(image, mask)?;
            match out_res {
                Some(r) => {
                    let (h, w) = bench::parse_resolutions(&r)?
                        .into_iter()
                        .next()
                        .ok_or_else(|| usage("empty --out-res"))?;
                    if !matches!(model.decoder, Decoder::PixelQuery) {
                        return Err(usage("--out-res needs a pixel-query checkpoint"));
                    }
                    let start = std::time::Instant::now();
                    let out = inpaint_at_resolution(&model.generator, &store, &masked, h, w)?;
                    write_image(&output, &out)?;
                    println!("decoded {} pixels at {h}x{w} in {:.2?}", h * w, start.elapsed());
                }
                None => {
                    let r = model.inpaint(&store, &masked, workers)?;
                    write_image(&output, &r.image)?;
                    println!(
                        "paramgen {:.3} ms, query {:.3} ms, total {:.3} ms, decoded pixels {}",
                        r.timings.paramgen.as_secs_f64() * 1e3,
                        r.timings.query.as_secs_f64() * 1e3,
                        r.timings.total.as_secs_f64() * 1e3,
                        r.decoded_pixels
                    );
                }
            }
        }
        Cmd::Train { config, out_dir } => {
            let cfg = load_config(config.as_deref(), cli.seed)?;
            create_dir(&out_dir)?;
            let (images, held, masks) = load_data(&cfg)?;
            let every = cfg.checkpoint_every;
            let mut trainer = Trainer::new(cfg)?;
            checkpoint::save(out_dir.join("init.cfck"), &trainer.config.model, &trainer.store)?;
            let history = trainer.run(&images, |epoch, t| {
                if every > 0 && epoch % every == 0 {
                    checkpoint::save(out_dir.join(format!("epoch{epoch:04}.cfck")), &t.config.model, &t.store)?;
                }
                Ok(())
            })?;
            checkpoint::save(out_dir.join("final.cfck"), &trainer.config.model, &trainer.store)?;
            write_history(out_dir.join("losses.csv"), &history)?;
            if let (Some(a), Some(b)) = (history.first(), history.last()) {
                println!("{} steps, total loss {:.4} -> {:.4}", history.len(), a.total, b.total);
            }
            if !held.is_empty() {
                let r = evaluate(&trainer.model, &trainer.store, &held, &masks)?;
                println!(
                    "held-out masked PSNR {:.2} dB (mean fill {:.2} dB), masked SSIM {:.3}, proxy perceptual {:.4}",
                    r.psnr_masked, r.mean_fill_psnr_masked, r.ssim_masked, r.proxy_perceptual
                );
            }
        }
        Cmd::Bench {
            checkpoint,
            resolutions,
            mask_ratios,
            repeats,
            output,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let (model, store) = match checkpoint {
                Some(p) => checkpoint::load(&p)?,
                None => {
                    let t = Trainer::new(TrainConfig {
                        epochs: 0,
                        seed,
                        ..TrainConfig::default()
                    })?;
                    (t.model, t.store)
                }
            };
            if repeats == 0 {
                return Err(usage("--repeats must be >= 1"));
            }
            let cfg = BenchConfig {
                resolutions: bench::parse_resolutions(&resolutions)?,
                mask_ratios: parse_list(&mask_ratios, "mask ratio")?,
                repeats,
                workers,
                seed,
                ..BenchConfig::default()
            };
            let rows = bench::run(&model, &store, &cfg)?;
            for r in &rows {
                println!(
                    "{:>9} {:>5}x{:<5} ratio {:.2}  {:>10.3} ms  {:>8} px  {}",
                    r.phase.to_string(),
                    r.height,
                    r.width,
                    r.mask_ratio,
                    r.wall_ms,
                    r.decoded_pixels,
                    r.status
                );
            }
            bench::write_csv(&output, &rows)?;
        }
        Cmd::Ablate {
            suite,
            config,
            out_dir,
            seeds,
        } => {
            let variants = ablation::suite(&suite)?;
            let base = load_config(config.as_deref(), cli.seed)?;
            if seeds == 0 {
                return Err(usage("--seeds must be >= 1"));
            }
            create_dir(&out_dir)?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let rows = ablation::run(&base, &variants, &seed_list)?;
            for r in &rows {
                println!(
                    "{:<18} seed {:<3} masked PSNR {:6.2}  masked SSIM {:.3}",
                    r.variant, r.seed, r.psnr_masked, r.ssim_masked
                );
            }
            ablation::write_csv(out_dir.join("ablation.csv"), &rows)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
