use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use faceprior::config::{RunConfig, Task};
use faceprior::degradation::{degrade, degrade_keep_size, DegradationSpec, Jitter};
use faceprior::dni;
use faceprior::gradsuite;
use faceprior::image::{write_atomic, Image};
use faceprior::metrics::evaluate;
use faceprior::model_io::Checkpoint;
use faceprior::toyface::{gen_toyfaces, read_corpus, split_seed, write_corpus, MANIFEST_NAME};
use faceprior::train::{self, Corpus, Pair, RestorerSetup, TrainLog};

#[derive(Parser)]
#[command(name = "faceprior", version, about = "Toy blind face restoration and network interpolation experiments")]
struct Cli {
    /// Worker threads; results are identical for any count.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural face corpus with component boxes.
    GenToyfaces {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the blur → downsample → noise → JPEG chain to an image or directory.
    Degrade(DegradeArgs),
    /// Pretrain the prior generator on clean faces.
    PretrainPrior {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a restorer (or a denoiser when `task` is `denoise`).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Continue training a checkpoint with the config's data and the finetuning rate.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Run a restorer or denoiser checkpoint on an image or directory.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-way interpolation `α·A + (1−α)·B`.
    Dni {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        /// Copy biases from A instead of interpolating them.
        #[arg(long)]
        keep_biases: bool,
    },
    /// Convex combination of several checkpoints.
    DniMulti {
        #[arg(long, value_delimiter = ',')]
        ckpts: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR of interpolated checkpoints over an α grid.
    SweepAlpha {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[command(flatten)]
        val: ValArgs,
        #[arg(long, default_value_t = 0.05)]
        interval: f64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Per-filter correlation between two checkpoints.
    Corr {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        layer: Option<String>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Least-squares α placing a target checkpoint between A and B.
    AlphaFit {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Different interpolation strengths for masked foreground and background.
    SpatialBlend {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        alpha_fg: f64,
        #[arg(long)]
        alpha_bg: f64,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tile the filters of a conv layer into a PGM.
    ExportFilters {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR / SSIM between reference and test images (files or directories).
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference check of every layer and loss.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
    },
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Degradation spec as a JSON file or inline JSON.
    #[arg(long, conflicts_with_all = ["sigma", "scale", "noise", "quality"])]
    spec: Option<String>,
    #[arg(long, required_unless_present = "spec")]
    sigma: Option<f64>,
    #[arg(long, required_unless_present = "spec")]
    scale: Option<usize>,
    #[arg(long, required_unless_present = "spec")]
    noise: Option<f64>,
    #[arg(long, required_unless_present = "spec")]
    quality: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Re-upsample to the input size.
    #[arg(long)]
    keep_size: bool,
}

#[derive(Args)]
struct ValArgs {
    /// Either a directory with `input/` and `target/` subdirectories of
    /// matching files, or a clean corpus directory when `--noise` is given.
    #[arg(long)]
    val: PathBuf,
    /// Add AWGN of this level (0–255 scale) to the clean images in `--val`.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    faceprior::configure_threads(cli.threads)?;
    match cli.command {
        Command::GenToyfaces { count, size, seed, out } => {
            let faces = gen_toyfaces(count, size, seed)?;
            write_corpus(&out, &faces, seed, size)?;
            println!("wrote {count} faces to {}", out.display());
        }
        Command::Degrade(args) => degrade_cmd(args)?,
        Command::PretrainPrior { config, out, log } => {
            let cfg = RunConfig::load(&config)?;
            let corpus = Corpus::from_config(&cfg)?;
            let (ckpt, l) = train::pretrain_prior(&cfg, &corpus.train)?;
            ckpt.save(&out)?;
            if let Some(p) = log {
                write_atomic(&p, l.to_csv().as_bytes())?;
            }
            println!("prior checkpoint {}", out.display());
        }
        Command::Train { config, out_dir } => train_cmd(&config, &out_dir)?,
        Command::Finetune { base, config, out, log } => {
            let cfg = RunConfig::load(&config)?;
            let base = load(&base)?;
            let corpus = Corpus::from_config(&cfg)?;
            let (ckpt, l) = train::finetune(&cfg, &base, &corpus, &mut |_, _| Ok(()))?;
            ckpt.save(&out)?;
            if let Some(p) = log {
                write_atomic(&p, l.to_csv().as_bytes())?;
            }
            report_validation(&l);
            println!("{} → {}", base.meta.provenance, ckpt.meta.provenance);
        }
        Command::Restore { ckpt, input, out } => {
            let ckpt = load(&ckpt)?;
            let (names, images) = read_images(&input)?;
            let restored = train::apply_checkpoint(&ckpt, &images)?;
            write_images(&input, &out, &names, &restored)?;
        }
        Command::Dni { a, b, alpha, out, keep_biases } => {
            let opts = dni::InterpOptions { biases: !keep_biases };
            dni::interpolate_with(&load(&a)?, &load(&b)?, alpha, opts)?.save(&out)?;
        }
        Command::DniMulti { ckpts, alphas, out } => {
            let models = ckpts.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
            dni::interpolate_multi(&models, &alphas)?.save(&out)?;
        }
        Command::SweepAlpha { a, b, val, interval, report } => {
            let pairs = val_pairs(&val)?;
            let rep = dni::sweep_alpha(&load(&a)?, &load(&b)?, &pairs, interval)?;
            write_atomic(&report, rep.to_csv().as_bytes())?;
            println!("best alpha {:.4} psnr {:.4} dB", rep.best_alpha, rep.best_psnr);
        }
        Command::Corr { a, b, layer, report } => {
            let rep = dni::correlation_report(&load(&a)?, &load(&b)?, layer.as_deref())?;
            write_atomic(&report, rep.to_csv().as_bytes())?;
            print!("{}", rep.summary());
        }
        Command::AlphaFit { a, b, target } => {
            let rep = dni::alpha_by_fit(&load(&a)?, &load(&b)?, &load(&target)?)?;
            println!("alpha\t{:.9}", rep.alpha);
            println!("projection\t{:.9}", rep.projection);
            println!("residual\t{:.9}", rep.residual);
            for (layer, al) in &rep.per_layer {
                match al {
                    Some(v) => println!("layer\t{layer}\t{v:.9}"),
                    None => println!("layer\t{layer}\t-"),
                }
            }
        }
        Command::SpatialBlend { a, b, alpha_fg, alpha_bg, mask, input, out } => {
            let img = load_image(&input)?;
            let m = load_image(&mask)?;
            dni::spatial_blend(&load(&a)?, &load(&b)?, alpha_fg, alpha_bg, &m, &img)?.save(&out)?;
        }
        Command::ExportFilters { ckpt, layer, out } => {
            let grid = dni::export_filters(&load(&ckpt)?, &layer, &out)?;
            println!("{} filters in a {}×{} grid of {}×{} tiles", grid.count, grid.side, grid.side, grid.tile_h, grid.tile_w);
        }
        Command::Metrics { reference, test, csv } => metrics_cmd(&reference, &test, csv.as_deref())?,
        Command::Gradcheck { module } => {
            if let Some(m) = &module {
                ensure!(gradsuite::MODULES.contains(&m.as_str()), "unknown module `{m}`; expected one of {:?}", gradsuite::MODULES);
            }
            let entries = gradsuite::run(module.as_deref())?;
            let mut failed = 0;
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!e.passed());
                println!("{status}\t{}\t{}\tmax_rel_err={:.3e}", e.module, e.name, e.report.max_rel_err());
            }
            ensure!(failed == 0, "{failed} of {} gradient checks failed", entries.len());
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_image(path: &Path) -> Result<Image> {
    Ok(Image::load(path)?)
}

fn is_image(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm" | "pnm"))
}

/// A single image, or every PGM/PPM of a directory in name order.
fn read_images(path: &Path) -> Result<(Vec<String>, Vec<Image>)> {
    if path.is_dir() {
        let mut names: Vec<String> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| is_image(p))
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
            .collect();
        names.sort();
        ensure!(!names.is_empty(), "no images in {}", path.display());
        let images = names.iter().map(|n| load_image(&path.join(n))).collect::<Result<_>>()?;
        Ok((names, images))
    } else {
        Ok((vec![String::new()], vec![load_image(path)?]))
    }
}

fn write_images(input: &Path, out: &Path, names: &[String], images: &[Image]) -> Result<()> {
    if input.is_dir() {
        std::fs::create_dir_all(out)?;
        for (n, img) in names.iter().zip(images) {
            img.save(out.join(n))?;
        }
    } else {
        images[0].save(out)?;
    }
    Ok(())
}

fn degrade_cmd(args: DegradeArgs) -> Result<()> {
    let spec = match &args.spec {
        Some(s) => {
            let text = if Path::new(s).is_file() { std::fs::read_to_string(s)? } else { s.clone() };
            serde_json::from_str::<DegradationSpec>(&text).context("parsing --spec")?
        }
        None => DegradationSpec {
            sigma: args.sigma.unwrap(),
            scale: args.scale.unwrap(),
            noise: args.noise.unwrap(),
            quality: args.quality.unwrap(),
            jitter: Jitter::default(),
            seed: args.seed,
        },
    };
    spec.validate()?;
    let (names, images) = read_images(&args.input)?;
    let many = args.input.is_dir();
    let out: Vec<Image> = images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            // each file of a directory gets its own noise stream
            let s = DegradationSpec { seed: if many { split_seed(spec.seed, i as u64) } else { spec.seed }, ..spec };
            if args.keep_size {
                degrade_keep_size(img, &s)
            } else {
                degrade(img, &s)
            }
        })
        .collect::<faceprior::Result<_>>()?;
    write_images(&args.input, &args.out, &names, &out)
}

fn report_validation(log: &TrainLog) {
    if let Some((it, p)) = log.validations().last() {
        println!("validation psnr {p:.4} dB at iteration {it}");
    }
}

fn train_cmd(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    std::fs::create_dir_all(out_dir)?;
    let corpus = Corpus::from_config(&cfg)?;
    let mut save = |it: usize, c: &Checkpoint| c.save(out_dir.join(format!("ckpt_{it:06}.gfpk")));
    let (ckpt, log) = match cfg.task {
        Task::Restore => {
            let prior = match &cfg.prior_checkpoint {
                Some(p) => load(p)?,
                None => {
                    let (prior, plog) = train::pretrain_prior(&cfg, &corpus.train)?;
                    prior.save(out_dir.join("prior.gfpk"))?;
                    write_atomic(&out_dir.join("prior_log.csv"), plog.to_csv().as_bytes())?;
                    prior
                }
            };
            let setup = RestorerSetup::new(&cfg)?;
            let start = setup.initial_checkpoint(&cfg, &prior)?;
            train::train_restorer(&cfg, &start, &corpus, 1.0, &mut save)?
        }
        Task::Denoise => {
            let start = train::denoiser_initial_checkpoint(&cfg)?;
            train::train_denoiser(&cfg, &start, &corpus, 1.0, &mut save)?
        }
    };
    ckpt.save(out_dir.join("final.gfpk"))?;
    write_atomic(&out_dir.join("train_log.csv"), log.to_csv().as_bytes())?;
    report_validation(&log);
    println!("final checkpoint {}", out_dir.join("final.gfpk").display());
    Ok(())
}

fn val_pairs(v: &ValArgs) -> Result<Vec<Pair>> {
    if let Some(delta) = v.noise {
        ensure!(v.val.join(MANIFEST_NAME).is_file(), "--noise needs a corpus directory written by gen-toyfaces");
        let faces = read_corpus(&v.val)?;
        return Ok(train::noisy_pairs(&faces, delta, v.seed));
    }
    let (names, inputs) = read_images(&v.val.join("input"))?;
    let (tnames, targets) = read_images(&v.val.join("target"))?;
    if names != tnames {
        bail!("input/ and target/ under {} hold different file names", v.val.display());
    }
    Ok(inputs.into_iter().zip(targets).map(|(input, target)| Pair { input, target }).collect())
}

fn metrics_cmd(reference: &Path, test: &Path, csv: Option<&Path>) -> Result<()> {
    let (rn, refs) = read_images(reference)?;
    let (tn, tests) = read_images(test)?;
    ensure!(rn.len() == tn.len(), "{} reference images vs {} test images", rn.len(), tn.len());
    if reference.is_dir() {
        ensure!(rn == tn, "reference and test directories hold different file names");
    }
    let mut out = String::from("name,psnr,ssim\n");
    let (mut sp, mut ss) = (0.0, 0.0);
    for ((name, r), t) in rn.iter().zip(&refs).zip(&tests) {
        let m = evaluate(r, t)?;
        sp += m.psnr_db;
        ss += m.ssim;
        let label = if name.is_empty() { test.display().to_string() } else { name.clone() };
        out.push_str(&format!("{label},{:.6},{:.6}\n", m.psnr_db, m.ssim));
    }
    let n = refs.len() as f64;
    out.push_str(&format!("mean,{:.6},{:.6}\n", sp / n, ss / n));
    print!("{out}");
    if let Some(p) = csv {
        write_atomic(p, out.as_bytes())?;
    }
    Ok(())
}
