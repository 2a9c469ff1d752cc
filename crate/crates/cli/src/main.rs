use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dcic::analysis::{
    bd_rate, bit_allocation, channel_energy, ms_ssim, parse_rd_records, psnr, write_rd_records, AllocationReport,
    BdInterpolation, RdCurve, RdPoint, RdRecord,
};
use dcic::codec::{BitstreamContainer, Codec};
use dcic::experiment::{self, ExperimentConfig, ExperimentResults};
use dcic::image_io::{list_images, load_image, save_image};
use dcic::training::{
    evaluate_model, make_ablation_suite, train, train_to_checkpoint, Corpus, TrainConfig, TrainOptions,
};
use dcic::{DcicError, Segment};

/// Variable naming the compute device; only `cpu` exists.
const DEVICE_ENV: &str = "DCIC_DEVICE";

#[derive(Parser)]
#[command(name = "dcic", version, about = "Learned image codec with a decoded structure prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compress one image.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from a bitstream.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Code every image in a folder and write per-image R-D records.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also append the aggregate point to this curve file.
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Label of the aggregate point (defaults to the checkpoint name).
        #[arg(long)]
        label: Option<String>,
    },
    /// Bjontegaard delta rate of a test curve against an anchor curve.
    Bdrate {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::Psnr)]
        metric: Metric,
        /// Interpolation; cubic needs four points per curve.
        #[arg(long, value_enum)]
        method: Option<Method>,
    },
    /// Latent energy or bit-allocation report as tab-separated columns.
    Analyze {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        report: Report,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and its five ablations and compare them.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Folder for the six checkpoints.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Run (or resume) the desk-scale comparison against the baseline.
    Experiment {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Only print the summary of existing results.
        #[arg(long)]
        summary: bool,
    },
    /// Write a procedural image corpus with train/ and eval/ folders.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        train_size: usize,
        #[arg(long, default_value_t = 8)]
        eval: usize,
        #[arg(long, default_value_t = 128)]
        eval_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Psnr,
    MsSsim,
    MsSsimDb,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Cubic,
    Pchip,
}

#[derive(Clone, Copy, ValueEnum)]
enum Report {
    Energy,
    Alloc,
}

/// Exit codes by failure category.
mod exit {
    pub const OTHER: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const MISSING_FILE: u8 = 3;
    pub const CONFIG: u8 = 4;
    pub const MODEL_MISMATCH: u8 = 5;
    pub const BAD_BITSTREAM: u8 = 6;
    pub const TRAINING: u8 = 7;
    pub const BAD_CHECKPOINT: u8 = 8;
    pub const IO: u8 = 9;
}

#[derive(Debug)]
struct MissingFile(PathBuf);

impl std::fmt::Display for MissingFile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "no such file or directory: {}", self.0.display())
    }
}

impl std::error::Error for MissingFile {}

fn exit_code(err: &anyhow::Error) -> (u8, &'static str) {
    if err.downcast_ref::<MissingFile>().is_some() {
        return (exit::MISSING_FILE, "missing input");
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<DcicError>() {
            return match e {
                DcicError::Config(_) | DcicError::Precondition(_) => (exit::CONFIG, "invalid configuration"),
                DcicError::ModelMismatch { .. } => (exit::MODEL_MISMATCH, "model/bitstream mismatch"),
                DcicError::Parse(_) | DcicError::Decode(_) | DcicError::Version { .. } => (exit::BAD_BITSTREAM, "malformed input"),
                DcicError::Training(_) => (exit::TRAINING, "training failed"),
                DcicError::Checkpoint(_) => (exit::BAD_CHECKPOINT, "bad checkpoint"),
                DcicError::Io(_) | DcicError::Image(_) => (exit::IO, "i/o failure"),
                _ => (exit::OTHER, "error"),
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return (exit::IO, "i/o failure");
        }
    }
    (exit::OTHER, "error")
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(MissingFile(path.to_path_buf()).into());
    }
    Ok(())
}

fn require_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => require(p),
        _ => Ok(()),
    }
}

fn check_device() -> Result<()> {
    match std::env::var(DEVICE_ENV) {
        Ok(d) if d != "cpu" => Err(DcicError::Config(format!("{DEVICE_ENV}={d:?}: only cpu is available")).into()),
        _ => Ok(()),
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    require(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainConfig::parse(&text).with_context(|| format!("in {}", path.display()))?)
}

fn load_images(dir: &Path) -> Result<Vec<(String, dcic::FeatureMap<f64>)>> {
    require(dir)?;
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(DcicError::Config(format!("no images in {}", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            Ok((name, load_image(p)?))
        })
        .collect()
}

fn output(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    match cli.command {
        Command::Train { config, data, out, report } => {
            let cfg = read_config(&config)?;
            require(&data)?;
            require_parent(&out)?;
            let corpus = Corpus::load(&data, cfg.eval_images)?;
            if let Some(r) = &report {
                let _ = fs::remove_file(r);
            }
            let (outcome, id) = train_to_checkpoint(&cfg, &corpus, &out, &TrainOptions { report, ..Default::default() })?;
            println!("model id {}", dcic::codec::hex(&id));
            if let Some(e) = outcome.final_eval {
                println!("eval loss {:.5} bpp {:.4} psnr {:.3} dB over {} images", e.terms.loss, e.terms.total_bpp(), e.psnr, e.images);
            }
        }
        Command::Encode { model, input, out } => {
            require(&model)?;
            require(&input)?;
            require_parent(&out)?;
            let codec = Codec::load(&model)?;
            let x = load_image(&input)?;
            let enc = codec.encode(&x)?;
            let bytes = enc.container.to_bytes();
            fs::write(&out, &bytes).with_context(|| format!("writing {}", out.display()))?;
            println!("{} bytes, {:.4} bpp", bytes.len(), enc.container.bpp(true));
        }
        Command::Decode { model, input, out } => {
            require(&model)?;
            require(&input)?;
            require_parent(&out)?;
            let codec = Codec::load(&model)?;
            let b = BitstreamContainer::parse(&fs::read(&input)?)?;
            let x = codec.decode(&b)?;
            save_image(&out, &x)?;
        }
        Command::Eval { model, data, out, curve, label } => {
            require(&model)?;
            require_parent(&out)?;
            let codec = Codec::load(&model)?;
            let images = load_images(&data)?;
            let mut records = Vec::new();
            let (mut bits, mut pixels, mut sq_err, mut ssim_sum) = (0.0, 0.0, 0.0, 0.0);
            for (name, x) in &images {
                let enc = codec.encode(x)?;
                let b = BitstreamContainer::parse(&enc.container.to_bytes())?;
                let x_hat = codec.decode(&b)?;
                let x_hat = dcic::image_io::quantize_8bit(&x_hat);
                let p = psnr(x, &x_hat)?;
                let m = ms_ssim(x, &x_hat)?;
                let px = b.pixels() as f64;
                bits += b.bpp(true) * px;
                pixels += px;
                sq_err += dcic::analysis::mse_8bit(x, &x_hat)? * px;
                ssim_sum += m;
                records.push(RdRecord { label: name.clone(), bpp: b.bpp(true), psnr: p, ms_ssim: m });
            }
            let aggregate = RdRecord {
                label: label.unwrap_or_else(|| model.file_stem().unwrap().to_string_lossy().into_owned()),
                bpp: bits / pixels,
                psnr: dcic::analysis::psnr_from_mse(sq_err / pixels),
                ms_ssim: ssim_sum / images.len() as f64,
            };
            let mut text = write_rd_records(&records);
            let _ = writeln!(text, "# aggregate\t{:.6}\t{:.6}\t{:.8}", aggregate.bpp, aggregate.psnr, aggregate.ms_ssim);
            fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
            if let Some(c) = curve {
                let mut existing = if c.exists() { parse_rd_records(&fs::read_to_string(&c)?)? } else { Vec::new() };
                existing.push(aggregate.clone());
                fs::write(&c, write_rd_records(&existing))?;
            }
            println!(
                "{} images: {:.4} bpp, {:.3} dB PSNR, {:.5} MS-SSIM",
                images.len(),
                aggregate.bpp,
                aggregate.psnr,
                aggregate.ms_ssim
            );
        }
        Command::Bdrate { anchor, test, metric, method } => {
            require(&anchor)?;
            require(&test)?;
            let curve = |p: &Path| -> Result<RdCurve> {
                let recs = parse_rd_records(&fs::read_to_string(p)?).with_context(|| format!("in {}", p.display()))?;
                let points = recs
                    .iter()
                    .map(|r| RdPoint {
                        bpp: r.bpp,
                        quality: match metric {
                            Metric::Psnr => r.psnr,
                            Metric::MsSsim => r.ms_ssim,
                            Metric::MsSsimDb => dcic::analysis::ms_ssim_db(r.ms_ssim),
                        },
                    })
                    .collect();
                Ok(RdCurve::new(p.display().to_string(), points).with_context(|| format!("curve {}", p.display()))?)
            };
            let (a, t) = (curve(&anchor)?, curve(&test)?);
            let method = match method {
                Some(Method::Cubic) => BdInterpolation::Cubic,
                Some(Method::Pchip) => BdInterpolation::Pchip,
                None if a.points().len() >= 4 && t.points().len() >= 4 => BdInterpolation::Cubic,
                None => BdInterpolation::Pchip,
            };
            let v = bd_rate(&a, &t, method)?;
            println!("BD-rate: {:.3}%", if v == 0.0 { 0.0 } else { v });
        }
        Command::Analyze { model, data, report, out } => {
            require(&model)?;
            if let Some(o) = &out {
                require_parent(o)?;
            }
            let codec = Codec::load(&model)?;
            let images = load_images(&data)?;
            let mut text = String::new();
            match report {
                Report::Energy => {
                    text.push_str("# image\tlatent\trank\tchannel\tenergy\n");
                    for (name, x) in &images {
                        let enc = codec.encode(x)?;
                        let lat = &enc.latents;
                        for (tag, v) in [("s_hat", lat.s_hat.as_ref()), ("y_hat", Some(&lat.y_hat))] {
                            if let Some(v) = v {
                                for (rank, (ch, e)) in channel_energy(v).ranked.iter().enumerate() {
                                    let _ = writeln!(text, "{name}\t{tag}\t{rank}\t{ch}\t{e:.6e}");
                                }
                            }
                        }
                    }
                }
                Report::Alloc => {
                    let labels: Vec<&str> = Segment::ORDER.iter().map(|s| s.label()).collect();
                    let _ = writeln!(
                        text,
                        "# image\tbits_{0}\tbits_{1}\tbits_{2}\tbits_{3}\tfrac_{0}\tfrac_{1}\tfrac_{2}\tfrac_{3}\tprior_share\tdetail_share",
                        labels[0], labels[1], labels[2], labels[3]
                    );
                    let mut reports = Vec::new();
                    for (name, x) in &images {
                        let r = bit_allocation(&codec.encode(x)?.container)?;
                        alloc_row(&mut text, name, &r);
                        reports.push(r);
                    }
                    alloc_row(&mut text, "aggregate", &AllocationReport::aggregate(&reports)?);
                }
            }
            output(&out, &text)?;
        }
        Command::Ablate { config, data, out_dir } => {
            let cfg = read_config(&config)?;
            require(&data)?;
            if let Some(d) = &out_dir {
                fs::create_dir_all(d)?;
            }
            let corpus = Corpus::load(&data, cfg.eval_images)?;
            let eval_set = if corpus.eval.is_empty() { &corpus.train } else { &corpus.eval };
            let mut rows = Vec::new();
            for a in make_ablation_suite(&cfg) {
                log::info!("training {}", a.name);
                let out = train(&a.config, &corpus, &TrainOptions::default())?;
                let e = evaluate_model(&out.model, eval_set, a.config.lambda, a.config.distortion)?;
                if let Some(d) = &out_dir {
                    let file = d.join(format!("{}.ckpt", a.name.replace(['/', ' '], "_")));
                    dcic::checkpoint::save(&file, &out.model, &dcic::training::checkpoint_meta(&a.config, a.config.steps))?;
                }
                rows.push((a.name, e));
            }
            let full_loss = rows[0].1.terms.loss;
            println!("variant\tbpp\tpsnr\tloss\tloss_vs_full");
            for (name, e) in &rows {
                println!(
                    "{name}\t{:.4}\t{:.3}\t{:.5}\t{:+.2}%",
                    e.terms.total_bpp(),
                    e.psnr,
                    e.terms.loss,
                    100.0 * (e.terms.loss - full_loss) / full_loss
                );
            }
        }
        Command::Experiment { dir, steps, seeds, lambdas, batch_size, summary } => {
            let results_path = dir.join("results.json");
            let results = if summary {
                require(&results_path)?;
                ExperimentResults::load(&results_path)?
            } else {
                let mut cfg = ExperimentConfig::default();
                if let Some(s) = steps {
                    cfg.base.steps = s;
                }
                if let Some(s) = seeds {
                    cfg.seeds = s;
                }
                if let Some(l) = lambdas {
                    cfg.lambdas = l;
                }
                if let Some(b) = batch_size {
                    cfg.base.batch_size = b;
                }
                cfg.base.validate()?;
                experiment::run_experiment(&dir, &cfg, |r| {
                    println!(
                        "{} seed {} lambda {}: loss {:.5} bpp {:.4} psnr {:.3} ({:.0}s)",
                        r.spec.variant,
                        r.spec.seed,
                        r.spec.lambda,
                        r.eval.terms.loss,
                        r.eval.terms.total_bpp(),
                        r.eval.psnr,
                        r.seconds
                    )
                })?
            };
            print_summary(&experiment::summarize(&results)?);
        }
        Command::SynthCorpus { out, train, train_size, eval, eval_size, seed } => {
            if train_size < 64 || eval_size < 64 {
                return Err(DcicError::Config("image sizes must be at least 64".into()).into());
            }
            experiment::write_synthetic_corpus(&out, train, train_size, eval, eval_size, seed)?;
        }
    }
    Ok(())
}

fn alloc_row(text: &mut String, name: &str, r: &AllocationReport) {
    let _ = writeln!(
        text,
        "{name}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        r.bits[0],
        r.bits[1],
        r.bits[2],
        r.bits[3],
        r.fractions[0],
        r.fractions[1],
        r.fractions[2],
        r.fractions[3],
        r.prior_share(),
        r.detail_share()
    );
}

fn print_summary(s: &experiment::ExperimentSummary) {
    println!("variant\tlambda\tseeds\tloss\tbpp\tpsnr");
    for p in &s.points {
        println!("{}\t{}\t{}\t{:.5}\t{:.4}\t{:.3}", p.variant, p.lambda, p.seeds, p.loss, p.bpp, p.psnr);
    }
    for (l, ok) in &s.full_beats_baseline {
        println!("lambda {l}: full below baseline: {}", if *ok { "yes" } else { "no" });
    }
    match s.bd_rate_percent {
        Some(v) => println!("BD-rate full vs baseline: {v:.2}%"),
        None => println!("BD-rate full vs baseline: unavailable"),
    }
    match s.ablation_ordering {
        Some(true) => println!("ablation ordering: ok"),
        Some(false) => println!("ablation ordering: REGRESSION (full worse than w/o conditional transforms)"),
        None => println!("ablation ordering: unavailable"),
    }
    if !s.complete {
        println!("(experiment incomplete)");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(exit::USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, category) = exit_code(&e);
            eprintln!("error ({category}): {e:#}");
            ExitCode::from(code)
        }
    }
}
