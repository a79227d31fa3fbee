use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, ValueEnum};
use dssr::degradation::{
    degrade as degrade_image, gaussian8_set, make_isotropic_kernel, sample_training_spec, BlurKernel,
    DegradationSpec, Downsampler, KernelKind, ISOTROPIC_SIZE,
};
use dssr::evaluation::{build_testset, evaluate, run_pair, MetricsReport};
use dssr::imaging::{load_image, save_image};
use dssr::model::Checkpoint;
use dssr::synthetic::write_corpus;
use dssr::training::{read_image_dir, Corpus, RunPaths, Trainer};
use dssr::variants::{build_variant, VariantKind};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SNAPSHOT_NAME};
use crate::{checkpoint_path, io_err, log_path, CliError};

fn usage(e: dssr::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradeProtocol {
    Gaussian8,
    Anisotropic,
    SingleSigma,
}

/// Options of `degrade`; also the schema of its config file.
#[derive(Args, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradeOptions {
    /// Directory of HR images.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub protocol: Option<DegradeProtocol>,
    /// Kernel width for the single-sigma protocol.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub downsampler: Option<Downsampler>,
}

#[derive(Args, Debug)]
pub struct DegradeArgs {
    /// TOML file with the same keys as the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub opts: DegradeOptions,
}

pub fn degrade(args: DegradeArgs) -> Result<(), CliError> {
    let mut o = match &args.config {
        Some(p) => {
            let text =
                fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<DegradeOptions>(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => DegradeOptions::default(),
    };
    macro_rules! take {
        ($($f:ident),+) => { $( if args.opts.$f.is_some() { o.$f = args.opts.$f.clone(); } )+ };
    }
    take!(input, out, scale, protocol, sigma, seed, downsampler);
    let input = o.input.clone().ok_or_else(|| CliError::Usage("--input is required".into()))?;
    if !input.is_dir() {
        return Err(CliError::Usage(format!("input directory {} does not exist", input.display())));
    }
    let out = o.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let scale = o.scale.unwrap_or(2);
    dssr::degradation::check_scale(scale).map_err(usage)?;
    let protocol = o.protocol.unwrap_or(DegradeProtocol::Gaussian8);
    let seed = o.seed.unwrap_or(0);
    let downsampler = o.downsampler.unwrap_or(Downsampler::Bicubic);
    if protocol == DegradeProtocol::SingleSigma && o.sigma.is_none() {
        return Err(CliError::Usage("--sigma is required with --protocol single-sigma".into()));
    }
    let fixed: Vec<BlurKernel> = match protocol {
        DegradeProtocol::Gaussian8 => gaussian8_set(scale).map_err(usage)?,
        DegradeProtocol::SingleSigma => {
            vec![make_isotropic_kernel(ISOTROPIC_SIZE, o.sigma.unwrap_or_default()).map_err(usage)?]
        }
        DegradeProtocol::Anisotropic => Vec::new(),
    };
    o.scale = Some(scale);
    o.protocol = Some(protocol);
    o.seed = Some(seed);
    o.downsampler = Some(downsampler);

    let images = read_image_dir(&input)?;
    ensure_dir(&out)?;
    let mut written = 0;
    for (i, (name, hr)) in images.iter().enumerate() {
        let kernels = if protocol == DegradeProtocol::Anisotropic {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            vec![sample_training_spec(scale, KernelKind::Anisotropic, &mut rng)?.kernel]
        } else {
            fixed.clone()
        };
        for (k, kernel) in kernels.into_iter().enumerate() {
            let spec = DegradationSpec {
                scale,
                kernel,
                downsampler,
            };
            let lr = degrade_image(hr, &spec)?;
            save_image(&lr, out.join(format!("{name}_k{k}.png")))?;
            write_text(&out.join(format!("{name}_k{k}.kernel.txt")), &spec.kernel.to_text())?;
            written += 1;
        }
    }
    let snapshot = toml::to_string(&o).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_text(&out.join(SNAPSHOT_NAME), &snapshot)?;
    println!("wrote {written} LR images to {}", out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML file with RunConfig keys; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory (or --checkpoint).
    #[arg(long)]
    pub resume: bool,
    #[command(flatten)]
    pub run: RunConfig,
}

/// Outcome of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub out: PathBuf,
    pub checkpoint: PathBuf,
    pub iters: u64,
}

pub fn train(args: TrainArgs) -> Result<TrainOutcome, CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.run)?.resolved()?;
    train_resolved(&cfg, args.resume)
}

/// Trains with a fully resolved configuration. With `resume`, the run
/// continues from the checkpoint, which must exist.
pub fn train_resolved(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome, CliError> {
    let corpus_dir = cfg.require_dir("corpus", &cfg.corpus)?;
    let out = cfg.require_out()?;
    let model_cfg = cfg.model_config()?;
    let train_cfg = cfg.train_config()?;
    let ckpt_path = checkpoint_path(&out);
    let resume_from = if resume {
        let p = cfg.checkpoint.clone().unwrap_or_else(|| ckpt_path.clone());
        if !p.is_file() {
            return Err(CliError::Usage(format!("cannot resume: checkpoint {} does not exist", p.display())));
        }
        Some(p)
    } else {
        None
    };
    ensure_dir(&out)?;
    let mut snapshot = cfg.clone();
    snapshot.checkpoint = None;
    snapshot.write_snapshot(&out)?;

    let corpus = Arc::new(Corpus::load_dir(&corpus_dir, train_cfg.scale, train_cfg.hr_patch()).map_err(usage)?);
    let mut trainer = match resume_from {
        Some(p) => {
            let ck = Checkpoint::load(&p)?;
            if ck.model.config() != &model_cfg || ck.model.variant() != cfg.variant() {
                return Err(CliError::Usage(format!(
                    "checkpoint {} holds a {} network {:?}, configuration asks for {} {:?}",
                    p.display(),
                    ck.model.variant(),
                    ck.model.config(),
                    cfg.variant(),
                    model_cfg
                )));
            }
            info!("resuming from {} at iteration {}", p.display(), ck.iter);
            Trainer::resume(train_cfg.clone(), ck).map_err(usage)?
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
            let model = build_variant(cfg.variant(), &model_cfg, &mut rng).map_err(usage)?;
            info!(
                "{} network with {} parameters, {} training images",
                cfg.variant(),
                model.params().count(),
                corpus.len()
            );
            Trainer::new(train_cfg.clone(), model).map_err(usage)?
        }
    };
    let paths = RunPaths {
        log: Some(log_path(&out)),
        checkpoint: Some(ckpt_path.clone()),
    };
    let start = Instant::now();
    let first = trainer.iter();
    let report_every = (train_cfg.total_iters / 100).clamp(1, 500);
    trainer.run(&corpus, &paths, |r| {
        if r.iter % report_every == 0 {
            let done = (r.iter - first) as f64;
            info!(
                "iter {:>7} lr {:.2e} detail {:.5} sr {:.5} total {:.5} ({:.3}s/iter)",
                r.iter,
                r.lr,
                r.detail_loss,
                r.sr_loss,
                r.total,
                start.elapsed().as_secs_f64() / done.max(1.0)
            );
        }
    })?;
    if !ckpt_path.exists() {
        trainer.checkpoint()?.save(&ckpt_path)?;
    }
    Ok(TrainOutcome {
        out,
        checkpoint: ckpt_path,
        iters: trainer.iter(),
    })
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunConfig,
}

/// Evaluates `cfg.checkpoint` on a test set built from `cfg.test_dir`.
pub fn eval(args: EvalArgs) -> Result<MetricsReport, CliError> {
    let cfg = RunConfig::load(args.config.as_deref(), &args.run)?;
    let ckpt_path = cfg.require_checkpoint()?;
    let test_dir = cfg.require_dir("test-dir", &cfg.test_dir)?;
    let out = cfg.require_out()?;
    let ck = Checkpoint::load(&ckpt_path)?;
    let model = ck.model;
    let mut snapshot = RunConfig {
        scale: Some(model.config().scale),
        ..cfg.clone()
    };
    snapshot.protocol = Some(cfg.protocol.unwrap_or(dssr::evaluation::Protocol::Gaussian8));
    snapshot.seed = Some(cfg.seed.unwrap_or(0));
    snapshot.eval_steps = Some(cfg.eval_steps.unwrap_or(model.config().steps));
    let steps = snapshot.eval_steps.unwrap_or(1);
    if steps == 0 {
        return Err(CliError::Usage("--eval-steps must be >= 1".into()));
    }
    let pairs = build_testset(
        &test_dir,
        model.config().scale,
        snapshot.protocol.unwrap_or(dssr::evaluation::Protocol::Gaussian8),
        snapshot.seed.unwrap_or(0),
    )
    .map_err(usage)?;
    let report = evaluate(&model, &pairs, steps)?;
    ensure_dir(&out)?;
    write_text(
        &out.join(SNAPSHOT_NAME),
        &toml::to_string(&snapshot).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    report.write(&out, "metrics")?;
    print!("{}", summary_table(&report));
    Ok(report)
}

fn summary_table(r: &MetricsReport) -> String {
    let a = &r.aggregate;
    let mut s = format!("{} pairs, x{}, shave {}\n", a.images, r.scale, r.shave);
    let _ = writeln!(s, "{:<10} {:>9} {:>8} {:>10}", "", "PSNR-Y", "SSIM-Y", "detail-L1");
    let _ = writeln!(s, "{:<10} {:>9.3} {:>8.4} {:>10}", "bicubic", a.bicubic_psnr_y, a.bicubic_ssim_y, "-");
    for t in 0..a.steps {
        let _ = writeln!(
            s,
            "{:<10} {:>9.3} {:>8.4} {:>10.5}",
            format!("t={}", t + 1),
            a.mean_psnr_y[t],
            a.mean_ssim_y[t],
            a.mean_detail_l1[t]
        );
    }
    s
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// LR image or directory of LR images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Recurrent steps (defaults to the training value).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Print the wall time per image.
    #[arg(long)]
    pub time: bool,
}

#[derive(Serialize)]
struct InferSnapshot<'a> {
    checkpoint: &'a Path,
    input: &'a Path,
    out: &'a Path,
    steps: usize,
}

pub fn infer(args: InferArgs) -> Result<(), CliError> {
    if !args.checkpoint.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let inputs: Vec<(String, dssr::imaging::Image)> = if args.input.is_dir() {
        read_image_dir(&args.input).map_err(usage)?
    } else if args.input.is_file() {
        let name = args.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        vec![(name, load_image(&args.input)?)]
    } else {
        return Err(CliError::Usage(format!("input {} does not exist", args.input.display())));
    };
    let model = Checkpoint::load(&args.checkpoint)?.model;
    let steps = args.steps.unwrap_or(model.config().steps);
    if steps == 0 {
        return Err(CliError::Usage("--steps must be >= 1".into()));
    }
    ensure_dir(&args.out)?;
    for (name, lr) in &inputs {
        let t0 = Instant::now();
        let out = run_pair(&model, lr, steps)?;
        if args.time {
            println!("{name}: {:.3}s for {steps} steps", t0.elapsed().as_secs_f64());
        }
        for (t, sr) in out.sr.iter().enumerate() {
            save_image(sr, args.out.join(format!("{name}_t{}.png", t + 1)))?;
        }
    }
    let snap = InferSnapshot {
        checkpoint: &args.checkpoint,
        input: &args.input,
        out: &args.out,
        steps,
    };
    write_text(
        &args.out.join(SNAPSHOT_NAME),
        &toml::to_string(&snap).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    println!("wrote {} images to {}", inputs.len() * steps, args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Variants to compare (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub variants: Vec<VariantKind>,
    /// Detail-loss weights to compare (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub alphas: Vec<f64>,
    #[command(flatten)]
    pub run: RunConfig,
}

/// One ablation row.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub setting: String,
    pub variant: VariantKind,
    pub alpha: f64,
    pub params: usize,
    pub report: MetricsReport,
}

pub fn ablate(args: AblateArgs) -> Result<(), CliError> {
    let base = RunConfig::load(args.config.as_deref(), &args.run)?;
    if args.variants.is_empty() == args.alphas.is_empty() {
        return Err(CliError::Usage("give exactly one of --variants or --alphas".into()));
    }
    let out = base.require_out()?;
    base.require_dir("corpus", &base.corpus)?;
    let test_dir = base.require_dir("test-dir", &base.test_dir)?;
    let settings: Vec<(String, RunConfig)> = if args.variants.is_empty() {
        args.alphas
            .iter()
            .map(|&a| {
                (
                    format!("alpha_{a}"),
                    RunConfig {
                        alpha: Some(a),
                        ..base.clone()
                    },
                )
            })
            .collect()
    } else {
        args.variants
            .iter()
            .map(|&v| {
                (
                    format!("variant_{v}"),
                    RunConfig {
                        variant: Some(v),
                        ..base.clone()
                    },
                )
            })
            .collect()
    };
    let mut rows = Vec::new();
    for (name, cfg) in settings {
        let run_out = out.join(&name);
        let cfg = RunConfig {
            out: Some(run_out.clone()),
            ..cfg
        }
        .resolved()?;
        let resume = checkpoint_path(&run_out).is_file();
        info!("ablation run {name}{}", if resume { " (resuming)" } else { "" });
        let outcome = train_resolved(&cfg, resume)?;
        let model = Checkpoint::load(&outcome.checkpoint)?.model;
        let pairs = build_testset(
            &test_dir,
            model.config().scale,
            cfg.protocol.unwrap_or(dssr::evaluation::Protocol::Gaussian8),
            cfg.seed.unwrap_or(0),
        )
        .map_err(usage)?;
        let report = evaluate(&model, &pairs, cfg.eval_steps.unwrap_or(model.config().steps))?;
        report.write(&run_out, "metrics")?;
        rows.push(AblationRow {
            setting: name,
            variant: model.variant(),
            alpha: cfg.alpha.unwrap_or(1.0),
            params: model.params().count(),
            report,
        });
    }
    let table = ablation_csv(&rows);
    write_text(&out.join("ablation.csv"), &table)?;
    let mut snapshot = base.clone();
    snapshot.out = Some(out.clone());
    write_text(
        &out.join(SNAPSHOT_NAME),
        &toml::to_string(&snapshot).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    print!("{table}");
    Ok(())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let steps = rows.iter().map(|r| r.report.aggregate.steps).max().unwrap_or(0);
    let mut s = String::from("setting,variant,alpha,params,bicubic_psnr_y,final_psnr_y,final_ssim_y");
    for t in 1..=steps {
        let _ = write!(s, ",detail_l1_t{t}");
    }
    s.push('\n');
    for r in rows {
        let a = &r.report.aggregate;
        let _ = write!(
            s,
            "{},{},{},{},{:.4},{:.4},{:.5}",
            r.setting, r.variant, r.alpha, r.params, a.bicubic_psnr_y, a.final_psnr_y, a.final_ssim_y
        );
        for t in 0..steps {
            match a.mean_detail_l1.get(t) {
                Some(v) => {
                    let _ = write!(s, ",{v:.6}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Training logs (CSV); one loss curve each.
    #[arg(long)]
    pub log: Vec<PathBuf>,
    /// Metric reports (`metrics.csv`); one series each.
    #[arg(long)]
    pub report: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn plot(args: PlotArgs) -> Result<(), CliError> {
    if args.log.is_empty() && args.report.is_empty() {
        return Err(CliError::Usage("give at least one --log or --report".into()));
    }
    for p in args.log.iter().chain(&args.report) {
        if !p.is_file() {
            return Err(CliError::Usage(format!("{} does not exist", p.display())));
        }
    }
    ensure_dir(&args.out)?;
    let written = crate::plot::render_all(&args.log, &args.report, &args.out)?;
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "img")]
    pub prefix: String,
}

pub fn synth(args: SynthArgs) -> Result<(), CliError> {
    if args.size == 0 || args.count == 0 {
        return Err(CliError::Usage("--count and --size must be >= 1".into()));
    }
    let paths = write_corpus(&args.out, &args.prefix, args.count, args.size, args.seed)?;
    println!("wrote {} images to {}", paths.len(), args.out.display());
    Ok(())
}
