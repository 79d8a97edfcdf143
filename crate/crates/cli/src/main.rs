//! `kbpn` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kbpn::config::{self, env_overrides, Override, DATA_ROOT_ENV};
use kbpn::degradation::{degrade, gaussian_kernel, load_kernel, save_kernel, DownMode, GaussianSpec, KernelMeta};
use kbpn::eval::{benchmark_images, run_benchmark, BenchSpec};
use kbpn::imaging::{load_image, save_image, BitDepth};
use kbpn::model::Model;
use kbpn::networks::Variant;
use kbpn::selfcheck;
use kbpn::synthetic::synthetic_pool;
use kbpn::training::{load_pools, Event, TrainConfig, Trainer};
use kbpn::viz::{kernel_image, plot_params_vs_stages, visualize_kernel, visualize_traces};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "kbpn", version, about = "Blind super-resolution with kernel-aware back-projection networks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every stochastic step; a random one is chosen and logged when omitted.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,
    /// TOML experiment file layered over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Config override applied after the file, e.g. `network.stages=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a Gaussian blur kernel and its JSON sidecar.
    SynthKernel(SynthKernelArgs),
    /// Blur and downsample an HR image.
    Degrade(DegradeArgs),
    /// Train a network; resumes from the latest checkpoint unless `--fresh`.
    Train(TrainArgs),
    /// Benchmark a checkpoint over an image folder and a blur list.
    Eval(EvalArgs),
    /// Super-resolve one LR image.
    Infer(InferArgs),
    /// Render an estimated kernel next to a reference kernel.
    VizKernel(VizKernelArgs),
    /// Render per-stage features and LR residuals of one forward pass.
    VizTraces(VizTracesArgs),
    /// Parameter count against the number of stages, as CSV and SVG.
    PlotParams(PlotParamsArgs),
    /// Run the degradation, kernel and gradient oracle suites.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct SynthKernelArgs {
    /// Omit to draw a kernel from the configured training distribution.
    #[arg(long)]
    sigma_x: Option<f64>,
    /// Defaults to `--sigma-x`.
    #[arg(long)]
    sigma_y: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    theta: f64,
    /// Kernel side; defaults to `network.kernel_size`.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Also write a grayscale PNG render.
    #[arg(long)]
    png: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    #[arg(long)]
    hr: PathBuf,
    #[arg(long)]
    kernel: PathBuf,
    /// Defaults to `network.scale`.
    #[arg(long)]
    scale: Option<usize>,
    /// decimate, area or bicubic; defaults to `network.down_mode`.
    #[arg(long)]
    mode: Option<DownMode>,
    #[arg(long)]
    out: PathBuf,
    /// Crop the HR image to a multiple of the scale instead of failing.
    #[arg(long)]
    crop: bool,
    /// Write 16-bit PNG.
    #[arg(long)]
    sixteen_bit: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Overrides `total_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `checkpoint_dir`.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Ignore existing checkpoints.
    #[arg(long)]
    fresh: bool,
    /// Log the loss every N steps (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// A `step-NNNN` directory or a run directory (latest step).
    #[arg(long)]
    ckpt: PathBuf,
    /// HR image folder; relative paths resolve against the data root.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Evaluate on N synthetic images instead of a folder.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Isotropic blur width, repeatable.
    #[arg(long = "sigma")]
    sigmas: Vec<f64>,
    /// Anisotropic blur `SX,SY,THETA`, repeatable.
    #[arg(long = "aniso", value_parser = parse_aniso)]
    aniso: Vec<GaussianSpec>,
    /// Border pixels removed before scoring; defaults to the scale.
    #[arg(long)]
    crop_border: Option<usize>,
    /// Score all RGB channels instead of luma.
    #[arg(long)]
    rgb: bool,
    /// CSV output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lr: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Kernel estimate path (`.bin`); defaults next to `--out`.
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    /// Write per-stage renders into this directory (kbpn only).
    #[arg(long)]
    dump_traces: Option<PathBuf>,
    /// Disable residual feedback.
    #[arg(long)]
    no_feedback: bool,
    #[arg(long)]
    sixteen_bit: bool,
}

#[derive(Args, Debug)]
struct VizKernelArgs {
    #[arg(long)]
    kernel: PathBuf,
    /// Reference kernel file, or isotropic `--gt-sigma`.
    #[arg(long, conflicts_with = "gt_sigma")]
    gt: Option<PathBuf>,
    #[arg(long)]
    gt_sigma: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VizTracesArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    lr: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PlotParamsArgs {
    /// Stage counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
    stages: Vec<usize>,
    /// PSNR annotations aligned with `--stages`; `-` leaves a gap.
    #[arg(long, value_delimiter = ',')]
    psnr: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Random degradation cases.
    #[arg(long, default_value_t = 100)]
    cases: usize,
}

fn parse_aniso(s: &str) -> Result<GaussianSpec, String> {
    let v: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match v[..] {
        [sigma_x, sigma_y, theta] => Ok(GaussianSpec { sigma_x, sigma_y, theta }),
        _ => Err(format!("expected SX,SY,THETA, got {s:?}")),
    }
}

/// Errors the user can fix by changing arguments or config.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Usage(msg.into()))
}

/// Layered config plus the seed actually used.
struct Resolved {
    cfg: TrainConfig,
    seed: u64,
}

fn seed_set_explicitly(g: &Global, overrides: &[Override]) -> anyhow::Result<bool> {
    if overrides.iter().any(|o| o.path == ["seed"]) {
        return Ok(true);
    }
    match &g.config {
        Some(p) => Ok(config::read_table(p).map_err(|e| usage(e.to_string()))?.contains_key("seed")),
        None => Ok(false),
    }
}

fn resolve(g: &Global) -> anyhow::Result<Resolved> {
    let mut overrides = env_overrides();
    for s in &g.set {
        overrides.push(Override::parse(s).map_err(|e| usage(e.to_string()))?);
    }
    let from_config = g.seed.is_none() && seed_set_explicitly(g, &overrides)?;
    let mut cfg: TrainConfig = config::resolve(g.config.as_deref(), &overrides).map_err(|e| usage(e.to_string()))?;
    let seed = match g.seed {
        Some(s) => s,
        None if from_config => cfg.seed,
        None => {
            let s = rand::rng().random_range(0..=i64::MAX as u64);
            info!("no --seed given; using random seed {s}");
            s
        }
    };
    cfg.seed = seed;
    Ok(Resolved { cfg, seed })
}

fn log_resolved(command: &str, r: &Resolved, args: &impl std::fmt::Debug) -> anyhow::Result<()> {
    info!("command {command} seed {}", r.seed);
    info!("arguments {args:?}");
    info!("resolved config:\n{}", config::render(&r.cfg)?);
    Ok(())
}

/// Relative paths resolve against the data-root variable when it is set.
fn data_path(p: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn depth(sixteen: bool) -> BitDepth {
    if sixteen {
        BitDepth::Sixteen
    } else {
        BitDepth::Eight
    }
}

fn synth_kernel(r: &Resolved, a: &SynthKernelArgs) -> anyhow::Result<()> {
    let k = a.k.unwrap_or(r.cfg.network.kernel_size);
    let spec = match a.sigma_x {
        Some(sx) => GaussianSpec { sigma_x: sx, sigma_y: a.sigma_y.unwrap_or(sx), theta: a.theta },
        None => {
            if a.sigma_y.is_some() {
                return Err(usage("--sigma-y needs --sigma-x"));
            }
            r.cfg.kernels.sample(&mut ChaCha8Rng::seed_from_u64(r.seed))
        }
    };
    let kernel = gaussian_kernel(&spec, k).map_err(|e| usage(e.to_string()))?;
    let meta = KernelMeta { k, sigma_x: Some(spec.sigma_x), sigma_y: Some(spec.sigma_y), theta: Some(spec.theta), down_mode: None };
    save_kernel(&a.out, &kernel, &meta)?;
    info!("wrote {} (sigma_x {} sigma_y {} theta {})", a.out.display(), spec.sigma_x, spec.sigma_y, spec.theta);
    if let Some(png) = &a.png {
        save_image(&kernel_image(&kernel), png, BitDepth::Sixteen)?;
        info!("wrote {}", png.display());
    }
    Ok(())
}

fn degrade_cmd(r: &Resolved, a: &DegradeArgs) -> anyhow::Result<()> {
    let s = a.scale.unwrap_or(r.cfg.network.scale);
    let mode = a.mode.unwrap_or(r.cfg.network.down_mode);
    if s == 0 {
        return Err(usage("--scale must be positive"));
    }
    let mut hr = load_image(&a.hr)?;
    if a.crop {
        hr = hr.crop_to_multiple(s)?;
    } else if hr.height() % s != 0 || hr.width() % s != 0 {
        return Err(usage(format!("{}x{} is not divisible by {s}; pass --crop", hr.height(), hr.width())));
    }
    let (kernel, _) = load_kernel(&a.kernel)?;
    let lr = degrade(&hr, &kernel, s, mode)?;
    save_image(&lr, &a.out, depth(a.sixteen_bit))?;
    info!("wrote {} ({}x{}, scale {s}, {mode})", a.out.display(), lr.height(), lr.width());
    Ok(())
}

fn train_cmd(mut r: Resolved, a: &TrainArgs) -> anyhow::Result<()> {
    if let Some(n) = a.steps {
        r.cfg.total_steps = n;
    }
    if let Some(d) = &a.checkpoint_dir {
        r.cfg.checkpoint_dir = d.clone();
    }
    r.cfg.validate().map_err(|e| usage(e.to_string()))?;
    log_resolved("train", &r, a)?;
    let cfg = r.cfg;
    let (pool, val) = load_pools(&cfg)?;
    info!("{} training images, {} validation images", pool.len(), val.len());
    let mut trainer = if a.fresh { Trainer::new(cfg, pool, &val)? } else { Trainer::resume_or_new(cfg, pool, &val)? };
    if trainer.step > 0 {
        info!("resuming at step {}", trainer.step);
    }
    let log_every = a.log_every;
    let report = trainer.run(|e| match e {
        Event::Step { step, lr, loss } if log_every > 0 && (step + 1) % log_every == 0 => {
            info!("step {} lr {lr:.1e} total {:.4e} sr {:.4e} kernel {:.4e} lr-consistency {:.4e}", step + 1, loss.total, loss.l_sr, loss.l_kernel, loss.l_lr)
        }
        Event::Eval(row) => info!("eval step {} psnr {:.3} ssim {:.4} kernel_l1 {:?}", row.step, row.psnr, row.ssim, row.kernel_l1),
        Event::Checkpoint(dir) => info!("checkpoint {}", dir.display()),
        _ => {}
    })?;
    info!("ran {} steps; latest checkpoint {}", report.steps, report.checkpoint.display());
    Ok(())
}

fn eval_cmd(r: &Resolved, a: &EvalArgs) -> anyhow::Result<()> {
    let model = Model::load(&a.ckpt)?;
    let net = model.config().clone();
    let mut blurs: Vec<GaussianSpec> = a.sigmas.iter().map(|&s| GaussianSpec::isotropic(s)).collect();
    blurs.extend(a.aniso.iter().copied());
    if blurs.is_empty() {
        blurs = [0.2, 1.3, 2.6, 4.0].map(GaussianSpec::isotropic).to_vec();
    }
    let mut spec = BenchSpec {
        dataset_dir: PathBuf::new(),
        blurs,
        scale: net.scale,
        kernel_size: net.kernel_size,
        down_mode: net.down_mode,
        crop_border: a.crop_border,
        luma_only: !a.rgb,
    };
    let table = match (&a.dataset, a.synthetic) {
        (Some(dir), _) => {
            spec.dataset_dir = data_path(dir);
            spec.validate().map_err(|e| usage(e.to_string()))?;
            run_benchmark(&model, &spec, r.cfg.exec)?
        }
        (None, Some(n)) => {
            spec.validate().map_err(|e| usage(e.to_string()))?;
            let size = r.cfg.synthetic.size;
            let images = synthetic_pool(n, size, size, r.seed);
            benchmark_images(&model, &images, &spec, r.cfg.exec)?
        }
        (None, None) => return Err(usage("pass --dataset DIR or --synthetic N")),
    };
    print!("{}", table.to_text());
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        std::fs::write(out, table.to_csv()).with_context(|| format!("writing {}", out.display()))?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

fn infer_cmd(a: &InferArgs) -> anyhow::Result<()> {
    let mut model = Model::load(&a.ckpt)?;
    if a.no_feedback {
        model.options.feedback = false;
    }
    let lr = load_image(&a.lr)?;
    let result = model.forward(&lr)?;
    save_image(&result.sr, &a.out, depth(a.sixteen_bit))?;
    info!("wrote {} ({}x{})", a.out.display(), result.sr.height(), result.sr.width());
    if let Some(kernel) = model.kernel_estimate(&result)? {
        let path = a.kernel_out.clone().unwrap_or_else(|| a.out.with_extension("kernel.bin"));
        let meta = KernelMeta { k: kernel.size(), sigma_x: None, sigma_y: None, theta: None, down_mode: Some(model.config().down_mode) };
        save_kernel(&path, &kernel, &meta)?;
        save_image(&kernel_image(&kernel), path.with_extension("png"), BitDepth::Sixteen)?;
        info!("wrote {}", path.display());
    }
    if let Some(dir) = &a.dump_traces {
        if model.config().variant != Variant::Kbpn {
            return Err(usage("--dump-traces needs a kbpn checkpoint"));
        }
        let cfg = model.config();
        let summary = visualize_traces(&result, &lr, cfg.scale, cfg.down_mode, dir)?;
        info!("wrote traces to {}; mean |R_t| {:?}", dir.display(), summary.residual_mean_abs);
    }
    Ok(())
}

fn viz_kernel_cmd(a: &VizKernelArgs) -> anyhow::Result<()> {
    let (k, _) = load_kernel(&a.kernel)?;
    let gt = match (&a.gt, a.gt_sigma) {
        (Some(p), _) => load_kernel(p)?.0,
        (None, Some(s)) => gaussian_kernel(&GaussianSpec::isotropic(s), k.size()).map_err(|e| usage(e.to_string()))?,
        (None, None) => return Err(usage("pass --gt FILE or --gt-sigma S")),
    };
    let renders = visualize_kernel(&k, &gt, &a.out)?;
    info!("wrote {} and {}", renders.composite.display(), renders.sidecar.display());
    Ok(())
}

fn viz_traces_cmd(a: &VizTracesArgs) -> anyhow::Result<()> {
    let model = Model::load(&a.ckpt)?;
    if model.config().variant != Variant::Kbpn {
        return Err(usage("traces need a kbpn checkpoint"));
    }
    let lr = load_image(&a.lr)?;
    let result = model.forward(&lr)?;
    let cfg = model.config();
    let summary = visualize_traces(&result, &lr, cfg.scale, cfg.down_mode, &a.out)?;
    info!("wrote {} stage renders to {}", summary.features.len(), a.out.display());
    for (t, m) in summary.residual_mean_abs.iter().enumerate() {
        println!("stage {} mean |R| {m:.6e}", t + 1);
    }
    println!("final mean |R| {:.6e}", summary.final_residual_mean_abs);
    Ok(())
}

fn plot_params_cmd(r: &Resolved, a: &PlotParamsArgs) -> anyhow::Result<()> {
    if !a.psnr.is_empty() && a.psnr.len() != a.stages.len() {
        return Err(usage(format!("{} PSNR values for {} stage counts", a.psnr.len(), a.stages.len())));
    }
    let psnr = a
        .psnr
        .iter()
        .map(|p| match p.trim() {
            "-" | "" => Ok(None),
            v => v.parse::<f64>().map(Some).map_err(|e| usage(format!("{v:?}: {e}"))),
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let plot = plot_params_vs_stages(&r.cfg.network, &a.stages, &psnr, &a.out)?;
    for row in &plot.rows {
        println!("stages {} params {}", row.stages, row.params);
    }
    info!("wrote {} and {}", plot.csv.display(), plot.svg.display());
    Ok(())
}

fn selfcheck_cmd(r: &Resolved, a: &SelfcheckArgs) -> anyhow::Result<()> {
    let mut results = vec![selfcheck::degradation_oracle(a.cases, r.seed), selfcheck::gaussian_oracle(21)];
    results.extend(selfcheck::gradient_suite(r.seed));
    for res in &results {
        println!("{res}");
    }
    let failed = results.iter().filter(|x| !x.passed).count();
    if failed > 0 {
        bail!("{failed} of {} checks failed", results.len());
    }
    println!("all {} checks passed", results.len());
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let r = resolve(&cli.global)?;
    match &cli.command {
        Command::Train(a) => return train_cmd(r, a),
        Command::SynthKernel(a) => log_resolved("synth-kernel", &r, a)?,
        Command::Degrade(a) => log_resolved("degrade", &r, a)?,
        Command::Eval(a) => log_resolved("eval", &r, a)?,
        Command::Infer(a) => log_resolved("infer", &r, a)?,
        Command::VizKernel(a) => log_resolved("viz-kernel", &r, a)?,
        Command::VizTraces(a) => log_resolved("viz-traces", &r, a)?,
        Command::PlotParams(a) => log_resolved("plot-params", &r, a)?,
        Command::Selfcheck(a) => log_resolved("selfcheck", &r, a)?,
    }
    match &cli.command {
        Command::SynthKernel(a) => synth_kernel(&r, a),
        Command::Degrade(a) => degrade_cmd(&r, a),
        Command::Eval(a) => eval_cmd(&r, a),
        Command::Infer(a) => infer_cmd(a),
        Command::VizKernel(a) => viz_kernel_cmd(a),
        Command::VizTraces(a) => viz_traces_cmd(a),
        Command::PlotParams(a) => plot_params_cmd(&r, a),
        Command::Selfcheck(a) => selfcheck_cmd(&r, a),
        Command::Train(_) => unreachable!("handled above"),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<kbpn::Error>() {
        Some(kbpn::Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp_millis().init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
