//! Training-data synthesis and the optimisation loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::checkpoint::{
    latest_step_dir, load_optim, load_params, save_optim, save_params, step_dir, RngState, CONFIG_FILE, OPTIM_FILE,
    PARAMS_FILE, PCA_FILE, RNG_FILE,
};
use crate::degradation::{
    degrade, gaussian_kernel, save_kernel, save_pca, BlurKernel, DownMode, GaussianSpec, KernelCode, KernelDistribution,
    KernelMeta, KernelPca,
};
use crate::error::{Error, Result};
use crate::eval::{load_folder, list_images, psnr, ssim, SuperResolver};
use crate::exec::Exec;
use crate::imaging::{random_patch_pair, save_image, BitDepth, Image, PatchSpec};
use crate::losses::{graph_loss, LossBreakdown, LossWeights, Targets};
use crate::model::Model;
use crate::networks::{ForwardOptions, Network, NetworkConfig, Variant};
use crate::optim::{Adam, AdamConfig};
use crate::synthetic::synthetic_pool;
use crate::tensor::Tensor;

/// Kernels drawn to fit the kcbpn code basis.
const PCA_SAMPLES: usize = 4096;
/// Kernels averaged for the mean-kernel baseline.
const BASELINE_SAMPLES: usize = 4096;
const VAL_STREAM: u64 = 0x5EED_0F_7A1;

/// Step-decayed learning rate with exactly one drop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub drop_to: f64,
    /// Defaults to 75% of the total steps.
    pub drop_step: Option<usize>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial: 1e-4, drop_to: 1e-5, drop_step: None }
    }
}

impl LrSchedule {
    pub fn drop_at(&self, total_steps: usize) -> usize {
        self.drop_step.unwrap_or(total_steps * 3 / 4)
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr(&self, step: usize, total_steps: usize) -> f64 {
        if step < self.drop_at(total_steps) {
            self.initial
        } else {
            self.drop_to
        }
    }
}

/// Procedural HR images used when no dataset folder is configured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub train_images: usize,
    pub val_images: usize,
    pub size: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { train_images: 16, val_images: 4, size: 192, seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub total_steps: usize,
    /// Blur family and sigma range of the training kernels.
    pub kernels: KernelDistribution,
    pub seed: u64,
    pub lr_patch_size: usize,
    pub flips: bool,
    /// Root that relative dataset paths resolve against.
    pub data_root: PathBuf,
    pub dataset_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub synthetic: SyntheticData,
    pub checkpoint_dir: PathBuf,
    pub checkpoint_every: usize,
    /// Zero disables periodic evaluation.
    pub eval_every: usize,
    pub val_samples: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    /// Residual feedback into the SR features (kbpn ablation switch).
    pub feedback: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: NetworkConfig::default(),
            batch_size: 8,
            lr_schedule: LrSchedule::default(),
            total_steps: 2000,
            kernels: KernelDistribution::default(),
            seed: 0,
            lr_patch_size: 32,
            flips: true,
            data_root: PathBuf::from("."),
            dataset_dir: None,
            val_dir: None,
            synthetic: SyntheticData::default(),
            checkpoint_dir: PathBuf::from("runs/default"),
            checkpoint_every: 500,
            eval_every: 500,
            val_samples: 8,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            feedback: true,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.kernels.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.lr_patch_size == 0 {
            return Err(Error::Config("lr_patch_size must be positive".into()));
        }
        let s = &self.lr_schedule;
        if !(s.initial > 0.0 && s.drop_to > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn patch(&self) -> PatchSpec {
        PatchSpec { lr_patch_size: self.lr_patch_size, scale: self.network.scale, flip_horizontal: self.flips, flip_vertical: self.flips }
    }

    pub fn down_mode(&self) -> DownMode {
        self.network.down_mode
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root.join(p)
        }
    }

    pub fn dataset_path(&self) -> Option<PathBuf> {
        self.dataset_dir.as_deref().map(|p| self.resolve(p))
    }

    pub fn val_path(&self) -> Option<PathBuf> {
        self.val_dir.as_deref().map(|p| self.resolve(p))
    }
}

/// One supervised training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub hr: Image,
    pub lr: Image,
    pub kernel: BlurKernel,
    pub spec: GaussianSpec,
    /// Ground-truth code (kcbpn).
    pub code: Option<KernelCode>,
}

impl Sample {
    pub fn targets(&self) -> Targets {
        Targets { hr: self.hr.clone(), lr: self.lr.clone(), kernel: Some(self.kernel.clone()), code: self.code.clone() }
    }
}

fn make_sample(cfg: &TrainConfig, hr: &Image, rng: &mut ChaCha8Rng, pca: Option<&KernelPca>) -> Result<Sample> {
    let (patch, _) = random_patch_pair(hr, &cfg.patch(), rng.random())?;
    let spec = cfg.kernels.sample(rng);
    let kernel = gaussian_kernel(&spec, cfg.network.kernel_size)?;
    let lr = degrade(&patch, &kernel, cfg.network.scale, cfg.down_mode())?;
    let code = pca.map(|p| p.encode(&kernel)).transpose()?;
    Ok(Sample { hr: patch, lr, kernel, spec, code })
}

/// The batch for `step`: a pure function of `(cfg.seed, step, hr_pool)`.
pub fn synth_batch(cfg: &TrainConfig, step: usize, hr_pool: &[Image], pca: Option<&KernelPca>) -> Result<Vec<Sample>> {
    if hr_pool.is_empty() {
        return Err(Error::Invalid("empty HR pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    (0..cfg.batch_size)
        .map(|_| {
            let idx = rng.random_range(0..hr_pool.len());
            make_sample(cfg, &hr_pool[idx], &mut rng, pca)
        })
        .collect()
}

/// Fixed validation samples drawn from `pool` on a dedicated stream.
pub fn validation_set(cfg: &TrainConfig, pool: &[Image], pca: Option<&KernelPca>) -> Result<Vec<Sample>> {
    if pool.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(VAL_STREAM);
    (0..cfg.val_samples)
        .map(|i| make_sample(cfg, &pool[i % pool.len()], &mut rng, pca))
        .collect()
}

/// Training and validation HR images. Folder lists must be disjoint.
pub fn load_pools(cfg: &TrainConfig) -> Result<(Vec<Image>, Vec<Image>)> {
    match cfg.dataset_path() {
        Some(train_dir) => {
            let train_files = list_images(&train_dir)?;
            let val = match cfg.val_path() {
                Some(val_dir) => {
                    let canon = |p: &PathBuf| fs::canonicalize(p).unwrap_or_else(|_| p.clone());
                    let train_set: std::collections::HashSet<_> = train_files.iter().map(canon).collect();
                    let val_files = list_images(&val_dir)?;
                    if let Some(dup) = val_files.iter().find(|p| train_set.contains(&canon(p))) {
                        return Err(Error::Config(format!("validation image {} is also a training image", dup.display())));
                    }
                    load_folder(&val_dir)?
                }
                None => Vec::new(),
            };
            Ok((load_folder(&train_dir)?, val))
        }
        None => {
            let d = cfg.synthetic;
            let seed = d.seed.unwrap_or(cfg.seed);
            let train = synthetic_pool(d.train_images, d.size, d.size, seed);
            let val = synthetic_pool(d.val_images, d.size, d.size, seed ^ VAL_STREAM);
            Ok((train, val))
        }
    }
}

pub fn fit_code_basis(cfg: &TrainConfig) -> Result<Option<KernelPca>> {
    if cfg.network.variant != Variant::Kcbpn {
        return Ok(None);
    }
    KernelPca::fit_distribution(&cfg.kernels, cfg.network.kernel_size, cfg.network.code_dim, PCA_SAMPLES, cfg.seed).map(Some)
}

/// The kernel the untrained kbpn predictor starts from; the L1 baseline.
pub fn baseline_kernel(net: &NetworkConfig) -> Result<BlurKernel> {
    net.kernel_prior.mean_kernel(net.kernel_size, BASELINE_SAMPLES, 0)
}

/// Mean validation scores at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Absent for models without a kernel estimate.
    pub kernel_l1: Option<f64>,
    pub baseline_kernel_l1: f64,
}

pub const EVAL_CSV_HEADER: &str = "step,psnr,ssim,kernel_l1,baseline_kernel_l1";

impl EvalRow {
    pub fn csv(&self) -> String {
        let kl = self.kernel_l1.map(|v| format!("{v:.8}")).unwrap_or_default();
        format!("{},{:.6},{:.6},{kl},{:.8}", self.step, self.psnr, self.ssim, self.baseline_kernel_l1)
    }
}

/// Scores `model` on `val_set` with the metric convention (luma, border
/// crop of `s`). No gradients are recorded.
pub fn eval_hook<M: SuperResolver>(model: &M, val_set: &[Sample], baseline: &BlurKernel, step: usize, exec: Exec) -> Result<EvalRow> {
    if val_set.is_empty() {
        return Err(Error::Invalid("empty validation set".into()));
    }
    let s = model.scale();
    let rows = exec.map(val_set, |_, smp| -> Result<(f64, f64, Option<f64>, f64)> {
        let pred = model.super_resolve(&smp.lr)?;
        let sr = pred.sr.clamped();
        Ok((
            psnr(&sr, &smp.hr, s, true)?,
            ssim(&sr, &smp.hr, s, true)?,
            pred.kernel.map(|k| k.mean_abs_diff(&smp.kernel)).transpose()?,
            baseline.mean_abs_diff(&smp.kernel)?,
        ))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(EvalRow {
        step,
        psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.1).sum::<f64>() / n,
        kernel_l1: rows.iter().map(|r| r.2).sum::<Option<f64>>().map(|v| v / n),
        baseline_kernel_l1: rows.iter().map(|r| r.3).sum::<f64>() / n,
    })
}

/// Column header of the per-step loss log.
pub fn metrics_header(variant: Variant) -> &'static str {
    match variant {
        Variant::Kcbpn => "step,l_sr,l_kc,l_lr,total",
        _ => "step,l_sr,l_k,l_lr,total",
    }
}

fn metrics_row(step: usize, b: &LossBreakdown) -> String {
    format!("{step},{:e},{:e},{:e},{:e}", b.l_sr, b.l_kernel, b.l_lr, b.total)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";

/// Progress notifications from [`Trainer::run`].
#[derive(Clone, Debug)]
pub enum Event {
    Step { step: usize, lr: f64, loss: LossBreakdown },
    Eval(EvalRow),
    Checkpoint(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: Option<LossBreakdown>,
    pub evals: Vec<EvalRow>,
    pub checkpoint: PathBuf,
}

/// Mutable training state: parameters, optimiser moments and the position
/// in the deterministic batch sequence.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub network: Network,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub pca: Option<KernelPca>,
    pub pool: Vec<Image>,
    pub val: Vec<Sample>,
    pub baseline: BlurKernel,
    /// Index of the next step to run.
    pub step: usize,
}

impl Trainer {
    /// Fresh state. Parameters are initialised from `cfg.seed`.
    pub fn new(cfg: TrainConfig, pool: Vec<Image>, val_pool: &[Image]) -> Result<Self> {
        cfg.validate()?;
        if pool.is_empty() {
            return Err(Error::Invalid("no training images".into()));
        }
        for img in &pool {
            cfg.patch().validate_for(img)?;
        }
        let (network, p) = Network::build(&cfg.network, cfg.seed)?;
        let params = p.cast::<f32>();
        let adam = Adam::new(&params, cfg.adam);
        let pca = fit_code_basis(&cfg)?;
        let val = validation_set(&cfg, val_pool, pca.as_ref())?;
        let baseline = baseline_kernel(&cfg.network)?;
        Ok(Self { cfg, network, params, adam, pca, pool, val, baseline, step: 0 })
    }

    /// Continues from the latest checkpoint under `cfg.checkpoint_dir`, or
    /// starts fresh when there is none. The saved network and seed must
    /// match `cfg`.
    pub fn resume_or_new(cfg: TrainConfig, pool: Vec<Image>, val_pool: &[Image]) -> Result<Self> {
        let latest = latest_step_dir(&cfg.checkpoint_dir)?;
        let mut t = Self::new(cfg, pool, val_pool)?;
        if let Some((_, dir)) = latest {
            t.restore(&dir)?;
        }
        Ok(t)
    }

    fn restore(&mut self, dir: &Path) -> Result<()> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let saved: TrainConfig = serde_json::from_str(&text)?;
        if saved.network != self.cfg.network || saved.seed != self.cfg.seed || saved.batch_size != self.cfg.batch_size {
            return Err(Error::Checkpoint(format!("{} was written by a different network, seed or batch size", dir.display())));
        }
        let rng_path = dir.join(RNG_FILE);
        let rng: RngState = serde_json::from_str(&fs::read_to_string(&rng_path).map_err(|e| Error::io(&rng_path, e))?)?;
        crate::checkpoint::assign_params(&mut self.params, &load_params(dir.join(PARAMS_FILE))?)?;
        let (t, m, v) = load_optim::<f32>(dir.join(OPTIM_FILE))?;
        self.adam = Adam::from_state(&self.params, self.cfg.adam, t, m, v)?;
        self.step = rng.next_step;
        Ok(())
    }

    pub fn model(&self) -> Model {
        let mut m = Model::new(self.network.clone(), self.params.clone(), self.pca.clone()).expect("trainer holds a valid model");
        m.options.feedback = self.cfg.feedback;
        m
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions { feedback: self.cfg.feedback, inject: None }
    }

    /// Per-sample losses and summed gradients for one batch.
    fn batch_gradients(&self, batch: &[Sample]) -> Result<(Vec<LossBreakdown>, Vec<Option<Tensor<f32>>>)> {
        let cfg = &self.cfg;
        let opts = self.forward_options();
        let per_sample = cfg.exec.map(batch, |_, smp| -> Result<(LossBreakdown, Vec<Option<Tensor<f32>>>)> {
            let mut g = Graph::<f32>::new();
            let lr = g.input(smp.lr.to_tensor());
            let out = self.network.forward_graph(&mut g, &self.params, lr, &opts);
            let loss = graph_loss(&mut g, &out, lr, &smp.targets(), &cfg.loss, cfg.network.variant, cfg.network.scale, cfg.down_mode())?;
            let b = loss.breakdown(&g, &cfg.loss);
            if !b.total.is_finite() {
                return Ok((b, Vec::new()));
            }
            Ok((b, g.backward(loss.total).into_params()))
        });
        let mut losses = Vec::with_capacity(batch.len());
        let mut sum: Vec<Option<Tensor<f32>>> = vec![None; self.params.len()];
        let scale = 1.0 / batch.len() as f32;
        for r in per_sample {
            let (b, grads) = r?;
            losses.push(b);
            for (acc, g) in sum.iter_mut().zip(grads) {
                let Some(mut g) = g else { continue };
                g.scale_assign(scale);
                match acc {
                    Some(a) => a.add_assign(&g),
                    None => *acc = Some(g),
                }
            }
        }
        Ok((losses, sum))
    }

    /// Runs the next step and returns the batch-mean loss.
    pub fn train_step(&mut self) -> Result<LossBreakdown> {
        let step = self.step;
        let batch = synth_batch(&self.cfg, step, &self.pool, self.pca.as_ref())?;
        let (losses, grads) = self.batch_gradients(&batch)?;
        let mean = LossBreakdown::mean(&losses);
        let grads_finite = grads.iter().flatten().all(|g| g.all_finite());
        if !mean.total.is_finite() || !grads_finite {
            let dump = self.dump_non_finite(step, &batch, &losses)?;
            return Err(Error::NonFinite { step, dump });
        }
        let lr = self.cfg.lr_schedule.lr(step, self.cfg.total_steps);
        self.adam.step(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(mean)
    }

    /// Writes the offending batch, its losses and per-stage renders.
    fn dump_non_finite(&self, step: usize, batch: &[Sample], losses: &[LossBreakdown]) -> Result<PathBuf> {
        let dir = self.cfg.checkpoint_dir.join(format!("nan-step-{step:04}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let model = self.model();
        for (i, smp) in batch.iter().enumerate() {
            save_image(&smp.hr.clamped(), dir.join(format!("sample{i}-hr.png")), BitDepth::Eight)?;
            save_image(&smp.lr.clamped(), dir.join(format!("sample{i}-lr.png")), BitDepth::Eight)?;
            let meta = KernelMeta { k: smp.kernel.size(), sigma_x: Some(smp.spec.sigma_x), sigma_y: Some(smp.spec.sigma_y), theta: Some(smp.spec.theta), down_mode: Some(self.cfg.down_mode()) };
            save_kernel(dir.join(format!("sample{i}-kernel.bin")), &smp.kernel, &meta)?;
            if let Ok(result) = model.forward(&smp.lr) {
                let traces = dir.join(format!("sample{i}-traces"));
                if self.cfg.network.variant == Variant::Kbpn {
                    crate::viz::visualize_traces(&result, &smp.lr, self.cfg.network.scale, self.cfg.down_mode(), &traces)?;
                }
            }
        }
        let path = dir.join("losses.json");
        fs::write(&path, serde_json::to_vec_pretty(losses)?).map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }

    /// Writes `step-NNNN` for the current position.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let dir = step_dir(&self.cfg.checkpoint_dir, self.step);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_params(dir.join(PARAMS_FILE), &self.params)?;
        let write = |name: &str, bytes: Vec<u8>| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(CONFIG_FILE, serde_json::to_vec_pretty(&self.cfg)?)?;
        write(RNG_FILE, serde_json::to_vec_pretty(&RngState { seed: self.cfg.seed, next_step: self.step })?)?;
        save_optim(dir.join(OPTIM_FILE), self.adam.t, &self.adam.m, &self.adam.v)?;
        if let Some(pca) = &self.pca {
            save_pca(dir.join(PCA_FILE), pca)?;
        }
        Ok(dir)
    }

    pub fn evaluate(&self) -> Result<Option<EvalRow>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        eval_hook(&self.model(), &self.val, &self.baseline, self.step, self.cfg.exec).map(Some)
    }

    /// Trains until `total_steps`, appending to the CSV logs in the
    /// checkpoint directory. Rows past the resume point are discarded first
    /// so a resumed log matches an uninterrupted one.
    pub fn run(&mut self, mut observer: impl FnMut(&Event)) -> Result<TrainReport> {
        let root = self.cfg.checkpoint_dir.clone();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut metrics = open_log(&root.join(METRICS_FILE), metrics_header(self.cfg.network.variant), self.step)?;
        let mut evals_log = open_log(&root.join(EVAL_FILE), EVAL_CSV_HEADER, self.step)?;
        let total = self.cfg.total_steps;
        let mut report = TrainReport { steps: 0, final_loss: None, evals: Vec::new(), checkpoint: root.clone() };
        while self.step < total {
            let step = self.step;
            let lr = self.cfg.lr_schedule.lr(step, total);
            let loss = self.train_step()?;
            writeln!(metrics, "{}", metrics_row(step, &loss)).map_err(|e| Error::io(root.join(METRICS_FILE), e))?;
            observer(&Event::Step { step, lr, loss });
            report.steps += 1;
            report.final_loss = Some(loss);
            let done = self.step;
            if self.cfg.eval_every > 0 && (done % self.cfg.eval_every == 0 || done == total) {
                if let Some(row) = self.evaluate()? {
                    writeln!(evals_log, "{}", row.csv()).map_err(|e| Error::io(root.join(EVAL_FILE), e))?;
                    observer(&Event::Eval(row));
                    report.evals.push(row);
                }
            }
            if (self.cfg.checkpoint_every > 0 && done % self.cfg.checkpoint_every == 0) || done == total {
                metrics.flush().map_err(|e| Error::io(root.join(METRICS_FILE), e))?;
                let dir = self.save_checkpoint()?;
                observer(&Event::Checkpoint(dir.clone()));
                report.checkpoint = dir;
            }
        }
        metrics.flush().map_err(|e| Error::io(root.join(METRICS_FILE), e))?;
        if report.steps == 0 {
            report.checkpoint = match latest_step_dir(&root)? {
                Some((_, d)) => d,
                None => self.save_checkpoint()?,
            };
        }
        Ok(report)
    }
}

/// Opens a CSV log for appending, keeping the header and the rows whose
/// leading step is below `keep_below`.
fn open_log(path: &Path, header: &str, keep_below: usize) -> Result<std::io::BufWriter<File>> {
    let mut kept = vec![header.to_string()];
    if keep_below > 0 && path.is_file() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io(path, e))?;
            let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if step.is_some_and(|s| s < keep_below) {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| Error::io(path, e))?;
    for line in &kept {
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(std::io::BufWriter::new(f))
}

/// Loads data per `cfg` and trains, resuming when a checkpoint exists.
pub fn train(cfg: TrainConfig, observer: impl FnMut(&Event)) -> Result<TrainReport> {
    let (pool, val) = load_pools(&cfg)?;
    let mut trainer = Trainer::resume_or_new(cfg, pool, &val)?;
    trainer.run(observer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_has_one_drop_at_three_quarters() {
        let s = LrSchedule::default();
        assert_eq!(s.drop_at(2000), 1500);
        assert_eq!(s.lr(1499, 2000), 1e-4);
        assert_eq!(s.lr(1500, 2000), 1e-5);
        let drops = (1..2000).filter(|&i| s.lr(i, 2000) != s.lr(i - 1, 2000)).count();
        assert_eq!(drops, 1);
    }
}
