//! Desk-scale training experiments and their train-set reports.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::degradation::{bicubic_upsample, degrade, gaussian_kernel, GaussianSpec, KernelDistribution};
use crate::error::{Error, Result};
use crate::eval::{psnr, BenchSpec, benchmark_images};
use crate::exec::Exec;
use crate::imaging::Image;
use crate::model::Model;
use crate::networks::{NetworkConfig, Variant};
use crate::synthetic::synthetic_pool;
use crate::training::{baseline_kernel, Event, LrSchedule, SyntheticData, TrainConfig, Trainer};

/// Side of the synthetic HR training images.
pub const DESK_IMAGE_SIZE: usize = 96;
/// Blur used for the fixed-kernel overfit and the baseline comparison.
pub const DESK_SIGMA: f64 = 2.6;
/// Smallest sigma of the training range, standing in for "no blur".
pub const SHARP_SIGMA: f64 = 0.2;

/// KBPN T=3, 32 channels, k=21, s=4, fixed sigma 2.6, batch 4, 2000 steps.
pub fn overfit_config(seed: u64, checkpoint_dir: &Path) -> TrainConfig {
    TrainConfig {
        network: NetworkConfig { variant: Variant::Kbpn, stages: 3, base_channels: 32, kernel_size: 21, scale: 4, ..NetworkConfig::default() },
        batch_size: 4,
        total_steps: 2000,
        lr_schedule: LrSchedule { initial: 1e-3, drop_to: 1e-4, drop_step: None },
        kernels: KernelDistribution::fixed(DESK_SIGMA),
        seed,
        lr_patch_size: 16,
        synthetic: SyntheticData { train_images: 4, val_images: 0, size: DESK_IMAGE_SIZE, seed: Some(0) },
        checkpoint_dir: checkpoint_dir.to_path_buf(),
        checkpoint_every: 0,
        eval_every: 0,
        val_samples: 0,
        ..TrainConfig::default()
    }
}

/// Scores of a model on its own training images at one fixed blur.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSetReport {
    pub psnr: f64,
    pub bicubic_psnr: f64,
    pub kernel_l1: Option<f64>,
    pub baseline_kernel_l1: f64,
    /// Mean `|R_1|` and `|R_T|` over the images (kbpn only).
    pub residual_first: Option<f64>,
    pub residual_last: Option<f64>,
}

fn mean_abs(img: &Image) -> f64 {
    img.data().iter().map(|v| v.abs()).sum::<f64>() / img.data().len() as f64
}

/// Degrades each image with the fixed kernel and compares the model against
/// bicubic upsampling under the metric convention.
pub fn train_set_report(model: &Model, images: &[Image], spec: &GaussianSpec) -> Result<TrainSetReport> {
    if images.is_empty() {
        return Err(Error::Invalid("no images".into()));
    }
    let cfg = model.config();
    let s = cfg.scale;
    let kernel = gaussian_kernel(spec, cfg.kernel_size)?;
    let baseline = baseline_kernel(cfg)?;
    let n = images.len() as f64;
    let mut r = TrainSetReport { psnr: 0.0, bicubic_psnr: 0.0, kernel_l1: None, baseline_kernel_l1: 0.0, residual_first: None, residual_last: None };
    for img in images {
        let hr = img.crop_to_multiple(s)?;
        let lr = degrade(&hr, &kernel, s, cfg.down_mode)?;
        let out = model.forward(&lr)?;
        r.psnr += psnr(&out.sr.clamped(), &hr, s, true)? / n;
        r.bicubic_psnr += psnr(&bicubic_upsample(&lr, s).clamped(), &hr, s, true)? / n;
        r.baseline_kernel_l1 += baseline.mean_abs_diff(&kernel)? / n;
        if let Some(k) = model.kernel_estimate(&out)? {
            *r.kernel_l1.get_or_insert(0.0) += k.mean_abs_diff(&kernel)? / n;
        }
        let res: Vec<f64> = out.traces.iter().filter_map(|t| t.residual.as_ref().map(mean_abs)).collect();
        if let (Some(first), Some(last)) = (res.first(), res.last()) {
            *r.residual_first.get_or_insert(0.0) += first / n;
            *r.residual_last.get_or_insert(0.0) += last / n;
        }
    }
    Ok(r)
}

/// A finished desk run.
#[derive(Clone, Debug)]
pub struct DeskRun {
    pub model: Model,
    pub images: Vec<Image>,
    pub seconds: f64,
    pub final_total_loss: f64,
}

/// Trains `cfg` on its synthetic pool, reporting progress every
/// `log_every` steps through `log`.
pub fn run_desk(cfg: TrainConfig, log_every: usize, mut log: impl FnMut(&str)) -> Result<DeskRun> {
    let d = cfg.synthetic;
    let images = synthetic_pool(d.train_images, d.size, d.size, d.seed.unwrap_or(cfg.seed));
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg, images.clone(), &[])?;
    let report = trainer.run(|e| {
        if let Event::Step { step, lr, loss } = e {
            if log_every > 0 && (step + 1) % log_every == 0 {
                log(&format!("step {:>5} lr {lr:.1e} total {:.5e} sr {:.5e} k {:.5e} lr-loss {:.5e}", step + 1, loss.total, loss.l_sr, loss.l_kernel, loss.l_lr));
            }
        }
    })?;
    Ok(DeskRun {
        model: trainer.model(),
        images,
        seconds: start.elapsed().as_secs_f64(),
        final_total_loss: report.final_loss.map_or(f64::NAN, |l| l.total),
    })
}

/// dbpn_bl desk config trained either on the full sigma range or on
/// near-sharp kernels only.
pub fn baseline_config(seed: u64, mixed: bool, checkpoint_dir: &Path) -> TrainConfig {
    let kernels = if mixed { KernelDistribution::default() } else { KernelDistribution::fixed(SHARP_SIGMA) };
    TrainConfig {
        network: NetworkConfig { variant: Variant::DbpnBl, stages: 3, base_channels: 32, kernel_size: 21, scale: 4, ..NetworkConfig::default() },
        kernels,
        synthetic: SyntheticData { train_images: 16, val_images: 0, size: DESK_IMAGE_SIZE, seed: Some(0) },
        ..overfit_config(seed, checkpoint_dir)
    }
}

/// Mean PSNR of `model` on `images` blurred at `sigma`.
pub fn psnr_at_sigma(model: &Model, images: &[Image], sigma: f64) -> Result<f64> {
    let cfg = model.config();
    let spec = BenchSpec {
        dataset_dir: Default::default(),
        blurs: vec![GaussianSpec::isotropic(sigma)],
        scale: cfg.scale,
        kernel_size: cfg.kernel_size,
        down_mode: cfg.down_mode,
        crop_border: None,
        luma_only: true,
    };
    Ok(benchmark_images(model, images, &spec, Exec::Sequential)?.rows[0].psnr)
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
