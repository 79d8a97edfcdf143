//! Distortion metrics and the fixed-blur benchmark harness.
//!
//! Convention: metrics are computed on BT.601 luma with `crop_border`
//! pixels removed from every side (default: the scale factor).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::{degrade, gaussian_kernel, BlurKernel, DownMode, GaussianSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imaging::{load_image, rgb_to_y, Image};

/// Value reported when the two images are identical.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Crops `crop` pixels per side and converts three-channel images to luma
/// when requested.
pub fn prepare(img: &Image, crop: usize, luma_only: bool) -> Result<Image> {
    let (_, h, w) = img.shape();
    if 2 * crop >= h || 2 * crop >= w {
        return Err(Error::Shape(format!("crop {crop} leaves nothing of a {h}x{w} image")));
    }
    let img = img.crop(crop, crop, h - 2 * crop, w - 2 * crop)?;
    if luma_only && img.channels() == 3 {
        rgb_to_y(&img)
    } else {
        Ok(img)
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, crop: usize, luma_only: bool) -> Result<f64> {
    same_shape(a, b)?;
    let (a, b) = (prepare(a, crop, luma_only)?, prepare(b, crop, luma_only)?);
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut t = [0.0; SSIM_WINDOW];
    for (i, v) in t.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable "valid" filtering of one plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for (ox, out) in rows[y * ow..(y + 1) * ow].iter_mut().enumerate() {
            *out = taps.iter().zip(&src[ox..ox + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for (i, &t) in taps.iter().enumerate() {
            let src = &rows[(oy + i) * ow..(oy + i + 1) * ow];
            for (o, &v) in out[oy * ow..(oy + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = ssim_taps();
    let f = |x: &[f64]| filter_valid(x, h, w, &taps);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, mu_b) = (f(a), f(b));
    let (e_aa, e_bb, e_ab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let (va, vb, cov) = (e_aa[i] - ma * ma, e_bb[i] - mb * mb, e_ab[i] - ma * mb);
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Mean single-scale SSIM over valid window positions, averaged over
/// channels.
pub fn ssim(a: &Image, b: &Image, crop: usize, luma_only: bool) -> Result<f64> {
    same_shape(a, b)?;
    let (a, b) = (prepare(a, crop, luma_only)?, prepare(b, crop, luma_only)?);
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    Ok((0..c).map(|ch| ssim_plane(a.plane(ch), b.plane(ch), h, w)).sum::<f64>() / c as f64)
}

/// Output of a super-resolver on one LR image.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub sr: Image,
    pub kernel: Option<BlurKernel>,
}

/// Anything that maps an LR image to an SR image at a fixed scale.
pub trait SuperResolver: Sync {
    fn scale(&self) -> usize;
    fn super_resolve(&self, lr: &Image) -> Result<Prediction>;
}

/// Fixed-blur evaluation protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub dataset_dir: PathBuf,
    pub blurs: Vec<GaussianSpec>,
    pub scale: usize,
    pub kernel_size: usize,
    pub down_mode: DownMode,
    /// Defaults to the scale factor when absent.
    pub crop_border: Option<usize>,
    pub luma_only: bool,
}

impl BenchSpec {
    pub fn crop(&self) -> usize {
        self.crop_border.unwrap_or(self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blurs.is_empty() {
            return Err(Error::Config("benchmark needs at least one blur condition".into()));
        }
        if self.scale == 0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        Ok(())
    }
}

/// Mean scores for one blur condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
    pub images: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean kernel L1 error; absent for models without a kernel estimate.
    pub kernel_l1: Option<f64>,
}

impl BenchRow {
    pub fn label(&self) -> String {
        if self.sigma_x == self.sigma_y {
            format!("sigma={}", self.sigma_x)
        } else {
            format!("sigma_x={}/sigma_y={}", self.sigma_x, self.sigma_y)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

pub const BENCH_CSV_HEADER: &str = "sigma_x,sigma_y,theta,images,psnr,ssim,kernel_l1";

impl BenchTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            let kl = r.kernel_l1.map(|v| format!("{v:.8}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{:.6},{:.6},{kl}", r.sigma_x, r.sigma_y, r.theta, r.images, r.psnr, r.ssim);
        }
        s
    }

    /// Plain-text table with one row per condition.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<28} {:>10} {:>8} {:>12}\n", "blur", "PSNR (dB)", "SSIM", "kernel L1");
        for r in &self.rows {
            let kl = r.kernel_l1.map(|v| format!("{v:.3e}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{:<28} {:>10.2} {:>8.4} {:>12}", r.label(), r.psnr, r.ssim, kl);
        }
        s
    }
}

/// Sorted PNG files in a directory.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn load_folder(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    let dir = dir.as_ref();
    let files = list_images(dir)?;
    if files.is_empty() {
        return Err(Error::Invalid(format!("no PNG images in {}", dir.display())));
    }
    files.iter().map(load_image).collect()
}

/// Scores of one image under one condition.
struct ImageScore {
    psnr: f64,
    ssim: f64,
    kernel_l1: Option<f64>,
}

/// Degrades every HR image with each fixed kernel, super-resolves it and
/// averages the scores. Images are cropped to a multiple of the scale.
pub fn benchmark_images<M: SuperResolver>(model: &M, images: &[Image], spec: &BenchSpec, exec: Exec) -> Result<BenchTable> {
    spec.validate()?;
    if images.is_empty() {
        return Err(Error::Invalid("benchmark needs at least one image".into()));
    }
    if model.scale() != spec.scale {
        return Err(Error::Config(format!("model scale {} differs from benchmark scale {}", model.scale(), spec.scale)));
    }
    let hrs = images.iter().map(|im| im.crop_to_multiple(spec.scale)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(spec.blurs.len());
    for blur in &spec.blurs {
        let kernel = gaussian_kernel(blur, spec.kernel_size)?;
        let scores = exec.map(&hrs, |_, hr| -> Result<ImageScore> {
            let lr = degrade(hr, &kernel, spec.scale, spec.down_mode)?;
            let pred = model.super_resolve(&lr)?;
            let sr = pred.sr.clamped();
            Ok(ImageScore {
                psnr: psnr(&sr, hr, spec.crop(), spec.luma_only)?,
                ssim: ssim(&sr, hr, spec.crop(), spec.luma_only)?,
                kernel_l1: pred.kernel.map(|k| k.mean_abs_diff(&kernel)).transpose()?,
            })
        });
        let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        let kernel_l1 = scores.iter().map(|s| s.kernel_l1).sum::<Option<f64>>().map(|v| v / n);
        rows.push(BenchRow {
            sigma_x: blur.sigma_x,
            sigma_y: blur.sigma_y,
            theta: blur.theta,
            images: scores.len(),
            psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
            ssim: scores.iter().map(|s| s.ssim).sum::<f64>() / n,
            kernel_l1,
        });
    }
    Ok(BenchTable { rows })
}

pub fn run_benchmark<M: SuperResolver>(model: &M, spec: &BenchSpec, exec: Exec) -> Result<BenchTable> {
    benchmark_images(model, &load_folder(&spec.dataset_dir)?, spec, exec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = ssim_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn twenty_db_and_cap() {
        let a = Image::filled(1, 8, 8, 0.0);
        let b = Image::filled(1, 8, 8, 0.1);
        assert!((psnr(&a, &b, 0, false).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 0, false).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &Image::filled(1, 8, 9, 0.0), 0, false).is_err());
    }

    /// Mean contrast-structure factor `(2 cov + c2) / (va + vb + c2)`.
    fn contrast_structure(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let taps = ssim_taps();
        let f = |x: &[f64]| filter_valid(x, h, w, &taps);
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let (mu_a, mu_b) = (f(a), f(b));
        let (e_aa, e_bb, e_ab) = (f(&prod(a, a)), f(&prod(b, b)), f(&prod(a, b)));
        let c2 = SSIM_K2 * SSIM_K2;
        let n = mu_a.len();
        (0..n)
            .map(|i| {
                let (va, vb) = (e_aa[i] - mu_a[i] * mu_a[i], e_bb[i] - mu_b[i] * mu_b[i]);
                (2.0 * (e_ab[i] - mu_a[i] * mu_b[i]) + c2) / (va + vb + c2)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn shift_moves_only_the_luminance_factor() {
        let (h, w) = (20, 20);
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
        let b: Vec<f64> = (0..h * w).map(|i| ((i * 53 % 97) as f64) / 96.0).collect();
        let shift = |x: &[f64]| x.iter().map(|v| v + 0.3).collect::<Vec<_>>();
        let cs = contrast_structure(&a, &b, h, w);
        assert!((contrast_structure(&shift(&a), &shift(&b), h, w) - cs).abs() < 1e-6);
        // Full SSIM is not shift invariant: two flat planes 0.1 apart.
        let (p, q) = (Image::filled(1, 16, 16, 0.0), Image::filled(1, 16, 16, 0.1));
        let (ps, qs) = (Image::filled(1, 16, 16, 0.5), Image::filled(1, 16, 16, 0.6));
        let gap = ssim(&ps, &qs, 0, false).unwrap() - ssim(&p, &q, 0, false).unwrap();
        assert!(gap > 0.9, "{gap}");
    }
}
