//! Kernel renders, per-stage trace renders and the parameters-vs-stages
//! plot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degradation::{degrade, BlurKernel, DownMode};
use crate::error::{Error, Result};
use crate::imaging::{save_image, BitDepth, Image};
use crate::networks::{count_parameters, ForwardResult, NetworkConfig};

/// Upscaling factor of the side-by-side kernel composite.
const COMPOSITE_ZOOM: usize = 8;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Grayscale render of a kernel with its maximum entry mapped to white.
pub fn kernel_image(k: &BlurKernel) -> Image {
    let n = k.size();
    let max = k.data().iter().copied().fold(0.0, f64::max);
    let norm = if max > 0.0 { max } else { 1.0 };
    Image::from_fn(1, n, n, |_, y, x| k.get(y, x) / norm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSidecar {
    pub k: usize,
    pub l1: f64,
    pub max_estimate: f64,
    pub max_ground_truth: f64,
}

#[derive(Clone, Debug)]
pub struct KernelRenders {
    pub estimate: PathBuf,
    pub ground_truth: PathBuf,
    pub composite: PathBuf,
    pub sidecar: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "kernel".into());
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

/// Writes `<stem>-est.png` and `<stem>-gt.png` at native size, the zoomed
/// side-by-side composite at `out_path`, and `<stem>.json` with the L1 error.
pub fn visualize_kernel(k: &BlurKernel, k_gt: &BlurKernel, out_path: impl AsRef<Path>) -> Result<KernelRenders> {
    let out = out_path.as_ref();
    let l1 = k.mean_abs_diff(k_gt)?;
    let (a, b) = (kernel_image(k), kernel_image(k_gt));
    let n = k.size();
    let z = COMPOSITE_ZOOM;
    let gap = z;
    let comp = Image::from_fn(1, n * z, 2 * n * z + gap, |_, y, x| {
        if x < n * z {
            a.get(0, y / z, x / z)
        } else if x >= n * z + gap {
            b.get(0, y / z, (x - n * z - gap) / z)
        } else {
            1.0
        }
    });
    let renders = KernelRenders {
        estimate: with_suffix(out, "-est", "png"),
        ground_truth: with_suffix(out, "-gt", "png"),
        composite: out.to_path_buf(),
        sidecar: with_suffix(out, "", "json"),
    };
    save_image(&a, &renders.estimate, BitDepth::Eight)?;
    save_image(&b, &renders.ground_truth, BitDepth::Eight)?;
    save_image(&comp, &renders.composite, BitDepth::Eight)?;
    let max = |k: &BlurKernel| k.data().iter().copied().fold(0.0, f64::max);
    let sidecar = KernelSidecar { k: n, l1, max_estimate: max(k), max_ground_truth: max(k_gt) };
    write_file(&renders.sidecar, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(renders)
}

/// Mean over channels of `|x|`, one plane.
fn mean_abs_plane(img: &Image) -> Vec<f64> {
    let (c, h, w) = img.shape();
    (0..h * w).map(|i| (0..c).map(|ch| img.plane(ch)[i].abs()).sum::<f64>() / c as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    /// Mean `|R_t|` per stage.
    pub residual_mean_abs: Vec<f64>,
    /// Mean `|R|` of the final output.
    pub final_residual_mean_abs: f64,
    /// Residual magnitude rendered as white.
    pub residual_scale: f64,
    pub features: Vec<PathBuf>,
    pub residuals: Vec<PathBuf>,
    pub final_residual: PathBuf,
}

/// Renders `F_t` (channel mean, min-max normalised per stage) and `|R_t|`
/// for every stage plus `|R|` of the final output, all residuals sharing one
/// scale whose maximum maps to white. Writes `traces.json` alongside.
pub fn visualize_traces(result: &ForwardResult, lr: &Image, scale: usize, mode: DownMode, out_dir: impl AsRef<Path>) -> Result<TraceSummary> {
    let dir = out_dir.as_ref();
    let residuals: Vec<&Image> = result
        .traces
        .iter()
        .map(|t| t.residual.as_ref())
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Invalid("stage residuals exist only for kbpn results".into()))?;
    let kernel = result.kernel.as_ref().ok_or_else(|| Error::Invalid("kbpn result without a kernel".into()))?;
    if residuals.is_empty() {
        return Err(Error::Invalid("result has no stages".into()));
    }
    let final_r = {
        let relr = degrade(&result.sr, kernel, scale, mode)?;
        let data = relr.data().iter().zip(lr.data()).map(|(a, b)| a - b).collect();
        let (c, h, w) = lr.shape();
        Image::new(c, h, w, data)?
    };
    let planes: Vec<Vec<f64>> = residuals.iter().map(|r| mean_abs_plane(r)).chain([mean_abs_plane(&final_r)]).collect();
    let max = planes.iter().flatten().copied().fold(0.0, f64::max);
    let norm = if max > 0.0 { max } else { 1.0 };
    let (_, h, w) = lr.shape();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut residual_paths = Vec::new();
    for (i, plane) in planes.iter().enumerate() {
        let img = Image::new(1, h, w, plane.iter().map(|v| v / norm).collect())?;
        let path = if i < residuals.len() { dir.join(format!("residual-t{}.png", i + 1)) } else { dir.join("residual-final.png") };
        save_image(&img, &path, BitDepth::Eight)?;
        residual_paths.push(path);
    }
    let final_residual = residual_paths.pop().expect("final render");
    let mut feature_paths = Vec::new();
    for t in &result.traces {
        let (c, fh, fw) = t.features.dims3();
        let mean: Vec<f64> = (0..fh * fw).map(|i| (0..c).map(|ch| t.features.channel(ch)[i]).sum::<f64>() / c as f64).collect();
        let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let img = Image::new(1, fh, fw, mean.iter().map(|v| (v - lo) / span).collect())?;
        let path = dir.join(format!("feature-t{}.png", t.t));
        save_image(&img, &path, BitDepth::Eight)?;
        feature_paths.push(path);
    }
    let mean = |p: &Vec<f64>| p.iter().sum::<f64>() / p.len() as f64;
    let summary = TraceSummary {
        residual_mean_abs: planes[..residuals.len()].iter().map(mean).collect(),
        final_residual_mean_abs: mean(planes.last().expect("final plane")),
        residual_scale: max,
        features: feature_paths,
        residuals: residual_paths,
        final_residual,
    };
    write_file(&dir.join("traces.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// One row of the parameters-vs-stages table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub stages: usize,
    pub params: usize,
    pub psnr: Option<f64>,
}

pub const PARAMS_CSV_HEADER: &str = "stages,params,psnr";

pub fn params_csv(rows: &[ParamRow]) -> String {
    let mut s = format!("{PARAMS_CSV_HEADER}\n");
    for r in rows {
        let p = r.psnr.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{p}", r.stages, r.params);
    }
    s
}

pub fn parse_params_csv(text: &str) -> Result<Vec<ParamRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(PARAMS_CSV_HEADER) {
        return Err(Error::Invalid(format!("expected header {PARAMS_CSV_HEADER:?}")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Invalid(format!("malformed row {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(ParamRow {
                stages: f[0].parse().map_err(|_| bad())?,
                params: f[1].parse().map_err(|_| bad())?,
                psnr: if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) },
            })
        })
        .collect()
}

/// SVG line plot of parameter count (millions) against stage count,
/// rendered only from the CSV text so the plot is reproducible from it.
pub fn render_params_plot(csv: &str) -> Result<String> {
    let rows = parse_params_csv(csv)?;
    if rows.is_empty() {
        return Err(Error::Invalid("no rows to plot".into()));
    }
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.stages as f64, r.params as f64 / 1e6)).collect();
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let ymax = pts.iter().map(|p| p.1).fold(0.0, f64::max);
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (640, 420)).into_drawing_area();
        let plot_err = |e: &dyn std::fmt::Display| Error::Invalid(format!("plot: {e}"));
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Parameters vs. stages", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d((x0 - 0.5)..(x1 + 0.5), 0.0..(ymax * 1.1).max(1e-6))
            .map_err(|e| plot_err(&e))?;
        chart.configure_mesh().x_desc("stages T").y_desc("parameters (M)").draw().map_err(|e| plot_err(&e))?;
        chart.draw_series(LineSeries::new(pts.iter().copied(), &BLUE)).map_err(|e| plot_err(&e))?;
        chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, BLUE.filled()))).map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
    }
    Ok(svg)
}

#[derive(Clone, Debug)]
pub struct ParamsPlot {
    pub rows: Vec<ParamRow>,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

/// Counts parameters of `base` for every stage count, writes
/// `params_vs_stages.csv` and the SVG rendered from it. `psnr[i]`, when
/// given, annotates `stages[i]`.
pub fn plot_params_vs_stages(base: &NetworkConfig, stages: &[usize], psnr: &[Option<f64>], out_dir: impl AsRef<Path>) -> Result<ParamsPlot> {
    if stages.is_empty() {
        return Err(Error::Invalid("need at least one stage count".into()));
    }
    let rows = stages
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let cfg = NetworkConfig { stages: t, ..base.clone() };
            Ok(ParamRow { stages: t, params: count_parameters(&cfg)?, psnr: psnr.get(i).copied().flatten() })
        })
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir.as_ref();
    let csv_text = params_csv(&rows);
    let csv = dir.join("params_vs_stages.csv");
    let svg = dir.join("params_vs_stages.svg");
    write_file(&csv, &csv_text)?;
    write_file(&svg, render_params_plot(&csv_text)?)?;
    Ok(ParamsPlot { rows, csv, svg })
}
