//! Blur kernels, the blur-then-downsample degradation operator, low-rank
//! kernel codes and degradation-map stretching.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::imaging::Image;
use crate::kernels;
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Default kernel side length.
pub const DEFAULT_KERNEL_SIZE: usize = 21;
/// Default kernel-code dimension.
pub const DEFAULT_CODE_DIM: usize = 9;
/// Sum-to-one tolerance for a valid kernel.
pub const KERNEL_SUM_TOL: f64 = 1e-9;

/// A `k x k` nonnegative kernel summing to one, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BlurKernel {
    k: usize,
    data: Vec<f64>,
}

impl BlurKernel {
    pub fn new(k: usize, data: Vec<f64>) -> Result<Self> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::Invalid(format!("kernel size {k} must be odd")));
        }
        if data.len() != k * k {
            return Err(Error::Shape(format!("{} values for a {k}x{k} kernel", data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::Invalid(format!("kernel entry {v} is negative or non-finite")));
        }
        let s: f64 = data.iter().sum();
        if (s - 1.0).abs() > KERNEL_SUM_TOL {
            return Err(Error::Invalid(format!("kernel sums to {s}, not 1")));
        }
        Ok(Self { k, data })
    }

    /// Clamps negatives to zero and rescales to unit sum.
    pub fn normalized(k: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            if !v.is_finite() {
                return Err(Error::Invalid("non-finite kernel entry".into()));
            }
            *v = v.max(0.0);
        }
        let s: f64 = data.iter().sum();
        if s <= 0.0 {
            return Err(Error::Invalid("kernel has no positive mass".into()));
        }
        data.iter_mut().for_each(|v| *v /= s);
        Self::new(k, data)
    }

    pub fn delta(k: usize) -> Result<Self> {
        let mut data = vec![0.0; k * k];
        data[(k / 2) * k + k / 2] = 1.0;
        Self::new(k, data)
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.k + col]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.k * self.k], self.data.iter().map(|&v| T::of(v)).collect())
    }

    /// Mean absolute difference over the `k^2` entries.
    pub fn mean_abs_diff(&self, other: &BlurKernel) -> Result<f64> {
        if self.k != other.k {
            return Err(Error::Shape(format!("kernel sizes {} and {} differ", self.k, other.k)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64)
    }

    /// Max deviation from point symmetry `K(i, j) = K(k-1-i, k-1-j)`.
    pub fn point_asymmetry(&self) -> f64 {
        let n = self.data.len();
        (0..n).map(|i| (self.data[i] - self.data[n - 1 - i]).abs()).fold(0.0, f64::max)
    }
}

/// Parameters of a rotated anisotropic Gaussian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub theta: f64,
}

impl GaussianSpec {
    pub fn isotropic(sigma: f64) -> Self {
        Self { sigma_x: sigma, sigma_y: sigma, theta: 0.0 }
    }
}

/// Samples `exp(-u^T S^-1 u / 2)` at integer offsets from the centre, with
/// `S = R(theta) diag(sx^2, sy^2) R(theta)^T`, then normalises to sum 1.
/// Offsets are `u = (column - c, row - c)`.
pub fn gaussian_kernel(spec: &GaussianSpec, k: usize) -> Result<BlurKernel> {
    if !(spec.sigma_x > 0.0 && spec.sigma_y > 0.0) || !spec.sigma_x.is_finite() || !spec.sigma_y.is_finite() {
        return Err(Error::Invalid(format!("sigmas must be positive, got {} and {}", spec.sigma_x, spec.sigma_y)));
    }
    if k % 2 == 0 {
        return Err(Error::Invalid(format!("kernel size {k} must be odd")));
    }
    let (s, c) = spec.theta.sin_cos();
    let (ix, iy) = (1.0 / (spec.sigma_x * spec.sigma_x), 1.0 / (spec.sigma_y * spec.sigma_y));
    // S^-1 = R diag(ix, iy) R^T
    let a = c * c * ix + s * s * iy;
    let b = c * s * (ix - iy);
    let d = s * s * ix + c * c * iy;
    let r = (k / 2) as f64;
    let mut data = Vec::with_capacity(k * k);
    for row in 0..k {
        let y = row as f64 - r;
        for col in 0..k {
            let x = col as f64 - r;
            data.push((-0.5 * (a * x * x + 2.0 * b * x * y + d * y * y)).exp());
        }
    }
    let total: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= total);
    BlurKernel::new(k, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownMode {
    /// Keep every `s`-th sample starting at index 0.
    Decimate,
    /// Mean over each `s x s` block.
    #[default]
    Area,
    /// Antialiased bicubic (Keys, a = -0.5) with symmetric boundaries.
    Bicubic,
}

impl std::str::FromStr for DownMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decimate" => Ok(Self::Decimate),
            "area" => Ok(Self::Area),
            "bicubic" => Ok(Self::Bicubic),
            other => Err(Error::Invalid(format!("unknown down mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DownMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Decimate => "decimate",
            Self::Area => "area",
            Self::Bicubic => "bicubic",
        })
    }
}

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        1.5 * a * a * a - 2.5 * a * a + 1.0
    } else if a <= 2.0 {
        -0.5 * a * a * a + 2.5 * a * a - 4.0 * a + 2.0
    } else {
        0.0
    }
}

/// Mirror with edge repetition (`-1 -> 0`, `n -> n - 1`).
fn symmetric_index(p: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let q = p.rem_euclid(period);
    (if q >= n as isize { period - 1 - q } else { q }) as usize
}

/// Bicubic resampling matrix `[out_len, in_len]` for a scale of
/// `out_len / in_len`, antialiased when shrinking.
fn bicubic_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let mut m = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        // 1-based centre in input coordinates.
        let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
        let left = (u - width / 2.0).floor() as isize;
        let taps = width.ceil() as isize + 2;
        let mut row = vec![0.0; in_len];
        let mut total = 0.0;
        for p in 0..taps {
            let idx = left + p;
            let wgt = kscale * cubic(kscale * (u - idx as f64));
            if wgt != 0.0 {
                row[symmetric_index(idx - 1, in_len)] += wgt;
                total += wgt;
            }
        }
        for (dst, v) in m[i * in_len..(i + 1) * in_len].iter_mut().zip(row) {
            *dst = v / total;
        }
    }
    m
}

/// Downsampling matrix `[n / s, n]` for one axis.
pub fn down_matrix(n: usize, s: usize, mode: DownMode) -> Tensor<f64> {
    assert!(s >= 1 && n % s == 0, "axis length {n} not divisible by {s}");
    let o = n / s;
    let data = match mode {
        DownMode::Decimate => {
            let mut m = vec![0.0; o * n];
            for i in 0..o {
                m[i * n + i * s] = 1.0;
            }
            m
        }
        DownMode::Area => {
            let mut m = vec![0.0; o * n];
            for i in 0..o {
                m[i * n + i * s..i * n + (i + 1) * s].fill(1.0 / s as f64);
            }
            m
        }
        DownMode::Bicubic => {
            if s == 1 {
                let mut m = vec![0.0; n * n];
                (0..n).for_each(|i| m[i * n + i] = 1.0);
                m
            } else {
                bicubic_matrix(n, o)
            }
        }
    };
    Tensor::from_vec(&[o, n], data)
}

/// Per-axis resampling operators for degrading an `h x w` image by `s`.
pub fn down_operators<T: Scalar>(h: usize, w: usize, s: usize, mode: DownMode) -> (Arc<Tensor<T>>, Arc<Tensor<T>>) {
    (Arc::new(down_matrix(h, s, mode).cast()), Arc::new(down_matrix(w, s, mode).cast()))
}

/// Bicubic upsampling by an integer factor.
pub fn bicubic_upsample(img: &Image, s: usize) -> Image {
    let (c, h, w) = img.shape();
    let rows = Tensor::from_vec(&[h * s, h], bicubic_matrix(h, h * s));
    let cols = Tensor::from_vec(&[w * s, w], bicubic_matrix(w, w * s));
    let out = Image::from_tensor(&kernels::resample(&img.to_tensor::<f64>(), &rows, &cols));
    debug_assert_eq!(out.channels(), c);
    out
}

fn check_divisible(h: usize, w: usize, s: usize) -> Result<()> {
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by scale {s}")));
    }
    Ok(())
}

/// Blurs every channel with `kernel` (reflect padding, same size) and
/// downsamples by `s` with `mode`.
pub fn degrade(hr: &Image, kernel: &BlurKernel, s: usize, mode: DownMode) -> Result<Image> {
    let (_, h, w) = hr.shape();
    check_divisible(h, w, s)?;
    let blurred = kernels::blur_reflect(&hr.to_tensor::<f64>(), kernel.data());
    let (rows, cols) = down_operators::<f64>(h, w, s, mode);
    Ok(Image::from_tensor(&kernels::resample(&blurred, &rows, &cols)))
}

/// Downsampling without blur.
pub fn downsample(img: &Image, s: usize, mode: DownMode) -> Result<Image> {
    let (_, h, w) = img.shape();
    check_divisible(h, w, s)?;
    let (rows, cols) = down_operators::<f64>(h, w, s, mode);
    Ok(Image::from_tensor(&kernels::resample(&img.to_tensor::<f64>(), &rows, &cols)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurFamily {
    #[default]
    Isotropic,
    Anisotropic,
}

/// Distribution of training blur kernels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelDistribution {
    pub family: BlurFamily,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for KernelDistribution {
    fn default() -> Self {
        Self { family: BlurFamily::Isotropic, sigma_min: 0.2, sigma_max: 4.0 }
    }
}

impl KernelDistribution {
    pub fn fixed(sigma: f64) -> Self {
        Self { family: BlurFamily::Isotropic, sigma_min: sigma, sigma_max: sigma }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min <= self.sigma_max && self.sigma_max <= 10.0) {
            return Err(Error::Invalid(format!(
                "sigma range [{}, {}] must lie in (0, 10]",
                self.sigma_min, self.sigma_max
            )));
        }
        Ok(())
    }

    fn uniform<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.sigma_max > self.sigma_min {
            rng.random_range(self.sigma_min..self.sigma_max)
        } else {
            self.sigma_min
        }
    }

    /// Isotropic: one sigma; anisotropic: independent sigmas and
    /// `theta ~ U[0, pi)`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> GaussianSpec {
        match self.family {
            BlurFamily::Isotropic => GaussianSpec::isotropic(self.uniform(rng)),
            BlurFamily::Anisotropic => {
                let sigma_x = self.uniform(rng);
                let sigma_y = self.uniform(rng);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                GaussianSpec { sigma_x, sigma_y, theta }
            }
        }
    }

    /// `n` kernels drawn with a fixed seed.
    pub fn draw_kernels(&self, k: usize, n: usize, seed: u64, exec: Exec) -> Result<Vec<BlurKernel>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs: Vec<GaussianSpec> = (0..n).map(|_| self.sample(&mut rng)).collect();
        exec.map(&specs, |_, s| gaussian_kernel(s, k)).into_iter().collect()
    }

    /// Sample mean of `n` kernels; the "mean kernel" baseline.
    pub fn mean_kernel(&self, k: usize, n: usize, seed: u64) -> Result<BlurKernel> {
        let kernels = self.draw_kernels(k, n, seed, Exec::default())?;
        let mut acc = vec![0.0; k * k];
        for kern in &kernels {
            acc.iter_mut().zip(kern.data()).for_each(|(a, v)| *a += v);
        }
        BlurKernel::normalized(k, acc)
    }
}

/// Low-dimensional kernel representation.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelCode {
    pub vector: Vec<f64>,
}

impl KernelCode {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    /// Mean absolute difference over the code entries.
    pub fn mean_abs_diff(&self, other: &KernelCode) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!("code dimensions {} and {} differ", self.dim(), other.dim())));
        }
        Ok(self.vector.iter().zip(&other.vector).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.dim() as f64)
    }
}

/// PCA basis over flattened kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelPca {
    pub k: usize,
    pub a: usize,
    pub seed: Option<u64>,
    /// Flattened mean kernel, `k^2`.
    pub mean: Vec<f64>,
    /// Orthonormal rows, `a x k^2`.
    pub basis: Vec<f64>,
    /// Variance captured by each basis row, descending.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl KernelPca {
    /// Fits the top-`a` principal directions. Each direction is signed so
    /// its largest-magnitude component is positive.
    pub fn fit(samples: &[BlurKernel], a: usize) -> Result<Self> {
        if samples.is_empty() || samples.len() < a || a == 0 {
            return Err(Error::Invalid(format!("need at least {a} kernels to fit {a} components, got {}", samples.len())));
        }
        let k = samples[0].size();
        if samples.iter().any(|s| s.size() != k) {
            return Err(Error::Shape("kernels of different sizes".into()));
        }
        let d = k * k;
        if a > d {
            return Err(Error::Invalid(format!("code dimension {a} exceeds k^2 = {d}")));
        }
        let n = samples.len();
        let mut mean = vec![0.0; d];
        for s in samples {
            mean.iter_mut().zip(s.data()).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut centered = Vec::with_capacity(n * d);
        for s in samples {
            centered.extend(s.data().iter().zip(&mean).map(|(v, m)| v - m));
        }
        let mut cov = vec![0.0; d * d];
        let x = MatRef::new(&centered, n, d);
        let denom = (n.max(2) - 1) as f64;
        gemm(1.0 / denom, x.t(), x, 0.0, &mut cov);
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
        let total_variance: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut basis = Vec::with_capacity(a * d);
        let mut explained_variance = Vec::with_capacity(a);
        for &idx in order.iter().take(a) {
            let col = eig.eigenvectors.column(idx);
            let pivot = (0..d).max_by(|&p, &q| col[p].abs().total_cmp(&col[q].abs()).then(q.cmp(&p))).unwrap();
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            basis.extend(col.iter().map(|v| v * sign));
            explained_variance.push(eig.eigenvalues[idx].max(0.0));
        }
        Ok(Self { k, a, seed: None, mean, basis, explained_variance, total_variance })
    }

    /// Fits on `n` kernels drawn from `dist` with a fixed seed.
    pub fn fit_distribution(dist: &KernelDistribution, k: usize, a: usize, n: usize, seed: u64) -> Result<Self> {
        let samples = dist.draw_kernels(k, n, seed, Exec::default())?;
        let mut pca = Self::fit(&samples, a)?;
        pca.seed = Some(seed);
        Ok(pca)
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance.iter().map(|v| v / self.total_variance).collect()
    }

    pub fn basis_row(&self, i: usize) -> &[f64] {
        let d = self.k * self.k;
        &self.basis[i * d..(i + 1) * d]
    }

    /// `basis (K - mean)`.
    pub fn encode(&self, kernel: &BlurKernel) -> Result<KernelCode> {
        if kernel.size() != self.k {
            return Err(Error::Shape(format!("kernel size {} vs basis size {}", kernel.size(), self.k)));
        }
        let diff: Vec<f64> = kernel.data().iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        let vector = (0..self.a).map(|i| self.basis_row(i).iter().zip(&diff).map(|(b, x)| b * x).sum()).collect();
        Ok(KernelCode { vector })
    }

    /// `mean + basis^T code`, before clamping and renormalisation.
    pub fn reconstruct_raw(&self, code: &KernelCode) -> Result<Vec<f64>> {
        if code.dim() != self.a {
            return Err(Error::Shape(format!("code dimension {} vs basis dimension {}", code.dim(), self.a)));
        }
        let mut out = self.mean.clone();
        for (i, c) in code.vector.iter().enumerate() {
            out.iter_mut().zip(self.basis_row(i)).for_each(|(o, b)| *o += c * b);
        }
        Ok(out)
    }

    /// Reconstruction clamped to nonnegative and renormalised to sum 1.
    pub fn decode(&self, code: &KernelCode) -> Result<BlurKernel> {
        BlurKernel::normalized(self.k, self.reconstruct_raw(code)?)
    }
}

/// Per-channel constant planes built from a vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DegradationMap {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-channel spatial mean.
    pub fn spatial_mean(&self) -> Vec<f64> {
        (0..self.channels).map(|c| self.plane(c).iter().sum::<f64>() / (self.height * self.width) as f64).collect()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.channels, self.height, self.width], self.data.iter().map(|&v| T::of(v)).collect())
    }
}

/// Broadcasts `vec` to `len(vec)` constant `h x w` planes.
pub fn stretch(vec: &[f64], h: usize, w: usize) -> Result<DegradationMap> {
    if vec.is_empty() || h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot stretch {} values to {h}x{w}", vec.len())));
    }
    let mut data = Vec::with_capacity(vec.len() * h * w);
    for &v in vec {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Ok(DegradationMap { channels: vec.len(), height: h, width: w, data })
}

/// JSON sidecar stored next to a kernel file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelMeta {
    pub k: usize,
    pub sigma_x: Option<f64>,
    pub sigma_y: Option<f64>,
    pub theta: Option<f64>,
    pub down_mode: Option<DownMode>,
}

/// Sidecar path for a binary kernel or basis file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(f64::to_le_bytes).collect();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Shape(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Writes `k^2` little-endian float64 values plus the JSON sidecar.
pub fn save_kernel(path: impl AsRef<Path>, kernel: &BlurKernel, meta: &KernelMeta) -> Result<()> {
    let path = path.as_ref();
    if meta.k != kernel.size() {
        return Err(Error::Shape(format!("sidecar k {} vs kernel k {}", meta.k, kernel.size())));
    }
    write_f64s(path, kernel.data().iter().copied())?;
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&side, e))
}

/// Reads a kernel file; the sidecar is optional, `k` is inferred otherwise.
pub fn load_kernel(path: impl AsRef<Path>) -> Result<(BlurKernel, Option<KernelMeta>)> {
    let path = path.as_ref();
    let values = read_f64s(path)?;
    let side = sidecar_path(path);
    let meta: Option<KernelMeta> = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Some(serde_json::from_str(&text)?)
    } else {
        None
    };
    let k = match &meta {
        Some(m) => m.k,
        None => (values.len() as f64).sqrt().round() as usize,
    };
    Ok((BlurKernel::new(k, values)?, meta))
}

#[derive(Serialize, Deserialize)]
struct PcaMeta {
    a: usize,
    k: usize,
    seed: Option<u64>,
    explained_variance: Vec<f64>,
    total_variance: f64,
}

/// Persists a basis as float64 `mean` followed by the `a` basis rows.
pub fn save_pca(path: impl AsRef<Path>, pca: &KernelPca) -> Result<()> {
    let path = path.as_ref();
    write_f64s(path, pca.mean.iter().chain(&pca.basis).copied())?;
    let meta = PcaMeta {
        a: pca.a,
        k: pca.k,
        seed: pca.seed,
        explained_variance: pca.explained_variance.clone(),
        total_variance: pca.total_variance,
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&side, e))
}

pub fn load_pca(path: impl AsRef<Path>) -> Result<KernelPca> {
    let path = path.as_ref();
    let values = read_f64s(path)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: PcaMeta = serde_json::from_str(&text)?;
    let d = meta.k * meta.k;
    if values.len() != d * (meta.a + 1) {
        return Err(Error::Shape(format!("basis file holds {} values, expected {}", values.len(), d * (meta.a + 1))));
    }
    Ok(KernelPca {
        k: meta.k,
        a: meta.a,
        seed: meta.seed,
        mean: values[..d].to_vec(),
        basis: values[d..].to_vec(),
        explained_variance: meta.explained_variance,
        total_variance: meta.total_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn isotropic_kernel_ignores_theta() {
        let base = gaussian_kernel(&GaussianSpec::isotropic(1.7), 21).unwrap();
        for theta in [0.3, 1.0, 2.5] {
            let rot = gaussian_kernel(&GaussianSpec { sigma_x: 1.7, sigma_y: 1.7, theta }, 21).unwrap();
            assert!(base.mean_abs_diff(&rot).unwrap() * 441.0 < 1e-12 * 441.0);
            let max = base.data().iter().zip(rot.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(max < 1e-12);
        }
    }

    #[test]
    fn tiny_sigma_is_nearly_a_delta() {
        let k = gaussian_kernel(&GaussianSpec::isotropic(0.2), 21).unwrap();
        assert!(k.get(10, 10) > 0.99);
    }

    #[test]
    fn axis_swap_with_quarter_turn_is_identical() {
        let a = gaussian_kernel(&GaussianSpec { sigma_x: 1.3, sigma_y: 3.1, theta: 0.4 }, 15).unwrap();
        let b = gaussian_kernel(&GaussianSpec { sigma_x: 3.1, sigma_y: 1.3, theta: 0.4 + PI / 2.0 }, 15).unwrap();
        let max = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 1e-12);
    }

    #[test]
    fn invalid_kernel_arguments_are_rejected() {
        assert!(gaussian_kernel(&GaussianSpec::isotropic(0.0), 21).is_err());
        assert!(gaussian_kernel(&GaussianSpec::isotropic(1.0), 20).is_err());
        assert!(BlurKernel::new(3, vec![0.5; 9]).is_err());
        assert!(BlurKernel::new(2, vec![0.25; 4]).is_err());
    }

    #[test]
    fn constant_image_survives_every_mode() {
        let img = Image::filled(3, 16, 16, 0.37);
        let k = gaussian_kernel(&GaussianSpec { sigma_x: 2.0, sigma_y: 3.5, theta: 0.7 }, 21).unwrap();
        for mode in [DownMode::Decimate, DownMode::Area, DownMode::Bicubic] {
            for s in [1, 2, 4] {
                let lr = degrade(&img, &k, s, mode).unwrap();
                assert_eq!(lr.shape(), (3, 16 / s, 16 / s));
                assert!(lr.data().iter().all(|v| (v - 0.37).abs() < 1e-12), "{mode} s={s}");
            }
        }
    }

    #[test]
    fn delta_kernel_at_unit_scale_is_identity() {
        let img = Image::from_fn(1, 9, 11, |_, y, x| ((y * 11 + x) as f64 * 0.37).sin().abs());
        let lr = degrade(&img, &BlurKernel::delta(21).unwrap(), 1, DownMode::Area).unwrap();
        assert!(lr.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn indivisible_sizes_are_rejected() {
        let img = Image::filled(1, 10, 12, 0.0);
        assert!(degrade(&img, &BlurKernel::delta(3).unwrap(), 4, DownMode::Area).is_err());
    }

    #[test]
    fn bicubic_rows_sum_to_one() {
        for (n, s) in [(16, 4), (12, 2), (8, 8)] {
            let m = down_matrix(n, s, DownMode::Bicubic);
            for r in 0..n / s {
                let sum: f64 = m.data()[r * n..(r + 1) * n].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stretch_builds_constant_planes() {
        let m = stretch(&[0.0], 4, 5).unwrap();
        assert_eq!(m.shape(), (1, 4, 5));
        assert!(m.data().iter().all(|&v| v == 0.0));
        let v: Vec<f64> = (0..441).map(|i| i as f64 * 0.01).collect();
        let m = stretch(&v, 12, 12).unwrap();
        assert_eq!(m.shape(), (441, 12, 12));
        assert!(m.spatial_mean().iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((0..441).all(|c| m.plane(c).iter().all(|&x| x == v[c])));
        assert!(stretch(&[], 2, 2).is_err());
    }

    #[test]
    fn identical_samples_give_zero_codes() {
        let k = gaussian_kernel(&GaussianSpec::isotropic(1.1), 5).unwrap();
        let pca = KernelPca::fit(&vec![k.clone(); 4], 2).unwrap();
        assert!(pca.mean.iter().zip(k.data()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(pca.encode(&k).unwrap().vector.iter().all(|v| v.abs() < 1e-15));
        assert!(KernelPca::fit(&vec![k; 1], 2).is_err());
    }

    #[test]
    fn kernel_and_basis_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GaussianSpec { sigma_x: 2.6, sigma_y: 4.0, theta: 0.0 };
        let k = gaussian_kernel(&spec, 21).unwrap();
        let meta = KernelMeta { k: 21, sigma_x: Some(2.6), sigma_y: Some(4.0), theta: Some(0.0), down_mode: Some(DownMode::Area) };
        let p = dir.path().join("K.bin");
        save_kernel(&p, &k, &meta).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 441 * 8);
        let (back, m) = load_kernel(&p).unwrap();
        assert_eq!(back, k);
        assert_eq!(m.unwrap(), meta);

        let pca = KernelPca::fit_distribution(&KernelDistribution::default(), 7, 3, 50, 11).unwrap();
        let pp = dir.path().join("pca.bin");
        save_pca(&pp, &pca).unwrap();
        assert_eq!(load_pca(&pp).unwrap(), pca);
    }
}
