//! Oracle suites behind the `selfcheck` command: brute-force degradation,
//! analytic Gaussian kernels and finite-difference gradient checks.

use std::fmt;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamStore, Var};
use crate::blocks::{BlockConfig, BlurUpdater, Builder, DownProjection, FeatureExtractor, KernelPredictor, Reconstruct, ResidualFeedback, Sft, UpProjection, WeightInit};
use crate::degradation::{degrade, gaussian_kernel, BlurKernel, DownMode, GaussianSpec};
use crate::gradcheck::{GradCheck, GradCheckReport};
use crate::imaging::Image;
use crate::kernels::reflect_index;
use crate::losses::{graph_loss, LossWeights, Targets};
use crate::networks::{GraphOutput, Variant};
use crate::tensor::Tensor;

/// Max abs error allowed between `degrade` and the brute-force oracle.
pub const DEGRADE_TOL: f64 = 1e-6;
/// Required distance of every rectifier input and L1 residual from its kink.
pub const KINK_MARGIN: f64 = 1e-4;
/// Redraws allowed per gradient case to reach [`KINK_MARGIN`].
pub const KINK_ATTEMPTS: u64 = 32;
/// Max abs error allowed against the analytic Gaussian density.
pub const GAUSSIAN_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Direct double loop over output pixels and kernel taps, decimate mode.
pub fn brute_force_degrade(hr: &Image, kernel: &BlurKernel, s: usize) -> Image {
    let (c, h, w) = hr.shape();
    let k = kernel.size();
    let r = (k / 2) as isize;
    Image::from_fn(c, h / s, w / s, |ch, oy, ox| {
        let (y, x) = ((oy * s) as isize, (ox * s) as isize);
        let mut acc = 0.0;
        for i in 0..k {
            for j in 0..k {
                let sy = reflect_index(y + r - i as isize, h);
                let sx = reflect_index(x + r - j as isize, w);
                acc += kernel.get(i, j) * hr.get(ch, sy, sx);
            }
        }
        acc
    })
}

fn random_kernel(rng: &mut ChaCha8Rng, k: usize) -> BlurKernel {
    let data: Vec<f64> = (0..k * k).map(|_| rng.random::<f64>()).collect();
    BlurKernel::normalized(k, data).expect("positive kernel")
}

/// `cases` random 16x16 RGB images and 21x21 kernels at scale 4.
pub fn degradation_oracle(cases: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err = 0.0f64;
    for _ in 0..cases {
        let hr = Image::new(3, 16, 16, (0..3 * 16 * 16).map(|_| rng.random::<f64>()).collect()).expect("matching length");
        let kernel = random_kernel(&mut rng, 21);
        let fast = match degrade(&hr, &kernel, 4, DownMode::Decimate) {
            Ok(img) => img,
            Err(e) => return CheckResult::new("degrade-oracle", false, e.to_string()),
        };
        let slow = brute_force_degrade(&hr, &kernel, 4);
        let err = fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        max_err = max_err.max(err);
    }
    CheckResult::new("degrade-oracle", max_err <= DEGRADE_TOL, format!("{cases} cases, max abs err {max_err:.3e} (tol {DEGRADE_TOL:.0e})"))
}

/// Normalised density from an explicitly inverted covariance.
pub fn analytic_gaussian(spec: &GaussianSpec, k: usize) -> Vec<f64> {
    let (s, c) = spec.theta.sin_cos();
    let rot = Matrix2::new(c, -s, s, c);
    let cov = rot * Matrix2::new(spec.sigma_x.powi(2), 0.0, 0.0, spec.sigma_y.powi(2)) * rot.transpose();
    let inv = cov.try_inverse().expect("positive definite covariance");
    let r = (k / 2) as f64;
    let mut v: Vec<f64> = (0..k * k)
        .map(|idx| {
            let u = Vector2::new((idx % k) as f64 - r, (idx / k) as f64 - r);
            (-0.5 * (u.transpose() * inv * u)[(0, 0)]).exp()
        })
        .collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

pub const ORACLE_SIGMAS: [f64; 4] = [0.2, 1.3, 2.6, 4.0];

/// Sigma and angle grid against [`analytic_gaussian`], plus isotropy and
/// axis-swap symmetries.
pub fn gaussian_oracle(k: usize) -> CheckResult {
    let thetas = [0.0, std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_2];
    let mut max_err = 0.0f64;
    let mut sym_err = 0.0f64;
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for &sx in &ORACLE_SIGMAS {
        for &sy in &ORACLE_SIGMAS {
            for &theta in &thetas {
                let spec = GaussianSpec { sigma_x: sx, sigma_y: sy, theta };
                let Ok(kern) = gaussian_kernel(&spec, k) else {
                    return CheckResult::new("gaussian-analytic", false, format!("rejected {spec:?}"));
                };
                max_err = max_err.max(diff(kern.data(), &analytic_gaussian(&spec, k)));
                // Swapping the axes equals a quarter turn.
                let swapped = gaussian_kernel(&GaussianSpec { sigma_x: sy, sigma_y: sx, theta: theta + std::f64::consts::FRAC_PI_2 }, k).expect("valid spec");
                sym_err = sym_err.max(diff(kern.data(), swapped.data()));
                if sx == sy {
                    let base = gaussian_kernel(&GaussianSpec::isotropic(sx), k).expect("valid spec");
                    sym_err = sym_err.max(diff(kern.data(), base.data()));
                }
            }
        }
    }
    let passed = max_err <= GAUSSIAN_TOL && sym_err <= GAUSSIAN_TOL;
    CheckResult::new("gaussian-analytic", passed, format!("max abs err {max_err:.3e}, symmetry err {sym_err:.3e} (tol {GAUSSIAN_TOL:.0e})"))
}

/// Toy block geometry: 8 channels, scale 2, 5x5 kernels.
pub fn toy_block_config(image_channels: usize) -> BlockConfig {
    BlockConfig { base_channels: 8, scale: 2, kernel_size: 5, image_channels, ..BlockConfig::default() }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = Normal::new(0.0, std).expect("finite std");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| n.sample(rng)).collect())
}

/// Replaces every parameter by random values so zero-initialised heads and
/// PReLU slopes are exercised away from their defaults.
fn randomise(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = randn(rng, &shape, 0.3);
    }
}

fn softmax_input(rng: &mut ChaCha8Rng, k: usize) -> Tensor<f64> {
    crate::autograd::softmax(&randn(rng, &[k * k], 0.5))
}

fn report_line(name: &str, r: &GradCheckReport) -> CheckResult {
    let detail = match r.failures.first() {
        None => format!("{} entries, max rel err {:.2e}", r.checked, r.max_rel_err),
        Some(f) => format!("{} of {} entries failed, first: {f}", r.failures.len(), r.checked),
    };
    let passed = r.passed() && r.kink_margin >= KINK_MARGIN;
    CheckResult::new(format!("grad {name}"), passed, format!("{detail}, kink margin {:.1e}", r.kink_margin))
}

type Build = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Var>;

/// One gradient case: a parameter store, inputs with gradients and a
/// scalar objective.
struct Case {
    name: &'static str,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

/// Loss against a fixed random target so every output entry matters.
fn against(target: Tensor<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Var + 'static) -> Build {
    Box::new(move |g, p, v| {
        let y = f(g, p, v);
        let t = g.input(target.clone());
        g.mse(y, t)
    })
}

fn block_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_block_config(3);
    let c = cfg.base_channels;
    let k = cfg.kernel_size;
    let (lh, hh) = (4, 8);
    let mut cases = Vec::new();
    let mut make = |name: &'static str, inputs: Vec<Tensor<f64>>, rng: &mut ChaCha8Rng, assemble: &dyn Fn(&mut Builder) -> Build| {
        let mut store = ParamStore::new();
        let build = {
            let mut b = Builder::new(&mut store, cfg.clone(), 7);
            assemble(&mut b)
        };
        randomise(&mut store, rng);
        cases.push(Case { name, store, inputs, build });
    };

    let t = randn(&mut rng, &[c, lh, lh], 1.0);
    make("extractor", vec![randn(&mut rng, &[3, lh, lh], 1.0)], &mut rng, &|b| {
        let m = FeatureExtractor::new(b);
        against(t.clone(), move |g, p, v| m.forward(g, p, v[0]))
    });
    let t = randn(&mut rng, &[c, hh, hh], 1.0);
    make("up-projection", vec![randn(&mut rng, &[c, lh, lh], 1.0)], &mut rng, &|b| {
        let m = UpProjection::new(b);
        against(t.clone(), move |g, p, v| m.forward(g, p, v[0]))
    });
    let t = randn(&mut rng, &[c, lh, lh], 1.0);
    make("down-projection", vec![randn(&mut rng, &[2 * c, hh, hh], 1.0)], &mut rng, &|b| {
        let m = DownProjection::new(b, 2 * c);
        against(t.clone(), move |g, p, v| m.forward(g, p, v[0]))
    });
    let t = randn(&mut rng, &[c, lh, lh], 1.0);
    make("sft", vec![randn(&mut rng, &[c, lh, lh], 1.0), randn(&mut rng, &[5], 1.0)], &mut rng, &|b| {
        let m = Sft::new(b, 5);
        against(t.clone(), move |g, p, v| m.forward(g, p, v[0], v[1]))
    });
    let t = randn(&mut rng, &[k * k], 1.0);
    make("kernel-predictor", vec![randn(&mut rng, &[3, hh, hh], 1.0)], &mut rng, &|b| {
        let m = KernelPredictor::new(b, k * k, None);
        against(t.clone(), move |g, p, v| m.forward(g, p, v[0]))
    });
    let t = softmax_input(&mut rng, k);
    make("blur-updater", vec![randn(&mut rng, &[3, hh, hh], 1.0), softmax_input(&mut rng, k)], &mut rng, &|b| {
        let m = BlurUpdater::with_head_init(b, WeightInit::He);
        against(t.clone(), move |g, p, v| m.blur_update(g, p, v[0], v[1]))
    });
    let t = randn(&mut rng, &[c, hh, hh], 1.0);
    make("residual-feedback", vec![randn(&mut rng, &[3, lh, lh], 1.0)], &mut rng, &|b| {
        let m = ResidualFeedback::with_output_init(b, WeightInit::He);
        against(t.clone(), move |g, p, v| m.forward(g, p, v[0]))
    });
    let t = randn(&mut rng, &[3, hh, hh], 1.0);
    make("reconstruct", vec![randn(&mut rng, &[3 * c, hh, hh], 1.0)], &mut rng, &|b| {
        let m = Reconstruct::new(b, 3 * c);
        against(t.clone(), move |g, p, v| m.forward(g, p, v[0]))
    });
    cases
}

/// Objectives of each variant on free SR, kernel-logit and code inputs.
/// Targets sit far from the estimates so the L1 terms stay off their
/// kinks.
fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (s, k, code_dim) = (2, 5, 6);
    let (lh, hh) = (4, 8);
    let lr = Image::from_tensor(&randn(&mut rng, &[3, lh, lh], 0.5));
    let hr = Image::from_tensor(&randn(&mut rng, &[3, hh, hh], 0.5));
    let sr0 = randn(&mut rng, &[3, hh, hh], 0.5);
    let logits0 = randn(&mut rng, &[k * k], 0.5);
    let code0 = randn(&mut rng, &[code_dim], 1.0);
    // Softmax entries of ~1/k^2 sit far from a delta target's 0 and 1.
    let kernel = BlurKernel::delta(k).expect("odd size");
    let code = crate::degradation::KernelCode { vector: code0.data().iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 3.0 } else { -3.0 }).collect() };
    let targets = Targets { hr, lr: lr.clone(), kernel: Some(kernel), code: Some(code) };
    let weights = LossWeights::default();

    let make = |name: &'static str, variant: Variant, inputs: Vec<Tensor<f64>>| {
        let (targets, lr) = (targets.clone(), lr.clone());
        let build: Build = Box::new(move |g, _p, v| {
            let kernel = (variant == Variant::Kbpn).then(|| g.softmax(v[1]));
            let code = (variant == Variant::Kcbpn).then(|| v[1]);
            let out = GraphOutput { sr: v[0], kernel, code, stages: Vec::new() };
            let lr = g.input(lr.to_tensor());
            graph_loss(g, &out, lr, &targets, &weights, variant, s, DownMode::Area).expect("consistent shapes").total
        });
        Case { name, store: ParamStore::new(), inputs, build }
    };
    vec![
        make("loss dbpn_bl (sr)", Variant::DbpnBl, vec![sr0.clone()]),
        make("loss kcbpn (sr + code)", Variant::Kcbpn, vec![sr0.clone(), code0]),
        make("loss kbpn (sr + kernel + lr)", Variant::Kbpn, vec![sr0, logits0]),
    ]
}

fn kink_margin(case: &Case) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
    (case.build)(&mut g, &case.store, &vars);
    g.kink_margin()
}

/// Finite-difference checks for every block and every loss in float64.
/// Each case is redrawn until it sits [`KINK_MARGIN`] away from every kink.
pub fn gradient_suite(seed: u64) -> Vec<CheckResult> {
    let check = GradCheck::default();
    let draw = |attempt: u64| {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9));
        block_cases(s).into_iter().chain(loss_cases(s.wrapping_add(1))).collect::<Vec<_>>()
    };
    let count = draw(0).len();
    (0..count)
        .map(|i| {
            let mut case = (0..KINK_ATTEMPTS)
                .map(|a| draw(a).swap_remove(i))
                .find(|c| kink_margin(c) >= KINK_MARGIN)
                .unwrap_or_else(|| draw(0).swap_remove(i));
            let report = check.run(&mut case.store, &mut case.inputs, |g, p, v| (case.build)(g, p, v));
            report_line(case.name, &report)
        })
        .collect()
}

/// Everything `selfcheck` runs.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut out = vec![degradation_oracle(100, seed), gaussian_oracle(21)];
    out.extend(gradient_suite(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suites_pass() {
        for r in run_all(3) {
            println!("{r}");
            assert!(r.passed, "{r}");
        }
    }
}
