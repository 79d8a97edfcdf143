//! Training objectives: SR fidelity, kernel and kernel-code agreement, and
//! the LR self-consistency term.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::degradation::{degrade, down_operators, BlurKernel, DownMode, KernelCode};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::networks::{ForwardResult, GraphOutput, Variant};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub w_sr: f64,
    pub w_kernel: f64,
    pub w_lr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_sr: 1.0, w_kernel: 5.0, w_lr: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_sr, self.w_kernel, self.w_lr].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

fn same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Mean squared error over every entry.
pub fn sr_loss(sr: &Image, hr: &Image) -> Result<f64> {
    same_shape(sr, hr, "sr loss")?;
    Ok(mean_sq(sr.data(), hr.data()))
}

/// Mean absolute difference over the code entries.
pub fn kernel_code_loss(code: &KernelCode, code_gt: &KernelCode) -> Result<f64> {
    code.mean_abs_diff(code_gt)
}

/// Mean absolute difference over the `k^2` kernel entries.
pub fn kernel_loss(k: &BlurKernel, k_gt: &BlurKernel) -> Result<f64> {
    k.mean_abs_diff(k_gt)
}

/// Mean squared difference between `degrade(sr, k, s)` and `lr` over the LR
/// grid.
pub fn lr_loss(sr: &Image, k: &BlurKernel, lr: &Image, s: usize, mode: DownMode) -> Result<f64> {
    let relr = degrade(sr, k, s, mode)?;
    same_shape(&relr, lr, "lr loss")?;
    Ok(mean_sq(relr.data(), lr.data()))
}

/// Supervision for one sample.
#[derive(Clone, Debug)]
pub struct Targets {
    pub hr: Image,
    pub lr: Image,
    pub kernel: Option<BlurKernel>,
    pub code: Option<KernelCode>,
}

/// Unweighted components and the weighted total. `l_kernel` holds the
/// kernel loss for kbpn and the code loss for kcbpn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sr: f64,
    pub l_kernel: f64,
    pub l_lr: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_sr: f64, l_kernel: f64, l_lr: f64, w: &LossWeights) -> Self {
        Self { l_sr, l_kernel, l_lr, total: w.w_sr * l_sr + w.w_kernel * l_kernel + w.w_lr * l_lr }
    }

    /// Weighted terms in the order sr, kernel, lr.
    pub fn weighted_terms(&self, w: &LossWeights) -> [f64; 3] {
        [w.w_sr * self.l_sr, w.w_kernel * self.l_kernel, w.w_lr * self.l_lr]
    }

    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let mut m = Self::default();
        for b in items {
            m.l_sr += b.l_sr / n;
            m.l_kernel += b.l_kernel / n;
            m.l_lr += b.l_lr / n;
            m.total += b.total / n;
        }
        m
    }
}

fn missing(what: &str, variant: Variant) -> Error {
    Error::Invalid(format!("{variant} loss needs a {what}"))
}

/// Variant-dependent weighted objective evaluated on a finished forward pass.
pub fn total_loss(
    result: &ForwardResult,
    targets: &Targets,
    weights: &LossWeights,
    variant: Variant,
    s: usize,
    mode: DownMode,
) -> Result<LossBreakdown> {
    let l_sr = sr_loss(&result.sr, &targets.hr)?;
    match variant {
        Variant::DbpnBl => Ok(LossBreakdown::combine(l_sr, 0.0, 0.0, weights)),
        Variant::Kcbpn => {
            let code = result.code.as_ref().ok_or_else(|| missing("predicted code", variant))?;
            let gt = targets.code.as_ref().ok_or_else(|| missing("ground-truth code", variant))?;
            Ok(LossBreakdown::combine(l_sr, kernel_code_loss(code, gt)?, 0.0, weights))
        }
        Variant::Kbpn => {
            let k = result.kernel.as_ref().ok_or_else(|| missing("predicted kernel", variant))?;
            let gt = targets.kernel.as_ref().ok_or_else(|| missing("ground-truth kernel", variant))?;
            let l_k = kernel_loss(k, gt)?;
            let l_lr = lr_loss(&result.sr, k, &targets.lr, s, mode)?;
            Ok(LossBreakdown::combine(l_sr, l_k, l_lr, weights))
        }
    }
}

/// Loss nodes recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphLoss {
    pub total: Var,
    pub l_sr: Var,
    pub l_kernel: Option<Var>,
    pub l_lr: Option<Var>,
}

impl GraphLoss {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, w: &LossWeights) -> LossBreakdown {
        let get = |v: Option<Var>| v.map(|v| g.scalar(v)).unwrap_or(0.0);
        let mut b = LossBreakdown::combine(g.scalar(self.l_sr), get(self.l_kernel), get(self.l_lr), w);
        b.total = g.scalar(self.total);
        b
    }
}

/// Records the variant's objective for `out`. `lr` is the network input;
/// `hr`, `kernel` and `code` are constant targets.
#[allow(clippy::too_many_arguments)]
pub fn graph_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &GraphOutput,
    lr: Var,
    targets: &Targets,
    weights: &LossWeights,
    variant: Variant,
    s: usize,
    mode: DownMode,
) -> Result<GraphLoss> {
    let hr = g.input(targets.hr.to_tensor::<T>());
    if g.value(hr).shape() != g.value(out.sr).shape() {
        return Err(Error::Shape(format!("SR {:?} vs HR {:?}", g.value(out.sr).shape(), g.value(hr).shape())));
    }
    let l_sr = g.mse(out.sr, hr);
    let mut terms = vec![(l_sr, weights.w_sr)];
    let (mut l_kernel, mut l_lr) = (None, None);
    match variant {
        Variant::DbpnBl => {}
        Variant::Kcbpn => {
            let code = out.code.ok_or_else(|| missing("predicted code", variant))?;
            let gt = targets.code.as_ref().ok_or_else(|| missing("ground-truth code", variant))?;
            let gt = g.input(crate::tensor::Tensor::from_vec(&[gt.dim()], gt.vector.iter().map(|&v| T::of(v)).collect()));
            let l = g.l1(code, gt);
            terms.push((l, weights.w_kernel));
            l_kernel = Some(l);
        }
        Variant::Kbpn => {
            let k = out.kernel.ok_or_else(|| missing("predicted kernel", variant))?;
            let gt = targets.kernel.as_ref().ok_or_else(|| missing("ground-truth kernel", variant))?;
            let gt = g.input(gt.to_tensor::<T>());
            let lk = g.l1(k, gt);
            let (_, h, w) = g.value(out.sr).dims3();
            let (rows, cols) = down_operators::<T>(h, w, s, mode);
            let blurred = g.blur(out.sr, k);
            let relr = g.resample(blurred, rows, cols);
            let ll = g.mse(relr, lr);
            terms.push((lk, weights.w_kernel));
            terms.push((ll, weights.w_lr));
            l_kernel = Some(lk);
            l_lr = Some(ll);
        }
    }
    let total = g.weighted_sum(&terms);
    Ok(GraphLoss { total, l_sr, l_kernel, l_lr })
}
