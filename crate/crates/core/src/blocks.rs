//! Differentiable building blocks. Each block owns [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smallest LR side the kernel predictor accepts.
pub const MIN_PREDICTOR_INPUT: usize = 16;
/// Initial slope of every PReLU.
pub const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub base_channels: usize,
    pub scale: usize,
    pub kernel_size: usize,
    pub image_channels: usize,
    /// Negative slope of the leaky rectifiers.
    pub slope: f64,
    /// Replace every activation by the identity (test harness).
    #[serde(default)]
    pub linear: bool,
    /// Whether convolutions carry biases.
    #[serde(default = "default_true")]
    pub bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self { base_channels: 64, scale: 4, kernel_size: 21, image_channels: 3, slope: 0.1, linear: false, bias: true }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::Config(format!("scale {} not in {{2, 4, 8}}", self.scale)));
        }
        if self.base_channels < 8 {
            return Err(Error::Config(format!("base_channels {} < 8", self.base_channels)));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if ![1, 3].contains(&self.image_channels) {
            return Err(Error::Config(format!("image channels {} not in {{1, 3}}", self.image_channels)));
        }
        Ok(())
    }

    /// `(kernel, stride, padding)` of the projection (de)convolutions.
    pub fn projection_geometry(&self) -> (usize, usize, usize) {
        match self.scale {
            2 => (6, 2, 2),
            4 => (8, 4, 2),
            8 => (12, 8, 2),
            s => panic!("unsupported scale {s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Fan-in scaled normal, `std = sqrt(2 / fan_in)`.
    He,
    Zero,
}

/// Parameter factory with hierarchical names. Parameters are created in
/// float64 and cast by the caller.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f64>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
    pub cfg: BlockConfig,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f64>, cfg: BlockConfig, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed), prefix: Vec::new(), cfg }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn name(&self, leaf: &str) -> String {
        let mut parts = self.prefix.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    pub fn tensor(&mut self, leaf: &str, shape: &[usize], std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = if std == 0.0 {
            vec![0.0; n]
        } else {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(&mut self.rng)).collect()
        };
        let name = self.name(leaf);
        self.store.add(name, Tensor::from_vec(shape, data))
    }

    pub fn constant(&mut self, leaf: &str, tensor: Tensor<f64>) -> ParamId {
        let name = self.name(leaf);
        self.store.add(name, tensor)
    }

    pub fn conv(&mut self, leaf: &str, ci: usize, co: usize, k: usize, stride: usize, pad: usize, init: WeightInit) -> Conv {
        let std = match init {
            WeightInit::He => (2.0 / (ci * k * k) as f64).sqrt(),
            WeightInit::Zero => 0.0,
        };
        self.scope(leaf, |b| {
            let w = b.tensor("w", &[co, ci, k, k], std);
            let bias = b.cfg.bias.then(|| b.tensor("b", &[co], 0.0));
            Conv { w, b: bias, stride, pad }
        })
    }

    /// Transposed convolution; weights are `[ci, co, k, k]`.
    pub fn deconv(&mut self, leaf: &str, ci: usize, co: usize, k: usize, stride: usize, pad: usize, init: WeightInit) -> Deconv {
        let taps = ((k * k) as f64 / (stride * stride) as f64).max(1.0);
        let std = match init {
            WeightInit::He => (2.0 / (ci as f64 * taps)).sqrt(),
            WeightInit::Zero => 0.0,
        };
        self.scope(leaf, |b| {
            let w = b.tensor("w", &[ci, co, k, k], std);
            let bias = b.cfg.bias.then(|| b.tensor("b", &[co], 0.0));
            Deconv { w, b: bias, stride, pad }
        })
    }

    pub fn linear(&mut self, leaf: &str, input: usize, output: usize, init: WeightInit) -> Linear {
        let std = match init {
            WeightInit::He => (1.0 / input as f64).sqrt(),
            WeightInit::Zero => 0.0,
        };
        self.scope(leaf, |b| {
            let w = b.tensor("w", &[output, input], std);
            let bias = b.cfg.bias.then(|| b.tensor("b", &[output], 0.0));
            Linear { w, b: bias }
        })
    }

    pub fn leaky(&self) -> Act {
        if self.cfg.linear { Act::Identity } else { Act::Leaky(self.cfg.slope) }
    }

    pub fn prelu(&mut self, leaf: &str) -> Act {
        if self.cfg.linear {
            return Act::Identity;
        }
        Act::Prelu(self.constant(leaf, Tensor::from_vec(&[1], vec![PRELU_INIT])))
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn in_channels<T: Scalar>(&self, p: &ParamStore<T>) -> usize {
        p.get(self.w).shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct Deconv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        let w = g.param(p, self.w);
        let b = self.b.map(|b| g.param(p, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub enum Act {
    Identity,
    Leaky(f64),
    Prelu(ParamId),
}

impl Act {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Leaky(s) => g.leaky_relu(x, *s),
            Act::Prelu(a) => {
                let a = g.param(p, *a);
                g.prelu(x, a)
            }
        }
    }
}

/// Four 3x3 convolutions at LR resolution.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub convs: Vec<(Conv, Act)>,
}

impl FeatureExtractor {
    pub fn new(b: &mut Builder) -> Self {
        let (ci, c) = (b.cfg.image_channels, b.cfg.base_channels);
        let convs = (0..4)
            .map(|i| {
                let conv = b.conv(&format!("conv{i}"), if i == 0 { ci } else { c }, c, 3, 1, 1, WeightInit::He);
                (conv, b.leaky())
            })
            .collect();
        Self { convs }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, lr: Var) -> Var {
        self.convs.iter().fold(lr, |x, (conv, act)| {
            let y = conv.forward(g, p, x);
            act.forward(g, p, y)
        })
    }
}

/// Back-projection up unit: `H0 = up(L)`, `e = down(H0) - L`,
/// `out = H0 + up(e)`.
#[derive(Clone, Debug)]
pub struct UpProjection {
    pub up0: (Deconv, Act),
    pub down: (Conv, Act),
    pub up1: (Deconv, Act),
}

impl UpProjection {
    pub fn new(b: &mut Builder) -> Self {
        let c = b.cfg.base_channels;
        let (k, s, pad) = b.cfg.projection_geometry();
        let up0 = (b.deconv("up0", c, c, k, s, pad, WeightInit::He), b.prelu("act0"));
        let down = (b.conv("down", c, c, k, s, pad, WeightInit::He), b.prelu("act1"));
        let up1 = (b.deconv("up1", c, c, k, s, pad, WeightInit::He), b.prelu("act2"));
        Self { up0, down, up1 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, l: Var) -> Var {
        let h0 = self.up0.0.forward(g, p, l);
        let h0 = self.up0.1.forward(g, p, h0);
        let l0 = self.down.0.forward(g, p, h0);
        let l0 = self.down.1.forward(g, p, l0);
        let e = g.sub(l0, l);
        let h1 = self.up1.0.forward(g, p, e);
        let h1 = self.up1.1.forward(g, p, h1);
        g.add(h0, h1)
    }
}

/// Dense back-projection down unit over a bank of `t * c` SR channels.
#[derive(Clone, Debug)]
pub struct DownProjection {
    pub reduce: Option<(Conv, Act)>,
    pub down0: (Conv, Act),
    pub up: (Deconv, Act),
    pub down1: (Conv, Act),
}

impl DownProjection {
    pub fn new(b: &mut Builder, bank_channels: usize) -> Self {
        let c = b.cfg.base_channels;
        let (k, s, pad) = b.cfg.projection_geometry();
        let reduce = (bank_channels != c).then(|| (b.conv("reduce", bank_channels, c, 1, 1, 0, WeightInit::He), b.prelu("act_r")));
        let down0 = (b.conv("down0", c, c, k, s, pad, WeightInit::He), b.prelu("act0"));
        let up = (b.deconv("up", c, c, k, s, pad, WeightInit::He), b.prelu("act1"));
        let down1 = (b.conv("down1", c, c, k, s, pad, WeightInit::He), b.prelu("act2"));
        Self { reduce, down0, up, down1 }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, bank: Var) -> Var {
        let x = match &self.reduce {
            Some((conv, act)) => {
                let y = conv.forward(g, p, bank);
                act.forward(g, p, y)
            }
            None => bank,
        };
        let l0 = self.down0.0.forward(g, p, x);
        let l0 = self.down0.1.forward(g, p, l0);
        let h0 = self.up.0.forward(g, p, l0);
        let h0 = self.up.1.forward(g, p, h0);
        let e = g.sub(h0, x);
        let l1 = self.down1.0.forward(g, p, e);
        let l1 = self.down1.1.forward(g, p, l1);
        g.add(l0, l1)
    }
}

/// Spatial feature transform `F * sigmoid(c1([F, D])) + c2([F, D])` where
/// `D` is a stretched vector.
#[derive(Clone, Debug)]
pub struct Sft {
    pub gamma: [Conv; 2],
    pub beta: [Conv; 2],
    pub act: Act,
}

impl Sft {
    pub fn new(b: &mut Builder, cond_dim: usize) -> Self {
        Self::with_init(b, cond_dim, WeightInit::He)
    }

    pub fn with_init(b: &mut Builder, cond_dim: usize, init: WeightInit) -> Self {
        let c = b.cfg.base_channels;
        let gamma = [b.conv("gamma0", c + cond_dim, c, 3, 1, 1, init), b.conv("gamma1", c, c, 3, 1, 1, init)];
        let beta = [b.conv("beta0", c + cond_dim, c, 3, 1, 1, init), b.conv("beta1", c, c, 3, 1, 1, init)];
        Self { gamma, beta, act: b.leaky() }
    }

    fn path<T: Scalar>(&self, convs: &[Conv; 2], g: &mut Graph<T>, p: &ParamStore<T>, f: Var, v: Var) -> Var {
        let w = g.param(p, convs[0].w);
        let b = convs[0].b.map(|b| g.param(p, b));
        let h = g.cond_conv2d(f, v, w, b);
        let h = self.act.forward(g, p, h);
        convs[1].forward(g, p, h)
    }

    /// `f` is `[c, h, w]`; `v` is the `[d]` vector whose stretch is `D`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, f: Var, v: Var) -> Var {
        let gamma = self.path(&self.gamma, g, p, f, v);
        let gamma = g.sigmoid(gamma);
        let beta = self.path(&self.beta, g, p, f, v);
        let scaled = g.mul(f, gamma);
        g.add(scaled, beta)
    }
}

/// Four stride-2 3x3 convolutions followed by global average pooling.
#[derive(Clone, Debug)]
pub struct KernelPredictor {
    pub convs: Vec<(Conv, Act)>,
    pub out_dim: usize,
}

impl KernelPredictor {
    /// `out_bias` initialises the last layer's bias; its weights then start
    /// at zero so the initial prediction equals `out_bias`.
    pub fn new(b: &mut Builder, out_dim: usize, out_bias: Option<Vec<f64>>) -> Self {
        let (ci, c) = (b.cfg.image_channels, b.cfg.base_channels);
        let mut convs = Vec::with_capacity(4);
        for i in 0..3 {
            let conv = b.conv(&format!("conv{i}"), if i == 0 { ci } else { c }, c, 3, 2, 1, WeightInit::He);
            convs.push((conv, b.leaky()));
        }
        let last = match out_bias {
            Some(bias) => {
                assert_eq!(bias.len(), out_dim);
                b.scope("conv3", |b| {
                    let w = b.tensor("w", &[out_dim, c, 3, 3], 0.0);
                    let bias = b.constant("b", Tensor::from_vec(&[out_dim], bias));
                    Conv { w, b: Some(bias), stride: 2, pad: 1 }
                })
            }
            None => b.conv("conv3", c, out_dim, 3, 2, 1, WeightInit::He),
        };
        convs.push((last, Act::Identity));
        Self { convs, out_dim }
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h < MIN_PREDICTOR_INPUT || w < MIN_PREDICTOR_INPUT {
            return Err(Error::Shape(format!(
                "kernel predictor needs at least {MIN_PREDICTOR_INPUT}x{MIN_PREDICTOR_INPUT} input, got {h}x{w}"
            )));
        }
        Ok(())
    }

    /// Raw `[out_dim]` output (logits or code).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, lr: Var) -> Var {
        let x = self.convs.iter().fold(lr, |x, (conv, act)| {
            let y = conv.forward(g, p, x);
            act.forward(g, p, y)
        });
        g.global_avg_pool(x)
    }
}

/// Residual kernel update computed from an SR estimate; the delta is added
/// in logit space and mapped back through softmax.
#[derive(Clone, Debug)]
pub struct BlurUpdater {
    pub convs: [Conv; 2],
    pub act: Act,
    pub head: Linear,
}

impl BlurUpdater {
    pub fn new(b: &mut Builder) -> Self {
        Self::with_head_init(b, WeightInit::Zero)
    }

    pub fn with_head_init(b: &mut Builder, init: WeightInit) -> Self {
        let (ci, c, k) = (b.cfg.image_channels, b.cfg.base_channels, b.cfg.kernel_size);
        let convs = [b.conv("conv0", ci, c, 3, 1, 1, WeightInit::He), b.conv("conv1", c, c, 3, 1, 1, WeightInit::He)];
        let act = b.leaky();
        let head = b.linear("head", c, k * k, init);
        Self { convs, act, head }
    }

    /// Logit delta `[k^2]`.
    pub fn delta<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, sr: Var) -> Var {
        let mut x = sr;
        for conv in &self.convs {
            x = conv.forward(g, p, x);
            x = self.act.forward(g, p, x);
        }
        let pooled = g.global_avg_pool(x);
        self.head.forward(g, p, pooled)
    }

    /// `(z_t, K_t)` from the previous logits.
    pub fn update_logits<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, sr: Var, logits: Var) -> (Var, Var) {
        let d = self.delta(g, p, sr);
        let z = g.add(logits, d);
        (z, g.softmax(z))
    }

    /// `K_t = softmax(log K_prev + delta)`; with a zero delta this is `K_prev`
    /// rescaled to unit sum.
    pub fn blur_update<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, sr: Var, k_prev: Var) -> Var {
        let logits = g.log(k_prev);
        self.update_logits(g, p, sr, logits).1
    }
}

/// Maps an LR residual to an SR feature correction.
#[derive(Clone, Debug)]
pub struct ResidualFeedback {
    pub conv0: Conv,
    pub conv1: Conv,
    pub act: Act,
    pub up: Deconv,
}

impl ResidualFeedback {
    pub fn new(b: &mut Builder) -> Self {
        Self::with_output_init(b, WeightInit::Zero)
    }

    pub fn with_output_init(b: &mut Builder, init: WeightInit) -> Self {
        let (ci, c) = (b.cfg.image_channels, b.cfg.base_channels);
        let (k, s, pad) = b.cfg.projection_geometry();
        Self {
            conv0: b.conv("conv0", ci, c, 3, 1, 1, WeightInit::He),
            conv1: b.conv("conv1", c, c, 1, 1, 0, WeightInit::He),
            act: b.leaky(),
            up: b.deconv("up", c, c, k, s, pad, init),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, r: Var) -> Var {
        let x = self.conv0.forward(g, p, r);
        let x = self.act.forward(g, p, x);
        let x = self.conv1.forward(g, p, x);
        let x = self.act.forward(g, p, x);
        self.up.forward(g, p, x)
    }
}

/// Single 3x3 convolution to image channels, no activation.
#[derive(Clone, Debug)]
pub struct Reconstruct {
    pub conv: Conv,
}

impl Reconstruct {
    pub fn new(b: &mut Builder, in_channels: usize) -> Self {
        let co = b.cfg.image_channels;
        Self { conv: b.conv("conv", in_channels, co, 3, 1, 1, WeightInit::He) }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, bank: Var) -> Var {
        self.conv.forward(g, p, bank)
    }

    pub fn in_channels<T: Scalar>(&self, p: &ParamStore<T>) -> usize {
        self.conv.in_channels(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize) -> BlockConfig {
        BlockConfig { base_channels: c, ..BlockConfig::default() }
    }

    #[test]
    fn projection_shapes() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, cfg(8), 1);
        let up = b.scope("up", UpProjection::new);
        let down = b.scope("down", |b| DownProjection::new(b, 24));
        let p: ParamStore<f32> = store.cast();
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[8, 12, 12], 0.1f32));
        let y = up.forward(&mut g, &p, x);
        assert_eq!(g.value(y).shape(), &[8, 48, 48]);
        let bank = g.input(Tensor::full(&[24, 48, 48], 0.1f32));
        let z = down.forward(&mut g, &p, bank);
        assert_eq!(g.value(z).shape(), &[8, 12, 12]);
    }

    #[test]
    fn builder_names_are_hierarchical() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, cfg(8), 1);
        b.scope("stage1", |b| b.scope("sft", |b| Sft::new(b, 9)));
        assert!(store.id("stage1.sft.gamma0.w").is_some());
        assert!(store.id("stage1.sft.beta1.b").is_some());
    }

    #[test]
    fn zero_head_updater_keeps_kernel() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, BlockConfig { kernel_size: 5, ..cfg(8) }, 3);
        let u = BlurUpdater::new(&mut b);
        let mut g = Graph::<f64>::new();
        let sr = g.input(Tensor::full(&[3, 8, 8], 0.3));
        let k: Vec<f64> = (1..=25).map(|v| v as f64).collect();
        let total: f64 = k.iter().sum();
        let kp = g.input(Tensor::from_vec(&[25], k.iter().map(|v| v / total).collect()));
        let out = u.blur_update(&mut g, &store, sr, kp);
        assert!(g.value(out).max_abs_diff(g.value(kp)) < 1e-15);
    }
}
