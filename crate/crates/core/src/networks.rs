//! The three trainable systems: the non-kernel baseline, the code-conditioned
//! network and the kernel-based network with residual feedback.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::blocks::{
    BlockConfig, BlurUpdater, Builder, DownProjection, FeatureExtractor, KernelPredictor, Reconstruct,
    ResidualFeedback, Sft, UpProjection,
};
use crate::degradation::{down_operators, BlurKernel, DownMode, KernelCode, KernelDistribution};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::tensor::{Scalar, Tensor};

/// Kernels drawn to build the initial kernel prior.
const PRIOR_SAMPLES: usize = 4096;
const PRIOR_SEED: u64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DbpnBl,
    Kcbpn,
    Kbpn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::DbpnBl, Variant::Kcbpn, Variant::Kbpn];
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dbpn_bl" => Ok(Self::DbpnBl),
            "kcbpn" => Ok(Self::Kcbpn),
            "kbpn" => Ok(Self::Kbpn),
            other => Err(Error::Invalid(format!("unknown variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DbpnBl => "dbpn_bl",
            Self::Kcbpn => "kcbpn",
            Self::Kbpn => "kbpn",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub stages: usize,
    pub scale: usize,
    pub base_channels: usize,
    pub kernel_size: usize,
    pub code_dim: usize,
    pub image_channels: usize,
    pub slope: f64,
    /// Must match the data's degradation.
    pub down_mode: DownMode,
    /// Distribution whose mean kernel initialises the kernel predictor.
    pub kernel_prior: KernelDistribution,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Kbpn,
            stages: 4,
            scale: 4,
            base_channels: 64,
            kernel_size: 21,
            code_dim: 9,
            image_channels: 3,
            slope: 0.1,
            down_mode: DownMode::Area,
            kernel_prior: KernelDistribution::default(),
        }
    }
}

impl NetworkConfig {
    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            base_channels: self.base_channels,
            scale: self.scale,
            kernel_size: self.kernel_size,
            image_channels: self.image_channels,
            slope: self.slope,
            linear: false,
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block_config().validate()?;
        if self.stages == 0 {
            return Err(Error::Config("stages must be at least 1".into()));
        }
        if self.variant == Variant::Kcbpn && (self.code_dim == 0 || self.code_dim > self.kernel_size.pow(2)) {
            return Err(Error::Config(format!("code_dim {} outside 1..=k^2", self.code_dim)));
        }
        self.kernel_prior.validate()
    }
}

/// One iteration of the up/down loop. Optional parts depend on the variant;
/// the last stage has no down projection because nothing consumes it.
#[derive(Clone, Debug)]
pub struct Stage {
    pub up: UpProjection,
    pub recon: Option<Reconstruct>,
    pub updater: Option<BlurUpdater>,
    pub feedback: Option<ResidualFeedback>,
    pub down: Option<DownProjection>,
    pub sft: Option<Sft>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub extractor: FeatureExtractor,
    pub predictor: Option<KernelPredictor>,
    pub stages: Vec<Stage>,
    pub recon: Reconstruct,
}

/// Ground truth substituted for `I^SR_t` and `K_t` inside the residual path.
#[derive(Clone, Debug)]
pub struct Injection {
    pub sr: Image,
    pub kernel: BlurKernel,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Add the residual feedback to the SR features (kbpn).
    pub feedback: bool,
    pub inject: Option<Injection>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { feedback: true, inject: None }
    }
}

/// Graph handles of one stage.
#[derive(Clone, Debug)]
pub struct StageVars {
    pub sr: Option<Var>,
    pub kernel: Option<Var>,
    pub residual: Option<Var>,
    pub features: Var,
}

#[derive(Clone, Debug)]
pub struct GraphOutput {
    pub sr: Var,
    /// Final kernel `K_T` (kbpn) as a `[k^2]` vector.
    pub kernel: Option<Var>,
    /// Kernel code (kcbpn).
    pub code: Option<Var>,
    pub stages: Vec<StageVars>,
}

#[derive(Clone, Debug)]
pub struct StageTrace {
    pub t: usize,
    pub sr: Option<Image>,
    pub kernel: Option<BlurKernel>,
    pub residual: Option<Image>,
    /// `F^SR_t`, `[c, H, W]`.
    pub features: Tensor<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub sr: Image,
    pub kernel: Option<BlurKernel>,
    pub code: Option<KernelCode>,
    pub traces: Vec<StageTrace>,
}

impl Network {
    /// Builds the layout and freshly initialised float64 parameters.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<(Self, ParamStore<f64>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = {
            let mut b = Builder::new(&mut store, cfg.block_config(), seed);
            Self::assemble(cfg, &mut b)?
        };
        Ok((net, store))
    }

    fn kernel_prior_logits(cfg: &NetworkConfig) -> Result<Vec<f64>> {
        let mean = cfg.kernel_prior.mean_kernel(cfg.kernel_size, PRIOR_SAMPLES, PRIOR_SEED)?;
        Ok(mean.data().iter().map(|v| v.max(1e-12).ln()).collect())
    }

    fn assemble(cfg: &NetworkConfig, b: &mut Builder) -> Result<Self> {
        let c = cfg.base_channels;
        let k2 = cfg.kernel_size * cfg.kernel_size;
        let extractor = b.scope("extractor", FeatureExtractor::new);
        let predictor = match cfg.variant {
            Variant::DbpnBl => None,
            Variant::Kcbpn => Some(b.scope("predictor", |b| KernelPredictor::new(b, cfg.code_dim, Some(vec![0.0; cfg.code_dim])))),
            Variant::Kbpn => {
                let prior = Self::kernel_prior_logits(cfg)?;
                Some(b.scope("predictor", |b| KernelPredictor::new(b, k2, Some(prior))))
            }
        };
        let kbpn = cfg.variant == Variant::Kbpn;
        let stages = (1..=cfg.stages)
            .map(|t| {
                b.scope(&format!("stage{t}"), |b| {
                    let up = b.scope("up", UpProjection::new);
                    let recon = kbpn.then(|| b.scope("recon", |b| Reconstruct::new(b, c * t)));
                    let updater = kbpn.then(|| b.scope("updater", BlurUpdater::new));
                    let feedback = kbpn.then(|| b.scope("feedback", ResidualFeedback::new));
                    let last = t == cfg.stages;
                    let down = (!last).then(|| b.scope("down", |b| DownProjection::new(b, c * t)));
                    let sft = match cfg.variant {
                        _ if last => None,
                        Variant::DbpnBl => None,
                        Variant::Kcbpn => Some(b.scope("sft", |b| Sft::new(b, cfg.code_dim))),
                        Variant::Kbpn => Some(b.scope("sft", |b| Sft::new(b, k2))),
                    };
                    Stage { up, recon, updater, feedback, down, sft }
                })
            })
            .collect();
        let recon = b.scope("recon", |b| Reconstruct::new(b, c * cfg.stages));
        Ok(Self { config: cfg.clone(), extractor, predictor, stages, recon })
    }

    pub fn check_input(&self, h: usize, w: usize, channels: usize) -> Result<()> {
        if channels != self.config.image_channels {
            return Err(Error::Shape(format!("expected {} channels, got {channels}", self.config.image_channels)));
        }
        if self.predictor.is_some() {
            KernelPredictor::check_input(h, w)?;
        }
        Ok(())
    }

    /// Records the forward pass for an LR input of shape `[C, h, w]`.
    pub fn forward_graph<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamStore<T>, lr: Var, opts: &ForwardOptions) -> GraphOutput {
        let cfg = &self.config;
        let (_, h, w) = g.value(lr).dims3();
        let (big_h, big_w) = (h * cfg.scale, w * cfg.scale);
        let mut f_lr = self.extractor.forward(g, p, lr);
        let raw = self.predictor.as_ref().map(|pred| pred.forward(g, p, lr));
        let (mut logits, code) = match cfg.variant {
            Variant::Kbpn => (raw, None),
            Variant::Kcbpn => (None, raw),
            Variant::DbpnBl => (None, None),
        };
        let ops = (cfg.variant == Variant::Kbpn).then(|| down_operators::<T>(big_h, big_w, cfg.scale, cfg.down_mode));
        let injected = opts.inject.as_ref().map(|inj| {
            let sr = g.input(inj.sr.to_tensor::<T>());
            let k = g.input(inj.kernel.to_tensor::<T>());
            (sr, k)
        });

        let mut bank: Vec<Var> = Vec::with_capacity(cfg.stages);
        let mut stages = Vec::with_capacity(cfg.stages);
        let mut kernel = None;
        for st in &self.stages {
            let f_up = st.up.forward(g, p, f_lr);
            let mut trace = StageVars { sr: None, kernel: None, residual: None, features: f_up };
            if let (Some(recon), Some(updater), Some(feedback), Some((rows, cols))) = (&st.recon, &st.updater, &st.feedback, &ops) {
                let mut parts = bank.clone();
                parts.push(f_up);
                let cat = g.concat(&parts);
                let sr_t = recon.forward(g, p, cat);
                let (z, k_t) = updater.update_logits(g, p, sr_t, logits.expect("kbpn has logits"));
                logits = Some(z);
                let (sr_used, k_used) = injected.unwrap_or((sr_t, k_t));
                let blurred = g.blur(sr_used, k_used);
                let down = g.resample(blurred, rows.clone(), cols.clone());
                let r = g.sub(down, lr);
                if opts.feedback {
                    let fb = feedback.forward(g, p, r);
                    trace.features = g.add(f_up, fb);
                }
                trace.sr = Some(sr_t);
                trace.kernel = Some(k_t);
                trace.residual = Some(r);
                kernel = Some(k_t);
            }
            bank.push(trace.features);
            if let Some(down) = &st.down {
                let cat = g.concat(&bank);
                let f = down.forward(g, p, cat);
                f_lr = match (&st.sft, trace.kernel, code) {
                    (Some(sft), Some(k), _) => sft.forward(g, p, f, k),
                    (Some(sft), None, Some(c)) => sft.forward(g, p, f, c),
                    _ => f,
                };
            }
            stages.push(trace);
        }
        let cat = g.concat(&bank);
        let sr = self.recon.forward(g, p, cat);
        GraphOutput { sr, kernel, code, stages }
    }

    /// Inference without gradients.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, lr: &Image, opts: &ForwardOptions) -> Result<ForwardResult> {
        let (c, h, w) = lr.shape();
        self.check_input(h, w, c)?;
        if let Some(inj) = &opts.inject {
            if inj.sr.shape() != (c, h * self.config.scale, w * self.config.scale) {
                return Err(Error::Shape("injected SR image does not match the output size".into()));
            }
        }
        let mut g = Graph::new();
        let x = g.input(lr.to_tensor::<T>());
        let out = self.forward_graph(&mut g, p, x, opts);
        let to_kernel = |v: Var| {
            let data: Vec<f64> = g.value(v).data().iter().map(|x| x.as_f64()).collect();
            BlurKernel::normalized(self.config.kernel_size, data)
        };
        let traces = out
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(StageTrace {
                    t: i + 1,
                    sr: s.sr.map(|v| Image::from_tensor(g.value(v))),
                    kernel: s.kernel.map(to_kernel).transpose()?,
                    residual: s.residual.map(|v| Image::from_tensor(g.value(v))),
                    features: g.value(s.features).cast(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardResult {
            sr: Image::from_tensor(g.value(out.sr)),
            kernel: out.kernel.map(to_kernel).transpose()?,
            code: out.code.map(|v| KernelCode { vector: g.value(v).data().iter().map(|x| x.as_f64()).collect() }),
            traces,
        })
    }
}

/// Exact number of trainable scalars.
pub fn count_parameters(cfg: &NetworkConfig) -> Result<usize> {
    Ok(Network::build(cfg, 0)?.1.numel())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant, stages: usize) -> NetworkConfig {
        NetworkConfig { variant, stages, base_channels: 8, kernel_size: 5, ..NetworkConfig::default() }
    }

    #[test]
    fn counts_grow_with_stages() {
        for v in Variant::ALL {
            let a = count_parameters(&small(v, 2)).unwrap();
            let b = count_parameters(&small(v, 3)).unwrap();
            assert!(a < b, "{v}: {a} >= {b}");
        }
    }

    #[test]
    fn last_stage_has_no_down_projection() {
        let (net, _) = Network::build(&small(Variant::Kbpn, 3), 1).unwrap();
        assert!(net.stages[..2].iter().all(|s| s.down.is_some() && s.sft.is_some()));
        assert!(net.stages[2].down.is_none() && net.stages[2].sft.is_none());
    }

    #[test]
    fn small_inputs_rejected_for_kernel_variants() {
        let (net, p) = Network::build(&small(Variant::Kbpn, 1), 1).unwrap();
        let lr = Image::filled(3, 12, 12, 0.5);
        assert!(net.forward(&p, &lr, &ForwardOptions::default()).is_err());
        let (net, p) = Network::build(&small(Variant::DbpnBl, 1), 1).unwrap();
        assert_eq!(net.forward(&p, &lr, &ForwardOptions::default()).unwrap().sr.shape(), (3, 48, 48));
    }
}
