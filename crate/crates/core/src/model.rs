//! A network layout bound to trained float32 parameters.

use std::path::Path;

use crate::autograd::ParamStore;
use crate::checkpoint::{assign_params, load_params, resolve_checkpoint, CONFIG_FILE, PARAMS_FILE, PCA_FILE};
use crate::degradation::{load_pca, BlurKernel, KernelPca};
use crate::error::{Error, Result};
use crate::eval::{Prediction, SuperResolver};
use crate::imaging::Image;
use crate::networks::{ForwardOptions, ForwardResult, Network, NetworkConfig, Variant};
use crate::training::TrainConfig;

#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub params: ParamStore<f32>,
    /// Decodes kcbpn codes into kernels.
    pub pca: Option<KernelPca>,
    pub options: ForwardOptions,
}

impl Model {
    pub fn new(network: Network, params: ParamStore<f32>, pca: Option<KernelPca>) -> Result<Self> {
        if network.config.variant == Variant::Kcbpn && pca.is_none() {
            return Err(Error::Config("kcbpn models need a kernel PCA".into()));
        }
        Ok(Self { network, params, pca, options: ForwardOptions::default() })
    }

    /// Freshly initialised parameters.
    pub fn init(cfg: &NetworkConfig, seed: u64, pca: Option<KernelPca>) -> Result<Self> {
        let (net, p) = Network::build(cfg, seed)?;
        Self::new(net, p.cast(), pca)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.network.config
    }

    /// Loads a `step-NNNN` directory, or the latest one below `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let dir = resolve_checkpoint(path)?;
        let cfg_path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        let (net, init) = Network::build(&cfg.network, 0)?;
        let mut params = init.cast::<f32>();
        assign_params(&mut params, &load_params::<f32>(dir.join(PARAMS_FILE))?)?;
        let pca_path = dir.join(PCA_FILE);
        let pca = if pca_path.is_file() { Some(load_pca(&pca_path)?) } else { None };
        let mut model = Self::new(net, params, pca)?;
        model.options.feedback = cfg.feedback;
        Ok(model)
    }

    pub fn forward(&self, lr: &Image) -> Result<ForwardResult> {
        self.network.forward(&self.params, lr, &self.options)
    }

    /// The final kernel estimate: `K_T` for kbpn, the decoded code for kcbpn.
    pub fn kernel_estimate(&self, result: &ForwardResult) -> Result<Option<BlurKernel>> {
        match (self.config().variant, &result.code, &self.pca) {
            (Variant::Kbpn, _, _) => Ok(result.kernel.clone()),
            (Variant::Kcbpn, Some(code), Some(pca)) => pca.decode(code).map(Some),
            _ => Ok(None),
        }
    }
}

impl SuperResolver for Model {
    fn scale(&self) -> usize {
        self.config().scale
    }

    fn super_resolve(&self, lr: &Image) -> Result<Prediction> {
        let result = self.forward(lr)?;
        let kernel = self.kernel_estimate(&result)?;
        Ok(Prediction { sr: result.sr, kernel })
    }
}
