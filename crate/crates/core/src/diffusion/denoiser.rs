use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tape, UNet, UNetConfig, Var};
use crate::patching::CHANNEL_CONTRACT;
use crate::schedule::NoiseSchedule;

/// Anything that maps `(x_t, condition, t)` to a noise estimate of the same
/// shape as `x_t`.
pub trait NoisePredictor {
    /// `noisy` is `N×1×H×W`, `condition` is `N×C×H×W`; returns `N×1×H×W`.
    fn predict(&self, tape: &mut Tape, noisy: Var, condition: Var, timesteps: &[usize], max_t: usize) -> Result<Var>;
}

/// Static description of a conditional diffusion setup.
#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub schedule: NoiseSchedule,
    pub image_shape: Vec<usize>,
    pub condition_channels: usize,
}

impl DiffusionConfig {
    /// Mask plus one coordinate channel per spatial axis.
    pub fn new(schedule: NoiseSchedule, image_shape: Vec<usize>) -> Self {
        let condition_channels = 1 + image_shape.len();
        Self { schedule, image_shape, condition_channels }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub max_groups: usize,
    /// Group normalization statistics depend on the spatial extent, which
    /// differs between training crops and whole-image sampling.
    #[serde(default)]
    pub group_norm: bool,
    pub time_embedding: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { base_width: 32, channel_mults: vec![1, 2, 4], max_groups: 8, group_norm: false, time_embedding: 128 }
    }
}

impl DenoiserConfig {
    /// Network for 2D images: input is `[x_t, mask, coord0, coord1]`.
    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            in_channels: 1 + 3,
            out_channels: 1,
            base_width: self.base_width,
            channel_mults: self.channel_mults.clone(),
            max_groups: self.max_groups,
            group_norm: self.group_norm,
            time_embedding: Some(self.time_embedding),
        }
    }
}

/// U-Net noise predictor `eps_theta(x_t, t, condition)`.
#[derive(Debug, Clone)]
pub struct Denoiser {
    net: UNet,
    config: DenoiserConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let net = UNet::new(config.unet_config())?;
        let params = net.init_params(seed)?;
        Ok(Self { net, config, params })
    }

    /// Rebuild from stored parameters, refusing a foreign channel layout.
    pub fn from_params(config: DenoiserConfig, params: ParamStore, contract: &str) -> Result<Self> {
        if contract != CHANNEL_CONTRACT {
            return Err(Error::ContractMismatch { expected: CHANNEL_CONTRACT.into(), found: contract.into() });
        }
        let net = UNet::new(config.unet_config())?;
        let fresh = net.init_params(0)?;
        for (name, t) in fresh.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::shape(
                        "denoiser",
                        format!("stored parameters do not fit the architecture at {name:?}"),
                    ))
                }
            }
        }
        if fresh.len() != params.len() {
            return Err(Error::shape("denoiser", "stored parameters contain extra entries"));
        }
        Ok(Self { net, config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn contract(&self) -> &'static str {
        CHANNEL_CONTRACT
    }

    pub fn spatial_multiple(&self) -> usize {
        self.net.config().spatial_multiple()
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, tape: &mut Tape, noisy: Var, condition: Var, timesteps: &[usize], max_t: usize) -> Result<Var> {
        let x = tape.concat_channels(noisy, condition)?;
        self.net.forward(tape, &self.params, x, Some((timesteps, max_t)))
    }
}
