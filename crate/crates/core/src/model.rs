use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, FeaturePyramid};
use crate::conditions::{ConditionConfig, ConditionNet, ConditionSet};
use crate::denoiser::{DenoiseOutput, Denoiser, DenoiserConfig};
use crate::error::Result;
use crate::nn::ParamStore;

/// Parameter-name prefixes of the three subnetworks.
pub const BACKBONE: &str = "backbone";
pub const CONDITIONS: &str = "conditions";
pub const DENOISER: &str = "denoiser";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub conditions: ConditionConfig,
    pub denoiser: DenoiserConfig,
}

impl ModelConfig {
    /// Narrow widths and one block per stage, for gradient checks and quick experiments.
    pub fn compact() -> Self {
        Self {
            backbone: BackboneConfig {
                channels: [8, 8, 16, 16],
                blocks_per_stage: 1,
                heads: [1, 1, 2, 2],
                sr_ratios: [4, 2, 1, 1],
                mlp_ratio: 2,
                time_token: true,
            },
            conditions: ConditionConfig {
                c_cond: 8,
                dmfe: true,
                dmfe_mid: 4,
                groups: 2,
                dmfe_shortcut: true,
            },
            denoiser: DenoiserConfig {
                channels: [8, 8, 16, 16],
                stem: 4,
                groups: 2,
                time_dim: 16,
                fusion: "concat".into(),
                image_input: false,
            },
        }
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub conditions: ConditionSet,
    pub denoised: DenoiseOutput,
}

/// Backbone, condition network and denoiser sharing one parameter store.
#[derive(Clone)]
pub struct LocalizationModel {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    conditions: ConditionNet,
    denoiser: Denoiser,
}

impl LocalizationModel {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device);
        let root = store.root();
        let backbone = Backbone::new(&root.pp(BACKBONE), 4, &cfg.backbone)?;
        let conditions =
            ConditionNet::new(&root.pp(CONDITIONS), cfg.backbone.channels, &cfg.conditions)?;
        let denoiser = Denoiser::new(&root.pp(DENOISER), cfg.conditions.c_cond, &cfg.denoiser)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            conditions,
            denoiser,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn conditions(&self) -> &ConditionNet {
        &self.conditions
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// `image`: `b x 3 x h x w` in `[0, 1]`; `x_t`: `b x 1 x h x w`; one timestep per example.
    pub fn forward(
        &self,
        image: &Tensor,
        x_t: &Tensor,
        ts: &[usize],
        t_train: usize,
    ) -> Result<ForwardOutput> {
        let pyramid = self.backbone.forward(image, x_t, ts)?;
        let conditions = self.conditions.forward(&pyramid)?;
        let denoised = self
            .denoiser
            .forward(x_t, Some(image), &conditions, ts, t_train)?;
        Ok(ForwardOutput {
            pyramid,
            conditions,
            denoised,
        })
    }
}
