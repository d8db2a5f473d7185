//! Pre-training config file: a `[model]` table and a `[train]` table with
//! nested `[train.loss]` and `[train.augment]`. Every key is required except
//! the optional augmentation extras (`jitter_sigma`, `dropout`).

use std::fs;
use std::path::Path;

use densecontrast::nn::UNetConfig;
use densecontrast::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: UNetConfig,
    pub train: TrainConfig,
}

impl PretrainConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.model.validate().map_err(|e| e.to_string())?;
        cfg.train.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

pub const PRETRAIN_TEMPLATE: &str = r#"# Pre-training config. All keys are required unless marked optional.

[model]
in_channels = 1           # input features are a constant 1 per voxel
levels = 4                # resolution levels; voxel size doubles per level
channels = [8, 12, 16, 20]
blocks_per_level = 1      # residual blocks per encoder/decoder level
kernel_size = 3
out_dim = 32              # feature dimension per point
bn_epsilon = 1e-5
bn_momentum = 0.1

[train]
max_iters = 500
base_lr = 1.2             # the reference schedule starts at 0.8 with 48-pair batches
lr_power = 0.9            # polynomial decay power of the reference schedule
momentum = 0.9
weight_decay = 1e-4       # reference value
voxel_size = 0.05         # meters; reference value for 5 cm grids
seed = 0                  # overridden by --seed
checkpoint_every = 100    # 0 disables periodic checkpoints
accumulate = 12           # pairs averaged per update (the reference batch is 48)

[train.loss]
variant = "point_info_nce"   # or "hardest_contrastive"
tau = 0.2                 # softmax temperature; no reference value exists
ns = 256                  # matches sampled per step (reference: 4096)
m_p = 0.1                 # positive margin, reference value
m_n = 1.4                 # negative margin, reference value
pos_sample = 1024         # positives for the margin loss, reference value
hardest_neg_sample = 256  # negative pool for the margin loss, reference value
normalize_features = true

[train.augment]
rotation_enabled = true   # uniform axis, angle in [0, 360) degrees, per view
scale_min = 0.8           # reference scale range
scale_max = 1.2
rng_seed = 0
# jitter_sigma = 0.0      # optional; Gaussian jitter in meters
# dropout = 0.0           # optional; per-point removal probability
"#;

pub const SYNTH_TEMPLATE: &str = r#"# Synthetic scene spec.
seed = 0
room = [4.0, 4.0, 2.5]    # omit for a scene without walls, floor and ceiling
box_count = 6
box_extent = [0.3, 0.9]   # side length range, meters
plane_count = 2
plane_extent = [0.6, 1.4]
density = 4000.0          # surface samples per square meter

[cameras]
count = 8
width = 80
height = 60
fx = 60.0
fy = 60.0
orbit_radius = 1.5
arc_degrees = 120.0
eye_height = 1.4
target_height = 0.6
target_jitter = 0.3
"#;

#[cfg(test)]
mod tests {
    use super::*;
    use densecontrast::dataset::SyntheticSceneSpec;

    #[test]
    fn templates_parse() {
        let cfg = PretrainConfig::parse(PRETRAIN_TEMPLATE).unwrap();
        assert_eq!(cfg.train.lr_power, 0.9);
        assert_eq!(cfg.train.loss.ns, 256);
        let spec: SyntheticSceneSpec = toml::from_str(SYNTH_TEMPLATE).unwrap();
        assert_eq!(spec, SyntheticSceneSpec::default());
    }

    #[test]
    fn missing_key_is_named() {
        let text = PRETRAIN_TEMPLATE.replace("max_iters = 500\n", "");
        let err = PretrainConfig::parse(&text).unwrap_err();
        assert!(err.contains("max_iters"), "{err}");
    }
}
