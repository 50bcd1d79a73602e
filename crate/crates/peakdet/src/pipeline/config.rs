//! Training configuration with the default hyperparameters, plus the flat
//! `key = value` config-file format (dotted section keys, unknown keys
//! rejected).

use sha2::{Digest, Sha256};
use std::f64::consts::PI;

use crate::encoder::{make_grid, GridSpec};
use crate::error::{Error, Result};
use crate::losses::{FocalParams, LossWeights};
use crate::net::{BlockSpec, HeadSpec, NeckSpec, NetworkSpec};
use crate::targets::HeatmapKind;

/// Ground-truth paste sampling and geometric augmentation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub enabled: bool,
    pub gt_samples_per_frame: usize,
    /// Per-box yaw perturbation, uniform in +- this bound (radians).
    pub box_rotation_range: f64,
    /// Per-box translation is normal with this standard deviation per axis.
    pub box_translation_std: f64,
    pub flip_probability: f64,
    /// Global yaw, uniform in +- this bound (radians).
    pub global_rotation_range: f64,
    pub global_scale_low: f64,
    pub global_scale_high: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            gt_samples_per_frame: 15,
            box_rotation_range: PI / 20.0,
            box_translation_std: 0.25,
            flip_probability: 0.5,
            global_rotation_range: PI / 4.0,
            global_scale_low: 0.95,
            global_scale_high: 1.05,
        }
    }
}

/// Full pipeline configuration. The defaults are the car-detection
/// values; everything is overridable through the config file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub grid_back: f64,
    pub grid_front: f64,
    pub grid_left: f64,
    pub grid_right: f64,
    pub grid_z_min: f64,
    pub grid_z_max: f64,
    pub pillar_side: f64,

    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
    pub encoder_channels: usize,

    pub blocks: Vec<BlockSpec>,
    pub necks: Vec<NeckSpec>,
    pub head_hidden: usize,
    pub num_classes: usize,

    pub loss_weights: LossWeights,
    pub focal: FocalParams,

    pub lr_max: f64,
    pub div_factor: f64,
    pub momentum_high: f64,
    pub momentum_low: f64,
    pub weight_decay: f64,
    pub beta2: f64,
    pub adam_eps: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,

    pub max_objects: usize,
    pub offset_radius: usize,
    pub heatmap: HeatmapKind,
    pub gaussian_min_overlap: f64,
    pub score_threshold: f64,
    pub pool_kernel: usize,

    pub augment: AugmentSpec,

    /// Camera-FOV crop image dimensions; 0 disables cropping.
    pub fov_crop_width: usize,
    pub fov_crop_height: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            grid_back: 0.0,
            grid_front: 70.4,
            grid_left: -40.0,
            grid_right: 40.0,
            grid_z_min: -3.0,
            grid_z_max: 1.0,
            pillar_side: 0.16,
            max_points_per_pillar: 100,
            max_pillars: 12_000,
            encoder_channels: 64,
            blocks: vec![
                BlockSpec { stride: 1, layers: 7, channels: 32 },
                BlockSpec { stride: 2, layers: 8, channels: 64 },
            ],
            necks: vec![
                NeckSpec { stride: 1, channels: 64 },
                NeckSpec { stride: 2, channels: 64 },
            ],
            head_hidden: 32,
            num_classes: 1,
            loss_weights: LossWeights::default(),
            focal: FocalParams::default(),
            lr_max: 3e-3,
            div_factor: 2.0,
            momentum_high: 0.95,
            momentum_low: 0.85,
            weight_decay: 0.01,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 240,
            batch_size: 2,
            seed: 0,
            max_objects: 50,
            offset_radius: 2,
            heatmap: HeatmapKind::CarShape,
            gaussian_min_overlap: 0.7,
            score_threshold: 0.1,
            pool_kernel: 3,
            augment: AugmentSpec::default(),
            fov_crop_width: 0,
            fov_crop_height: 0,
        }
    }
}

impl TrainConfig {
    /// A small configuration that trains in minutes on a CPU: 16 m x 16 m
    /// range on a 64 x 64 lattice, blocks B(1,2,8) + B(2,2,16).
    pub fn toy() -> Self {
        Self {
            grid_back: 0.0,
            grid_front: 16.0,
            grid_left: -8.0,
            grid_right: 8.0,
            pillar_side: 0.25,
            max_points_per_pillar: 40,
            max_pillars: 4000,
            encoder_channels: 8,
            blocks: vec![
                BlockSpec { stride: 1, layers: 2, channels: 8 },
                BlockSpec { stride: 2, layers: 2, channels: 16 },
            ],
            necks: vec![
                NeckSpec { stride: 1, channels: 8 },
                NeckSpec { stride: 2, channels: 8 },
            ],
            head_hidden: 16,
            epochs: 32,
            augment: AugmentSpec { enabled: false, ..AugmentSpec::default() },
            ..Self::default()
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        make_grid(
            self.grid_back,
            self.grid_front,
            self.grid_left,
            self.grid_right,
            self.grid_z_min,
            self.grid_z_max,
            self.pillar_side,
        )
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            input_channels: self.encoder_channels,
            blocks: self.blocks.clone(),
            necks: self.necks.clone(),
            heads: HeadSpec { hidden: self.head_hidden, num_classes: self.num_classes },
        }
    }

    pub fn fov_crop_dims(&self) -> Option<(usize, usize)> {
        (self.fov_crop_width > 0 && self.fov_crop_height > 0)
            .then_some((self.fov_crop_width, self.fov_crop_height))
    }

    /// Digest over everything a checkpoint must agree on: grid, encoder
    /// width, and network topology.
    pub fn digest(&self) -> [u8; 32] {
        let canon = format!(
            "grid={},{},{},{},{},{},{};encoder={},{},{};net={}",
            self.grid_back,
            self.grid_front,
            self.grid_left,
            self.grid_right,
            self.grid_z_min,
            self.grid_z_max,
            self.pillar_side,
            self.max_points_per_pillar,
            self.max_pillars,
            self.encoder_channels,
            self.network_spec().canonical_string(),
        );
        let mut hasher = Sha256::new();
        hasher.update(canon.as_bytes());
        hasher.finalize().into()
    }

    /// Apply one `key = value` assignment; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("key {key}: {what} ({value:?})"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad("expected a number"))?
            };
        }
        match key {
            "grid.back" => self.grid_back = num!(),
            "grid.front" => self.grid_front = num!(),
            "grid.left" => self.grid_left = num!(),
            "grid.right" => self.grid_right = num!(),
            "grid.z_min" => self.grid_z_min = num!(),
            "grid.z_max" => self.grid_z_max = num!(),
            "grid.pillar_side" => self.pillar_side = num!(),
            "encoder.max_points" => self.max_points_per_pillar = num!(),
            "encoder.max_pillars" => self.max_pillars = num!(),
            "encoder.channels" => self.encoder_channels = num!(),
            "net.blocks" => self.blocks = parse_blocks(value)?,
            "net.necks" => self.necks = parse_necks(value)?,
            "net.head_hidden" => self.head_hidden = num!(),
            "net.num_classes" => self.num_classes = num!(),
            "loss.lambda_off" => self.loss_weights.lambda_off = num!(),
            "loss.lambda_z" => self.loss_weights.lambda_z = num!(),
            "loss.lambda_size" => self.loss_weights.lambda_size = num!(),
            "loss.lambda_ori" => self.loss_weights.lambda_ori = num!(),
            "loss.focal_alpha" => self.focal.alpha = num!(),
            "loss.focal_beta" => self.focal.beta = num!(),
            "loss.focal_eps" => self.focal.eps = num!(),
            "optimizer.lr_max" => self.lr_max = num!(),
            "optimizer.div_factor" => self.div_factor = num!(),
            "optimizer.momentum_high" => self.momentum_high = num!(),
            "optimizer.momentum_low" => self.momentum_low = num!(),
            "optimizer.weight_decay" => self.weight_decay = num!(),
            "optimizer.beta2" => self.beta2 = num!(),
            "optimizer.eps" => self.adam_eps = num!(),
            "train.epochs" => self.epochs = num!(),
            "train.batch_size" => self.batch_size = num!(),
            "train.seed" => self.seed = num!(),
            "codec.max_objects" => self.max_objects = num!(),
            "codec.offset_radius" => self.offset_radius = num!(),
            "codec.heatmap" => {
                self.heatmap = match value {
                    "carshape" => HeatmapKind::CarShape,
                    "gaussian" => HeatmapKind::Gaussian,
                    _ => return Err(bad("expected carshape|gaussian")),
                }
            }
            "codec.gaussian_min_overlap" => self.gaussian_min_overlap = num!(),
            "codec.score_threshold" => self.score_threshold = num!(),
            "codec.pool_kernel" => self.pool_kernel = num!(),
            "augment.enabled" => {
                self.augment.enabled = value.parse().map_err(|_| bad("expected true|false"))?
            }
            "augment.gt_samples" => self.augment.gt_samples_per_frame = num!(),
            "augment.box_rotation" => self.augment.box_rotation_range = num!(),
            "augment.box_translation_std" => self.augment.box_translation_std = num!(),
            "augment.flip_probability" => self.augment.flip_probability = num!(),
            "augment.global_rotation" => self.augment.global_rotation_range = num!(),
            "augment.scale_low" => self.augment.global_scale_low = num!(),
            "augment.scale_high" => self.augment.global_scale_high = num!(),
            "data.fov_crop_width" => self.fov_crop_width = num!(),
            "data.fov_crop_height" => self.fov_crop_height = num!(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parse a whole config file: `key = value` lines, `#` comments.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: lineno + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            config
                .set(key.trim(), value.trim())
                .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        }
        Ok(config)
    }
}

fn parse_blocks(s: &str) -> Result<Vec<BlockSpec>> {
    s.split('+')
        .map(|part| {
            let inner = part
                .trim()
                .strip_prefix("B(")
                .and_then(|p| p.strip_suffix(')'))
                .ok_or_else(|| Error::Config(format!("block {part:?}: expected B(T,E,A)")))?;
            let nums: Vec<usize> = inner
                .split(',')
                .map(|n| n.trim().parse().map_err(|_| Error::Config(format!("block {part:?}"))))
                .collect::<Result<_>>()?;
            if nums.len() != 3 {
                return Err(Error::Config(format!("block {part:?}: expected 3 fields")));
            }
            Ok(BlockSpec { stride: nums[0], layers: nums[1], channels: nums[2] })
        })
        .collect()
}

fn parse_necks(s: &str) -> Result<Vec<NeckSpec>> {
    s.split('+')
        .map(|part| {
            let inner = part
                .trim()
                .strip_prefix("V(")
                .and_then(|p| p.strip_suffix(')'))
                .ok_or_else(|| Error::Config(format!("neck {part:?}: expected V(T,A)")))?;
            let nums: Vec<usize> = inner
                .split(',')
                .map(|n| n.trim().parse().map_err(|_| Error::Config(format!("neck {part:?}"))))
                .collect::<Result<_>>()?;
            if nums.len() != 2 {
                return Err(Error::Config(format!("neck {part:?}: expected 2 fields")));
            }
            Ok(NeckSpec { stride: nums[0], channels: nums[1] })
        })
        .collect()
}
