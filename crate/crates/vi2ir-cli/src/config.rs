//! TOML run configuration. Parsing is strict: unknown keys anywhere are
//! fatal, so a typo in a hyperparameter name can never silently fall back
//! to a default.

use std::path::PathBuf;

use serde::Deserialize;

use vi2ir::data::{DatasetManifest, Direction, Split, SynthesisRecipe};
use vi2ir::losses::{GanMode, LossWeights};
use vi2ir::model::{DiscriminatorSpec, GeneratorSpec};
use vi2ir::nn::OptimizerKind;
use vi2ir::superres::{SrSpec, SrTrainConfig};
use vi2ir::training::TrainConfig;

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub discriminator: DiscSection,
    pub losses: LossSection,
    pub train: TrainSection,
    pub data: DataSection,
    pub superres: SrSection,
    pub output: OutputSection,
    pub synthesis: SynthSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_channels: usize,
    pub output_channels: usize,
    pub base_width: usize,
    pub g1_downsamples: usize,
    pub g1_res_blocks: usize,
    pub g2_res_blocks: usize,
    pub enhancer_count: usize,
    pub value_range: (f64, f64),
}

impl Default for ModelSection {
    fn default() -> Self {
        let s = GeneratorSpec::default();
        ModelSection {
            input_channels: s.input_channels,
            output_channels: s.output_channels,
            base_width: s.base_width,
            g1_downsamples: s.g1_downsamples,
            g1_res_blocks: s.g1_res_blocks,
            g2_res_blocks: s.g2_res_blocks,
            enhancer_count: s.enhancer_count,
            value_range: s.value_range,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscSection {
    pub n_scales: usize,
    pub conv_layers: usize,
    pub base_width: usize,
}

impl Default for DiscSection {
    fn default() -> Self {
        let s = DiscriminatorSpec::default();
        DiscSection {
            n_scales: s.n_scales,
            conv_layers: s.conv_layers,
            base_width: s.base_width,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_fm: f64,
    pub gan_mode: GanMode,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection {
            lambda_fm: w.lambda_fm,
            gan_mode: w.gan_mode,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_steps: u64,
    pub joint_steps: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    /// [height, width]
    pub train_resolution: (usize, usize),
    pub snapshot_every: u64,
    /// "adam" or "sgd"
    pub optimizer: String,
    pub beta1: f64,
    pub beta2: f64,
    pub hflip: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            stage1_steps: c.stage1_steps,
            joint_steps: c.joint_steps,
            batch_size: c.batch_size,
            lr_g: c.lr_g,
            lr_d: c.lr_d,
            seed: c.seed,
            train_resolution: c.train_resolution,
            snapshot_every: c.snapshot_every,
            optimizer: "adam".to_string(),
            beta1: 0.5,
            beta2: 0.999,
            hflip: c.hflip,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    pub direction: Direction,
    pub split: Split,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("data"),
            direction: Direction::VisibleToInfrared,
            split: Split::Train,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrSection {
    /// Train a super-resolution stage after translation training.
    pub enabled: bool,
    pub res_blocks: usize,
    pub base_width: usize,
    pub train_weight_l1: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub weight_fm: f64,
}

impl Default for SrSection {
    fn default() -> Self {
        let s = SrSpec::default();
        let c = SrTrainConfig::default();
        SrSection {
            enabled: false,
            res_blocks: s.res_blocks,
            base_width: s.base_width,
            train_weight_l1: s.train_weight_l1,
            steps: c.steps,
            batch_size: c.batch_size,
            lr: c.lr,
            seed: c.seed,
            weight_fm: c.weight_fm,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: PathBuf::from("runs/out"),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub hotspot_count: usize,
    pub blur_radius: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            seed: 42,
            height: 32,
            width: 64,
            hotspot_count: 2,
            blur_radius: 0.5,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            input_channels: self.model.input_channels,
            output_channels: self.model.output_channels,
            base_width: self.model.base_width,
            g1_downsamples: self.model.g1_downsamples,
            g1_res_blocks: self.model.g1_res_blocks,
            g2_res_blocks: self.model.g2_res_blocks,
            enhancer_count: self.model.enhancer_count,
            value_range: self.model.value_range,
        }
    }

    /// Discriminator input width is always source + candidate channels.
    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            n_scales: self.discriminator.n_scales,
            conv_layers: self.discriminator.conv_layers,
            base_width: self.discriminator.base_width,
            input_channels: self.model.input_channels + self.model.output_channels,
        }
    }

    pub fn optimizer(&self) -> Result<OptimizerKind, String> {
        match self.train.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::Adam {
                beta1: self.train.beta1,
                beta2: self.train.beta2,
            }),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(format!(
                "train.optimizer: unknown value '{other}' (expected \"adam\" or \"sgd\")"
            )),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        Ok(TrainConfig {
            stage1_steps: self.train.stage1_steps,
            joint_steps: self.train.joint_steps,
            batch_size: self.train.batch_size,
            lr_g: self.train.lr_g,
            lr_d: self.train.lr_d,
            weights: LossWeights {
                lambda_fm: self.losses.lambda_fm,
                gan_mode: self.losses.gan_mode,
            },
            seed: self.train.seed,
            train_resolution: self.train.train_resolution,
            snapshot_every: self.train.snapshot_every,
            optimizer: self.optimizer()?,
            hflip: self.train.hflip,
        })
    }

    pub fn dataset_manifest(&self) -> DatasetManifest {
        DatasetManifest {
            root: self.data.root.clone(),
            direction: self.data.direction,
            split: self.data.split,
        }
    }

    pub fn sr_spec(&self) -> SrSpec {
        SrSpec {
            scale_factor: 2,
            res_blocks: self.superres.res_blocks,
            base_width: self.superres.base_width,
            train_weight_l1: self.superres.train_weight_l1,
        }
    }

    pub fn sr_train_config(&self) -> SrTrainConfig {
        SrTrainConfig {
            steps: self.superres.steps,
            batch_size: self.superres.batch_size,
            lr: self.superres.lr,
            seed: self.superres.seed,
            weight_fm: self.superres.weight_fm,
            optimizer: OptimizerKind::default(),
        }
    }

    pub fn synthesis_recipe(&self) -> SynthesisRecipe {
        SynthesisRecipe {
            seed: self.synthesis.seed,
            height: self.synthesis.height,
            width: self.synthesis.width,
            hotspot_count: self.synthesis.hotspot_count,
            blur_radius: self.synthesis.blur_radius,
        }
    }
}
