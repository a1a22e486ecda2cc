//! Truncated VGG-style feature extractor.
//!
//! Four stages of 3×3/pad-1 convolutions with ReLU; a 2×2/stride-2 max pool
//! separates consecutive stages. The outputs of stage 3 (`conv_3`, stride 4)
//! and stage 4 (`conv_4`, stride 8) are the only features produced: there is
//! no fifth stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MitosError, Result};
use crate::optim::InitScheme;
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Var};

/// Smallest object side (px) each feature level can resolve in a standard
/// detector. `conv_5` is listed only to document why it is left out.
pub const MIN_DETECTABLE_SIZE_PX: [(&str, f64); 3] = [("conv_3", 15.0), ("conv_4", 22.0), ("conv_5", 44.0)];

pub const NUM_STAGES: usize = 4;
pub const CONV3_STRIDE: usize = 4;
pub const CONV4_STRIDE: usize = 8;

/// Channel widths of VGG-16 `conv1`..`conv4`.
pub const VGG16_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const VGG16_CONVS: [usize; 4] = [2, 2, 3, 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    pub input_size: usize,
    pub init: InitScheme,
}

impl Default for BackboneConfig {
    /// Desk scale: one eighth of the VGG-16 widths.
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![8, 16, 32, 64],
            convs_per_stage: VGG16_CONVS.to_vec(),
            input_size: 299,
            init: InitScheme::He,
        }
    }
}

impl BackboneConfig {
    pub fn vgg16() -> Self {
        BackboneConfig {
            stage_channels: VGG16_CHANNELS.to_vec(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES || self.convs_per_stage.len() != NUM_STAGES {
            return Err(MitosError::invalid(format!(
                "backbone needs exactly {} stages (conv_1..conv_4), got {} channel widths and {} conv counts",
                NUM_STAGES,
                self.stage_channels.len(),
                self.convs_per_stage.len()
            )));
        }
        if self.stage_channels.iter().chain(&self.convs_per_stage).any(|&v| v == 0) {
            return Err(MitosError::invalid("backbone widths and conv counts must be positive"));
        }
        if self.input_size < CONV4_STRIDE * 2 {
            return Err(MitosError::invalid(format!("input size {} too small", self.input_size)));
        }
        Ok(())
    }

    /// Spatial size of the `conv_3` map (floor division by 4).
    pub fn conv3_size(&self) -> usize {
        self.input_size / 2 / 2
    }

    /// Spatial size of the `conv_4` map (floor division by 8).
    pub fn conv4_size(&self) -> usize {
        self.conv3_size() / 2
    }

    pub fn conv3_channels(&self) -> usize {
        self.stage_channels[2]
    }

    pub fn conv4_channels(&self) -> usize {
        self.stage_channels[3]
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Vec<ConvLayer>>,
}

/// `conv_3` and `conv_4` feature maps on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub conv3: Var,
    pub conv4: Var,
}

/// Builds a backbone with its own parameter store, initialized from `rng_seed`.
pub fn build_backbone(config: BackboneConfig, rng_seed: u64) -> Result<(Backbone, ParamStore)> {
    let mut store = ParamStore::new();
    let backbone = Backbone::register(config, &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    backbone.initialize(&mut store, &mut rng)?;
    Ok((backbone, store))
}

impl Backbone {
    /// Registers parameters as `backbone/stage{i}/conv{j}/{weight|bias}` (1-based).
    pub fn register(config: BackboneConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut cin = 3;
        for (s, (&cout, &n)) in config.stage_channels.iter().zip(&config.convs_per_stage).enumerate() {
            let mut layers = Vec::with_capacity(n);
            for j in 0..n {
                let prefix = format!("backbone/stage{}/conv{}", s + 1, j + 1);
                let weight = store.register(
                    format!("{}/weight", prefix),
                    &[cout, cin, 3, 3],
                    ParamKind::Weight { fan_in: cin * 9 },
                )?;
                let bias = store.register(format!("{}/bias", prefix), &[cout], ParamKind::Bias)?;
                layers.push(ConvLayer { weight, bias });
                cin = cout;
            }
            stages.push(layers);
        }
        Ok(Backbone { config, stages })
    }

    pub fn initialize(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.config.init.apply(store, self.param_ids(), rng)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.stages.iter().flatten().flat_map(|l| [l.weight, l.bias]).collect()
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Features> {
        let n = self.config.input_size;
        if tape.value(image).shape() != [3, n, n] {
            return Err(MitosError::shape(
                "backbone_forward",
                format!("[3, {}, {}]", n, n),
                format!("{:?}", tape.value(image).shape()),
            ));
        }
        let mut x = image;
        let mut conv3 = None;
        for (s, layers) in self.stages.iter().enumerate() {
            if s > 0 {
                x = tape.maxpool2d(x, 2, 2)?;
            }
            for l in layers {
                x = tape.conv2d(x, params.var(l.weight), Some(params.var(l.bias)), 1, 1)?;
                x = tape.relu(x);
            }
            if s == 2 {
                conv3 = Some(x);
            }
        }
        Ok(Features {
            conv3: conv3.expect("four stages"),
            conv4: x,
        })
    }
}
