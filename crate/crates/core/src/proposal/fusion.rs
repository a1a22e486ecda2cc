use serde::{Deserialize, Serialize};

use crate::error::{MitosError, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Width of the fused `conv_{3+4}` map.
pub const FUSED_CHANNELS: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Output channels of the upsampling deconvolution; `0` keeps `conv_4`'s width.
    pub upsample_channels: usize,
    /// Initial value of the learnable per-channel L2 scales.
    pub scale_init: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            upsample_channels: 0,
            scale_init: 10.0,
        }
    }
}

/// `conv_4` is upsampled 2× by a stride-2 deconvolution, both maps are
/// L2-normalized per position and concatenated, and a 1×1 convolution
/// reduces the result to [`FUSED_CHANNELS`].
#[derive(Clone, Debug)]
pub struct Fusion {
    deconv: ParamId,
    scale3: ParamId,
    scale4: ParamId,
    reduce_w: ParamId,
    reduce_b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    /// Concatenated, normalized maps before the 1×1 reduction.
    pub concat: Var,
    pub fused: Var,
}

impl Fusion {
    pub fn register(store: &mut ParamStore, c3: usize, c4: usize, cfg: &FusionConfig) -> Result<Self> {
        let cup = if cfg.upsample_channels == 0 { c4 } else { cfg.upsample_channels };
        let deconv = store.register("fusion/deconv/weight", &[c4, cup, 2, 2], ParamKind::Weight { fan_in: c4 })?;
        let scale3 = store.register("fusion/l2_conv3/scale", &[c3], ParamKind::Scale(cfg.scale_init))?;
        let scale4 = store.register("fusion/l2_conv4/scale", &[cup], ParamKind::Scale(cfg.scale_init))?;
        let reduce_w = store.register(
            "fusion/reduce/weight",
            &[FUSED_CHANNELS, c3 + cup, 1, 1],
            ParamKind::Weight { fan_in: c3 + cup },
        )?;
        let reduce_b = store.register("fusion/reduce/bias", &[FUSED_CHANNELS], ParamKind::Bias)?;
        Ok(Fusion {
            deconv,
            scale3,
            scale4,
            reduce_w,
            reduce_b,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.deconv, self.scale3, self.scale4, self.reduce_w, self.reduce_b]
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, conv3: Var, conv4: Var) -> Result<FusedFeatures> {
        let up = tape.deconv2d(conv4, p.var(self.deconv), 2)?;
        let s3 = &tape.value(conv3).shape()[1..];
        let su = &tape.value(up).shape()[1..];
        if s3 != su {
            return Err(MitosError::shape(
                "fuse_features",
                format!("upsampled conv_4 spatial {:?}", s3),
                format!("{:?}", su),
            ));
        }
        let n3 = tape.l2_normalize_channels(conv3, p.var(self.scale3))?;
        let n4 = tape.l2_normalize_channels(up, p.var(self.scale4))?;
        let concat = tape.concat_channels(n3, n4)?;
        let fused = tape.conv2d(concat, p.var(self.reduce_w), Some(p.var(self.reduce_b)), 1, 0)?;
        Ok(FusedFeatures { concat, fused })
    }
}

/// Value-level fusion of two feature maps with the parameters in `store`.
pub fn fuse_features(conv3: &Tensor, conv4: &Tensor, fusion: &Fusion, store: &ParamStore) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let c3 = tape.constant(conv3.clone());
    let c4 = tape.constant(conv4.clone());
    let out = fusion.forward(&mut tape, &p, c3, c4)?;
    Ok(tape.value(out.fused).clone())
}
