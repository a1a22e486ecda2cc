//! ROI pooling, the classification/regression head, the two-term detection
//! loss and the end-to-end network.

mod head;
pub mod io;
mod loss;
mod net;
mod roi;

use std::fmt;
use std::str::FromStr;

use crate::error::{MitosError, Result};
use crate::proposal::BBox;

pub use head::{argmax_class, head_forward, DetectionHead, HeadConfig, HeadOutput};
pub use loss::{multitask_loss, multitask_loss_tape, sample_minibatch, LossBreakdown, DEFAULT_LAMBDA};
pub use net::{DetectConfig, DEFAULT_INIT_SIGMA, MitosNet, NetConfig, StepLoss, StepPlan, StepProposals};
pub use roi::{roi_pool, roi_pool_tape, roi_pool_with_argmax};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassId {
    Background = 0,
    MitoticFigure = 1,
    /// Look-alikes annotated as hard negatives.
    NotMitoticFigure = 2,
}

impl ClassId {
    pub const ALL: [ClassId; NUM_CLASSES] = [ClassId::Background, ClassId::MitoticFigure, ClassId::NotMitoticFigure];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ClassId> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassId::Background => "background",
            ClassId::MitoticFigure => "mitotic_figure",
            ClassId::NotMitoticFigure => "not_mitotic_figure",
        }
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = MitosError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| MitosError::invalid(format!("unknown class {:?}", s)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Never [`ClassId::Background`].
    pub class_id: ClassId,
    pub score: f64,
}

impl Detection {
    pub fn centroid(&self) -> (f64, f64) {
        self.bbox.center()
    }
}

/// Runs [`MitosNet::detect`] on every manifest image (in parallel on the
/// current rayon pool) and returns the results in manifest order. Images
/// must already be at the network input size.
pub fn detect_manifest(
    net: &MitosNet,
    manifest: &crate::data::DatasetManifest,
    manifest_path: &std::path::Path,
) -> Result<Vec<(String, Vec<Detection>)>> {
    use rayon::prelude::*;
    let n = net.input_size();
    manifest
        .records
        .par_iter()
        .map(|r| {
            let path = crate::data::DatasetManifest::image_path(manifest_path, r);
            let img = crate::data::load_png(&path)?;
            if img.shape()[1..] != [n, n] {
                return Err(MitosError::Image {
                    path,
                    msg: format!("expected {}x{} input, run prepare first", n, n),
                });
            }
            Ok((r.image.clone(), net.detect(&img)?))
        })
        .collect()
}
