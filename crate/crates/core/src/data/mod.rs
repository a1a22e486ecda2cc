//! Frames, annotations, the dataset manifest, preprocessing (tiling,
//! resizing, rotation, stain normalization) and a synthetic frame generator.

mod image;
mod manifest;
mod pipeline;
mod preprocess;
mod stain;
mod synth;

use crate::detection::ClassId;
use crate::error::{MitosError, Result};
use crate::proposal::BBox;
use crate::tensor::Tensor;

pub use image::{load_png, save_png, tensor_to_rgb8};
pub use manifest::{DatasetManifest, ImageRecord, Provenance, MANIFEST_VERSION};
pub use pipeline::{prepare_record, PrepareConfig};
pub use preprocess::{resize_to_input, rotate_augment, tile_bounds, tile_frame, Tile, ROTATIONS, TILE_GRID};
pub use stain::{stain_normalize, stain_stats, StainStats};
pub use synth::{synth_generate, SynthConfig, SynthFrame};

/// Square input side of the detector.
pub const INPUT_SIZE: usize = 299;

/// Scanner resolutions at 40× (µm per pixel).
pub const APERIO_UM_PER_PX: f64 = 0.2455;
pub const HAMAMATSU_UM_PER_PX: f64 = 0.2273;

/// A high power field: RGB pixels in `[0, 1]` plus acquisition metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct HpfFrame {
    pub pixels: Tensor,
    pub resolution_um_per_px: f64,
    pub scanner: String,
}

impl HpfFrame {
    pub fn new(pixels: Tensor, resolution_um_per_px: f64, scanner: impl Into<String>) -> Result<Self> {
        let (c, h, w) = pixels.dims3("HpfFrame")?;
        if c != 3 || h == 0 || w == 0 {
            return Err(MitosError::shape("HpfFrame", "[3, H>0, W>0]", format!("{:?}", pixels.shape())));
        }
        if !(resolution_um_per_px > 0.0) {
            return Err(MitosError::invalid(format!("resolution {} must be positive", resolution_um_per_px)));
        }
        Ok(HpfFrame {
            pixels,
            resolution_um_per_px,
            scanner: scanner.into(),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxAnnotation {
    pub bbox: BBox,
    /// Never [`ClassId::Background`].
    pub class_id: ClassId,
    pub centroid: (f64, f64),
}

impl BoxAnnotation {
    pub fn new(bbox: BBox, class_id: ClassId, centroid: (f64, f64)) -> Result<Self> {
        if class_id == ClassId::Background {
            return Err(MitosError::invalid("annotations cannot carry the background class"));
        }
        if !bbox.contains_point(centroid.0, centroid.1) {
            return Err(MitosError::invalid(format!(
                "centroid ({}, {}) outside box ({}, {}, {}, {})",
                centroid.0, centroid.1, bbox.x, bbox.y, bbox.w, bbox.h
            )));
        }
        Ok(BoxAnnotation { bbox, class_id, centroid })
    }

    /// Annotation whose centroid is the box center.
    pub fn centered(bbox: BBox, class_id: ClassId) -> Result<Self> {
        Self::new(bbox, class_id, bbox.center())
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.bbox.x >= 0.0 && self.bbox.y >= 0.0 && self.bbox.right() <= width && self.bbox.bottom() <= height
    }
}
