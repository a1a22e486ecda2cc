use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{resize_to_input, rotate_augment, stain_normalize, tile_frame, HpfFrame, ImageRecord, Provenance, StainStats, ROTATIONS};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    /// Cut each frame into 4×4 tiles before resizing.
    pub tile: bool,
    /// Add 90°, 180° and 270° copies next to every original.
    pub rotate: bool,
    pub stain: bool,
    /// Image whose color statistics are the stain target; defaults to the
    /// first prepared image.
    pub stain_reference: Option<String>,
}

fn stem(image: &str) -> &str {
    Path::new(image).file_stem().and_then(|s| s.to_str()).unwrap_or(image)
}

/// One source record through tiling, resizing to `size`, stain transfer and
/// rotation. Output images are named `<dir>/<stem>[_tNN]_rDDD.png`.
pub fn prepare_record(
    record: &ImageRecord,
    pixels: &Tensor,
    size: usize,
    cfg: &PrepareConfig,
    stain_target: Option<&StainStats>,
    dir: &str,
) -> Result<Vec<(ImageRecord, Tensor)>> {
    let frame = HpfFrame::new(pixels.clone(), record.resolution_um_per_px, record.scanner.clone())?;
    let pieces: Vec<(Option<usize>, Tensor, Vec<_>)> = if cfg.tile {
        tile_frame(&frame, &record.annotations)?
            .into_iter()
            .map(|t| (Some(t.index), t.pixels, t.annotations))
            .collect()
    } else {
        vec![(None, frame.pixels, record.annotations.clone())]
    };
    let mut out = Vec::new();
    for (tile, px, anns) in pieces {
        let (mut img, anns, (sx, sy)) = resize_to_input(&px, &anns, size)?;
        if let (true, Some(target)) = (cfg.stain, stain_target) {
            img = stain_normalize(&img, target)?;
        }
        let base = match tile {
            Some(t) => format!("{}_t{:02}", stem(&record.image), t),
            None => stem(&record.image).to_string(),
        };
        let angles: &[u32] = if cfg.rotate { &[0, ROTATIONS[0], ROTATIONS[1], ROTATIONS[2]] } else { &[0] };
        for &angle in angles {
            let (rimg, ranns) = if angle == 0 {
                (img.clone(), anns.clone())
            } else {
                rotate_augment(&img, &anns, angle)?
            };
            let rec = ImageRecord {
                image: format!("{}/{}_r{:03}.png", dir, base, angle),
                width: size,
                height: size,
                // a pixel now spans 1/s source pixels
                resolution_um_per_px: record.resolution_um_per_px / (sx * sy).sqrt(),
                scanner: record.scanner.clone(),
                provenance: Provenance {
                    rotation_deg: angle,
                    stain_normalized: cfg.stain && stain_target.is_some(),
                    source_tile: tile,
                    scale_x: sx,
                    scale_y: sy,
                    source: record.image.clone(),
                    notes: record.provenance.notes.clone(),
                },
                annotations: ranns,
            };
            out.push((rec, rimg));
        }
    }
    Ok(out)
}
