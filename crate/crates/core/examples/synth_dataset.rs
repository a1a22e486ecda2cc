//! Generates a few synthetic high-power fields with mitoses, look-alikes
//! and unannotated clutter, and writes them with a manifest.

use mitos_rcnn::data::{save_png, synth_generate, DatasetManifest, ImageRecord, Provenance, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    std::fs::create_dir_all(out.join("images"))?;
    let cfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut records = Vec::new();
    for i in 0..4 {
        let f = synth_generate(&cfg, &mut rng)?;
        let image = format!("images/frame_{:04}.png", i);
        save_png(&out.join(&image), &f.frame.pixels)?;
        for a in &f.annotations {
            println!("frame {} {:>20} at ({:5.1}, {:5.1}) {:.0}x{:.0}", i, a.class_id.name(), a.centroid.0, a.centroid.1, a.bbox.w, a.bbox.h);
        }
        records.push(ImageRecord {
            image,
            width: cfg.size,
            height: cfg.size,
            resolution_um_per_px: cfg.resolution_um_per_px,
            scanner: cfg.scanner.clone(),
            provenance: Provenance::default(),
            annotations: f.annotations,
        });
    }
    let manifest = DatasetManifest { records };
    manifest.save(&out.join("manifest.csv"))?;
    println!("wrote {} frames to {}", manifest.len(), out.display());
    Ok(())
}
