//! Tiles a large frame, resizes each tile to the network input, transfers
//! stain statistics from a reference and adds the three rotated copies.
//! Pass an output directory to save the prepared PNGs.

use mitos_rcnn::data::{
    prepare_record, save_png, stain_stats, synth_generate, tile_bounds, ImageRecord, PrepareConfig, Provenance, SynthConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let big = SynthConfig {
        size: 600,
        mitoses: [6, 10],
        ..Default::default()
    };
    let frame = synth_generate(&big, &mut ChaCha8Rng::seed_from_u64(9))?;
    println!("tile edges along 600 px: {:?}", tile_bounds(600));

    let reference = synth_generate(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(10))?;
    let target = stain_stats(&reference.frame.pixels)?;
    let record = ImageRecord {
        image: "big.png".into(),
        width: 600,
        height: 600,
        resolution_um_per_px: big.resolution_um_per_px,
        scanner: big.scanner.clone(),
        provenance: Provenance::default(),
        annotations: frame.annotations.clone(),
    };
    let cfg = PrepareConfig {
        tile: true,
        rotate: true,
        stain: true,
        stain_reference: None,
    };
    let out = prepare_record(&record, &frame.frame.pixels, 299, &cfg, Some(&target), "prepared")?;
    println!("{} annotated objects became {} prepared images", frame.annotations.len(), out.len());
    for (r, _) in out.iter().step_by(16) {
        println!(
            "  {} rot {:3} scale {:.3} res {:.4} um/px, {} boxes",
            r.image,
            r.provenance.rotation_deg,
            r.provenance.scale_x,
            r.resolution_um_per_px,
            r.annotations.len()
        );
    }
    if let Some(dir) = std::env::args().nth(1) {
        let dir = std::path::Path::new(&dir);
        for (r, px) in &out {
            let path = dir.join(&r.image);
            std::fs::create_dir_all(path.parent().unwrap())?;
            save_png(&path, px)?;
        }
        println!("wrote {} images under {}", out.len(), dir.display());
    }
    Ok(())
}
