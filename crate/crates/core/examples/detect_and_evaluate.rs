//! Detection output contract and centroid-distance scoring. The network's
//! classifier bias is set so every proposal reads as a mitosis, which shows
//! thresholding, per-class NMS and matching without a trained model.

use mitos_rcnn::data::{synth_generate, SynthConfig};
use mitos_rcnn::detection::{DetectConfig, MitosNet, NetConfig};
use mitos_rcnn::eval::{centroid_match, metrics, MatchCriterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut net = MitosNet::new(NetConfig::desk(), 4)?;
    let bias = net.store().id("head/cls/bias").expect("classifier bias");
    net.store_mut().get_mut(bias).data_mut().copy_from_slice(&[0.0, 4.0, 0.0]);
    net.set_detect_config(DetectConfig {
        max_detections: 10,
        ..Default::default()
    });

    let frame = synth_generate(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(5))?;
    let dets = net.detect(&frame.frame.pixels)?;
    for d in &dets {
        println!("{:>15} {:.3} at {:?}", d.class_id.name(), d.score, d.centroid());
    }
    let crit = MatchCriterion::new(frame.frame.resolution_um_per_px)?;
    let r = centroid_match(&dets, &frame.annotations, &crit);
    println!("radius {:.2} px, {:?}", crit.radius_px(), r.counts);
    for p in &r.pairings {
        println!("  detection {} matched gt {} at {:.1} px", p.detection, p.gt, p.distance_px);
    }
    println!("F1 {:.3}", metrics(r.counts).f1);
    Ok(())
}
