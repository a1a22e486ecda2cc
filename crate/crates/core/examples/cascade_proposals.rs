//! Anchor layouts of both proposal stages and the cascade that turns RPN₁
//! proposals into extra RPN₂ candidates, run through an untrained network.

use mitos_rcnn::data::{synth_generate, SynthConfig};
use mitos_rcnn::detection::{MitosNet, NetConfig};
use mitos_rcnn::proposal::{generate_anchors, nms, ProposalConfig, Stage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let nine = ProposalConfig::nine_anchor();
    let wide = generate_anchors(37, 37, 8, &nine.rpn1_scales, &nine.rpn1_ratios, Stage::Rpn1)?;
    println!("nine-anchor RPN1 over 37x37: {} anchors", wide.len());

    let net = MitosNet::new(NetConfig::desk(), 1)?;
    println!("desk RPN1 anchors: {}", net.rpn1_anchor_count());
    println!("RPN2 sliding anchors: {} (first {:?})", net.rpn2_sliding_anchors().len(), net.rpn2_sliding_anchors()[0].bbox);

    let frame = synth_generate(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(3))?;
    let props = net.propose(&frame.frame.pixels)?;
    println!("RPN1 kept {} proposals, RPN2 kept {}", props.rpn1.len(), props.rpn2.len());
    for p in props.rpn2.iter().take(5) {
        println!("  {:?} objectness {:.3} from {:?}", p.bbox, p.objectness, p.stage);
    }

    let boxes: Vec<_> = props.rpn2.iter().map(|p| p.bbox).collect();
    let scores: Vec<_> = props.rpn2.iter().map(|p| p.objectness).collect();
    println!("a stricter NMS at 0.1 keeps {}", nms(&boxes, &scores, 0.1)?.len());
    Ok(())
}
