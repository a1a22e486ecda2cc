//! Trains the desk-scale network on seeded synthetic frames and checks the
//! held-out F-measure. Frame and iteration counts are the first two
//! arguments (defaults 40 and 300; the full desk schedule is 2000).

use mitos_rcnn::data::{synth_generate, SynthConfig};
use mitos_rcnn::detection::NetConfig;
use mitos_rcnn::eval::{centroid_match, metrics, ConfusionCounts, MatchCriterion};
use mitos_rcnn::optim::{train, Phase, TrainConfig, TrainImage, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arg(i: usize, default: usize) -> usize {
    std::env::args().nth(i).and_then(|a| a.parse().ok()).unwrap_or(default)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (n_train, iterations) = (arg(1, 40), arg(2, 300));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut frames = Vec::new();
    for i in 0..n_train + 10 {
        let f = synth_generate(&SynthConfig::default(), &mut rng)?;
        frames.push(TrainImage::new(format!("f{}", i), &f.frame.pixels, f.annotations)?);
    }
    let held_out = frames.split_off(n_train);

    let cfg = TrainConfig {
        phases: vec![
            Phase {
                iterations: iterations * 3 / 4,
                learning_rate: 5e-3,
            },
            Phase {
                iterations: iterations - iterations * 3 / 4,
                learning_rate: 5e-4,
            },
        ],
        ..TrainConfig::desk()
    };
    let mut state = TrainState::fresh(NetConfig::desk(), &cfg)?;
    let out = train(&mut state, &frames, &cfg, &mut std::io::sink(), None)?;
    for chunk in out.history.chunks((iterations / 10).max(1)) {
        let mean = chunk.iter().map(|r| r.total).sum::<f64>() / chunk.len() as f64;
        println!("iterations {:5}..  mean loss {:.4}  lr {:.0e}", chunk[0].iteration, mean, chunk[0].lr);
    }

    let crit = MatchCriterion::new(0.2455)?;
    let mut counts = ConfusionCounts::default();
    for img in &held_out {
        counts = counts + centroid_match(&state.net.detect(&img.pixels())?, &img.annotations, &crit).counts;
    }
    let m = metrics(counts);
    println!("held-out {:?}: precision {:.3} recall {:.3} F1 {:.3}", counts, m.precision, m.recall, m.f1);
    Ok(())
}
