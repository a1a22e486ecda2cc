use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sgd;
use crate::data::{load_png, rotate_augment, BoxAnnotation, DatasetManifest, ROTATIONS};
use crate::detection::{MitosNet, NetConfig, StepLoss, DEFAULT_INIT_SIGMA};
use crate::error::{MitosError, Result};
use crate::params::ParamId;
use crate::tensor::{Checkpoint, Tape, Tensor};

/// Header of the per-iteration loss log.
pub const LOSS_LOG_HEADER: &str = "iteration,total,cls,reg,lr";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub iterations: usize,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Images per mini-batch.
    pub batch_size: usize,
    /// Run in order; iterations are cumulative across phases.
    pub phases: Vec<Phase>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gaussian initialization outside the backbone on a fresh start.
    pub init_sigma: f64,
    pub seed: u64,
    /// Checkpoint every this many iterations; 0 writes only at phase ends.
    pub checkpoint_interval: usize,
    /// Rotate each training image by a random multiple of 90 degrees.
    pub random_rotation: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            phases: vec![
                Phase {
                    iterations: 60_000,
                    learning_rate: 1e-3,
                },
                Phase {
                    iterations: 20_000,
                    learning_rate: 1e-4,
                },
            ],
            momentum: 0.9,
            weight_decay: 0.0005,
            init_sigma: DEFAULT_INIT_SIGMA,
            seed: 0,
            checkpoint_interval: 0,
            random_rotation: false,
        }
    }
}

impl TrainConfig {
    /// Batch 1, 1,500 iterations at 5e-3 then 500 at 5e-4: minutes on one
    /// CPU core for the desk network.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 1,
            phases: vec![
                Phase {
                    iterations: 1500,
                    learning_rate: 5e-3,
                },
                Phase {
                    iterations: 500,
                    learning_rate: 5e-4,
                },
            ],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(MitosError::invalid("training needs at least one phase"));
        }
        if let Some(p) = self.phases.iter().find(|p| !(p.learning_rate > 0.0) || p.iterations == 0) {
            return Err(MitosError::invalid(format!("bad phase {:?}: rate and iterations must be positive", p)));
        }
        if self.batch_size == 0 {
            return Err(MitosError::invalid("batch size must be positive"));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) || !(self.weight_decay >= 0.0) || !(self.init_sigma > 0.0) {
            return Err(MitosError::invalid("momentum in [0, 1), weight decay ≥ 0 and init sigma > 0 required"));
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.phases.iter().map(|p| p.iterations).sum()
    }

    /// Phase index and learning rate of the 0-based `iteration`.
    pub fn schedule(&self, iteration: usize) -> Option<(usize, f64)> {
        let mut end = 0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.iterations;
            if iteration < end {
                return Some((i, p.learning_rate));
            }
        }
        None
    }
}

/// One line of the loss log; losses are batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    /// 1-based.
    pub iteration: usize,
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub lr: f64,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        format!("{},{:.9e},{:.9e},{:.9e},{:e}", self.iteration, self.total, self.cls, self.reg, self.lr)
    }
}

/// A decoded training image with its annotations, kept as 8-bit samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    pub name: String,
    height: usize,
    width: usize,
    samples: Vec<u8>,
    pub annotations: Vec<BoxAnnotation>,
}

impl TrainImage {
    /// Values are quantized to 8 bits, exactly as a PNG round trip would.
    pub fn new(name: impl Into<String>, pixels: &Tensor, annotations: Vec<BoxAnnotation>) -> Result<Self> {
        let (_, height, width) = pixels.dims3("TrainImage")?;
        let samples = pixels.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Ok(TrainImage {
            name: name.into(),
            height,
            width,
            samples,
            annotations,
        })
    }

    pub fn pixels(&self) -> Tensor {
        let data = self.samples.iter().map(|&v| v as f64 / 255.0).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("stored shape")
    }
}

/// Loads every record's image; all must already be at the network input size.
pub fn load_training_set(manifest: &DatasetManifest, manifest_path: &Path, input_size: usize) -> Result<Vec<TrainImage>> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let path = DatasetManifest::image_path(manifest_path, r);
            let px = load_png(&path)?;
            if px.shape()[1] != input_size || px.shape()[2] != input_size {
                return Err(MitosError::Image {
                    path: path.clone(),
                    msg: format!("expected {}x{} input, run prepare first", input_size, input_size),
                });
            }
            TrainImage::new(r.image.clone(), &px, r.annotations.clone())
        })
        .collect()
}

/// Network, optimizer state and position in the schedule.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub net: MitosNet,
    pub sgd: Sgd,
    /// Completed iterations.
    pub iteration: usize,
}

impl TrainState {
    /// A freshly initialized network drawn from `cfg.seed`.
    pub fn fresh(net_config: NetConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut net = MitosNet::new(net_config, cfg.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        net.initialize(&mut rng, cfg.init_sigma)?;
        let sgd = Sgd::new(net.store(), cfg.momentum, cfg.weight_decay);
        Ok(TrainState { net, sgd, iteration: 0 })
    }

    /// Resumes from a checkpoint written during training.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let net = MitosNet::from_checkpoint(ckpt)?;
        let mut sgd = Sgd::new(net.store(), cfg.momentum, cfg.weight_decay);
        sgd.load_entries(net.store(), &ckpt.params)?;
        let iteration = ckpt
            .meta_value("iteration")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| MitosError::invalid("checkpoint lacks a training iteration"))?;
        Ok(TrainState { net, sgd, iteration })
    }

    /// Parameters, velocities and the metadata needed to resume.
    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let phase = cfg.schedule(self.iteration.saturating_sub(1)).map_or(cfg.phases.len(), |(p, _)| p);
        let meta = vec![
            ("iteration".to_string(), self.iteration.to_string()),
            ("phase".to_string(), phase.to_string()),
            // every random draw is keyed by (seed, iteration, slot)
            ("rng".to_string(), format!("chacha8 seed={} counter={}", cfg.seed, self.iteration)),
        ];
        let mut ckpt = self.net.to_checkpoint(meta);
        ckpt.params.extend(self.sgd.to_entries(self.net.store()));
        ckpt
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Mixes a stream key into the seed so each draw is independent of thread
/// scheduling.
fn keyed_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b);
    rng
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, u64::MAX, epoch));
    order
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{:06}.ckpt", iteration))
}

struct ImageStep {
    loss: StepLoss,
    grads: Vec<Option<Vec<f64>>>,
}

fn image_step(net: &MitosNet, ids: &[ParamId], img: &TrainImage, mut rng: ChaCha8Rng, rotate: bool) -> Result<ImageStep> {
    let mut px = img.pixels();
    let mut anns = img.annotations.clone();
    if rotate {
        let k = rng.random_range(0..=ROTATIONS.len());
        if k > 0 {
            (px, anns) = rotate_augment(&px, &anns, ROTATIONS[k - 1])?;
        }
    }
    let mut tape = Tape::new();
    let bound = net.store().bind(&mut tape);
    let (total, loss, _) = net.forward_train(&mut tape, &bound, &px, &anns, &mut rng, None)?;
    if !loss.total.is_finite() {
        return Ok(ImageStep { loss, grads: Vec::new() });
    }
    let mut g = tape.backward(total)?;
    let grads = ids.iter().map(|&id| g.take(bound.var(id))).collect();
    Ok(ImageStep { loss, grads })
}

/// Runs the schedule from `state.iteration` to its end: per iteration a
/// batch in seeded-shuffle order, the summed three-site loss, backward and
/// one SGD step. Loss lines go to `log`; checkpoints to `checkpoint_dir`.
pub fn train(
    state: &mut TrainState,
    data: &[TrainImage],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(MitosError::invalid("training set is empty"));
    }
    let io_err = |e| MitosError::io(Path::new("<loss log>"), e);
    if state.iteration == 0 {
        writeln!(log, "{}", LOSS_LOG_HEADER).map_err(io_err)?;
    }
    let total = cfg.total_iterations();
    let ids: Vec<ParamId> = state.net.store().ids().collect();
    let n = data.len();
    let b = cfg.batch_size;
    let mut outcome = TrainOutcome {
        history: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.iteration < total {
        let it = state.iteration;
        let (phase, lr) = cfg.schedule(it).expect("iteration within schedule");
        let mut batch = Vec::with_capacity(b);
        for k in 0..b {
            let g = it * b + k;
            let epoch = (g / n) as u64;
            if epoch != order_epoch {
                order = epoch_order(cfg.seed, epoch, n);
                order_epoch = epoch;
            }
            batch.push((&data[order[g % n]], keyed_rng(cfg.seed, it as u64, k as u64)));
        }
        let net = &state.net;
        let steps: Vec<Result<ImageStep>> = batch
            .into_par_iter()
            .map(|(img, rng)| image_step(net, &ids, img, rng, cfg.random_rotation))
            .collect();

        let scale = 1.0 / b as f64;
        let mut rec = LossRecord {
            iteration: it + 1,
            total: 0.0,
            cls: 0.0,
            reg: 0.0,
            lr,
        };
        let store = state.net.store_mut();
        store.clear_grads();
        for &id in &ids {
            let z = vec![0.0; store.get(id).numel()];
            store.get_mut(id).set_grad(z)?;
        }
        for step in steps {
            let step = step?;
            if !step.loss.total.is_finite() {
                return Err(MitosError::NonFiniteLoss { iteration: it + 1 });
            }
            rec.total += scale * step.loss.total;
            rec.cls += scale * step.loss.cls();
            rec.reg += scale * step.loss.reg();
            for (&id, g) in ids.iter().zip(&step.grads) {
                if let Some(g) = g {
                    let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
                    store.get_mut(id).accumulate_grad(&scaled)?;
                }
            }
        }
        state.sgd.step(store, lr)?;
        state.iteration += 1;
        writeln!(log, "{}", rec.to_line()).map_err(io_err)?;
        log::debug!("iteration {} loss {:.5} lr {}", rec.iteration, rec.total, lr);
        outcome.history.push(rec);

        let phase_end = cfg.schedule(state.iteration).is_none_or(|(p, _)| p != phase);
        let periodic = cfg.checkpoint_interval > 0 && state.iteration % cfg.checkpoint_interval == 0;
        if let Some(dir) = checkpoint_dir {
            if phase_end || periodic {
                let path = checkpoint_path(dir, state.iteration);
                state.to_checkpoint(cfg).save(&path)?;
                outcome.checkpoints.push(path);
            }
        }
    }
    log.flush().map_err(io_err)?;
    Ok(outcome)
}
