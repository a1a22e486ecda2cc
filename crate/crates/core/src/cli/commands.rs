use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Command, RunConfig};
use crate::data::{
    load_png, prepare_record, save_png, stain_stats, synth_generate, DatasetManifest, ImageRecord, Provenance, StainStats,
};
use crate::detection::io::{load_detections, save_detections};
use crate::detection::{detect_manifest, MitosNet};
use crate::error::{MitosError, Result};
use crate::eval::{evaluate_manifest, metrics, parse_counts, proliferation_grade, write_report};
use crate::optim::{load_training_set, train, TrainState};
use crate::tensor::Checkpoint;

/// Manifest file name inside every output directory.
pub const MANIFEST_FILE: &str = "manifest.csv";
/// Image directory, relative to the manifest.
pub const IMAGE_DIR: &str = "images";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const DETECTIONS_FILE: &str = "detections.csv";
pub const REPORT_FILE: &str = "report.txt";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| MitosError::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| MitosError::io(path, e))
}

pub fn dispatch(command: &Command, mut cfg: RunConfig) -> Result<()> {
    match command {
        Command::Synth { count, out } => cmd_synth(*count, &cfg, out),
        Command::Prepare {
            manifest,
            out,
            tile,
            rotate,
            stain,
        } => {
            cfg.prepare.tile |= tile;
            cfg.prepare.rotate |= rotate;
            cfg.prepare.stain |= stain;
            cmd_prepare(manifest, &cfg, out)
        }
        Command::Train { manifest, out, resume } => cmd_train(manifest, &cfg, out, resume.as_deref()),
        Command::Detect { model, manifest, out } => cmd_detect(model, manifest, &cfg, out),
        Command::Eval {
            manifest,
            detections,
            model,
            counts,
            out,
        } => cmd_eval(
            manifest.as_deref(),
            detections.as_deref(),
            model.as_deref(),
            counts.as_deref(),
            &cfg,
            out.as_deref(),
        ),
        Command::Grade { count } => cmd_grade(*count),
        Command::Bench { model, runs, warmup } => cmd_bench(model.as_deref(), *runs, *warmup, &cfg),
    }
}

/// Marks records whose generator ran out of placement attempts.
pub const BUDGET_NOTE: &str = "placement_budget_exhausted";

/// `count` frames, each drawn from its own stream of `cfg.seed`.
pub fn cmd_synth(count: usize, cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(&out.join(IMAGE_DIR))?;
    let records: Vec<ImageRecord> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let f = synth_generate(&cfg.synth, &mut rng)?;
            let image = format!("{}/frame_{:04}.png", IMAGE_DIR, i);
            save_png(&out.join(&image), &f.frame.pixels)?;
            let mut notes = "synthetic".to_string();
            if f.budget_exhausted {
                notes.push(';');
                notes.push_str(BUDGET_NOTE);
            }
            Ok(ImageRecord {
                image,
                width: f.frame.width(),
                height: f.frame.height(),
                resolution_um_per_px: f.frame.resolution_um_per_px,
                scanner: f.frame.scanner,
                provenance: Provenance {
                    notes,
                    ..Default::default()
                },
                annotations: f.annotations,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest { records };
    manifest.save(&out.join(MANIFEST_FILE))?;
    cfg.write_snapshot(out)?;
    println!("wrote {} frames to {}", count, out.display());
    Ok(())
}

fn load_image_of(manifest_path: &Path, r: &ImageRecord) -> Result<crate::tensor::Tensor> {
    load_png(&DatasetManifest::image_path(manifest_path, r))
}

pub fn cmd_prepare(manifest_path: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let size = cfg.net.backbone.input_size;
    let pc = &cfg.prepare;
    create_dir(&out.join(IMAGE_DIR))?;
    let target: Option<StainStats> = match (pc.stain, &pc.stain_reference, manifest.records.first()) {
        (false, _, _) => None,
        (true, Some(reference), _) => Some(stain_stats(&load_png(Path::new(reference))?)?),
        (true, None, Some(first)) => {
            let no_stain = crate::data::PrepareConfig {
                stain: false,
                rotate: false,
                ..pc.clone()
            };
            let px = load_image_of(manifest_path, first)?;
            let (_, img) = prepare_record(first, &px, size, &no_stain, None, IMAGE_DIR)?.swap_remove(0);
            Some(stain_stats(&img)?)
        }
        (true, None, None) => None,
    };
    let per_record: Vec<Vec<ImageRecord>> = manifest
        .records
        .par_iter()
        .map(|r| {
            let px = load_image_of(manifest_path, r)?;
            let outputs = prepare_record(r, &px, size, pc, target.as_ref(), IMAGE_DIR)?;
            outputs
                .into_iter()
                .map(|(rec, img)| {
                    save_png(&out.join(&rec.image), &img)?;
                    Ok(rec)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let prepared = DatasetManifest {
        records: per_record.into_iter().flatten().collect(),
    };
    prepared.validate()?;
    prepared.save(&out.join(MANIFEST_FILE))?;
    cfg.write_snapshot(out)?;
    println!("prepared {} records from {} in {}", prepared.len(), manifest.len(), out.display());
    Ok(())
}

pub fn cmd_train(manifest_path: &Path, cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<()> {
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.is_empty() {
        return Err(MitosError::invalid(format!("{} has no records", manifest_path.display())));
    }
    let data = load_training_set(&manifest, manifest_path, cfg.net.backbone.input_size)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    create_dir(&ckpt_dir)?;
    let mut state = match resume {
        Some(path) => TrainState::from_checkpoint(&Checkpoint::load(path)?, &cfg.train)?,
        None => TrainState::fresh(cfg.net.clone(), &cfg.train)?,
    };
    let log_path = out.join(LOSS_LOG_FILE);
    let file = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        fs::File::create(&log_path)
    }
    .map_err(|e| MitosError::io(&log_path, e))?;
    let mut log = std::io::BufWriter::new(file);
    cfg.write_snapshot(out)?;
    let t0 = Instant::now();
    let outcome = train(&mut state, &data, &cfg.train, &mut log, Some(&ckpt_dir))?;
    state.to_checkpoint(&cfg.train).save(&out.join(MODEL_FILE))?;
    if let Some(last) = outcome.history.last() {
        println!(
            "trained {} iterations in {:.1}s, final loss {:.4}; model at {}",
            last.iteration,
            t0.elapsed().as_secs_f64(),
            last.total,
            out.join(MODEL_FILE).display()
        );
    }
    Ok(())
}

/// Loads a checkpoint and applies the run's detection thresholds.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<MitosNet> {
    let mut net = MitosNet::load(path)?;
    net.set_detect_config(cfg.net.detect.clone());
    Ok(net)
}

pub fn cmd_detect(model: &Path, manifest_path: &Path, cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = load_model(model, cfg)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    let dets = detect_manifest(&net, &manifest, manifest_path)?;
    create_dir(out)?;
    save_detections(&out.join(DETECTIONS_FILE), &dets)?;
    cfg.write_snapshot(out)?;
    let n: usize = dets.iter().map(|(_, d)| d.len()).sum();
    println!("{} detections on {} images written to {}", n, dets.len(), out.join(DETECTIONS_FILE).display());
    Ok(())
}

pub fn cmd_eval(
    manifest_path: Option<&Path>,
    detections: Option<&Path>,
    model: Option<&Path>,
    counts: Option<&Path>,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<()> {
    let report = match (counts, manifest_path) {
        (Some(c), _) => {
            let text = fs::read_to_string(c).map_err(|e| MitosError::io(c, e))?;
            metrics(parse_counts(&text)?)
        }
        (None, Some(mp)) => {
            let manifest = DatasetManifest::load(mp)?;
            let dets = match (detections, model) {
                (Some(d), _) => load_detections(d)?,
                (None, Some(m)) => detect_manifest(&load_model(m, cfg)?, &manifest, mp)?.into_iter().collect(),
                (None, None) => return Err(MitosError::invalid("eval needs --detections, --model or --counts")),
            };
            evaluate_manifest(&dets, &manifest)?
        }
        (None, None) => return Err(MitosError::invalid("eval needs --manifest or --counts")),
    };
    let text = write_report(&report);
    print!("{}", text);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_file(&dir.join(REPORT_FILE), text.as_bytes())?;
        cfg.write_snapshot(dir)?;
    }
    Ok(())
}

pub fn cmd_grade(count: i64) -> Result<()> {
    println!("{}", proliferation_grade(count)?);
    Ok(())
}

pub fn cmd_bench(model: Option<&Path>, runs: usize, warmup: usize, cfg: &RunConfig) -> Result<()> {
    if runs == 0 {
        return Err(MitosError::invalid("--runs must be at least 1"));
    }
    let net = match model {
        Some(m) => load_model(m, cfg)?,
        None => MitosNet::new(cfg.net.clone(), cfg.seed)?,
    };
    let mut synth = cfg.synth.clone();
    synth.size = net.input_size();
    let frame = synth_generate(&synth, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?.frame.pixels;
    for _ in 0..warmup {
        net.detect(&frame)?;
    }
    let t0 = Instant::now();
    for _ in 0..runs {
        net.detect(&frame)?;
    }
    let mean = t0.elapsed().as_secs_f64() / runs as f64;
    println!("runs={}", runs);
    println!("mean_seconds_per_hpf={:.4}", mean);
    Ok(())
}

/// Path of the final model written by `train` into `out`.
pub fn model_path(out: &Path) -> PathBuf {
    out.join(MODEL_FILE)
}
