//! The `mitos` command line: argument parsing, layered configuration and
//! exit codes. Each subcommand lives in [`commands`].

pub mod commands;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{PrepareConfig, SynthConfig};
use crate::detection::NetConfig;
use crate::error::{MitosError, Result};
use crate::optim::TrainConfig;

/// File name of the configuration snapshot written next to every output.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Everything a run depends on besides its input files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Source of every random draw; `train.seed` mirrors it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub prepare: PrepareConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            synth: SynthConfig::default(),
            prepare: PrepareConfig::default(),
            net: NetConfig::desk(),
            train: TrainConfig::desk(),
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Defaults, then the optional file, then `key.path=value` overrides.
    pub fn layered(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&Self::default().to_toml()).map_err(cfg_err)?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| MitosError::io(path, e))?;
            let user: toml::Table = toml::from_str(&text).map_err(|e| MitosError::Config(format!("{}: {}", path.display(), e)))?;
            merge(&mut table, user);
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| MitosError::Config(format!("override {:?} is not key=value", o)))?;
            set_path(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let mut cfg: RunConfig = toml::Table::try_into(table).map_err(cfg_err)?;
        cfg.train.seed = cfg.seed;
        cfg.synth.validate()?;
        cfg.net.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| MitosError::io(&path, e))
    }
}

fn cfg_err(e: impl std::fmt::Display) -> MitosError {
    MitosError::Config(e.to_string())
}

fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {}", text))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            // unknown names are caught when the table is deserialized
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = match cur.get_mut(part) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(MitosError::Config(format!("unknown setting {:?}", key))),
        };
    }
    Err(MitosError::Config("empty setting name".into()))
}

#[derive(Debug, Parser)]
#[command(name = "mitos", version, about = "Mitotic figure detection: data, training, detection and evaluation")]
pub struct Cli {
    /// TOML configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work; outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Override one setting, e.g. `--set train.batch_size=2` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic frames and their manifest.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tile, resize, rotate and stain-normalize a dataset.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tile: bool,
        #[arg(long)]
        rotate: bool,
        #[arg(long)]
        stain: bool,
    },
    /// Train on a prepared manifest; writes checkpoints and the loss log.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write detections for every image of a manifest.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections (from a file or a model) or a confusion-counts file.
    Eval {
        #[arg(long, required_unless_present = "counts")]
        manifest: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["model", "counts"])]
        detections: Option<PathBuf>,
        #[arg(long, conflicts_with = "counts")]
        model: Option<PathBuf>,
        /// `tp,fp,fn` or `tp=… fp=… fn=…` lines.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Proliferation grade of a mitotic count per 10 HPF.
    Grade {
        #[arg(allow_negative_numbers = true)]
        count: i64,
    },
    /// Mean detection time per frame.
    Bench {
        /// Checkpoint to time; a freshly initialized network otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
}

/// Maps an error to its process exit code.
pub fn exit_code(e: &MitosError) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_INPUT
    }
}

/// Parses `args`, runs the command and returns the exit code. Messages go
/// to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("MITOS_LOG", "warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = RunConfig::layered(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if cli.workers == 0 {
        return Err(MitosError::invalid("--workers must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build()
        .map_err(|e| MitosError::invalid(e.to_string()))?;
    pool.install(|| commands::dispatch(&cli.command, cfg))
}
