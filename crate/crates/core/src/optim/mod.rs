//! Weight initialization, momentum SGD and the training loop.

mod sgd;
mod train;

pub use sgd::Sgd;
pub use train::{
    checkpoint_path, load_training_set, train, LossRecord, Phase, TrainConfig, TrainImage, TrainOutcome, TrainState, LOSS_LOG_HEADER,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MitosError, Result};
use crate::params::{ParamId, ParamKind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// `N(0, 2/fan_in)`.
    He,
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
}

impl InitScheme {
    pub fn apply<R: Rng + ?Sized>(self, store: &mut ParamStore, ids: impl IntoIterator<Item = ParamId>, rng: &mut R) -> Result<()> {
        match self {
            InitScheme::He => he_init(store, ids, rng),
            InitScheme::Gaussian(sigma) => init_weights(store, ids, sigma, rng),
        }
    }
}

/// Draws every weight in `ids` from `N(0, sigma²)`; biases become 0 and
/// scales their constant.
pub fn init_weights<R: Rng + ?Sized>(
    store: &mut ParamStore,
    ids: impl IntoIterator<Item = ParamId>,
    sigma: f64,
    rng: &mut R,
) -> Result<()> {
    if !(sigma > 0.0) {
        return Err(MitosError::invalid(format!("init sigma must be positive, got {}", sigma)));
    }
    init_with(store, ids, rng, |_| sigma)
}

/// Fan-in scaled Gaussian, `N(0, 2 / fan_in)`, for layers followed by ReLU.
pub fn he_init<R: Rng + ?Sized>(store: &mut ParamStore, ids: impl IntoIterator<Item = ParamId>, rng: &mut R) -> Result<()> {
    init_with(store, ids, rng, |fan_in| (2.0 / fan_in.max(1) as f64).sqrt())
}

fn init_with<R: Rng + ?Sized>(
    store: &mut ParamStore,
    ids: impl IntoIterator<Item = ParamId>,
    rng: &mut R,
    sigma_for: impl Fn(usize) -> f64,
) -> Result<()> {
    for id in ids {
        match store.kind(id) {
            ParamKind::Weight { fan_in } => {
                let normal = Normal::new(0.0, sigma_for(fan_in)).map_err(|e| MitosError::invalid(e.to_string()))?;
                store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            }
            ParamKind::Bias => store.get_mut(id).data_mut().fill(0.0),
            ParamKind::Scale(c) => store.get_mut(id).data_mut().fill(c),
        }
    }
    Ok(())
}
