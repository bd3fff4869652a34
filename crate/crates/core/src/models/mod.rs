//! Trainable models: an MLP classifier, a conditional VAE, their
//! checkpoints, and simple hand-written predictors for testing estimators.

mod checkpoint;
mod classifier;
mod cvae;
mod mlp;
mod oracle;
mod stubs;
mod train;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::{ConceptAxis, DataError};

pub use checkpoint::{load_model, save_model, ModelKind, SavedModel, CHECKPOINT_VERSION};
pub use classifier::{train_classifier, Classifier, ClassifierConfig, ClassifierHistory, EpochStats};
pub use cvae::{
    train_cvae, ConditionalVae, DiscreteLatentConfig, Posterior, VaeConfig, VaeEpochStats, VaeHistory,
    VaeLatent,
};
pub use mlp::{Activation, Mlp};
pub use oracle::{GeneratorOracle, GroundTruthGenerator, Latent};
pub use stubs::{ColorOnlyPredictor, GlyphMatcher, MarkerMaskingPredictor, OrientationPredictor};
pub use train::{TrainingConfig, DEFAULT_CLIP_NORM};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot train on an empty dataset")]
    EmptyDataset,
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("dataset has no {0:?} concept")]
    MissingAxis(ConceptAxis),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Anything that maps flattened images to class probabilities.
pub trait Predictor: Sync {
    fn n_classes(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Row-major batch of `rows` images in, `rows * n_classes` probabilities out.
    fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError>;

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.predict_batch(x, 1)
    }
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn n_classes(&self) -> usize {
        (**self).n_classes()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>, ModelError> {
        (**self).predict_batch(x, rows)
    }
}
