//! Student classifiers: a built-in hashed n-gram logistic regression, grid
//! search over its hyper-parameters, and a process contract for external
//! trainers.

mod external;
mod features;
mod grid;
mod model;

pub use external::{external_train, CommandTemplate, ExternalJob, ExternalOutcome, ExternalSample};
pub use features::{featurize, hashed_counts, ngrams, tokenize, FeatureSpec, Featurizer, IdfTable, SparseVec};
pub use grid::{grid_search, CellOutcome, Grid, GridCell, GridResult};
pub use model::{
    loss_and_gradient, predict, train, training_set_hash, ModelArtifact, Provenance, Scorer, TrainConfig,
    ARTIFACT_FORMAT_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid feature spec: {0}")]
    InvalidSpec(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("need both classes: {n} samples, {positives} positive")]
    DegenerateLabels { n: usize, positives: usize },
    #[error("loss became non-finite in epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("grid has no cells")]
    EmptyGrid,
    #[error("every grid cell failed")]
    AllCellsFailed,
    #[error("bad model artifact: {0}")]
    Artifact(String),
    #[error("external trainer exited with {code:?}: {stderr_tail}")]
    NonZeroExit { code: Option<i32>, stderr_tail: String },
    #[error("external trainer omitted {} predictions: {}", .0.len(), .0.join(", "))]
    IncompletePredictions(Vec<String>),
    #[error("bad predictions file line {line}: {reason}")]
    BadPredictions { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
