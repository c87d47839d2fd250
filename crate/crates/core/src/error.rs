//! Error taxonomy shared across the pipeline.

/// Errors produced by any pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value or missing required model/option.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed, mismatched, or non-finite input data.
    #[error("data error: {0}")]
    Data(String),

    /// Input that is structurally valid but statistically unusable
    /// (e.g. a single-class dataset).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Training finished without making progress.
    #[error("training error: {0}")]
    Training(String),

    /// Loss became non-finite during optimization.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Operation invoked on a model in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// Model lacks a capability the operation requires.
    #[error("capability error: {0}")]
    Capability(String),

    /// Test-split data leaked into a training-only operation.
    #[error("contamination: {0}")]
    Contamination(String),

    /// Failure wrapped with the pipeline stage it occurred in.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Malformed on-disk artifact (container, manifest, checkpoint).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it aborted.
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
