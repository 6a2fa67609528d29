//! Crate-level error type aggregating the per-module errors.

use thiserror::Error;

/// Any failure the library can report. The CLI maps these onto exit codes:
/// usage problems → 2, data/IO problems → 3, numeric failures → 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Lognormal(#[from] crate::lognormal::LognormalError),
    #[error(transparent)]
    Autograd(#[from] crate::autograd::AutogradError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error(transparent)]
    Frameset(#[from] crate::frameset::FramesetError),
    #[error(transparent)]
    Train(#[from] crate::train::TrainError),
    #[error(transparent)]
    Predict(#[from] crate::predict::PredictError),
    #[error("usage: {0}")]
    Usage(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code per the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Io(_) | Error::Frameset(_) => 3,
            Error::Model(e) => e.exit_code(),
            Error::Train(e) => e.exit_code(),
            Error::Predict(_) => 4,
            Error::Lognormal(_) | Error::Autograd(_) => 4,
            Error::Augment(_) | Error::Synth(_) => 3,
        }
    }
}
