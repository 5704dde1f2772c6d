use thiserror::Error;

use crate::action::Telemetry;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {what} at t={t}, x={x:?}")]
    Evaluation {
        what: &'static str,
        t: f64,
        x: Vec<f64>,
    },

    #[error("trajectory blew up at step {step} (t={t})")]
    BlowUp { step: usize, t: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("optimizer failure: {message}")]
    OptimizerFailure {
        message: String,
        telemetry: Box<Telemetry>,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
