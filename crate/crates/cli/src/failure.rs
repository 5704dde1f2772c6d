//! Exit-code classification: 1 for mathematical or optimizer failures,
//! 2 for usage and configuration errors.

use std::fmt;

use uldp_core::Error;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Math(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Math(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Math(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config(_) | Error::InvalidParameter(_) => Failure::Usage(e.to_string()),
            Error::OptimizerFailure { telemetry, .. } => Failure::Math(format!(
                "{e}\ntelemetry: {}",
                serde_json::to_string(telemetry).unwrap_or_default()
            )),
            Error::Evaluation { .. } | Error::BlowUp { .. } => Failure::Math(e.to_string()),
        }
    }
}
