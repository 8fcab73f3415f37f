//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model or experiment configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor dimensions do not match what an operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),

    /// Bad training data (e.g. label outside the seen label space).
    #[error("data error: {0}")]
    Data(String),

    /// Wire bytes could not be decoded; `offset` is the byte position of the failure.
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    /// A record or file is inconsistent with the model it is used with.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// The federation protocol was violated (duplicate task, empty round, ...).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Client parameter sets could not be aggregated.
    #[error("aggregation error: {0}")]
    Aggregation(String),

    /// Accuracy matrix is incomplete or malformed.
    #[error("metrics error: {0}")]
    Metrics(String),

    /// Plot inputs are inconsistent (e.g. runs with different task counts).
    #[error("plot error: {0}")]
    Plot(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A module error that surfaced while executing the experiment schedule,
    /// annotated with where in the run it happened.
    #[error("run failed at task {task}, round {round}{}: {source}",
            .client.map(|c| format!(", client {c}")).unwrap_or_default())]
    RunFailure {
        task: usize,
        round: usize,
        client: Option<usize>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(self, task: usize, round: usize, client: Option<usize>) -> Error {
        Error::RunFailure {
            task,
            round,
            client,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_failure_names_location() {
        let inner = Error::Shape("bad".into());
        let err = inner.at(3, 7, Some(2));
        let msg = err.to_string();
        assert!(msg.contains("task 3"));
        assert!(msg.contains("round 7"));
        assert!(msg.contains("client 2"));
    }

    #[test]
    fn run_failure_without_client() {
        let err = Error::Protocol("x".into()).at(1, 2, None);
        assert!(!err.to_string().contains("client"));
    }
}
